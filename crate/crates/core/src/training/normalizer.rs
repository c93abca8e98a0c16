//! Per-dimension normalization fitted on target data.
//!
//! Source data is always normalized with the target normalizer: editing has
//! to map source windows into target coordinates.

use super::window::Window;
use crate::error::{Error, Result};
use crate::model::TrajStreams;
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
    /// Episode-return min/max for min-max return normalization.
    pub ret_range: Option<(f64, f64)>,
}

fn column_stats(tensors: &[&Tensor]) -> (Vec<f64>, Vec<f64>) {
    let d = tensors[0].cols();
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for t in tensors {
        for r in 0..t.rows() {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for t in tensors {
        for r in 0..t.rows() {
            for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

impl Normalizer {
    /// Fit on target windows (at least 2).
    pub fn fit(windows: &[Window]) -> Result<Self> {
        if windows.len() < 2 {
            return Err(Error::config(format!(
                "normalizer needs at least 2 windows, got {}",
                windows.len()
            )));
        }
        let states: Vec<&Tensor> = windows.iter().map(|w| &w.streams.states).collect();
        let actions: Vec<&Tensor> = windows.iter().map(|w| &w.streams.actions).collect();
        let (state_mean, state_std) = column_stats(&states);
        let (action_mean, action_std) = column_stats(&actions);

        let rewards: Vec<&Tensor> = windows
            .iter()
            .filter_map(|w| w.streams.rewards.as_ref())
            .collect();
        let (reward_mean, reward_std) = if rewards.len() == windows.len() {
            let (m, s) = column_stats(&rewards);
            (Some(m[0]), Some(s[0]))
        } else if rewards.is_empty() {
            (None, None)
        } else {
            return Err(Error::config("mixed reward-free and rewarded windows"));
        };

        let rets: Vec<f64> = windows.iter().filter_map(|w| w.ret).collect();
        let ret_range = if rets.is_empty() {
            None
        } else {
            let lo = rets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Some((lo, hi))
        };

        Ok(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
            reward_mean,
            reward_std,
            ret_range,
        })
    }

    /// Fit state/action statistics directly from stacked transition matrices
    /// (no rewards, no return range). Used by the behavior-cloning learner.
    pub fn from_matrices(states: &Tensor, actions: &Tensor) -> Self {
        let (state_mean, state_std) = column_stats(&[states]);
        let (action_mean, action_std) = column_stats(&[actions]);
        Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
            reward_mean: None,
            reward_std: None,
            ret_range: None,
        }
    }

    fn z(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
        let d = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % d]) / std[i % d])
            .collect();
        Tensor::from_raw(t.shape().to_vec(), data)
    }

    fn un_z(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
        let d = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * std[i % d] + mean[i % d])
            .collect();
        Tensor::from_raw(t.shape().to_vec(), data)
    }

    pub fn normalize_states(&self, t: &Tensor) -> Tensor {
        Self::z(t, &self.state_mean, &self.state_std)
    }

    pub fn denormalize_states(&self, t: &Tensor) -> Tensor {
        Self::un_z(t, &self.state_mean, &self.state_std)
    }

    pub fn normalize_actions(&self, t: &Tensor) -> Tensor {
        Self::z(t, &self.action_mean, &self.action_std)
    }

    pub fn denormalize_actions(&self, t: &Tensor) -> Tensor {
        Self::un_z(t, &self.action_mean, &self.action_std)
    }

    pub fn normalize_streams(&self, s: &TrajStreams) -> TrajStreams {
        TrajStreams {
            states: self.normalize_states(&s.states),
            actions: self.normalize_actions(&s.actions),
            rewards: s.rewards.as_ref().map(|r| {
                Self::z(
                    r,
                    &[self.reward_mean.unwrap_or(0.0)],
                    &[self.reward_std.unwrap_or(1.0)],
                )
            }),
        }
    }

    pub fn denormalize_streams(&self, s: &TrajStreams) -> TrajStreams {
        TrajStreams {
            states: self.denormalize_states(&s.states),
            actions: self.denormalize_actions(&s.actions),
            rewards: s.rewards.as_ref().map(|r| {
                Self::un_z(
                    r,
                    &[self.reward_mean.unwrap_or(0.0)],
                    &[self.reward_std.unwrap_or(1.0)],
                )
            }),
        }
    }

    /// Min-max map of an episode return into [0, 1], clipped. Source-domain
    /// returns outside the target range clip to the boundary.
    pub fn normalize_return(&self, ret: f64) -> f64 {
        match self.ret_range {
            Some((lo, hi)) if hi > lo => ((ret - lo) / (hi - lo)).clamp(0.0, 1.0),
            Some(_) => 0.0,
            None => 0.0,
        }
    }

    /// Normalized copy of a window (anchor re-derived from the normalized
    /// first row, return mapped into [0, 1]).
    pub fn normalize_window(&self, w: &Window) -> Window {
        let streams = self.normalize_streams(&w.streams);
        Window::new(streams, w.ret.map(|r| self.normalize_return(r)))
    }
}
