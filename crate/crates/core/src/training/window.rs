//! Trajectories and fixed-horizon windows.

use crate::error::{Error, Result};
use crate::model::TrajStreams;
use crate::numerics::Tensor;

/// One full episode of decision data.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `[H_ep × dim_s]`
    pub states: Tensor,
    /// `[H_ep × dim_a]`
    pub actions: Tensor,
    /// `[H_ep × 1]`, absent for reward-free datasets.
    pub rewards: Option<Tensor>,
    /// Source/target identifier, carried for bookkeeping.
    pub domain: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim_s(&self) -> usize {
        self.states.cols()
    }

    pub fn dim_a(&self) -> usize {
        self.actions.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.rows() != self.len() {
            return Err(Error::dimension(format!(
                "trajectory: {} states vs {} actions",
                self.len(),
                self.actions.rows()
            )));
        }
        if let Some(r) = &self.rewards {
            if r.shape() != [self.len(), 1] {
                return Err(Error::dimension(format!(
                    "trajectory rewards shape {:?}, expected [{}, 1]",
                    r.shape(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// Sum of rewards over the episode; None for reward-free data.
    pub fn episode_return(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.data().iter().sum())
    }
}

/// The clean first transition of a window, held fixed through noising,
/// training, and editing.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Option<f64>,
}

impl Anchor {
    pub fn from_streams(streams: &TrajStreams) -> Self {
        Self {
            state: streams.states.row(0).to_vec(),
            action: streams.actions.row(0).to_vec(),
            reward: streams.rewards.as_ref().map(|r| r.row(0)[0]),
        }
    }

    /// Overwrite timestep 0 of the streams with this anchor.
    pub fn apply(&self, streams: &mut TrajStreams) {
        let ds = streams.states.cols();
        streams.states.data_mut()[..ds].copy_from_slice(&self.state);
        let da = streams.actions.cols();
        streams.actions.data_mut()[..da].copy_from_slice(&self.action);
        if let (Some(r), Some(anchor_r)) = (&mut streams.rewards, self.reward) {
            r.data_mut()[0] = anchor_r;
        }
    }
}

/// A fixed-horizon slice of one episode: the unit the diffusion model sees.
/// `ret` is the parent episode's return — raw after windowing, mapped into
/// [0, 1] once normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub streams: TrajStreams,
    pub anchor: Anchor,
    pub ret: Option<f64>,
}

impl Window {
    pub fn new(streams: TrajStreams, ret: Option<f64>) -> Self {
        let anchor = Anchor::from_streams(&streams);
        Self { streams, anchor, ret }
    }

    pub fn horizon(&self) -> usize {
        self.streams.states.rows()
    }
}

/// Slice every episode into non-overlapping H-step windows, dropping the
/// trailing remainder. Episodes shorter than H are skipped with a warning.
pub fn window_dataset(trajs: &[Trajectory], horizon: usize) -> Result<Vec<Window>> {
    if horizon < 2 {
        return Err(Error::config("window horizon must be >= 2"));
    }
    let mut out = Vec::new();
    for (i, traj) in trajs.iter().enumerate() {
        traj.validate()?;
        if traj.len() < horizon {
            log::warn!(
                "skipping trajectory {i}: length {} shorter than horizon {horizon}",
                traj.len()
            );
            continue;
        }
        let ret = traj.episode_return();
        let n_windows = traj.len() / horizon;
        for w in 0..n_windows {
            let lo = w * horizon;
            let slice_rows = |t: &Tensor| -> Tensor {
                let cols = t.cols();
                Tensor::from_raw(
                    vec![horizon, cols],
                    t.data()[lo * cols..(lo + horizon) * cols].to_vec(),
                )
            };
            let streams = TrajStreams {
                states: slice_rows(&traj.states),
                actions: slice_rows(&traj.actions),
                rewards: traj.rewards.as_ref().map(slice_rows),
            };
            out.push(Window::new(streams, ret));
        }
    }
    Ok(out)
}
