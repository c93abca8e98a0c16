//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Graph`] records operations in execution order; [`Graph::backward`]
//! replays them once in reverse. Leaf tensors are borrowed from the caller so
//! binding model parameters into a fresh per-sample graph copies nothing.
//!
//! One backward pass per recording: a second call is an error, not a no-op.

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_data, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in one [`Graph`]. Valid only for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'p> {
    Ref(&'p Tensor),
    Own(Tensor),
}

impl Val<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Ref(t) => t,
            Val::Own(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddRowVec { x: Var, v: Var },
    Modulate { x: Var, scale: Var, shift: Var },
    GatedAdd { x: Var, gate: Var, y: Var },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Silu { x: Var },
    Attention { q: Var, k: Var, v: Var, weights: Vec<f64> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    ConcatRows { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize, len: usize },
    ApplyMask { x: Var, mask: Tensor },
    SumAll { x: Var },
}

struct Node<'p> {
    op: Op,
    value: Val<'p>,
}

/// Recording tape. Single-threaded by design; run independent graphs in
/// parallel over a shared read-only parameter snapshot instead.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const SILU_SLOPE: f64 = 1.702;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Val::Own(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Register a borrowed leaf (parameter or input). Gradient is collectable
    /// after backward.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Val::Ref(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an owned leaf (e.g. a constant built on the fly).
    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// Matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_data(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_raw(vec![m, n], out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "sub: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a, b }, Tensor::from_raw(shape, data)))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "mul: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_raw(shape, data)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        self.push(Op::Scale { x, c }, out)
    }

    /// x[L×d] + v[1×d], v broadcast over rows (bias add).
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if sx.len() != 2 || sv != [1, sx[1]] {
            return Err(Error::dimension(format!(
                "add_rowvec: {sx:?} + {sv:?}"
            )));
        }
        let d = sx[1];
        let vv = self.value(v).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| xi + vv[i % d])
            .collect();
        Ok(self.push(Op::AddRowVec { x, v }, Tensor::from_raw(sx, data)))
    }

    /// x ⊙ (1 + scale) + shift with scale/shift [1×d] broadcast over rows.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = sx[1];
        if self.shape(scale) != [1, d] || self.shape(shift) != [1, d] {
            return Err(Error::dimension(format!(
                "modulate: x {:?}, scale {:?}, shift {:?}",
                sx,
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let j = i % d;
                xi * (1.0 + sc[j]) + sh[j]
            })
            .collect();
        Ok(self.push(Op::Modulate { x, scale, shift }, Tensor::from_raw(sx, data)))
    }

    /// Residual gate: x + gate ⊙ y, gate [1×d]; y may be [L×d] or [1×d]
    /// (broadcast over rows).
    pub fn gated_add(&mut self, x: Var, gate: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y).to_vec();
        let d = sx[1];
        if self.shape(gate) != [1, d] || sy[1] != d || (sy[0] != sx[0] && sy[0] != 1) {
            return Err(Error::dimension(format!(
                "gated_add: x {:?}, gate {:?}, y {:?}",
                sx,
                self.shape(gate),
                sy
            )));
        }
        let g = self.value(gate).data().to_vec();
        let yv = self.value(y).data().to_vec();
        let y_rows = sy[0];
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (r, j) = (i / d, i % d);
                let yr = if y_rows == 1 { 0 } else { r };
                xi + g[j] * yv[yr * d + j]
            })
            .collect();
        Ok(self.push(Op::GatedAdd { x, gate, y }, Tensor::from_raw(sx, data)))
    }

    /// Zero-mean unit-variance over the last axis, variance stabilized with
    /// 1e-5. No learned affine; modulation supplies scale/shift.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dimension(format!("layer_norm: rank-2 only, got {sx:?}")));
        }
        let (l, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; l * d];
        let mut inv_std = vec![0.0; l];
        for r in 0..l {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * is;
            }
        }
        Ok(self.push(Op::LayerNorm { x, inv_std }, Tensor::from_raw(sx, out)))
    }

    /// Smooth sigmoid-weighted linear unit: x · sigmoid(1.702 x).
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(SILU_SLOPE * v));
        self.push(Op::Silu { x }, out)
    }

    /// Scaled dot-product attention over explicit heads.
    ///
    /// q: [h×L_q×d], k,v: [h×L_k×d]; per-head softmax(q·kᵀ/√d)·v.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(Error::dimension("attention: rank-3 [h,L,d] tensors required"));
        }
        if sk != sv {
            return Err(Error::dimension(format!(
                "attention: k shape {sk:?} must equal v shape {sv:?}"
            )));
        }
        if sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dimension(format!(
                "attention: q {sq:?} incompatible with k {sk:?}"
            )));
        }
        let (h, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        let scale = 1.0 / (d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut weights = vec![0.0; h * lq * lk];
        let mut out = vec![0.0; h * lq * d];
        for hi in 0..h {
            let qh = &qd[hi * lq * d..(hi + 1) * lq * d];
            let kh = &kd[hi * lk * d..(hi + 1) * lk * d];
            let vh = &vd[hi * lk * d..(hi + 1) * lk * d];
            let wh = &mut weights[hi * lq * lk..(hi + 1) * lq * lk];
            let oh = &mut out[hi * lq * d..(hi + 1) * lq * d];
            for i in 0..lq {
                let qrow = &qh[i * d..(i + 1) * d];
                let wrow = &mut wh[i * lk..(i + 1) * lk];
                let mut max = f64::NEG_INFINITY;
                for (j, w) in wrow.iter_mut().enumerate() {
                    let krow = &kh[j * d..(j + 1) * d];
                    let mut s = 0.0;
                    for (a, b) in qrow.iter().zip(krow.iter()) {
                        s += a * b;
                    }
                    *w = s * scale;
                    max = max.max(*w);
                }
                let mut z = 0.0;
                for w in wrow.iter_mut() {
                    *w = (*w - max).exp();
                    z += *w;
                }
                for w in wrow.iter_mut() {
                    *w /= z;
                }
                let orow = &mut oh[i * d..(i + 1) * d];
                for (j, &w) in wrow.iter().enumerate() {
                    let vrow = &vh[j * d..(j + 1) * d];
                    for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                        *o += w * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Op::Attention { q, k, v, weights },
            Tensor::from_raw(vec![h, lq, d], out),
        ))
    }

    /// [L×d] → [h×L×d/h], splitting the feature axis into head blocks.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] % heads != 0 {
            return Err(Error::dimension(format!(
                "split_heads: {sx:?} not divisible into {heads} heads"
            )));
        }
        let (l, d) = (sx[0], sx[1]);
        let dh = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; l * d];
        for hi in 0..heads {
            for r in 0..l {
                let src = &xd[r * d + hi * dh..r * d + (hi + 1) * dh];
                let dst = &mut out[hi * l * dh + r * dh..hi * l * dh + (r + 1) * dh];
                dst.copy_from_slice(src);
            }
        }
        Ok(self.push(Op::SplitHeads { x, heads }, Tensor::from_raw(vec![heads, l, dh], out)))
    }

    /// [h×L×dh] → [L×(h·dh)], inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dimension(format!("merge_heads: rank-3 required, got {sx:?}")));
        }
        let (h, l, dh) = (sx[0], sx[1], sx[2]);
        let d = h * dh;
        let xd = self.value(x).data();
        let mut out = vec![0.0; l * d];
        for hi in 0..h {
            for r in 0..l {
                let src = &xd[hi * l * dh + r * dh..hi * l * dh + (r + 1) * dh];
                let dst = &mut out[r * d + hi * dh..r * d + (hi + 1) * dh];
                dst.copy_from_slice(src);
            }
        }
        Ok(self.push(Op::MergeHeads { x }, Tensor::from_raw(vec![l, d], out)))
    }

    /// Stack along the row axis: [La×d] ++ [Lb×d] → [(La+Lb)×d].
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dimension(format!("concat_rows: {sa:?} ++ {sb:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(
            Op::ConcatRows { a, b },
            Tensor::from_raw(vec![sa[0] + sb[0], sa[1]], data),
        ))
    }

    /// Stack along the feature axis: [L×da] ++ [L×db] → [L×(da+db)].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dimension(format!("concat_cols: {sa:?} ++ {sb:?}")));
        }
        let (l, da, db) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(l * (da + db));
        for r in 0..l {
            data.extend_from_slice(&ad[r * da..(r + 1) * da]);
            data.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        Ok(self.push(
            Op::ConcatCols { a, b },
            Tensor::from_raw(vec![l, da + db], data),
        ))
    }

    /// Column slice [L×d] → [L×len] starting at `start`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::index(format!(
                "slice_cols: cols {}..{} of {sx:?}",
                start,
                start + len
            )));
        }
        let (l, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(l * len);
        for r in 0..l {
            data.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::from_raw(vec![l, len], data)))
    }

    /// Elementwise product with a fixed (non-differentiated) mask.
    pub fn apply_mask(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::dimension(format!(
                "apply_mask: {:?} vs mask {:?}",
                self.shape(x),
                mask.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::ApplyMask { x, mask: mask.clone() },
            Tensor::from_raw(shape, data),
        ))
    }

    /// Sum of every entry → scalar [1].
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// x·W + b.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_rowvec(y, b)
    }

    /// Mean of squared entries of (a − b): scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum_all(sq);
        Ok(self.scale(s, 1.0 / n))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. One call per recording.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Validation(
                "backward already ran on this graph; record a new graph per step".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::dimension(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        // Shapes were validated at record time; backward trusts them.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da = matmul_a_bt(g.data(), self.value(b).data(), m, k, n);
                let db = matmul_at_b(self.value(a).data(), g.data(), m, k, n);
                self.acc(a, Tensor::from_raw(vec![m, k], da));
                self.acc(b, Tensor::from_raw(vec![k, n], db));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                self.acc(b, neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                let db = Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let mut dx = g.clone();
                dx.scale_in_place(c);
                self.acc(x, dx);
            }
            Op::AddRowVec { x, v } => {
                let (x, v) = (*x, *v);
                let d = self.shape(v)[1];
                let mut dv = vec![0.0; d];
                for (i, &gi) in g.data().iter().enumerate() {
                    dv[i % d] += gi;
                }
                self.acc(x, g.clone());
                self.acc(v, Tensor::from_raw(vec![1, d], dv));
            }
            Op::Modulate { x, scale, shift } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let d = self.shape(scale)[1];
                let sc = self.value(scale).data().to_vec();
                let xv = self.value(x).data();
                let mut dx = vec![0.0; g.numel()];
                let mut dsc = vec![0.0; d];
                let mut dsh = vec![0.0; d];
                for (i, &gi) in g.data().iter().enumerate() {
                    let j = i % d;
                    dx[i] = gi * (1.0 + sc[j]);
                    dsc[j] += gi * xv[i];
                    dsh[j] += gi;
                }
                self.acc(x, Tensor::from_raw(g.shape().to_vec(), dx));
                self.acc(scale, Tensor::from_raw(vec![1, d], dsc));
                self.acc(shift, Tensor::from_raw(vec![1, d], dsh));
            }
            Op::GatedAdd { x, gate, y } => {
                let (x, gate, y) = (*x, *gate, *y);
                let d = self.shape(gate)[1];
                let y_rows = self.shape(y)[0];
                let gt = self.value(gate).data().to_vec();
                let yv = self.value(y).data().to_vec();
                let mut dgate = vec![0.0; d];
                let mut dy = vec![0.0; y_rows * d];
                for (i, &gi) in g.data().iter().enumerate() {
                    let (r, j) = (i / d, i % d);
                    let yr = if y_rows == 1 { 0 } else { r };
                    dgate[j] += gi * yv[yr * d + j];
                    dy[yr * d + j] += gi * gt[j];
                }
                self.acc(x, g.clone());
                self.acc(gate, Tensor::from_raw(vec![1, d], dgate));
                self.acc(y, Tensor::from_raw(vec![y_rows, d], dy));
            }
            Op::LayerNorm { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let sx = self.shape(x).to_vec();
                let (l, d) = (sx[0], sx[1]);
                let y = self.nodes[idx].value.get().data();
                let mut dx = vec![0.0; l * d];
                for r in 0..l {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mean_g: f64 = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy: f64 =
                        gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.acc(x, Tensor::from_raw(sx, dx));
            }
            Op::Silu { x } => {
                let x = *x;
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| {
                        let s = sigmoid(SILU_SLOPE * xi);
                        gi * (s + xi * SILU_SLOPE * s * (1.0 - s))
                    })
                    .collect();
                let shape = self.shape(x).to_vec();
                self.acc(x, Tensor::from_raw(shape, dx));
            }
            Op::Attention { q, k, v, weights } => {
                let (q, k, v) = (*q, *k, *v);
                let w = weights.clone();
                let sq = self.shape(q).to_vec();
                let sk = self.shape(k).to_vec();
                let (h, lq, d) = (sq[0], sq[1], sq[2]);
                let lk = sk[1];
                let scale = 1.0 / (d as f64).sqrt();
                let kd = self.value(k).data();
                let vd = self.value(v).data();
                let qd = self.value(q).data();
                let mut dq = vec![0.0; h * lq * d];
                let mut dk = vec![0.0; h * lk * d];
                let mut dv = vec![0.0; h * lk * d];
                for hi in 0..h {
                    let wh = &w[hi * lq * lk..(hi + 1) * lq * lk];
                    let gh = &g.data()[hi * lq * d..(hi + 1) * lq * d];
                    let kh = &kd[hi * lk * d..(hi + 1) * lk * d];
                    let vh = &vd[hi * lk * d..(hi + 1) * lk * d];
                    let qh = &qd[hi * lq * d..(hi + 1) * lq * d];
                    let dqh = &mut dq[hi * lq * d..(hi + 1) * lq * d];
                    let dkh = &mut dk[hi * lk * d..(hi + 1) * lk * d];
                    let dvh = &mut dv[hi * lk * d..(hi + 1) * lk * d];
                    // dV = Aᵀ·dO
                    for i in 0..lq {
                        let wrow = &wh[i * lk..(i + 1) * lk];
                        let grow = &gh[i * d..(i + 1) * d];
                        for (j, &wij) in wrow.iter().enumerate() {
                            let dvrow = &mut dvh[j * d..(j + 1) * d];
                            for (o, &gv) in dvrow.iter_mut().zip(grow.iter()) {
                                *o += wij * gv;
                            }
                        }
                    }
                    // dA = dO·Vᵀ, then softmax backward into dS, then dQ/dK
                    for i in 0..lq {
                        let wrow = &wh[i * lk..(i + 1) * lk];
                        let grow = &gh[i * d..(i + 1) * d];
                        let mut da = vec![0.0; lk];
                        for (j, dav) in da.iter_mut().enumerate() {
                            let vrow = &vh[j * d..(j + 1) * d];
                            let mut acc = 0.0;
                            for (&gv, &vv) in grow.iter().zip(vrow.iter()) {
                                acc += gv * vv;
                            }
                            *dav = acc;
                        }
                        let dot: f64 = da.iter().zip(wrow.iter()).map(|(a, b)| a * b).sum();
                        // ds_j = w_j (da_j − Σ w·da), scaled by 1/√d
                        for j in 0..lk {
                            let ds = wrow[j] * (da[j] - dot) * scale;
                            let krow = &kh[j * d..(j + 1) * d];
                            let qrow = &qh[i * d..(i + 1) * d];
                            let dqrow = &mut dqh[i * d..(i + 1) * d];
                            for (o, &kv) in dqrow.iter_mut().zip(krow.iter()) {
                                *o += ds * kv;
                            }
                            let dkrow = &mut dkh[j * d..(j + 1) * d];
                            for (o, &qv) in dkrow.iter_mut().zip(qrow.iter()) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
                self.acc(q, Tensor::from_raw(vec![h, lq, d], dq));
                self.acc(k, Tensor::from_raw(vec![h, lk, d], dk));
                self.acc(v, Tensor::from_raw(vec![h, lk, d], dv));
            }
            Op::SplitHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                let sx = self.shape(x).to_vec();
                let (l, d) = (sx[0], sx[1]);
                let dh = d / heads;
                let mut dx = vec![0.0; l * d];
                let gd = g.data();
                for hi in 0..heads {
                    for r in 0..l {
                        let src = &gd[hi * l * dh + r * dh..hi * l * dh + (r + 1) * dh];
                        let dst = &mut dx[r * d + hi * dh..r * d + (hi + 1) * dh];
                        dst.copy_from_slice(src);
                    }
                }
                self.acc(x, Tensor::from_raw(sx, dx));
            }
            Op::MergeHeads { x } => {
                let x = *x;
                let sx = self.shape(x).to_vec();
                let (h, l, dh) = (sx[0], sx[1], sx[2]);
                let d = h * dh;
                let mut dx = vec![0.0; h * l * dh];
                let gd = g.data();
                for hi in 0..h {
                    for r in 0..l {
                        let src = &gd[r * d + hi * dh..r * d + (hi + 1) * dh];
                        let dst = &mut dx[hi * l * dh + r * dh..hi * l * dh + (r + 1) * dh];
                        dst.copy_from_slice(src);
                    }
                }
                self.acc(x, Tensor::from_raw(sx, dx));
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let (la, d) = (self.shape(a)[0], self.shape(a)[1]);
                let lb = self.shape(b)[0];
                let gd = g.data();
                let da = Tensor::from_raw(vec![la, d], gd[..la * d].to_vec());
                let db = Tensor::from_raw(vec![lb, d], gd[la * d..].to_vec());
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (l, da_w) = (self.shape(a)[0], self.shape(a)[1]);
                let db_w = self.shape(b)[1];
                let d = da_w + db_w;
                let gd = g.data();
                let mut da = Vec::with_capacity(l * da_w);
                let mut db = Vec::with_capacity(l * db_w);
                for r in 0..l {
                    da.extend_from_slice(&gd[r * d..r * d + da_w]);
                    db.extend_from_slice(&gd[r * d + da_w..(r + 1) * d]);
                }
                self.acc(a, Tensor::from_raw(vec![l, da_w], da));
                self.acc(b, Tensor::from_raw(vec![l, db_w], db));
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let sx = self.shape(x).to_vec();
                let (l, d) = (sx[0], sx[1]);
                let mut dx = vec![0.0; l * d];
                let gd = g.data();
                for r in 0..l {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(x, Tensor::from_raw(sx, dx));
            }
            Op::ApplyMask { x, mask } => {
                let x = *x;
                let dx = Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask.data())
                        .map(|(a, m)| a * m)
                        .collect(),
                );
                self.acc(x, dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let shape = self.shape(x).to_vec();
                let gv = g.data()[0];
                self.acc(x, Tensor::full(&shape, gv));
            }
        }
    }

    /// Gradient of the scalar root w.r.t. `v`, if any path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the leaf's shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}
