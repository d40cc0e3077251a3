//! Dense f64 kernel with a recording tape for reverse-mode gradients.
//!
//! The op set is deliberately closed: exactly the primitives the model family
//! needs, each with a hand-derived backward rule. A forward pass records ops
//! onto a [`Tape`]; [`Tape::backward`] replays them in reverse and accumulates
//! gradients for every node, leaves included. Leaves that do not reach the
//! loss keep an exactly-zero gradient.
//!
//! [`grad_check`] verifies any scalar-valued function of a flat parameter
//! vector against central finite differences.

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "from_vec",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Dense { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Dense {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Dense {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dimension("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Dense { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

enum Step {
    AddBroadcast { a: VarId, b: VarId, out: VarId },
    Hadamard { a: VarId, b: VarId, out: VarId },
    MatMul { a: VarId, b: VarId, out: VarId },
    ScaledDotSoftmax { keys: VarId, query: VarId, scale: f64, out: VarId },
    Relu { x: VarId, out: VarId },
    ConcatCols { parts: Vec<VarId>, out: VarId },
    StackRows { parts: Vec<VarId>, out: VarId },
    SumAll { x: VarId, out: VarId },
    SigmoidXent { logit: VarId, label: f64, out: VarId },
}

/// Records a forward pass over the fixed op set and replays it backward.
///
/// One tape per forward/backward pair; tapes are single-threaded. Independent
/// tapes (one per batch element) may run concurrently — merging their leaf
/// gradients into shared parameters is the caller's job.
#[derive(Default)]
pub struct Tape {
    values: Vec<Dense>,
    steps: Vec<Step>,
    grads: Vec<Dense>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an input node. Gradients are computed for every leaf; which
    /// ones are trainable is the caller's bookkeeping.
    pub fn leaf(&mut self, value: Dense) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(value);
        id
    }

    pub fn value(&self, id: VarId) -> &Dense {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: VarId) -> &Dense {
        &self.grads[id.0]
    }

    fn push(&mut self, value: Dense, step: impl FnOnce(VarId) -> Step) -> VarId {
        let out = VarId(self.values.len());
        self.values.push(value);
        self.steps.push(step(out));
        out
    }

    /// `out[i][j] = a[i][j] + b[0][j]`; the single row of `b` is broadcast
    /// over the rows of `a`. Backward sends `grad_out` to `a` unchanged and
    /// column-sums it into `b`.
    pub fn add_broadcast(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || va.cols() != vb.cols() {
            return Err(Error::dimension(
                "add_broadcast",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) + vb.get(0, j);
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, |out| Step::AddBroadcast { a, b, out }))
    }

    /// Element-wise product of two same-shape matrices.
    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "hadamard",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let out = Dense {
            rows: va.rows(),
            cols: va.cols(),
            data,
        };
        Ok(self.push(out, |out| Step::Hadamard { a, b, out }))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dimension(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        let mut out = Dense::zeros(n, m);
        for i in 0..n {
            for l in 0..k {
                let ail = va.get(i, l);
                if ail == 0.0 {
                    continue;
                }
                let brow = vb.row(l);
                let orow = out.row_mut(i);
                for j in 0..m {
                    orow[j] += ail * brow[j];
                }
            }
        }
        Ok(self.push(out, |out| Step::MatMul { a, b, out }))
    }

    /// Attention weights over `keys`: softmax of the scaled dot products
    /// `scale * <query, keys_i>`, computed with max-subtraction.
    pub fn scaled_dot_softmax(&mut self, keys: VarId, query: VarId, scale: f64) -> Result<VarId> {
        let (vk, vq) = (self.value(keys), self.value(query));
        if vk.rows() == 0 {
            return Err(Error::EmptySequence("scaled_dot_softmax"));
        }
        if vq.rows() != 1 || vq.cols() != vk.cols() {
            return Err(Error::dimension(
                "scaled_dot_softmax",
                format!("keys {:?}, query {:?}", vk.shape(), vq.shape()),
            ));
        }
        let h = vk.rows();
        let mut z = vec![0.0; h];
        for i in 0..h {
            z[i] = scale * dot(vq.row(0), vk.row(i));
        }
        let out = Dense::row_vector(softmax(&z));
        Ok(self.push(out, |out| Step::ScaledDotSoftmax { keys, query, scale, out }))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let vx = self.value(x);
        let data = vx.as_slice().iter().map(|v| v.max(0.0)).collect();
        let out = Dense {
            rows: vx.rows(),
            cols: vx.cols(),
            data,
        };
        Ok(self.push(out, |out| Step::Relu { x, out }))
    }

    /// Concatenates single-row matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat_cols", "no parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 {
                return Err(Error::dimension("concat_cols", "parts must be 1xN"));
            }
            data.extend_from_slice(v.as_slice());
        }
        let out = Dense::row_vector(data);
        let parts = parts.to_vec();
        Ok(self.push(out, |out| Step::ConcatCols { parts, out }))
    }

    /// Stacks single-row matrices of equal width into an HxD matrix.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::dimension("stack_rows", "no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 || v.cols() != cols {
                return Err(Error::dimension("stack_rows", "parts must be 1xD with equal D"));
            }
            data.extend_from_slice(v.as_slice());
        }
        let out = Dense {
            rows: parts.len(),
            cols,
            data,
        };
        let parts = parts.to_vec();
        Ok(self.push(out, |out| Step::StackRows { parts, out }))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.value(x).as_slice().iter().sum();
        Ok(self.push(Dense::scalar(s), |out| Step::SumAll { x, out }))
    }

    /// Fused sigmoid cross-entropy against a 0/1 label, in the stable
    /// log-sum-exp form: `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn sigmoid_xent(&mut self, logit: VarId, label: u8) -> Result<VarId> {
        let v = self.value(logit);
        if v.shape() != (1, 1) {
            return Err(Error::dimension("sigmoid_xent", format!("logit {:?}", v.shape())));
        }
        let z = v.item();
        let y = f64::from(label);
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        Ok(self.push(Dense::scalar(loss), |out| Step::SigmoidXent { logit, label: y, out }))
    }

    /// MLP over a single-row input: ReLU after every layer except the last,
    /// which stays linear. Layers are `(weight NxM, bias 1xM)` pairs.
    pub fn mlp_forward(&mut self, x: VarId, layers: &[(VarId, VarId)]) -> Result<VarId> {
        if layers.is_empty() {
            return Err(Error::dimension("mlp_forward", "no layers"));
        }
        let mut cur = x;
        for (idx, &(w, b)) in layers.iter().enumerate() {
            let lin = self.matmul(cur, w)?;
            cur = self.add_broadcast(lin, b)?;
            if idx + 1 < layers.len() {
                cur = self.relu(cur)?;
            }
        }
        Ok(cur)
    }

    /// Replays the recorded steps in reverse, accumulating gradients of the
    /// scalar node `target` with respect to every node.
    pub fn backward(&mut self, target: VarId) -> Result<()> {
        if self.value(target).shape() != (1, 1) {
            return Err(Error::dimension("backward", "target must be 1x1"));
        }
        self.grads = self
            .values
            .iter()
            .map(|v| Dense::zeros(v.rows(), v.cols()))
            .collect();
        self.grads[target.0].set(0, 0, 1.0);

        for step in self.steps.iter().rev() {
            match step {
                Step::AddBroadcast { a, b, out } => {
                    let g = self.grads[out.0].clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = g.get(i, j);
                            *self.grads[a.0].as_mut_slice().get_mut(i * g.cols() + j).unwrap() += v;
                            let gb = self.grads[b.0].get(0, j) + v;
                            self.grads[b.0].set(0, j, gb);
                        }
                    }
                }
                Step::Hadamard { a, b, out } => {
                    let g = self.grads[out.0].clone();
                    let va = self.values[a.0].clone();
                    let vb = self.values[b.0].clone();
                    for (idx, gv) in g.as_slice().iter().enumerate() {
                        self.grads[a.0].as_mut_slice()[idx] += gv * vb.as_slice()[idx];
                        self.grads[b.0].as_mut_slice()[idx] += gv * va.as_slice()[idx];
                    }
                }
                Step::MatMul { a, b, out } => {
                    let g = self.grads[out.0].clone();
                    let va = self.values[a.0].clone();
                    let vb = self.values[b.0].clone();
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    // dA = G B^T, dB = A^T G
                    for i in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g.get(i, j) * vb.get(l, j);
                            }
                            self.grads[a.0].as_mut_slice()[i * k + l] += s;
                        }
                    }
                    for l in 0..k {
                        for j in 0..m {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += va.get(i, l) * g.get(i, j);
                            }
                            self.grads[b.0].as_mut_slice()[l * m + j] += s;
                        }
                    }
                }
                Step::ScaledDotSoftmax { keys, query, scale, out } => {
                    let p = self.values[out.0].clone();
                    let g = self.grads[out.0].clone();
                    let vk = self.values[keys.0].clone();
                    let vq = self.values[query.0].clone();
                    let h = vk.rows();
                    let d = vk.cols();
                    // softmax jacobian: dz_i = p_i * (g_i - sum_j g_j p_j)
                    let inner = dot(g.row(0), p.row(0));
                    for i in 0..h {
                        let dz = p.get(0, i) * (g.get(0, i) - inner) * scale;
                        for j in 0..d {
                            self.grads[query.0].as_mut_slice()[j] += dz * vk.get(i, j);
                            self.grads[keys.0].as_mut_slice()[i * d + j] += dz * vq.get(0, j);
                        }
                    }
                }
                Step::Relu { x, out } => {
                    let g = self.grads[out.0].clone();
                    let vx = self.values[x.0].clone();
                    for (idx, gv) in g.as_slice().iter().enumerate() {
                        if vx.as_slice()[idx] > 0.0 {
                            self.grads[x.0].as_mut_slice()[idx] += gv;
                        }
                    }
                }
                Step::ConcatCols { parts, out } => {
                    let g = self.grads[out.0].clone();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.values[p.0].cols();
                        for j in 0..w {
                            self.grads[p.0].as_mut_slice()[j] += g.get(0, off + j);
                        }
                        off += w;
                    }
                }
                Step::StackRows { parts, out } => {
                    let g = self.grads[out.0].clone();
                    for (i, &p) in parts.iter().enumerate() {
                        let w = g.cols();
                        for j in 0..w {
                            self.grads[p.0].as_mut_slice()[j] += g.get(i, j);
                        }
                    }
                }
                Step::SumAll { x, out } => {
                    let gv = self.grads[out.0].item();
                    for v in self.grads[x.0].as_mut_slice() {
                        *v += gv;
                    }
                }
                Step::SigmoidXent { logit, label, out } => {
                    let gv = self.grads[out.0].item();
                    let z = self.values[logit.0].item();
                    let d = stable_sigmoid(z) - label;
                    let cur = self.grads[logit.0].item() + gv * d;
                    self.grads[logit.0].set(0, 0, cur);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst parameter, if any parameter was checked.
    pub worst_index: Option<usize>,
    pub pass: bool,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` maps a flat parameter vector to `(loss, dloss/dtheta)`; the analytic
/// gradient is taken at `theta`, then every coordinate is perturbed by
/// `±step` to form `(f(t+h) - f(t-h)) / 2h`. The relative error for one
/// coordinate is `|fd - an| / max(|fd|, |an|)`; coordinates where both
/// magnitudes fall below 1e-6 count as exact (central differences carry
/// ~`step^2` truncation noise, which would dominate such comparisons).
pub fn grad_check<F>(theta: &[f64], f: &mut F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 {
        return Err(Error::Numeric("grad_check requires step > 0".into()));
    }
    let (base_loss, analytic) = f(theta)?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "grad_check aborted: forward value {base_loss} is not finite"
        )));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Numeric(format!(
            "grad_check: {} gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut max_rel = 0.0;
    let mut worst = None;
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let (up, _) = f(&work)?;
        work[i] = theta[i] - step;
        let (down, _) = f(&work)?;
        work[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check aborted: non-finite forward at parameter {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let an = analytic[i];
        let denom = fd.abs().max(an.abs());
        let rel = if denom < 1e-6 { 0.0 } else { (fd - an).abs() / denom };
        if rel > max_rel {
            max_rel = rel;
            worst = Some(i);
        }
    }
    Ok(GradCheckReport {
        n_params: theta.len(),
        max_rel_err: max_rel,
        worst_index: worst,
        pass: max_rel < tol,
    })
}
