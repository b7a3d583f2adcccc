//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! All values are `f64` matrices in row-major order (scalars are `1×1`,
//! biases `1×d`). A [`Tape`] is an append-only arena of nodes; recording an
//! op pushes a node whose inputs precede it, so a single reverse sweep in
//! index order visits every node after all of its consumers.
//!
//! Gradients accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grads`] is called; each pass propagates through private
//! scratch adjoints so repeated passes never double-count. A tape is
//! single-threaded by design — parallel workloads build one tape per worker.
//! Heavy matrix kernels fan rows out over threads internally (feature
//! `parallel`), which is safe because every output row is owned by exactly
//! one worker and summed in a fixed order.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;
use rand::Rng;

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// One recorded value: activation buffer, optional gradient buffer, and the
/// operation that produced it.
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// `a[m×k] · b[k×n]`
    MatMul { a: TensorId, b: TensorId },
    /// elementwise `a + b`, same shape
    Add { a: TensorId, b: TensorId },
    /// row-broadcast `x[m×n] + b[1×n]`
    AddBias { x: TensorId, b: TensorId },
    /// `c · x`
    Scale { x: TensorId, c: f64 },
    Relu { x: TensorId },
    /// rows rescaled to unit L2 norm; `inv_norms` saved for backward
    L2NormRows { x: TensorId, inv_norms: Vec<f64> },
    /// elementwise multiply by a 0 / (1/keep) mask fixed at record time
    Dropout { x: TensorId, mask: Vec<f64> },
    /// rows of `table` gathered per sequence and mean-pooled
    EmbedMean { table: TensorId, seqs: Vec<Vec<u32>> },
    /// flattened square images rearranged into one row per square patch
    PatchRows { x: TensorId, view: usize, patch: usize },
    /// mean over each consecutive group of rows
    MeanPoolRows { x: TensorId, group: usize },
    SumAll { x: TensorId },
    /// fused one-direction contrastive loss; see `contrastive_dir`
    ContrastiveDir {
        z1: TensorId,
        z2: TensorId,
        tau: f64,
        targets: Vec<f64>,
        /// softmax-style weights over same-modality negatives (zero diag)
        w_self: Vec<f64>,
        /// weights over cross-modality candidates (zero diag)
        w_cross: Vec<f64>,
        include_within: bool,
    },
    /// mean binary cross-entropy with logits; probabilities saved
    LogisticMean { logits: TensorId, targets: Vec<f64>, probs: Vec<f64> },
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── matrix kernels ──────────────────────────────────────────────────────────

/// Rows-per-task granularity for parallel kernels.
const KERNEL_CHUNK_ROWS: usize = 8;
/// Below this many multiply-adds a parallel launch costs more than it saves.
const KERNEL_PAR_THRESHOLD: usize = 1 << 20;

/// `c += a · b` (or overwrite when `accumulate` is false), all row-major.
/// Row-partitioned: each output row is produced by a sequential `ikj` loop,
/// so results are identical with and without the `parallel` feature.
pub(crate) fn matmul_into(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row_task = |i0: usize, chunk: &mut [f64]| {
        for (r, crow) in chunk.chunks_mut(n).enumerate() {
            let i = i0 + r;
            if !accumulate {
                crow.fill(0.0);
            }
            let arow = &a[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if m * k * n >= KERNEL_PAR_THRESHOLD && m > 1 {
        par::for_each_chunk(c, n, KERNEL_CHUNK_ROWS.min(m), row_task);
    } else {
        row_task(0, c);
    }
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// Numerically safe `log Σ exp(v)`: the running maximum is subtracted before
/// exponentiation. Mandatory at small temperatures where raw exponents reach
/// `±1/τ`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

// ── tape ────────────────────────────────────────────────────────────────────

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, t: TensorId) -> &Node {
        &self.nodes[t.0]
    }

    /// Leaf with gradient tracking (a model parameter).
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(rows, cols, data, true)
    }

    /// Leaf without gradient tracking (input data).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(rows, cols, data, false)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, requires_grad, Op::Leaf))
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = self.node(t);
        (n.rows, n.cols)
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.node(t).data
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.node(t).requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.node(t).grad.as_deref()
    }

    /// Scalar value of a `1×1` tensor.
    pub fn scalar(&self, t: TensorId) -> Result<f64> {
        let n = self.node(t);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "scalar() on a {}x{} tensor",
                n.rows, n.cols
            )));
        }
        Ok(n.data[0])
    }

    /// Clear all gradient buffers. Forward values are untouched.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn out_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&t| self.node(t).requires_grad)
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul {m}x{ka} . {kb}x{n}: inner dimensions differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, self.data(a), self.data(b), m, ka, n, false);
        let rq = self.out_requires(&[a, b]);
        Ok(self.push(m, n, out, rq, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!(
                "add {}x{} + {}x{}: shapes differ",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rq = self.out_requires(&[a, b]);
        Ok(self.push(sa.0, sa.1, out, rq, Op::Add { a, b }))
    }

    /// `x[m×n] + b[1×n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(x);
        let (br, bn) = self.shape(b);
        if br != 1 || bn != n {
            return Err(Error::Shape(format!(
                "add_bias: bias {br}x{bn} does not broadcast over {m}x{n}"
            )));
        }
        let bias = self.data(b).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, bv)| v + bv))
            .collect();
        let rq = self.out_requires(&[x, b]);
        Ok(self.push(m, n, out, rq, Op::AddBias { x, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| c * v).collect();
        let rq = self.node(x).requires_grad;
        Ok(self.push(m, n, out, rq, Op::Scale { x, c }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rq = self.node(x).requires_grad;
        Ok(self.push(m, n, out, rq, Op::Relu { x }))
    }

    /// Rescale every row to unit L2 norm. A row of (near-)zero norm is a
    /// numeric error that names the offending row.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(x);
        let data = self.data(x);
        let mut out = vec![0.0; m * n];
        let mut inv_norms = vec![0.0; m];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "l2_normalize_rows: row {i} has degenerate norm {norm:e}"
                )));
            }
            let inv = 1.0 / norm;
            inv_norms[i] = inv;
            for j in 0..n {
                out[i * n + j] = row[j] * inv;
            }
        }
        let rq = self.node(x).requires_grad;
        Ok(self.push(m, n, out, rq, Op::L2NormRows { x, inv_norms }))
    }

    /// Inverted dropout with keep-probability `1 - p`; the survivor mask is
    /// drawn once at record time from the caller's stream. `training =
    /// false` or `p = 0` records nothing and returns `x` unchanged.
    pub fn dropout(&mut self, x: TensorId, p: f64, training: bool, rng: &mut RngStream) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (m, n) = self.shape(x);
        let keep = 1.0 - p;
        let inv_keep = 1.0 / keep;
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < keep { inv_keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, mk)| v * mk).collect();
        let rq = self.node(x).requires_grad;
        Ok(self.push(m, n, out, rq, Op::Dropout { x, mask }))
    }

    /// Gather rows of `table[vocab×e]` for each id sequence and mean-pool,
    /// producing `[len(seqs) × e]`. Empty sequences and out-of-vocabulary
    /// ids are input errors.
    pub fn embed_mean(&mut self, table: TensorId, seqs: &[Vec<u32>]) -> Result<TensorId> {
        let (vocab, e) = self.shape(table);
        if seqs.is_empty() {
            return Err(Error::Input("embed_mean: no sequences".into()));
        }
        let data = self.data(table);
        let mut out = vec![0.0; seqs.len() * e];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Input(format!("embed_mean: sequence {i} is empty")));
            }
            let inv = 1.0 / seq.len() as f64;
            let orow = &mut out[i * e..(i + 1) * e];
            for &tok in seq {
                let t = tok as usize;
                if t >= vocab {
                    return Err(Error::Input(format!(
                        "embed_mean: token id {tok} outside vocabulary of {vocab}"
                    )));
                }
                let trow = &data[t * e..(t + 1) * e];
                for (o, &v) in orow.iter_mut().zip(trow) {
                    *o += v * inv;
                }
            }
        }
        let rq = self.node(table).requires_grad;
        Ok(self.push(seqs.len(), e, out, rq, Op::EmbedMean { table, seqs: seqs.to_vec() }))
    }

    /// Rearrange flattened `view×view` images (`n × view²`) into one row
    /// per non-overlapping `patch×patch` tile: output is
    /// `n·(view/patch)² × patch²`, tiles in row-major grid order, pixels in
    /// row-major order within each tile. A shared linear layer applied to
    /// the result is a stride-`patch` convolution.
    pub fn patch_rows(&mut self, x: TensorId, view: usize, patch: usize) -> Result<TensorId> {
        let (n, cols) = self.shape(x);
        if patch == 0 || view == 0 || view % patch != 0 {
            return Err(Error::Shape(format!(
                "patch_rows: patch {patch} does not tile view {view}"
            )));
        }
        if cols != view * view {
            return Err(Error::Shape(format!(
                "patch_rows: rows of {cols} pixels, expected {view}x{view}"
            )));
        }
        let np = view / patch;
        let pa = patch * patch;
        let data = self.data(x);
        let mut out = vec![0.0; n * np * np * pa];
        for i in 0..n {
            let img = &data[i * cols..(i + 1) * cols];
            for gy in 0..np {
                for gx in 0..np {
                    let orow = ((i * np + gy) * np + gx) * pa;
                    for qy in 0..patch {
                        for qx in 0..patch {
                            out[orow + qy * patch + qx] =
                                img[(gy * patch + qy) * view + gx * patch + qx];
                        }
                    }
                }
            }
        }
        let rq = self.node(x).requires_grad;
        Ok(self.push(n * np * np, pa, out, rq, Op::PatchRows { x, view, patch }))
    }

    /// Mean over each consecutive group of `group` rows: `m × c` →
    /// `m/group × c`. The row count must be an exact multiple of the group.
    pub fn mean_pool_rows(&mut self, x: TensorId, group: usize) -> Result<TensorId> {
        let (m, c) = self.shape(x);
        if group == 0 || m % group != 0 {
            return Err(Error::Shape(format!(
                "mean_pool_rows: {m} rows do not split into groups of {group}"
            )));
        }
        let out_rows = m / group;
        let inv = 1.0 / group as f64;
        let data = self.data(x);
        let mut out = vec![0.0; out_rows * c];
        for r in 0..out_rows {
            let orow = &mut out[r * c..(r + 1) * c];
            for k in 0..group {
                let irow = &data[(r * group + k) * c..(r * group + k + 1) * c];
                for (o, &v) in orow.iter_mut().zip(irow) {
                    *o += v * inv;
                }
            }
        }
        let rq = self.node(x).requires_grad;
        Ok(self.push(out_rows, c, out, rq, Op::MeanPoolRows { x, group }))
    }

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let rq = self.node(x).requires_grad;
        Ok(self.push(1, 1, vec![s], rq, Op::SumAll { x }))
    }

    /// Mean binary cross-entropy with logits. `logits` is `m×1` or `1×m`;
    /// `targets` are 0/1 floats of the same length.
    pub fn logistic_loss_mean(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let (m, n) = self.shape(logits);
        let len = m * n;
        if m != 1 && n != 1 {
            return Err(Error::Shape(format!(
                "logistic_loss_mean: logits must be a vector, got {m}x{n}"
            )));
        }
        if targets.len() != len {
            return Err(Error::Shape(format!(
                "logistic_loss_mean: {} targets for {len} logits",
                targets.len()
            )));
        }
        let data = self.data(logits);
        let mut probs = vec![0.0; len];
        let mut total = 0.0;
        for i in 0..len {
            let z = data[i];
            let y = targets[i];
            // log(1 + e^{-|z|}) form avoids overflow on either tail.
            let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            total += loss;
            probs[i] = 1.0 / (1.0 + (-z).exp());
        }
        let rq = self.node(logits).requires_grad;
        Ok(self.push(
            1,
            1,
            vec![total / len as f64],
            rq,
            Op::LogisticMean { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// One direction of the in-batch contrastive objective: anchors are the
    /// rows of `z1`, candidates the rows of `z2` (both `n×d`, unit rows).
    ///
    /// For anchor `i` the candidate score is `s_ik = ⟨z1_i, z2_k⟩ / τ` and
    /// the loss is cross-entropy of the target row `targets[i, ·]` against
    /// `exp(s_ik) / D_i`, where the denominator `D_i` sums `exp(·/τ)` over
    /// every *other* instance `k ≠ i` in both the anchor's own modality and
    /// the candidate modality — the matched pair itself is excluded. The
    /// same-modality sum is dropped when `include_within` is false. Returns
    /// the sum over anchors as a `1×1` tensor.
    pub fn contrastive_dir(
        &mut self,
        z1: TensorId,
        z2: TensorId,
        tau: f64,
        targets: &[f64],
        include_within: bool,
    ) -> Result<TensorId> {
        let (n, d) = self.shape(z1);
        let (n2, d2) = self.shape(z2);
        if (n, d) != (n2, d2) {
            return Err(Error::Shape(format!(
                "contrastive_dir: {n}x{d} vs {n2}x{d2}"
            )));
        }
        if n < 2 {
            return Err(Error::Contract(format!(
                "contrastive_dir: batch of {n} has no negatives"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature {tau} must be positive")));
        }
        if targets.len() != n * n {
            return Err(Error::Shape(format!(
                "contrastive_dir: target matrix {} != {n}x{n}",
                targets.len()
            )));
        }
        for (name, z) in [("z1", z1), ("z2", z2)] {
            let data = self.data(z);
            for i in 0..n {
                let norm: f64 = data[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::Contract(format!(
                        "contrastive_dir: {name} row {i} has norm {norm}, expected unit"
                    )));
                }
            }
        }

        let a = self.data(z1).to_vec();
        let b = self.data(z2).to_vec();
        // Scaled similarity matrices: within-modality and cross-modality.
        let bt = transpose(&b, n, d);
        let mut s_cross = vec![0.0; n * n];
        matmul_into(&mut s_cross, &a, &bt, n, d, n, false);
        let mut s_self = vec![0.0; n * n];
        if include_within {
            let at = transpose(&a, n, d);
            matmul_into(&mut s_self, &a, &at, n, d, n, false);
        }
        let inv_tau = 1.0 / tau;
        for v in s_cross.iter_mut().chain(s_self.iter_mut()) {
            *v *= inv_tau;
        }

        let mut w_self = vec![0.0; n * n];
        let mut w_cross = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let row_c = &s_cross[i * n..(i + 1) * n];
            let row_s = &s_self[i * n..(i + 1) * n];
            // Max over the denominator terms (k ≠ i in both modalities),
            // subtracted before exponentiation.
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n {
                if k == i {
                    continue;
                }
                mx = mx.max(row_c[k]);
                if include_within {
                    mx = mx.max(row_s[k]);
                }
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k == i {
                    continue;
                }
                denom += (row_c[k] - mx).exp();
                if include_within {
                    denom += (row_s[k] - mx).exp();
                }
            }
            if !denom.is_finite() || denom <= 0.0 {
                return Err(Error::Numeric(format!(
                    "contrastive_dir: degenerate denominator for anchor {i}"
                )));
            }
            let log_denom = mx + denom.ln();
            let trow = &targets[i * n..(i + 1) * n];
            let target_term: f64 = trow.iter().zip(row_c).map(|(p, s)| p * s).sum();
            total += log_denom - target_term;
            // Normalized denominator weights, reused by backward.
            for k in 0..n {
                if k == i {
                    continue;
                }
                w_cross[i * n + k] = (row_c[k] - log_denom).exp();
                if include_within {
                    w_self[i * n + k] = (row_s[k] - log_denom).exp();
                }
            }
        }
        let rq = self.out_requires(&[z1, z2]);
        Ok(self.push(
            1,
            1,
            vec![total],
            rq,
            Op::ContrastiveDir {
                z1,
                z2,
                tau,
                targets: targets.to_vec(),
                w_self,
                w_cross,
                include_within,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Accumulates into each tracked
    /// node's gradient buffer; call [`Tape::zero_grads`] between independent
    /// measurements. Backward of `a + b` equals the two separate sweeps —
    /// scratch adjoints keep repeated calls linear.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar {}x{} tensor",
                ln.rows, ln.cols
            )));
        }
        if !ln.requires_grad {
            return Ok(()); // nothing on this subgraph is tracked
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            let len = self.nodes[idx].data.len();
            let buf = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; len]);
            for (acc, gv) in buf.iter_mut().zip(&g) {
                *acc += gv;
            }
        }
        Ok(())
    }

    fn add_adj(adj: &mut [Option<Vec<f64>>], t: TensorId, len: usize, contrib: impl FnOnce(&mut [f64])) {
        let slot = adj[t.0].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if self.node(*a).requires_grad {
                    let bt = transpose(self.data(*b), k, n);
                    Self::add_adj(adj, *a, m * k, |slot| {
                        matmul_into(slot, g, &bt, m, n, k, true);
                    });
                }
                if self.node(*b).requires_grad {
                    let at = transpose(self.data(*a), m, k);
                    Self::add_adj(adj, *b, k * n, |slot| {
                        matmul_into(slot, &at, g, k, m, n, true);
                    });
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if self.node(*t).requires_grad {
                        Self::add_adj(adj, *t, g.len(), |slot| {
                            for (s, gv) in slot.iter_mut().zip(g) {
                                *s += gv;
                            }
                        });
                    }
                }
            }
            Op::AddBias { x, b } => {
                let (m, n) = (node.rows, node.cols);
                if self.node(*x).requires_grad {
                    Self::add_adj(adj, *x, m * n, |slot| {
                        for (s, gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    });
                }
                if self.node(*b).requires_grad {
                    Self::add_adj(adj, *b, n, |slot| {
                        for row in g.chunks(n) {
                            for (s, gv) in slot.iter_mut().zip(row) {
                                *s += gv;
                            }
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.node(*x).requires_grad {
                    let c = *c;
                    Self::add_adj(adj, *x, g.len(), |slot| {
                        for (s, gv) in slot.iter_mut().zip(g) {
                            *s += c * gv;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.node(*x).requires_grad {
                    let xd = self.data(*x);
                    Self::add_adj(adj, *x, g.len(), |slot| {
                        for i in 0..g.len() {
                            if xd[i] > 0.0 {
                                slot[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::L2NormRows { x, inv_norms } => {
                if self.node(*x).requires_grad {
                    let n = node.cols;
                    let y = &node.data;
                    Self::add_adj(adj, *x, g.len(), |slot| {
                        for i in 0..node.rows {
                            let gr = &g[i * n..(i + 1) * n];
                            let yr = &y[i * n..(i + 1) * n];
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            let inv = inv_norms[i];
                            let srow = &mut slot[i * n..(i + 1) * n];
                            for j in 0..n {
                                srow[j] += inv * (gr[j] - dot * yr[j]);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if self.node(*x).requires_grad {
                    Self::add_adj(adj, *x, g.len(), |slot| {
                        for i in 0..g.len() {
                            slot[i] += g[i] * mask[i];
                        }
                    });
                }
            }
            Op::PatchRows { x, view, patch } => {
                if self.node(*x).requires_grad {
                    let (view, patch) = (*view, *patch);
                    let (n, cols) = self.shape(*x);
                    let np = view / patch;
                    let pa = patch * patch;
                    Self::add_adj(adj, *x, n * cols, |slot| {
                        for i in 0..n {
                            for gy in 0..np {
                                for gx in 0..np {
                                    let orow = ((i * np + gy) * np + gx) * pa;
                                    for qy in 0..patch {
                                        for qx in 0..patch {
                                            slot[i * cols
                                                + (gy * patch + qy) * view
                                                + gx * patch
                                                + qx] += g[orow + qy * patch + qx];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MeanPoolRows { x, group } => {
                if self.node(*x).requires_grad {
                    let group = *group;
                    let c = node.cols;
                    let (m_in, _) = self.shape(*x);
                    let inv = 1.0 / group as f64;
                    Self::add_adj(adj, *x, m_in * c, |slot| {
                        for r in 0..m_in {
                            let grow = &g[(r / group) * c..(r / group + 1) * c];
                            let srow = &mut slot[r * c..(r + 1) * c];
                            for (s, &gv) in srow.iter_mut().zip(grow) {
                                *s += gv * inv;
                            }
                        }
                    });
                }
            }
            Op::EmbedMean { table, seqs } => {
                if self.node(*table).requires_grad {
                    let (vocab, e) = self.shape(*table);
                    Self::add_adj(adj, *table, vocab * e, |slot| {
                        for (i, seq) in seqs.iter().enumerate() {
                            let inv = 1.0 / seq.len() as f64;
                            let grow = &g[i * e..(i + 1) * e];
                            for &tok in seq {
                                let srow = &mut slot[tok as usize * e..(tok as usize + 1) * e];
                                for (s, gv) in srow.iter_mut().zip(grow) {
                                    *s += gv * inv;
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if self.node(*x).requires_grad {
                    let xn = self.node(*x);
                    let gv = g[0];
                    Self::add_adj(adj, *x, xn.data.len(), |slot| {
                        for s in slot.iter_mut() {
                            *s += gv;
                        }
                    });
                }
            }
            Op::LogisticMean { logits, targets, probs } => {
                if self.node(*logits).requires_grad {
                    let len = probs.len();
                    let gv = g[0] / len as f64;
                    Self::add_adj(adj, *logits, len, |slot| {
                        for i in 0..len {
                            slot[i] += gv * (probs[i] - targets[i]);
                        }
                    });
                }
            }
            Op::ContrastiveDir { z1, z2, tau, targets, w_self, w_cross, include_within } => {
                let n = (targets.len() as f64).sqrt() as usize;
                let d = self.node(*z1).cols;
                let gv = g[0] / tau;
                let a = self.data(*z1);
                let b = self.data(*z2);
                if self.node(*z1).requires_grad {
                    Self::add_adj(adj, *z1, n * d, |slot| {
                        // d/dz1_i: Σ_k (w_cross[i,k] − P[i,k]) z2_k
                        //        + Σ_k w_self[i,k] z1_k + Σ_k w_self[k,i] z1_k
                        for i in 0..n {
                            let srow = &mut slot[i * d..(i + 1) * d];
                            for k in 0..n {
                                let wc = w_cross[i * n + k] - targets[i * n + k];
                                if wc != 0.0 {
                                    let bk = &b[k * d..(k + 1) * d];
                                    for j in 0..d {
                                        srow[j] += gv * wc * bk[j];
                                    }
                                }
                                if *include_within {
                                    let ws = w_self[i * n + k] + w_self[k * n + i];
                                    if ws != 0.0 {
                                        let ak = &a[k * d..(k + 1) * d];
                                        for j in 0..d {
                                            srow[j] += gv * ws * ak[j];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.node(*z2).requires_grad {
                    Self::add_adj(adj, *z2, n * d, |slot| {
                        // d/dz2_k: Σ_i (w_cross[i,k] − P[i,k]) z1_i
                        for k in 0..n {
                            let srow = &mut slot[k * d..(k + 1) * d];
                            for i in 0..n {
                                let w = w_cross[i * n + k] - targets[i * n + k];
                                if w != 0.0 {
                                    let ai = &a[i * d..(i + 1) * d];
                                    for j in 0..d {
                                        srow[j] += gv * w * ai[j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}
