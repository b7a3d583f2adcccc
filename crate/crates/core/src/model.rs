//! Toy-scale trimodal encoders and the shared projector.
//!
//! Three modality branches — an image MLP over flattened single-channel
//! views, a token-embedding text encoder with mean pooling, and a two-layer
//! manifestation encoder — each end in a per-modality alignment linear that
//! standardizes features to a common width. A single shared two-layer
//! projector then maps every modality onto the unit hypersphere. Dropout
//! (p = 0.5) acts after the text and manifestation alignment layers only,
//! and only in training mode. Both image views (CC and MLO) pass through
//! the same image encoder and alignment weights.
//!
//! Parameters live outside any tape as named flat arrays; each forward pass
//! binds them onto a fresh tape as leaves. That keeps tapes short-lived and
//! single-threaded while the canonical arrays stay shareable across threads
//! for read-only dataset embedding.

use crate::error::{Error, Result};
use crate::manifestation::{ManifestationVector, DIM};
use crate::matrix::Matrix;
use crate::objectives::EmbeddingBatch;
use crate::rng::{self, RngStream};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dropout probability after text and manifestation alignment.
pub const DROPOUT_P: f64 = 0.5;

/// Architecture widths. `repr` is the dimensionality of the shared
/// embedding space; it defaults to 128 and is overridden to 2 only for the
/// unit-circle uniformity experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Views are `view_size × view_size` single-channel images.
    pub view_size: usize,
    /// Hidden width inside each encoder MLP.
    pub hidden: usize,
    /// Per-modality feature width before alignment.
    pub feature: usize,
    /// Token embedding width.
    pub text_embed: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Alignment output width (projector input).
    pub align: usize,
    /// Shared embedding dimensionality.
    pub repr: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            view_size: 32,
            hidden: 64,
            feature: 64,
            text_embed: 32,
            vocab: 41,
            align: 128,
            repr: 128,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("view_size", self.view_size),
            ("hidden", self.hidden),
            ("feature", self.feature),
            ("text_embed", self.text_embed),
            ("vocab", self.vocab),
            ("align", self.align),
            ("repr", self.repr),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model dim {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.view_size * self.view_size
    }
}

/// One named parameter array with its matrix shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Shapes of every parameter tensor, in canonical (checkpoint) order.
pub fn layer_specs(d: &ModelDims) -> Vec<(&'static str, usize, usize)> {
    vec![
        ("img_w1", d.pixels(), d.hidden),
        ("img_b1", 1, d.hidden),
        ("img_w2", d.hidden, d.feature),
        ("img_b2", 1, d.feature),
        ("txt_embed", d.vocab, d.text_embed),
        ("txt_w1", d.text_embed, d.hidden),
        ("txt_b1", 1, d.hidden),
        ("txt_w2", d.hidden, d.feature),
        ("txt_b2", 1, d.feature),
        ("mani_w1", DIM, d.hidden),
        ("mani_b1", 1, d.hidden),
        ("mani_w2", d.hidden, d.feature),
        ("mani_b2", 1, d.feature),
        ("align_img_w", d.feature, d.align),
        ("align_img_b", 1, d.align),
        ("align_txt_w", d.feature, d.align),
        ("align_txt_b", 1, d.align),
        ("align_mani_w", d.feature, d.align),
        ("align_mani_b", 1, d.align),
        ("proj_w1", d.align, d.align),
        ("proj_b1", 1, d.align),
        ("proj_w2", d.align, d.repr),
        ("proj_b2", 1, d.repr),
    ]
}

/// The full trainable state: dims plus named arrays in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tensors: Vec<ParamTensor>,
}

impl ModelParams {
    /// Rectifier-gain fan-in initialization, one derived stream per tensor
    /// (keyed by name, so adding a tensor never shifts the others).
    /// Weights draw from U(−√(6/fan_in), √(6/fan_in)), which keeps the
    /// input-dependent signal variance roughly constant through the relu
    /// stack — narrower schemes shrink it each layer until every embedding
    /// collapses onto the bias direction. Biases draw from a small nonzero
    /// interval so the all-zero input never produces an exactly-zero
    /// pre-normalization vector.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let tensors = layer_specs(&dims)
            .into_iter()
            .map(|(name, rows, cols)| {
                let mut stream = rng::derive(seed, name, 0);
                let s = if name == "txt_embed" {
                    0.5
                } else if rows == 1 {
                    0.05 // bias rows
                } else {
                    (6.0 / rows as f64).sqrt()
                };
                let data: Vec<f64> =
                    (0..rows * cols).map(|_| stream.gen_range(-s..s)).collect();
                ParamTensor { name: name.to_string(), rows, cols, data }
            })
            .collect();
        Ok(Self { dims, tensors })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter tensor {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&ParamTensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Parameters leafed onto a tape, aligned index-for-index with
/// `ModelParams::tensors` so gradients can be read back by position.
pub struct Bound {
    pub ids: Vec<TensorId>,
    names: Vec<&'static str>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        let i = self
            .names
            .iter()
            .position(|&n| n == name)
            .unwrap_or_else(|| panic!("unbound parameter tensor {name:?}"));
        self.ids[i]
    }
}

/// Leaf every parameter tensor onto `tape`. With `trainable = false` the
/// leaves are constants, which skips gradient bookkeeping during dataset
/// embedding.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<Bound> {
    let specs = layer_specs(&params.dims);
    if specs.len() != params.tensors.len() {
        return Err(Error::Contract(format!(
            "parameter set has {} tensors, architecture expects {}",
            params.tensors.len(),
            specs.len()
        )));
    }
    let mut ids = Vec::with_capacity(specs.len());
    let mut names = Vec::with_capacity(specs.len());
    for ((name, rows, cols), t) in specs.into_iter().zip(&params.tensors) {
        if t.name != name || t.rows != rows || t.cols != cols {
            return Err(Error::Contract(format!(
                "parameter tensor {:?} ({}x{}) does not match architecture slot {name:?} ({rows}x{cols})",
                t.name, t.rows, t.cols
            )));
        }
        ids.push(tape.leaf(rows, cols, t.data.clone(), trainable)?);
        names.push(name);
    }
    Ok(Bound { ids, names })
}

/// Which branches to run besides the always-on image pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub text: bool,
    pub mani: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self { text: true, mani: true }
    }
}

/// One batch of raw inputs, id-aligned across modalities. Views are flat
/// rows of `view_size²` pixels.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub ids: Vec<u64>,
    pub cc: Matrix,
    pub mlo: Matrix,
    pub tokens: Vec<Vec<u32>>,
    pub mani: Vec<ManifestationVector>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        for (name, m) in [("cc", &self.cc), ("mlo", &self.mlo)] {
            if m.rows != n || m.cols != dims.pixels() {
                return Err(Error::Shape(format!(
                    "{name} views are {}x{}, expected {n}x{}",
                    m.rows,
                    m.cols,
                    dims.pixels()
                )));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("{name} views contain non-finite pixels")));
            }
        }
        if self.tokens.len() != n || self.mani.len() != n {
            return Err(Error::Shape(format!(
                "modal lengths disagree: {} ids, {} token sequences, {} manifestations",
                n,
                self.tokens.len(),
                self.mani.len()
            )));
        }
        Ok(())
    }

    /// Select a sub-batch by dataset row positions.
    pub fn select(&self, rows: &[u32]) -> Result<BatchInputs> {
        let cols = self.cc.cols;
        let mut cc = Vec::with_capacity(rows.len() * cols);
        let mut mlo = Vec::with_capacity(rows.len() * cols);
        let mut ids = Vec::with_capacity(rows.len());
        let mut tokens = Vec::with_capacity(rows.len());
        let mut mani = Vec::with_capacity(rows.len());
        for &r in rows {
            let r = r as usize;
            if r >= self.ids.len() {
                return Err(Error::Input(format!(
                    "row {r} out of range for batch of {}",
                    self.ids.len()
                )));
            }
            ids.push(self.ids[r]);
            cc.extend_from_slice(self.cc.row(r));
            mlo.extend_from_slice(self.mlo.row(r));
            tokens.push(self.tokens[r].clone());
            mani.push(self.mani[r]);
        }
        Ok(BatchInputs {
            ids,
            cc: Matrix::from_vec(rows.len(), cols, cc)?,
            mlo: Matrix::from_vec(rows.len(), cols, mlo)?,
            tokens,
            mani,
        })
    }

    /// Dense `n × 35` view of the manifestation column.
    pub fn mani_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.mani.len(), DIM);
        for (i, v) in self.mani.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&v.to_dense());
        }
        m
    }
}

fn mlp2(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, w2)?;
    tape.add_bias(f, b2)
}

/// Encode a batch of flattened views (`n × view_size²`) to features.
pub fn encode_images(
    tape: &mut Tape,
    b: &Bound,
    dims: &ModelDims,
    views: TensorId,
) -> Result<TensorId> {
    let (_, cols) = tape.shape(views);
    if cols != dims.pixels() {
        return Err(Error::Shape(format!(
            "image views have {cols} pixels per row, expected {} ({0}² flattened)",
            dims.pixels()
        )));
    }
    mlp2(tape, views, b.id("img_w1"), b.id("img_b1"), b.id("img_w2"), b.id("img_b2"))
}

/// Embed token ids, mean-pool, and pass through the text MLP.
pub fn encode_text(
    tape: &mut Tape,
    b: &Bound,
    _dims: &ModelDims,
    tokens: &[Vec<u32>],
) -> Result<TensorId> {
    let pooled = tape.embed_mean(b.id("txt_embed"), tokens)?;
    mlp2(tape, pooled, b.id("txt_w1"), b.id("txt_b1"), b.id("txt_w2"), b.id("txt_b2"))
}

/// Encode dense manifestation rows (`n × 35`) to features.
pub fn encode_mani(
    tape: &mut Tape,
    b: &Bound,
    _dims: &ModelDims,
    mani: TensorId,
) -> Result<TensorId> {
    let (_, cols) = tape.shape(mani);
    if cols != DIM {
        return Err(Error::Shape(format!(
            "manifestation input has {cols} columns, expected {DIM}"
        )));
    }
    mlp2(tape, mani, b.id("mani_w1"), b.id("mani_b1"), b.id("mani_w2"), b.id("mani_b2"))
}

/// Modality tag selecting the alignment layer and dropout policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
    Mani,
}

/// Alignment linear → (dropout for text/mani in training) → shared
/// two-layer projector → L2 row normalization onto the hypersphere.
pub fn align_and_project(
    tape: &mut Tape,
    b: &Bound,
    features: TensorId,
    modality: Modality,
    training: bool,
    rng: &mut RngStream,
) -> Result<TensorId> {
    let (w, bias, drop) = match modality {
        Modality::Image => ("align_img_w", "align_img_b", false),
        Modality::Text => ("align_txt_w", "align_txt_b", true),
        Modality::Mani => ("align_mani_w", "align_mani_b", true),
    };
    let a = tape.matmul(features, b.id(w))?;
    let mut a = tape.add_bias(a, b.id(bias))?;
    if drop {
        a = tape.dropout(a, DROPOUT_P, training, rng)?;
    }
    let p = tape.matmul(a, b.id("proj_w1"))?;
    let p = tape.add_bias(p, b.id("proj_b1"))?;
    let p = tape.relu(p)?;
    let z = tape.matmul(p, b.id("proj_w2"))?;
    let z = tape.add_bias(z, b.id("proj_b2"))?;
    tape.l2_normalize_rows(z)
}

/// Run every requested branch of the model over one batch. Dropout masks
/// draw from `rng` in a fixed order (text, then manifestation); eval mode
/// never touches it.
pub fn forward_trimodal(
    tape: &mut Tape,
    b: &Bound,
    dims: &ModelDims,
    inputs: &BatchInputs,
    mask: ModalityMask,
    training: bool,
    rng: &mut RngStream,
) -> Result<EmbeddingBatch> {
    inputs.validate(dims)?;
    let n = inputs.len();
    let cc = tape.constant(n, dims.pixels(), inputs.cc.data.clone())?;
    let mlo = tape.constant(n, dims.pixels(), inputs.mlo.data.clone())?;
    let f_cc = encode_images(tape, b, dims, cc)?;
    let f_mlo = encode_images(tape, b, dims, mlo)?;
    let z_cc = align_and_project(tape, b, f_cc, Modality::Image, training, rng)?;
    let z_mlo = align_and_project(tape, b, f_mlo, Modality::Image, training, rng)?;
    let text = if mask.text {
        let f = encode_text(tape, b, dims, &inputs.tokens)?;
        Some(align_and_project(tape, b, f, Modality::Text, training, rng)?)
    } else {
        None
    };
    let mani = if mask.mani {
        let dense = inputs.mani_dense();
        let m = tape.constant(n, DIM, dense.data)?;
        let f = encode_mani(tape, b, dims, m)?;
        Some(align_and_project(tape, b, f, Modality::Mani, training, rng)?)
    } else {
        None
    };
    Ok(EmbeddingBatch { ids: inputs.ids.clone(), image_cc: z_cc, image_mlo: z_mlo, text, mani })
}

/// All four embedding matrices of a dataset, id-aligned, unit rows.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub cc: Matrix,
    pub mlo: Matrix,
    pub text: Matrix,
    pub mani: Matrix,
}

/// Embed a whole dataset in eval mode, `chunk_rows` instances per tape,
/// chunks in parallel. Equal to one big forward pass row-for-row: chunking
/// only partitions rows, and eval mode has no cross-row state.
pub fn embed_dataset(
    params: &ModelParams,
    inputs: &BatchInputs,
    chunk_rows: usize,
) -> Result<EmbeddingSet> {
    inputs.validate(&params.dims)?;
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be positive".into()));
    }
    let n = inputs.len();
    let n_chunks = n.div_ceil(chunk_rows);
    let reprs = params.dims.repr;
    let chunks: Vec<[Vec<f64>; 4]> =
        crate::par::try_map_indexed(n_chunks, |c| -> Result<[Vec<f64>; 4]> {
        let lo = c * chunk_rows;
        let hi = ((c + 1) * chunk_rows).min(n);
        let rows: Vec<u32> = (lo as u32..hi as u32).collect();
        let sub = inputs.select(&rows)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, false)?;
        // Eval mode ignores the stream; any derivation works.
        let mut unused = rng::derive(0, "embed", c as u64);
        let batch = forward_trimodal(
            &mut tape,
            &bound,
            &params.dims,
            &sub,
            ModalityMask::default(),
            false,
            &mut unused,
        )?;
        Ok([
            tape.data(batch.image_cc).to_vec(),
            tape.data(batch.image_mlo).to_vec(),
            tape.data(batch.text.unwrap()).to_vec(),
            tape.data(batch.mani.unwrap()).to_vec(),
        ])
    })?;
    let mut out = EmbeddingSet {
        ids: inputs.ids.clone(),
        cc: Matrix::zeros(n, reprs),
        mlo: Matrix::zeros(n, reprs),
        text: Matrix::zeros(n, reprs),
        mani: Matrix::zeros(n, reprs),
    };
    for (c, chunk) in chunks.iter().enumerate() {
        let lo = c * chunk_rows * reprs;
        for (dst, src) in [&mut out.cc, &mut out.mlo, &mut out.text, &mut out.mani]
            .iter_mut()
            .zip(chunk)
        {
            dst.data[lo..lo + src.len()].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Penultimate image-branch features (pre-alignment) of the CC view for a
/// whole dataset, eval mode, chunked in parallel. This is the frozen
/// representation the downstream classification protocols consume.
pub fn image_features(
    params: &ModelParams,
    inputs: &BatchInputs,
    chunk_rows: usize,
) -> Result<Matrix> {
    inputs.validate(&params.dims)?;
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be positive".into()));
    }
    let n = inputs.len();
    let n_chunks = n.div_ceil(chunk_rows);
    let chunks: Vec<Vec<f64>> = crate::par::try_map_indexed(n_chunks, |c| -> Result<Vec<f64>> {
        let lo = c * chunk_rows;
        let hi = ((c + 1) * chunk_rows).min(n);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, false)?;
        let rows = hi - lo;
        let x = tape.constant(
            rows,
            params.dims.pixels(),
            inputs.cc.data[lo * params.dims.pixels()..hi * params.dims.pixels()].to_vec(),
        )?;
        let f = encode_images(&mut tape, &bound, &params.dims, x)?;
        Ok(tape.data(f).to_vec())
    })?;
    let mut out = Matrix::zeros(n, params.dims.feature);
    for (c, chunk) in chunks.iter().enumerate() {
        let lo = c * chunk_rows * params.dims.feature;
        out.data[lo..lo + chunk.len()].copy_from_slice(chunk);
    }
    Ok(out)
}
