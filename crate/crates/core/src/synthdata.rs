//! Synthetic trimodal lesion generator with known ground truth.
//!
//! Each instance starts from a latent lesion: a benign/malignant label, an
//! ordinal grade, and one sampled option (or absence) per manifestation
//! schema group, with option probabilities conditioned on the label. The
//! conditionals live in a data file (`assets/priors.toml`, the embedded
//! default). A scalar noise level interpolates them towards a
//! label-independent mixture, so at noise 1 the manifestation carries no
//! label information at all.
//!
//! From the latent, three modalities are derived:
//! - two views (CC/MLO) rendered as parametric blobs whose size, intensity,
//!   boundary shape, edge profile, calcification dots and overlay marks are
//!   deterministic functions of the group states; the views share one
//!   low-frequency nuisance texture (amplitude ∝ noise) and receive
//!   independent per-pixel noise,
//! - a report token sequence mentioning each present trait with probability
//!   `p_mention` plus an always-present grade token,
//! - the manifestation vector itself (exact encoding of the group states).
//!
//! Generation is deterministic per seed and embarrassingly parallel over
//! instances (each instance owns a derived stream).

use crate::error::{Error, Result};
use crate::manifestation::{ManifestationSchema, ManifestationVector, DIM};
use crate::matrix::Matrix;
use crate::model::BatchInputs;
use crate::rng::{self, gen_index, RngStream};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const DEFAULT_PRIORS_TOML: &str = include_str!("../assets/priors.toml");

/// Number of ordinal grades.
pub const N_GRADES: usize = 6;
/// Token ids `0..DIM` name manifestation options; grade `g` is token
/// `DIM + g - 1`. Total vocabulary:
pub const VOCAB: usize = DIM + N_GRADES;

// ── priors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
struct PriorsFile {
    label: LabelPriors,
    grade: GradePriors,
    group: Vec<GroupPriorsFile>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelPriors {
    pub p_malignant: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GradePriors {
    pub benign: Vec<f64>,
    pub malignant: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct GroupPriorsFile {
    name: String,
    benign: Vec<f64>,
    malignant: Vec<f64>,
}

/// Validated label-conditioned generation priors, aligned group-for-group
/// with a [`ManifestationSchema`].
#[derive(Debug, Clone)]
pub struct Priors {
    pub label: LabelPriors,
    pub grade: GradePriors,
    /// Per group: (benign option probabilities, malignant option
    /// probabilities); remainder to 1 is "group absent".
    pub groups: Vec<(Vec<f64>, Vec<f64>)>,
}

fn check_probs(name: &str, p: &[f64], must_sum_to_one: bool) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Parse(format!("priors for {name}: probability outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if must_sum_to_one && (s - 1.0).abs() > 1e-9 {
        return Err(Error::Parse(format!("priors for {name}: sum {s} != 1")));
    }
    if !must_sum_to_one && s > 1.0 + 1e-9 {
        return Err(Error::Parse(format!("priors for {name}: sum {s} exceeds 1")));
    }
    Ok(())
}

impl Priors {
    pub fn default_priors(schema: &ManifestationSchema) -> Self {
        Self::from_toml_str(DEFAULT_PRIORS_TOML, schema)
            .expect("embedded priors asset matches the embedded schema")
    }

    /// Parse and validate against `schema`: same groups in the same order,
    /// one probability per option, all rows proper.
    pub fn from_toml_str(text: &str, schema: &ManifestationSchema) -> Result<Self> {
        let parsed: PriorsFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("priors file: {e}")))?;
        if !(0.0..=1.0).contains(&parsed.label.p_malignant) {
            return Err(Error::Parse("p_malignant outside [0, 1]".into()));
        }
        for (name, row) in [("grade.benign", &parsed.grade.benign), ("grade.malignant", &parsed.grade.malignant)] {
            if row.len() != N_GRADES {
                return Err(Error::Parse(format!("{name} must list {N_GRADES} grades")));
            }
            check_probs(name, row, true)?;
        }
        if parsed.group.len() != schema.groups().len() {
            return Err(Error::Parse(format!(
                "priors list {} groups, schema has {}",
                parsed.group.len(),
                schema.groups().len()
            )));
        }
        let mut groups = Vec::with_capacity(parsed.group.len());
        for (gp, sg) in parsed.group.iter().zip(schema.groups()) {
            if gp.name != sg.name {
                return Err(Error::Parse(format!(
                    "priors group '{}' does not match schema group '{}' (order matters)",
                    gp.name, sg.name
                )));
            }
            for (side, row) in [("benign", &gp.benign), ("malignant", &gp.malignant)] {
                if row.len() != sg.options.len() {
                    return Err(Error::Parse(format!(
                        "priors group '{}' {side} lists {} options, schema has {}",
                        gp.name,
                        row.len(),
                        sg.options.len()
                    )));
                }
                check_probs(&format!("{} {side}", gp.name), row, false)?;
            }
            groups.push((gp.benign.clone(), gp.malignant.clone()));
        }
        Ok(Self { label: parsed.label, grade: parsed.grade, groups })
    }

    pub fn load(path: &Path, schema: &ManifestationSchema) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, schema)
    }

    /// Option probabilities for group `g` at `noise`: the label-conditional
    /// row blended towards the equal-weight label mixture.
    pub fn option_probs(&self, g: usize, label: Label, noise: f64) -> Vec<f64> {
        let (b, m) = &self.groups[g];
        let own = match label {
            Label::Benign => b,
            Label::Malignant => m,
        };
        own.iter()
            .zip(b.iter().zip(m))
            .map(|(&p, (&pb, &pm))| (1.0 - noise) * p + noise * 0.5 * (pb + pm))
            .collect()
    }

    /// Grade distribution at `noise`, blended the same way.
    pub fn grade_probs(&self, label: Label, noise: f64) -> Vec<f64> {
        let own = match label {
            Label::Benign => &self.grade.benign,
            Label::Malignant => &self.grade.malignant,
        };
        own.iter()
            .zip(self.grade.benign.iter().zip(&self.grade.malignant))
            .map(|(&p, (&pb, &pm))| (1.0 - noise) * p + noise * 0.5 * (pb + pm))
            .collect()
    }
}

// ── latent ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Benign => 0.0,
            Label::Malignant => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::Parse(format!("label byte {other} is not 0/1"))),
        }
    }
}

/// The generative ground truth of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentLesion {
    pub id: u64,
    pub label: Label,
    /// Ordinal category 1..=6, used only for retrieval scoring.
    pub grade: u8,
    /// One chosen option index (or absence) per schema group.
    pub group_states: Vec<Option<usize>>,
}

/// Draw an index from an explicit sub-distribution: `probs` may sum to
/// s ≤ 1; with probability 1−s the draw is `None`.
fn sample_option(probs: &[f64], rng: &mut RngStream) -> Option<usize> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    None
}

impl LatentLesion {
    pub fn sample(
        id: u64,
        schema: &ManifestationSchema,
        priors: &Priors,
        noise: f64,
        rng: &mut RngStream,
    ) -> Self {
        let label = if rng.gen::<f64>() < priors.label.p_malignant {
            Label::Malignant
        } else {
            Label::Benign
        };
        let group_states = (0..schema.groups().len())
            .map(|g| sample_option(&priors.option_probs(g, label, noise), rng))
            .collect();
        let gp = priors.grade_probs(label, noise);
        let grade = sample_option(&gp, rng).unwrap_or(N_GRADES - 1) as u8 + 1;
        Self { id, label, grade, group_states }
    }

    /// Exact encoding of the group states.
    pub fn manifestation(&self, schema: &ManifestationSchema) -> ManifestationVector {
        let indices: Vec<usize> = self
            .group_states
            .iter()
            .zip(schema.groups())
            .filter_map(|(s, g)| s.map(|opt| g.offset + opt))
            .collect();
        ManifestationVector::from_indices(&indices).expect("schema offsets are in range")
    }

    /// Stable content hash seeding the deterministic (geometry) parts of
    /// rendering: a function of the latent only, independent of the noise
    /// stream passed to `render_views`.
    fn geometry_seed(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        mix(self.id);
        mix(self.grade as u64);
        mix(self.label.as_u8() as u64);
        for s in &self.group_states {
            mix(match s {
                Some(i) => *i as u64 + 1,
                None => 0,
            });
        }
        h
    }
}

// ── rendering ───────────────────────────────────────────────────────────────

/// Blob geometry derived from group states. All values are deterministic
/// given the latent.
struct BlobParams {
    radius_frac: f64,
    amp: f64,
    axis_ratio: f64,
    lobe_k: f64,
    lobe_amp: f64,
    falloff: f64,
    spike_count: f64,
    spike_amp: f64,
    calc: Option<CalcParams>,
    misc: Option<usize>,
}

struct CalcParams {
    /// Dot centers in the blob frame, units of blob radius.
    dots: Vec<(f64, f64)>,
    dot_radius: Vec<f64>,
    dot_amp: Vec<f64>,
}

/// State index helpers for the fixed default-schema group order.
mod groups {
    pub const SHAPE: usize = 0;
    pub const EDGE: usize = 1;
    pub const DENSITY: usize = 2;
    pub const SIZE: usize = 3;
    pub const CALC_SHAPE: usize = 4;
    pub const CALC_SIZE: usize = 5;
    pub const CALC_DENSITY: usize = 6;
    pub const CALC_DIST: usize = 7;
    pub const MISC: usize = 8;
}

fn blob_params(latent: &LatentLesion, geom: &mut RngStream) -> BlobParams {
    let st = &latent.group_states;
    let radius_frac = match st[groups::SIZE] {
        Some(0) => 0.11, // <=2cm
        Some(1) => 0.17, // 2-5cm
        Some(2) => 0.24, // >5cm
        _ => 0.09,
    };
    let amp = match st[groups::DENSITY] {
        Some(0) => 0.35, // low
        Some(1) => 0.60, // median
        Some(2) => 0.85, // high
        _ => 0.50,
    };
    let (axis_ratio, lobe_k, lobe_amp) = match st[groups::SHAPE] {
        Some(0) => (1.35, 7.0, 0.30), // irregular
        Some(1) => (1.25, 3.0, 0.16), // lobulated
        Some(2) => (1.50, 0.0, 0.0),  // ovoid
        Some(3) => (1.00, 0.0, 0.0),  // round
        _ => (1.20, 0.0, 0.0),
    };
    let (falloff, spike_count, spike_amp) = match st[groups::EDGE] {
        Some(0) => (0.18, 12.0, 0.10), // microlobulated
        Some(1) => (0.55, 0.0, 0.0),   // obscured
        Some(2) => (0.12, 9.0, 0.55),  // spiculated
        Some(3) => (0.08, 0.0, 0.0),   // well-circumscribed
        _ => (0.25, 0.0, 0.0),
    };

    let any_calc = [groups::CALC_SHAPE, groups::CALC_SIZE, groups::CALC_DENSITY, groups::CALC_DIST]
        .iter()
        .any(|&g| st[g].is_some());
    let calc = any_calc.then(|| {
        let n_dots = match st[groups::CALC_DIST] {
            Some(0) => 7,  // scattered
            Some(1) => 10, // clustered
            Some(2) => 8,  // linear/segmental
            _ => 6,
        };
        let spread = match st[groups::CALC_DIST] {
            Some(0) => 1.5,
            Some(1) => 0.45,
            _ => 0.9,
        };
        let (r_even, r_odd) = match st[groups::CALC_SIZE] {
            Some(0) => (1.6, 1.6), // coarse
            Some(1) => (0.7, 0.7), // tiny
            Some(2) => (0.7, 1.6), // uneven
            _ => (1.0, 1.0),
        };
        let (a_even, a_odd) = match st[groups::CALC_DENSITY] {
            Some(0) => (0.45, 0.45), // low
            Some(1) => (0.95, 0.95), // high
            Some(2) => (0.45, 0.95), // uneven
            _ => (0.70, 0.70),
        };
        let mut dots = Vec::with_capacity(n_dots);
        match st[groups::CALC_SHAPE] {
            Some(0) => {
                // branching: two line segments sharing an endpoint
                let a0 = geom.gen::<f64>() * std::f64::consts::TAU;
                let a1 = a0 + 0.8 + geom.gen::<f64>() * 0.8;
                for j in 0..n_dots {
                    let (arm, t) = (j % 2, (j / 2) as f64 / (n_dots / 2).max(1) as f64);
                    let ang = if arm == 0 { a0 } else { a1 };
                    dots.push((t * spread * ang.cos(), t * spread * ang.sin()));
                }
            }
            Some(1) => {
                // crescentic family: along an arc
                let base = geom.gen::<f64>() * std::f64::consts::TAU;
                for j in 0..n_dots {
                    let ang = base + 2.2 * j as f64 / n_dots as f64;
                    dots.push((0.8 * spread * ang.cos(), 0.8 * spread * ang.sin()));
                }
            }
            _ => {
                // granular/default: scattered in the disc
                for _ in 0..n_dots {
                    let ang = geom.gen::<f64>() * std::f64::consts::TAU;
                    let rr = spread * geom.gen::<f64>().sqrt();
                    dots.push((rr * ang.cos(), rr * ang.sin()));
                }
            }
        }
        if st[groups::CALC_DIST] == Some(2) {
            // linear/segmental: project all dots onto one line
            let ang = geom.gen::<f64>() * std::f64::consts::TAU;
            let (c, s) = (ang.cos(), ang.sin());
            for (j, d) in dots.iter_mut().enumerate() {
                let t = (j as f64 / (n_dots - 1).max(1) as f64 - 0.5) * 2.0 * spread;
                *d = (t * c, t * s);
            }
        }
        let dot_radius = (0..n_dots).map(|j| if j % 2 == 0 { r_even } else { r_odd }).collect();
        let dot_amp = (0..n_dots).map(|j| if j % 2 == 0 { a_even } else { a_odd }).collect();
        CalcParams { dots, dot_radius, dot_amp }
    });

    BlobParams {
        radius_frac,
        amp,
        axis_ratio,
        lobe_k,
        lobe_amp,
        falloff,
        spike_count,
        spike_amp,
        calc,
        misc: st[groups::MISC],
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-view placement: nominal center and horizontal compression. CC and
/// MLO are two projections of the same blob.
struct ViewTransform {
    cx: f64,
    cy: f64,
    x_compress: f64,
}

const CC_VIEW: ViewTransform = ViewTransform { cx: 0.50, cy: 0.54, x_compress: 1.0 };
const MLO_VIEW: ViewTransform = ViewTransform { cx: 0.44, cy: 0.42, x_compress: 0.85 };

/// Half-width of the uniform per-view center jitter, as a fraction of the
/// view size.
const CENTER_JITTER: f64 = 0.09;

/// Nuisance pose of one projection, derived deterministically from the
/// latent but independent between the two views: where the lesion sits,
/// how its boundary modulation is rotated, and how the calcification
/// pattern is oriented. Only trait-determined structure (sizes,
/// amplitudes, counts, pattern families) is shared across views.
struct ViewNuisance {
    jitter: (f64, f64),
    phases: [f64; 3],
    dot_rot: f64,
}

const BACKGROUND: f64 = 0.12;

fn render_one_view(
    p: &BlobParams,
    vt: &ViewTransform,
    nuis: &ViewNuisance,
    v: usize,
    img: &mut [f64],
) {
    let r = p.radius_frac * v as f64;
    let cx = (vt.cx + nuis.jitter.0) * v as f64;
    let cy = (vt.cy + nuis.jitter.1) * v as f64;
    let (pl, pe, ps) = (nuis.phases[0], nuis.phases[1], nuis.phases[2]);
    // y-semi-axis b and x-semi-axis a with area preserved
    let a = r * p.axis_ratio.sqrt();
    let b = r / p.axis_ratio.sqrt();
    for py in 0..v {
        for px in 0..v {
            let dx = (px as f64 - cx) / vt.x_compress;
            let dy = py as f64 - cy;
            let rho = (dx * dx + dy * dy).sqrt().max(1e-9);
            let theta = dy.atan2(dx);
            // ellipse polar radius, then boundary modulation
            let te = theta - pe;
            let ell = a * b / ((b * te.cos()).powi(2) + (a * te.sin()).powi(2)).sqrt();
            let mut boundary = ell * (1.0 + p.lobe_amp * (p.lobe_k * (theta - pl)).sin());
            if p.spike_amp > 0.0 {
                let lobe = (p.spike_count * (theta - ps)).cos().max(0.0).powi(8);
                boundary *= 1.0 + p.spike_amp * lobe;
            }
            let mut val = BACKGROUND + p.amp * logistic((1.0 - rho / boundary) / p.falloff);
            if p.misc == Some(4) {
                // halo sign: radiolucent rim just outside the boundary
                let t = rho / boundary - 1.18;
                val -= 0.5 * p.amp * (-t * t / (2.0 * 0.07 * 0.07)).exp();
            }
            img[py * v + px] = val;
        }
    }
    if let Some(calc) = &p.calc {
        let (rc, rs) = (nuis.dot_rot.cos(), nuis.dot_rot.sin());
        for ((&(ox, oy), &dr), &da) in
            calc.dots.iter().zip(&calc.dot_radius).zip(&calc.dot_amp)
        {
            let (ox, oy) = (ox * rc - oy * rs, ox * rs + oy * rc);
            let dcx = cx + ox * r * vt.x_compress;
            let dcy = cy + oy * r;
            stamp_gaussian(img, v, dcx, dcy, dr, da);
        }
    }
    match p.misc {
        Some(0) => {
            // architectural distortion: long radial streaks
            for k in 0..5 {
                let ang = pl + k as f64 * std::f64::consts::TAU / 5.0;
                let (c0, s0) = (ang.cos(), ang.sin());
                stamp_capsule(
                    img,
                    v,
                    (cx + c0 * r * 0.9, cy + s0 * r * 0.9),
                    (cx + c0 * r * 2.4, cy + s0 * r * 2.4),
                    0.8,
                    0.25,
                );
            }
        }
        Some(1) => stamp_gaussian(img, v, cx + 2.2 * r, cy - 1.4 * r, 2.2 * r, 0.20),
        Some(2) => stamp_capsule(img, v, (cx, cy - r), (cx, cy - 2.6 * r), 0.9, 0.30),
        Some(3) => stamp_capsule(
            img,
            v,
            (cx + r, cy + r * 0.3),
            (cx + 2.5 * r, cy + r * 0.9),
            1.2,
            0.30,
        ),
        Some(5) => {
            // focal skin thickening: bright band along the top edge
            for px in 0..v {
                for py in 0..2.min(v) {
                    img[py * v + px] += 0.30;
                }
            }
        }
        Some(6) => stamp_gaussian(img, v, cx, 1.5, 1.5, 0.30),
        Some(7) => {
            // abnormal vessel: sinuous polyline towards the corner
            let mut prev = (cx, cy - r);
            for k in 1..=4 {
                let t = k as f64 / 4.0;
                let nx = cx + t * (0.9 * v as f64 - cx) + 1.5 * (3.0 * t + ps).sin();
                let ny = (cy - r) * (1.0 - t) + 2.0 * t;
                stamp_capsule(img, v, prev, (nx, ny), 0.7, 0.25);
                prev = (nx, ny);
            }
        }
        Some(8) => {
            // lymph node shadow: small bright ellipse in the axilla corner
            stamp_gaussian(img, v, 0.85 * v as f64, 0.12 * v as f64, 0.06 * v as f64, 0.5);
        }
        _ => {}
    }
}

fn stamp_gaussian(img: &mut [f64], v: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    for py in 0..v {
        for px in 0..v {
            let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            img[py * v + px] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn stamp_capsule(img: &mut [f64], v: usize, p0: (f64, f64), p1: (f64, f64), w: f64, amp: f64) {
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    for py in 0..v {
        for px in 0..v {
            let (ex, ey) = (px as f64 - p0.0, py as f64 - p0.1);
            let t = ((ex * dx + ey * dy) / len2).clamp(0.0, 1.0);
            let d2 = (ex - t * dx).powi(2) + (ey - t * dy).powi(2);
            img[py * v + px] += amp * (-d2 / (2.0 * w * w)).exp();
        }
    }
}

/// Render both views. Geometry is a deterministic function of the latent;
/// each view gets its own pose draw (center jitter, boundary phases,
/// calcification-pattern rotation), so the views share trait-determined
/// structure but not instance-specific pose. `rng` supplies only per-view
/// noise: a low-frequency breast-texture field (amplitude `0.20 · noise`)
/// and independent pixel noise (scale `0.06 · noise`), both drawn
/// separately for each view so neither is a cross-view fingerprint.
pub fn render_views(
    latent: &LatentLesion,
    view_size: usize,
    noise: f64,
    rng: &mut RngStream,
) -> (Vec<f64>, Vec<f64>) {
    let v = view_size;
    let mut geom = rng::derive(latent.geometry_seed(), "geom", latent.id);
    let params = blob_params(latent, &mut geom);
    let mut nuisance = || ViewNuisance {
        jitter: (
            (geom.gen::<f64>() - 0.5) * 2.0 * CENTER_JITTER,
            (geom.gen::<f64>() - 0.5) * 2.0 * CENTER_JITTER,
        ),
        phases: std::array::from_fn(|_| geom.gen::<f64>() * std::f64::consts::TAU),
        dot_rot: geom.gen::<f64>() * std::f64::consts::TAU,
    };
    let nuis = [nuisance(), nuisance()];

    let mut cc = vec![0.0; v * v];
    let mut mlo = vec![0.0; v * v];
    render_one_view(&params, &CC_VIEW, &nuis[0], v, &mut cc);
    render_one_view(&params, &MLO_VIEW, &nuis[1], v, &mut mlo);

    if noise > 0.0 {
        for img in [&mut cc, &mut mlo] {
            // Low-frequency texture, drawn independently per view.
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        (1 + gen_index(rng, 3)) as f64,
                        (1 + gen_index(rng, 3)) as f64,
                        rng.gen::<f64>() * std::f64::consts::TAU,
                    )
                })
                .collect();
            let amp = 0.20 * noise / waves.len() as f64;
            for py in 0..v {
                for px in 0..v {
                    let mut t = 0.0;
                    for &(kx, ky, ph) in &waves {
                        t += (std::f64::consts::TAU
                            * (kx * px as f64 + ky * py as f64)
                            / v as f64
                            + ph)
                            .sin();
                    }
                    img[py * v + px] += amp * t;
                }
            }
            let pixel_noise = Normal::new(0.0, 0.06 * noise).expect("positive std");
            for p in img.iter_mut() {
                *p += pixel_noise.sample(rng);
            }
        }
    }
    for img in [&mut cc, &mut mlo] {
        for p in img.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
    (cc, mlo)
}

// ── reports ─────────────────────────────────────────────────────────────────

/// Emit the report token sequence: each present trait's option token with
/// probability `p_mention` (independent draws, group order), then the grade
/// token. Absence of a mention never implies absence of the trait.
pub fn report_tokens(
    latent: &LatentLesion,
    schema: &ManifestationSchema,
    p_mention: f64,
    rng: &mut RngStream,
) -> Vec<u32> {
    let mut tokens = Vec::new();
    for (state, group) in latent.group_states.iter().zip(schema.groups()) {
        if let Some(opt) = state {
            if rng.gen::<f64>() < p_mention {
                tokens.push((group.offset + opt) as u32);
            }
        }
    }
    tokens.push((DIM + latent.grade as usize - 1) as u32);
    tokens
}

// ── augmentation ────────────────────────────────────────────────────────────

/// Label-preserving view augmentation: random crop-and-resize with scale in
/// `(1 − 0.5·strength, 1]`, horizontal flip with probability
/// `0.5·strength`, additive pixel noise with std `0.05·strength`. Strength
/// 0 is the exact identity (and consumes no randomness).
pub fn augment_view(
    view: &[f64],
    view_size: usize,
    strength: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let v = view_size;
    if view.len() != v * v {
        return Err(Error::Shape(format!(
            "augment_view: {} pixels, expected {v}x{v}",
            view.len()
        )));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("augment strength {strength} outside [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(view.to_vec());
    }
    let scale = 1.0 - 0.5 * strength * rng.gen::<f64>();
    let crop = scale * v as f64;
    let ox = rng.gen::<f64>() * (v as f64 - crop);
    let oy = rng.gen::<f64>() * (v as f64 - crop);
    let step = if v > 1 { (crop - 1.0) / (v as f64 - 1.0) } else { 0.0 };
    let sample = |x: f64, y: f64| -> f64 {
        let xc = x.clamp(0.0, (v - 1) as f64);
        let yc = y.clamp(0.0, (v - 1) as f64);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(v - 1), (y0 + 1).min(v - 1));
        let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
        let top = view[y0 * v + x0] * (1.0 - fx) + view[y0 * v + x1] * fx;
        let bot = view[y1 * v + x0] * (1.0 - fx) + view[y1 * v + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = vec![0.0; v * v];
    for i in 0..v {
        for j in 0..v {
            out[i * v + j] = sample(ox + j as f64 * step, oy + i as f64 * step);
        }
    }
    if rng.gen::<f64>() < 0.5 * strength {
        for i in 0..v {
            out[i * v..(i + 1) * v].reverse();
        }
    }
    let noise = Normal::new(0.0, 0.05 * strength).expect("positive std");
    for p in out.iter_mut() {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

// ── dataset ─────────────────────────────────────────────────────────────────

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    /// 0 = fully label-informative modalities, 1 = labels carry nothing.
    pub noise: f64,
    pub seed: u64,
    pub p_mention: f64,
    pub view_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n: 2000, noise: 0.3, seed: 0, p_mention: 0.7, view_size: 32 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "n = {} leaves an empty split (need at least 10)",
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.p_mention) {
            return Err(Error::Config(format!("p_mention {} outside [0, 1]", self.p_mention)));
        }
        if self.view_size < 8 {
            return Err(Error::Config(format!("view_size {} below 8", self.view_size)));
        }
        Ok(())
    }
}

/// One generated instance: all three modalities plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalInstance {
    pub id: u64,
    pub label: Label,
    pub grade: u8,
    pub cc: Vec<f64>,
    pub mlo: Vec<f64>,
    pub tokens: Vec<u32>,
    pub manifestation: ManifestationVector,
}

/// Disjoint 7:1:2 index lists (floor rounding on train and val, remainder
/// to test).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub instances: Vec<TrimodalInstance>,
    pub split: Split,
}

/// Generate `cfg.n` instances in parallel (one derived stream each) and a
/// shuffled 7:1:2 split.
pub fn generate_dataset(
    cfg: &GenConfig,
    schema: &ManifestationSchema,
    priors: &Priors,
) -> Result<Dataset> {
    cfg.validate()?;
    let instances: Vec<TrimodalInstance> =
        crate::par::try_map_indexed(cfg.n, |i| -> Result<TrimodalInstance> {
            let id = i as u64;
            let mut stream = rng::derive(cfg.seed, "instance", id);
            let latent = LatentLesion::sample(id, schema, priors, cfg.noise, &mut stream);
            let (cc, mlo) = render_views(&latent, cfg.view_size, cfg.noise, &mut stream);
            let tokens = report_tokens(&latent, schema, cfg.p_mention, &mut stream);
            Ok(TrimodalInstance {
                id,
                label: latent.label,
                grade: latent.grade,
                cc,
                mlo,
                tokens,
                manifestation: latent.manifestation(schema),
            })
        })?;

    let mut order: Vec<u32> = (0..cfg.n as u32).collect();
    let mut split_rng = rng::derive(cfg.seed, "split", 0);
    rng::shuffle(&mut order, &mut split_rng);
    let n_train = cfg.n * 7 / 10;
    let n_val = cfg.n / 10;
    let split = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    Ok(Dataset { config: cfg.clone(), instances, split })
}

/// [`generate_dataset`] with the embedded schema and its default priors.
pub fn generate_default_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let schema = ManifestationSchema::default_schema();
    let priors = Priors::default_priors(&schema);
    generate_dataset(cfg, &schema, &priors)
}

impl Dataset {
    /// Assemble the raw model inputs for the given instance rows.
    pub fn batch_inputs(&self, rows: &[u32]) -> Result<BatchInputs> {
        let v2 = self.config.view_size * self.config.view_size;
        let mut ids = Vec::with_capacity(rows.len());
        let mut cc = Vec::with_capacity(rows.len() * v2);
        let mut mlo = Vec::with_capacity(rows.len() * v2);
        let mut tokens = Vec::with_capacity(rows.len());
        let mut mani = Vec::with_capacity(rows.len());
        for &r in rows {
            let inst = self
                .instances
                .get(r as usize)
                .ok_or_else(|| Error::Input(format!("instance row {r} out of range")))?;
            ids.push(inst.id);
            cc.extend_from_slice(&inst.cc);
            mlo.extend_from_slice(&inst.mlo);
            tokens.push(inst.tokens.clone());
            mani.push(inst.manifestation);
        }
        Ok(BatchInputs {
            ids,
            cc: Matrix::from_vec(rows.len(), v2, cc)?,
            mlo: Matrix::from_vec(rows.len(), v2, mlo)?,
            tokens,
            mani,
        })
    }

    pub fn labels(&self, rows: &[u32]) -> Vec<f64> {
        rows.iter().map(|&r| self.instances[r as usize].label.as_f64()).collect()
    }

    pub fn grades(&self, rows: &[u32]) -> Vec<u8> {
        rows.iter().map(|&r| self.instances[r as usize].grade).collect()
    }

    pub fn manifestations(&self, rows: &[u32]) -> Vec<ManifestationVector> {
        rows.iter().map(|&r| self.instances[r as usize].manifestation).collect()
    }
}

/// Plug-in estimate (in bits) of the summed per-dimension mutual
/// information between the label and the manifestation bits.
pub fn label_manifestation_mi(instances: &[TrimodalInstance]) -> f64 {
    let n = instances.len() as f64;
    if instances.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for bit in 0..DIM {
        let mut joint = [[0.0f64; 2]; 2];
        for inst in instances {
            let l = inst.label.as_u8() as usize;
            let b = inst.manifestation.get(bit) as usize;
            joint[l][b] += 1.0;
        }
        let pl: [f64; 2] = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
        let pb: [f64; 2] = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
        for l in 0..2 {
            for b in 0..2 {
                let pj = joint[l][b] / n;
                if pj > 0.0 {
                    total += pj * (pj * n * n / (pl[l] * pb[b])).log2();
                }
            }
        }
    }
    total
}

// ── persistence ─────────────────────────────────────────────────────────────

const IMAGES_MAGIC: &[u8; 8] = b"TMIMG001";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: GenConfig,
    files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRow {
    id: u64,
    label: u8,
    grade: u8,
}

#[derive(Serialize, Deserialize)]
struct ManifestationRow {
    id: u64,
    active_indices: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    id: u64,
    tokens: Vec<u32>,
}

/// Persist a dataset as: `images.bin` (flat f64-LE views with a fixed-size
/// header), three JSONL files (instances, manifestations, reports),
/// `split.json`, and a `manifest.json` tying them together.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let v2 = ds.config.view_size * ds.config.view_size;

    let mut img = BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
    img.write_all(IMAGES_MAGIC)?;
    img.write_all(&(ds.instances.len() as u64).to_le_bytes())?;
    img.write_all(&(ds.config.view_size as u64).to_le_bytes())?;
    for inst in &ds.instances {
        if inst.cc.len() != v2 || inst.mlo.len() != v2 {
            return Err(Error::Container(format!(
                "instance {} views do not match view_size {}",
                inst.id, ds.config.view_size
            )));
        }
        for p in inst.cc.iter().chain(&inst.mlo) {
            img.write_all(&p.to_le_bytes())?;
        }
    }
    img.flush()?;

    let mut rows = BufWriter::new(std::fs::File::create(dir.join("instances.jsonl"))?);
    let mut manis = BufWriter::new(std::fs::File::create(dir.join("manifestations.jsonl"))?);
    let mut reports = BufWriter::new(std::fs::File::create(dir.join("reports.jsonl"))?);
    for inst in &ds.instances {
        serde_json::to_writer(
            &mut rows,
            &InstanceRow { id: inst.id, label: inst.label.as_u8(), grade: inst.grade },
        )
        .map_err(|e| Error::Container(e.to_string()))?;
        rows.write_all(b"\n")?;
        serde_json::to_writer(
            &mut manis,
            &ManifestationRow { id: inst.id, active_indices: inst.manifestation.active_indices() },
        )
        .map_err(|e| Error::Container(e.to_string()))?;
        manis.write_all(b"\n")?;
        serde_json::to_writer(&mut reports, &ReportRow { id: inst.id, tokens: inst.tokens.clone() })
            .map_err(|e| Error::Container(e.to_string()))?;
        reports.write_all(b"\n")?;
    }
    rows.flush()?;
    manis.flush()?;
    reports.flush()?;

    std::fs::write(
        dir.join("split.json"),
        serde_json::to_vec_pretty(&ds.split).map_err(|e| Error::Container(e.to_string()))?,
    )?;
    let manifest = Manifest {
        version: 1,
        config: ds.config.clone(),
        files: ["images.bin", "instances.jsonl", "manifestations.jsonl", "reports.jsonl", "split.json"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Container(e.to_string()))?,
    )?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Container(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Load a dataset saved by [`save_dataset`]; bit-exact round trip.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| Error::Container(format!("manifest.json: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Container(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let cfg = manifest.config;
    let v2 = cfg.view_size * cfg.view_size;

    let mut img = BufReader::new(std::fs::File::open(dir.join("images.bin"))?);
    let mut magic = [0u8; 8];
    img.read_exact(&mut magic)?;
    if &magic != IMAGES_MAGIC {
        return Err(Error::Container("images.bin: bad magic".into()));
    }
    let mut w = [0u8; 8];
    img.read_exact(&mut w)?;
    let n = u64::from_le_bytes(w) as usize;
    img.read_exact(&mut w)?;
    let vs = u64::from_le_bytes(w) as usize;
    if vs != cfg.view_size {
        return Err(Error::Container(format!(
            "images.bin view_size {vs} does not match manifest {}",
            cfg.view_size
        )));
    }
    let read_view = |img: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; v2 * 8];
        img.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };

    let rows: Vec<InstanceRow> = read_jsonl(&dir.join("instances.jsonl"))?;
    let manis: Vec<ManifestationRow> = read_jsonl(&dir.join("manifestations.jsonl"))?;
    let reports: Vec<ReportRow> = read_jsonl(&dir.join("reports.jsonl"))?;
    if rows.len() != n || manis.len() != n || reports.len() != n {
        return Err(Error::Container(format!(
            "row counts disagree: {} images, {} instances, {} manifestations, {} reports",
            n,
            rows.len(),
            manis.len(),
            reports.len()
        )));
    }
    let mut instances = Vec::with_capacity(n);
    for ((row, mani), report) in rows.into_iter().zip(manis).zip(reports) {
        if row.id != mani.id || row.id != report.id {
            return Err(Error::Container(format!(
                "id mismatch across files at instance {}",
                row.id
            )));
        }
        let cc = read_view(&mut img)?;
        let mlo = read_view(&mut img)?;
        instances.push(TrimodalInstance {
            id: row.id,
            label: Label::from_u8(row.label)?,
            grade: row.grade,
            cc,
            mlo,
            tokens: report.tokens,
            manifestation: ManifestationVector::from_indices(&mani.active_indices)?,
        });
    }
    let split: Split = serde_json::from_slice(&std::fs::read(dir.join("split.json"))?)
        .map_err(|e| Error::Container(format!("split.json: {e}")))?;
    Ok(Dataset { config: cfg, instances, split })
}
