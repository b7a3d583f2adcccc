//! Geometry diagnostics for 2-d unit-norm embeddings: how close positive
//! pairs sit (alignment) and how evenly points cover the circle
//! (uniformity), rendered as a pair-distance histogram, a planar Gaussian
//! KDE grid, and von Mises angular densities with located peaks.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeConfig {
    /// von Mises concentration for the angular estimator.
    pub kappa: f64,
    /// Angular grid resolution over [−π, π).
    pub angular_grid: usize,
    /// Planar grid is `planar_grid × planar_grid` over the square
    /// [−extent, extent]².
    pub planar_grid: usize,
    pub planar_extent: f64,
    /// Lower bound on the planar bandwidth (Scott's rule can collapse when
    /// all points coincide).
    pub bandwidth_floor: f64,
    /// Bins of the positive-pair distance histogram over [0, 2].
    pub histogram_bins: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            kappa: 20.0,
            angular_grid: 360,
            planar_grid: 64,
            planar_extent: 1.2,
            bandwidth_floor: 1e-3,
            histogram_bins: 20,
        }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !(self.planar_extent > 0.0) || !(self.bandwidth_floor > 0.0) {
            return Err(Error::Config("KDE parameters must be positive".into()));
        }
        if self.angular_grid < 8 || self.planar_grid < 2 || self.histogram_bins == 0 {
            return Err(Error::Config("KDE grids are too coarse".into()));
        }
        Ok(())
    }
}

/// Angular density on a regular grid with its highest-density angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AngularDensity {
    pub angles: Vec<f64>,
    pub density: Vec<f64>,
    pub peak_angle: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformityReport {
    /// Mass fractions of positive-pair Euclidean distances, bins over [0,2].
    pub alignment_hist: Vec<f64>,
    pub alignment_edges: Vec<f64>,
    pub mean_pair_distance: f64,
    /// Row-major density grid; row = y index from −extent up, col = x index.
    pub planar: Matrix,
    pub planar_extent: f64,
    pub planar_bandwidth: f64,
    pub angular: AngularDensity,
    /// Per-label angular densities, one entry per distinct label supplied.
    pub per_class: Vec<(u8, AngularDensity)>,
}

/// Modified Bessel function I₀ by its power series; converges quickly for
/// the concentrations used here.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..500 {
        term *= q / ((m * m) as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

fn von_mises_density(angles: &[f64], cfg: &KdeConfig) -> AngularDensity {
    let g = cfg.angular_grid;
    let log_i0 = bessel_i0(cfg.kappa).ln();
    let norm = 1.0 / (angles.len() as f64 * 2.0 * std::f64::consts::PI);
    let grid: Vec<f64> = (0..g)
        .map(|k| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / g as f64)
        .collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let s: f64 = angles
                .iter()
                .map(|&a| (cfg.kappa * (t - a).cos() - log_i0).exp())
                .sum();
            s * norm
        })
        .collect();
    let peak = density
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| grid[i])
        .unwrap_or(0.0);
    AngularDensity { angles: grid, density, peak_angle: peak, n_points: angles.len() }
}

fn planar_density(emb: &Matrix, cfg: &KdeConfig) -> (Matrix, f64) {
    let n = emb.rows as f64;
    // Scott's rule in two dimensions with a pooled per-axis deviation.
    let mean = [
        emb.data.iter().step_by(2).sum::<f64>() / n,
        emb.data.iter().skip(1).step_by(2).sum::<f64>() / n,
    ];
    let mut var = [0.0, 0.0];
    for i in 0..emb.rows {
        let r = emb.row(i);
        var[0] += (r[0] - mean[0]) * (r[0] - mean[0]);
        var[1] += (r[1] - mean[1]) * (r[1] - mean[1]);
    }
    let sigma = ((var[0] + var[1]) / (2.0 * n)).sqrt();
    let h = (n.powf(-1.0 / 6.0) * sigma).max(cfg.bandwidth_floor);
    let g = cfg.planar_grid;
    let mut grid = Matrix::zeros(g, g);
    let scale = 1.0 / (n * 2.0 * std::f64::consts::PI * h * h);
    let coord = |k: usize| -cfg.planar_extent + 2.0 * cfg.planar_extent * k as f64 / (g - 1) as f64;
    for gy in 0..g {
        let y = coord(gy);
        for gx in 0..g {
            let x = coord(gx);
            let mut s = 0.0;
            for i in 0..emb.rows {
                let r = emb.row(i);
                let d2 = (x - r[0]) * (x - r[0]) + (y - r[1]) * (y - r[1]);
                s += (-d2 / (2.0 * h * h)).exp();
            }
            grid.data[gy * g + gx] = s * scale;
        }
    }
    (grid, h)
}

/// Positive-pair alignment plus planar/angular uniformity of 2-d embeddings.
/// `pairs` lists row indices of positive pairs; `labels`, when given, adds a
/// per-class angular panel for every distinct label.
pub fn alignment_uniformity(
    embeddings: &Matrix,
    pairs: &[(u32, u32)],
    labels: Option<&[f64]>,
    cfg: &KdeConfig,
) -> Result<UniformityReport> {
    cfg.validate()?;
    if embeddings.cols != 2 {
        return Err(Error::Contract(format!(
            "uniformity diagnostics need 2-d embeddings, got dimension {}",
            embeddings.cols
        )));
    }
    if embeddings.rows == 0 {
        return Err(Error::Input("no embeddings".into()));
    }
    if let Some(l) = labels {
        if l.len() != embeddings.rows {
            return Err(Error::Contract(format!(
                "{} labels for {} embeddings",
                l.len(),
                embeddings.rows
            )));
        }
    }

    let b = cfg.histogram_bins;
    let mut hist = vec![0.0; b];
    let mut mean_d = 0.0;
    for &(i, j) in pairs {
        let (i, j) = (i as usize, j as usize);
        if i >= embeddings.rows || j >= embeddings.rows {
            return Err(Error::Contract(format!(
                "pair ({i},{j}) outside {} embeddings",
                embeddings.rows
            )));
        }
        let (a, c) = (embeddings.row(i), embeddings.row(j));
        let d = ((a[0] - c[0]) * (a[0] - c[0]) + (a[1] - c[1]) * (a[1] - c[1])).sqrt();
        mean_d += d;
        let bin = ((d / 2.0 * b as f64) as usize).min(b - 1);
        hist[bin] += 1.0;
    }
    if !pairs.is_empty() {
        let inv = 1.0 / pairs.len() as f64;
        for h in hist.iter_mut() {
            *h *= inv;
        }
        mean_d *= inv;
    }
    let edges: Vec<f64> = (0..=b).map(|k| 2.0 * k as f64 / b as f64).collect();

    let angles: Vec<f64> =
        (0..embeddings.rows).map(|i| embeddings.row(i)[1].atan2(embeddings.row(i)[0])).collect();
    let angular = von_mises_density(&angles, cfg);
    let (planar, bandwidth) = planar_density(embeddings, cfg);

    let mut per_class = Vec::new();
    if let Some(l) = labels {
        let mut seen: Vec<u8> = l.iter().map(|&v| v as u8).collect();
        seen.sort_unstable();
        seen.dedup();
        for class in seen {
            let subset: Vec<f64> = angles
                .iter()
                .zip(l)
                .filter(|(_, &lv)| lv as u8 == class)
                .map(|(&a, _)| a)
                .collect();
            if !subset.is_empty() {
                per_class.push((class, von_mises_density(&subset, cfg)));
            }
        }
    }

    Ok(UniformityReport {
        alignment_hist: hist,
        alignment_edges: edges,
        mean_pair_distance: mean_d,
        planar,
        planar_extent: cfg.planar_extent,
        planar_bandwidth: bandwidth,
        angular,
        per_class,
    })
}

impl UniformityReport {
    /// Trapezoidal integral of an angular density around the circle.
    pub fn angular_integral(d: &AngularDensity) -> f64 {
        let step = 2.0 * std::f64::consts::PI / d.density.len() as f64;
        d.density.iter().sum::<f64>() * step
    }

    /// Angular densities (overall plus per-class) as CSV for plotting:
    /// `angle, overall, class_<k>…`.
    pub fn write_angular_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["angle".to_string(), "overall".to_string()];
        header.extend(self.per_class.iter().map(|(c, _)| format!("class_{c}")));
        w.write_record(&header)?;
        for (k, &a) in self.angular.angles.iter().enumerate() {
            let mut rec = vec![format!("{a}"), format!("{}", self.angular.density[k])];
            rec.extend(self.per_class.iter().map(|(_, d)| format!("{}", d.density[k])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Planar density grid as CSV rows `y, x, density`.
    pub fn write_planar_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "y,x,density")?;
        let g = self.planar.rows;
        let coord =
            |k: usize| -self.planar_extent + 2.0 * self.planar_extent * k as f64 / (g - 1) as f64;
        for gy in 0..g {
            for gx in 0..g {
                writeln!(f, "{},{},{}", coord(gy), coord(gx), self.planar.data[gy * g + gx])?;
            }
        }
        Ok(())
    }

    /// Alignment histogram as CSV rows `lo, hi, fraction`.
    pub fn write_alignment_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "lo,hi,fraction")?;
        for (k, frac) in self.alignment_hist.iter().enumerate() {
            writeln!(f, "{},{},{}", self.alignment_edges[k], self.alignment_edges[k + 1], frac)?;
        }
        Ok(())
    }
}
