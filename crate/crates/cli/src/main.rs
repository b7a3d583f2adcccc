//! `trimodal` — command-line driver for the trimodal contrastive engine:
//! dataset generation, pretraining with checkpoints and per-step metrics,
//! downstream protocol evaluation, the ablation grid, a sampler audit, and
//! embedding-space diagnostics.
//!
//! Every subcommand reads one TOML experiment configuration (`--config`,
//! defaults apply when omitted) with `TRIMODAL_*` environment variables
//! overriding individual keys, and writes its artifacts under `--out`.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use trimodal_core::eval::probes::{head_scores, linear_probe_fit, Protocol, EVAL_CHUNK};
use trimodal_core::eval::{
    alignment_uniformity, auc, ece, manifestation_metrics, report_retrieve,
    retrieval_permutation_test,
};
use trimodal_core::maninneg::{audit_distances, AnnealState};
use trimodal_core::matrix::Matrix;
use trimodal_core::model::embed_dataset;
use trimodal_core::synthdata::{generate_default_dataset, save_dataset, Dataset};
use trimodal_core::train::{
    ablate, default_grid, loss_trend, pretrain, run_protocol, write_ablation_csv, Checkpoint,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "trimodal",
    version,
    about = "Trimodal contrastive learning engine with manifestation-driven hard-negative sampling"
)]
struct Cli {
    /// Experiment configuration (TOML). Omitted keys take their defaults;
    /// `TRIMODAL_<SECTION>_<KEY>` environment variables override either way.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    /// Closed-form logistic regression on frozen features.
    Lp,
    /// Trained linear head on frozen features.
    Le,
    /// End-to-end fine-tuning of encoder plus head.
    Ft,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Lp => Protocol::LinearProbe,
            ProtocolArg::Le => Protocol::LinearEval,
            ProtocolArg::Ft => Protocol::FineTune,
        }
    }
}

fn protocol_slug(p: ProtocolArg) -> &'static str {
    match p {
        ProtocolArg::Lp => "lp",
        ProtocolArg::Le => "le",
        ProtocolArg::Ft => "ft",
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic trimodal dataset and persist it (flat binary
    /// image container, JSONL rows, split manifest).
    GenData,
    /// Run contrastive pretraining; writes per-step metrics as JSONL and
    /// sealed checkpoint files.
    Pretrain {
        /// Resume from an intermediate checkpoint of the same config+seed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with a downstream classification protocol,
    /// aggregated over seeds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Comma-separated protocol seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Also evaluate an untrained encoder for comparison.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Pretrain and evaluate every cell of the ablation grid (modality
    /// subsets, label smoothing, negative-sampling mode).
    Ablate {
        #[arg(long, value_enum, default_value = "lp")]
        protocol: ProtocolArg,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Audit the hard-negative sampler: empirical vs. analytic
    /// Hamming-distance histogram over many batches, as CSV.
    SampleAudit {
        #[arg(long, default_value_t = 10_000)]
        batches: u64,
        /// Annealing step whose hardness the audit samples at.
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Embedding-space diagnostics on a checkpoint. With no selection flags,
    /// all three panels run.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Alignment histogram plus planar/angular density of 2-d embeddings.
        #[arg(long)]
        uniformity: bool,
        /// Reliability diagram and expected calibration error of probe
        /// probabilities.
        #[arg(long)]
        calibration: bool,
        /// Image→report retrieval confusion, permutation test, and
        /// manifestation estimation.
        #[arg(long)]
        retrieval: bool,
        /// Permutations for the retrieval null distribution.
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
        /// Reliability-diagram bin count.
        #[arg(long, default_value_t = 15)]
        bins: usize,
        /// Bins with fewer samples are excluded from the ECE.
        #[arg(long, default_value_t = 10)]
        min_count: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("loading config {}", p.display())),
        None => ExperimentConfig::from_toml_with_overrides("", std::env::vars())
            .context("building default config"),
    }
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Load a checkpoint and insist its model dimensions match the config; the
/// protocol/diagnostic sections of the config are free to differ.
fn load_checkpoint_for(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.params.dims != cfg.model {
        bail!(
            "checkpoint {} was trained with different model dimensions than the config",
            path.display()
        );
    }
    Ok(ck)
}

fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_default_dataset(&cfg.data).context("generating dataset")
}

fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = dataset_for(cfg)?;
    save_dataset(&ds, out).context("persisting dataset")?;
    println!(
        "wrote {} instances (train {} / val {} / test {}) to {}",
        ds.instances.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, resume: &Option<PathBuf>) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let resumed = match resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let t0 = std::time::Instant::now();
    let mut save_intermediate = |ck: &Checkpoint| -> trimodal_core::Result<()> {
        ck.save(&out.join(format!("checkpoint-{:06}.bin", ck.step)))
    };
    let (final_ck, metrics) = pretrain(cfg, &ds, resumed.as_ref(), Some(&mut save_intermediate))
        .context("pretraining")?;
    let wall = t0.elapsed().as_secs_f64();

    let mut jsonl = std::io::BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    for m in &metrics {
        serde_json::to_writer(&mut jsonl, m)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    let ck_path = out.join("checkpoint.bin");
    final_ck.save(&ck_path).context("saving final checkpoint")?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let trend = loss_trend(&metrics, 20.min(metrics.len() / 2).max(1));
    write_json(
        &out.join("summary.json"),
        &json!({
            "steps": final_ck.step,
            "steps_run": metrics.len(),
            "config_hash": hex32(&final_ck.config_hash),
            "loss_first_window": trend.map(|t| t.0),
            "loss_last_window": trend.map(|t| t.1),
            "wall_seconds": wall,
            "checkpoint": ck_path.display().to_string(),
        }),
    )?;
    println!(
        "pretrained to step {} in {:.1}s; checkpoint at {}",
        final_ck.step,
        wall,
        ck_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    protocol: ProtocolArg,
    seeds: &[u64],
    random_baseline: bool,
) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let ck = load_checkpoint_for(cfg, checkpoint)?;
    let result = run_protocol(&ck.params, &ds, protocol.into(), seeds, cfg)?;

    let slug = protocol_slug(protocol);
    let mut w = csv::Writer::from_path(out.join(format!("eval_{slug}.csv")))?;
    w.write_record(["seed", "test_auc"])?;
    for (s, a) in seeds.iter().zip(&result.per_seed) {
        w.write_record([format!("{s}"), format!("{a:.6}")])?;
    }
    w.flush()?;

    let mut summary = json!({
        "protocol": slug,
        "checkpoint_step": ck.step,
        "seeds": seeds,
        "per_seed": result.per_seed,
        "mean": result.mean,
        "std": result.std,
        "warnings": result.warnings,
    });
    if random_baseline {
        let random = trimodal_core::train::random_params(cfg)?;
        let base = run_protocol(&random, &ds, protocol.into(), seeds, cfg)?;
        summary["random_baseline"] = json!({
            "per_seed": base.per_seed,
            "mean": base.mean,
            "std": base.std,
        });
    }
    write_json(&out.join(format!("eval_{slug}.json")), &summary)?;
    println!("{slug} AUC {:.4} ± {:.4} over {} seed(s)", result.mean, result.std, seeds.len());
    Ok(())
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    protocol: ProtocolArg,
    seeds: &[u64],
) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let grid = default_grid();
    let rows = ablate(cfg, &ds, &grid, protocol.into(), seeds)?;
    let file = fs::File::create(out.join("ablation.csv"))?;
    write_ablation_csv(&rows, file)?;
    write_json(&out.join("ablation.json"), &serde_json::to_value(&rows)?)?;
    for row in &rows {
        println!(
            "{:<36} {} AUC {:.4} ± {:.4}",
            row.cell.name,
            protocol_slug(protocol),
            row.result.mean,
            row.result.std
        );
    }
    Ok(())
}

fn cmd_sample_audit(cfg: &ExperimentConfig, out: &Path, batches: u64, step: u64) -> Result<()> {
    let ds = dataset_for(cfg)?;
    let vectors = ds.manifestations(&ds.split.train);
    let state = AnnealState::at(&cfg.maninneg, step);
    let audit = audit_distances(&vectors, &cfg.maninneg, &state, batches, cfg.seed)?;

    let mut w = csv::Writer::from_path(out.join("sample_audit.csv"))?;
    w.write_record(["distance", "empirical", "analytic"])?;
    for (i, d) in audit.distances.iter().enumerate() {
        w.write_record([
            format!("{d}"),
            format!("{}", audit.empirical[i]),
            format!("{}", audit.analytic[i]),
        ])?;
    }
    w.flush()?;
    write_json(
        &out.join("sample_audit.json"),
        &json!({
            "step": step,
            "mu": state.mu_current,
            "sigma": cfg.maninneg.sigma,
            "batches": batches,
            "total_draws": audit.total_draws,
            "tv_distance": audit.tv_distance,
        }),
    )?;
    println!(
        "audited {} draws at mu = {:.3}: TV(empirical, analytic) = {:.5}",
        audit.total_draws, state.mu_current, audit.tv_distance
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_diag(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    mut uniformity: bool,
    mut calibration: bool,
    mut retrieval: bool,
    permutations: usize,
    bins: usize,
    min_count: usize,
) -> Result<()> {
    if !(uniformity || calibration || retrieval) {
        uniformity = true;
        calibration = true;
        retrieval = true;
    }
    let ds = dataset_for(cfg)?;
    let ck = load_checkpoint_for(cfg, checkpoint)?;
    let mut report = json!({ "checkpoint_step": ck.step });

    if uniformity || retrieval {
        let test_inputs = ds.batch_inputs(&ds.split.test)?;
        let test_emb = embed_dataset(&ck.params, &test_inputs, EVAL_CHUNK)?;

        if uniformity {
            let n = test_emb.cc.rows;
            let d = test_emb.cc.cols;
            let mut stacked = Matrix::zeros(2 * n, d);
            stacked.data[..n * d].copy_from_slice(&test_emb.cc.data);
            stacked.data[n * d..].copy_from_slice(&test_emb.mlo.data);
            let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, n as u32 + i)).collect();
            let mut labels = ds.labels(&ds.split.test);
            labels.extend_from_slice(&labels.clone());
            let rep = alignment_uniformity(&stacked, &pairs, Some(&labels), &cfg.kde)
                .context("uniformity diagnostics (2-d representations required)")?;
            rep.write_angular_csv(&out.join("angular.csv"))?;
            rep.write_planar_csv(&out.join("planar.csv"))?;
            rep.write_alignment_csv(&out.join("alignment.csv"))?;
            let ratio = |dens: &[f64]| {
                let max = dens.iter().cloned().fold(f64::MIN, f64::max);
                let min = dens.iter().cloned().fold(f64::MAX, f64::min);
                max / min.max(1e-300)
            };
            report["uniformity"] = json!({
                "mean_pair_distance": rep.mean_pair_distance,
                "peak_angle": rep.angular.peak_angle,
                "angular_max_min_ratio": ratio(&rep.angular.density),
                "per_class_peaks": rep
                    .per_class
                    .iter()
                    .map(|(c, d)| json!({ "class": c, "peak_angle": d.peak_angle }))
                    .collect::<Vec<_>>(),
            });
        }

        if retrieval {
            let grades = ds.grades(&ds.split.test);
            let confusion = report_retrieve(&test_emb.cc, &grades, &test_emb.text, &grades)?;
            let file = fs::File::create(out.join("confusion.csv"))?;
            confusion.write_csv(file)?;
            let perm = retrieval_permutation_test(
                &test_emb.cc,
                &grades,
                &test_emb.text,
                &grades,
                permutations,
                cfg.seed,
            )?;
            let train_inputs = ds.batch_inputs(&ds.split.train)?;
            let train_emb = embed_dataset(&ck.params, &train_inputs, EVAL_CHUNK)?;
            let est = manifestation_metrics(
                &test_emb.cc,
                &ds.manifestations(&ds.split.test),
                &train_emb.cc,
                &ds.manifestations(&ds.split.train),
                &cfg.retrieval,
            )?;
            report["retrieval"] = json!({
                "diagonal_fraction": confusion.diagonal_fraction(),
                "permutation": serde_json::to_value(&perm)?,
                "manifestation_estimation": serde_json::to_value(&est)?,
            });
        }
    }

    if calibration {
        let feats = trimodal_core::train::split_features(&ck.params, &ds)?;
        let fit = linear_probe_fit(&feats.train.0, &feats.train.1, &cfg.lp)?;
        let probs = head_scores(&feats.test.0, &fit.w, fit.b);
        let correct: Vec<bool> = probs
            .iter()
            .zip(&feats.test.1)
            .map(|(&p, &y)| (p > 0.5) == (y == 1.0))
            .collect();
        let confidences: Vec<f64> = probs.iter().map(|&p| p.max(1.0 - p)).collect();
        let rel = ece(&confidences, &correct, bins, min_count)?;
        let file = fs::File::create(out.join("reliability.csv"))?;
        rel.write_csv(file)?;
        report["calibration"] = json!({
            "ece": rel.ece,
            "probe_test_auc": auc(&probs, &feats.test.1)?,
            "bins": bins,
            "min_count": min_count,
        });
    }

    write_json(&out.join("diag.json"), &report)?;
    println!("diagnostics written to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    let cfg = load_config(&cli.config)?;
    match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, &cli.out),
        Cmd::Pretrain { resume } => cmd_pretrain(&cfg, &cli.out, resume),
        Cmd::Eval { checkpoint, protocol, seeds, random_baseline } => {
            cmd_eval(&cfg, &cli.out, checkpoint, *protocol, seeds, *random_baseline)
        }
        Cmd::Ablate { protocol, seeds } => cmd_ablate(&cfg, &cli.out, *protocol, seeds),
        Cmd::SampleAudit { batches, step } => cmd_sample_audit(&cfg, &cli.out, *batches, *step),
        Cmd::Diag {
            checkpoint,
            uniformity,
            calibration,
            retrieval,
            permutations,
            bins,
            min_count,
        } => cmd_diag(
            &cfg,
            &cli.out,
            checkpoint,
            *uniformity,
            *calibration,
            *retrieval,
            *permutations,
            *bins,
            *min_count,
        ),
    }
}
