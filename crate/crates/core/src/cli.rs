//! Command-line entry point.
//!
//! Every stage reads its inputs from and writes its artifacts to the output
//! directory, so stages can run in separate processes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{
    frm_checkpoint, frm_from_checkpoint, headed_checkpoint, headed_from_checkpoint, load_checkpoint, save_checkpoint,
};
use crate::config::{load_config, output_path, write_atomic, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::labels::{Liveness, PaiSpecies};
use crate::metrics::evaluate;
use crate::pipeline::{
    ablate_layers, benchmark, evaluate_joint, train_frm, train_pad, train_unified, BenchReport, FrmModel,
    HeadedModel, Thresholds, Topology, TrainedSystem,
};
use crate::scores::{read_scores, write_scores};
use crate::synth::{build_dataset, make_identity, render_impression, DatasetSplit, GeneratorConfig};
use crate::vit::{BackboneParams, ModelConfig};

pub const DATA_DIR: &str = "data";
pub const FRM_CKPT: &str = "frm.ckpt";
pub const PAD_CKPT: &str = "pad.ckpt";
pub const UNIFIED_CKPT: &str = "unified.ckpt";

#[derive(Parser, Debug)]
#[command(name = "vitu", version, about = "Unified fingerprint recognition and presentation attack detection")]
struct Cli {
    /// Run config (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and the VITU_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to <out>/data.
    GenData,
    /// Train the recognition model on <out>/data.
    TrainFrm,
    /// Train the PAD model from the recognition checkpoint.
    TrainPad,
    /// Train the unified model with the recognition model as teacher.
    TrainUnified,
    /// Score the test split with one deployment topology.
    Eval {
        #[arg(long, value_enum)]
        topology: TopologyArg,
    },
    /// APCER of every PAD head at the configured BPCER.
    Ablate {
        #[arg(long, value_enum, default_value_t = ModelArg::Pad)]
        model: ModelArg,
    },
    /// Parameter counts and single-probe latency of both topologies.
    Bench {
        /// Timed runs per topology.
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Benchmark the full-size architecture instead of the configured one.
        #[arg(long)]
        full: bool,
    },
    /// Compute every metric from a score CSV.
    Metrics {
        #[arg(long)]
        scores: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TopologyArg {
    Sequential,
    Unified,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Pad,
    Unified,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Sequential => Topology::Sequential,
            TopologyArg::Unified => Topology::Unified,
        }
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// usage or validation error, 2 on a runtime failure.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() { 1 } else { 2 }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed(cli.seed, env.as_deref())?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let cfg = resolve_config(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::TrainFrm => {
            let data = load_data(&out)?;
            let trained = train_frm(&cfg.model, &data.train, &cfg.train_config())?;
            save_checkpoint(&frm_checkpoint(&cfg.model, &trained.model), &output_path(&out, FRM_CKPT)?)?;
            write_report(&out, "train_frm.json", &cfg, &serde_json::json!({ "losses": trained.losses }))?;
            Ok(format!(
                "train-frm: {} epochs, final loss {:.4} -> {}",
                trained.losses.len(),
                trained.losses.last().copied().unwrap_or(f64::NAN),
                out.join(FRM_CKPT).display()
            ))
        }
        Command::TrainPad => {
            let data = load_data(&out)?;
            let frm = load_frm(&cfg, &out)?;
            let trained = train_pad(&cfg.model, &data.train, &frm, &cfg.train_config())?;
            let meta = serde_json::json!({ "pad_layer": cfg.pad_layer() });
            save_checkpoint(&headed_checkpoint(&cfg.model, "pad", &trained.model, meta), &output_path(&out, PAD_CKPT)?)?;
            write_report(&out, "train_pad.json", &cfg, &serde_json::json!({ "losses": trained.losses }))?;
            Ok(format!(
                "train-pad: {} epochs, final loss {:.4} -> {}",
                trained.losses.len(),
                trained.losses.last().copied().unwrap_or(f64::NAN),
                out.join(PAD_CKPT).display()
            ))
        }
        Command::TrainUnified => {
            let data = load_data(&out)?;
            let frm = load_frm(&cfg, &out)?;
            let trained = train_unified(&cfg.model, &data.train, Some(&frm), &cfg.train_config())?;
            let meta = serde_json::json!({ "pad_layer": cfg.pad_layer() });
            save_checkpoint(
                &headed_checkpoint(&cfg.model, "unified", &trained.model, meta),
                &output_path(&out, UNIFIED_CKPT)?,
            )?;
            write_report(&out, "train_unified.json", &cfg, &serde_json::json!({ "losses": trained.losses }))?;
            Ok(format!(
                "train-unified: {} epochs, final loss {:.4} -> {}",
                trained.losses.len(),
                trained.losses.last().copied().unwrap_or(f64::NAN),
                out.join(UNIFIED_CKPT).display()
            ))
        }
        Command::Eval { topology } => {
            let topology = Topology::from(topology);
            let data = load_data(&out)?;
            let system = load_system(&cfg, &out, topology)?;
            let (report, records) = evaluate_joint(&system, &data.test, &cfg.metrics)?;
            let name = match topology {
                Topology::Sequential => "sequential",
                Topology::Unified => "unified",
            };
            write_scores(&records, &output_path(&out, &format!("eval_{name}/scores.csv"))?)?;
            write_report(&out, &format!("eval_{name}/report.json"), &cfg, &report)?;
            Ok(format!(
                "eval {name}: {} records, TAR@FMR {:.2}%, ACER {:.2}%, IAPMR {:.2}%, IM {:.2}%",
                records.len(),
                report.tar_at_far,
                report.acer,
                report.iapmr_avg,
                report.im_accuracy
            ))
        }
        Command::Ablate { model } => {
            let data = load_data(&out)?;
            let (kind, file) = match model {
                ModelArg::Pad => ("pad", PAD_CKPT),
                ModelArg::Unified => ("unified", UNIFIED_CKPT),
            };
            let headed = load_headed(&cfg, &out, kind, file)?;
            let table = ablate_layers(&headed, &cfg.model, &data.test, cfg.ablation_bpcer)?;
            let mut csv = String::from("layer,apcer,threshold\n");
            for r in &table.rows {
                csv.push_str(&format!("{},{},{}\n", r.layer, r.apcer, r.threshold));
            }
            write_atomic(&output_path(&out, &format!("ablation_{kind}.csv"))?, csv.as_bytes())?;
            write_report(&out, &format!("ablation_{kind}.json"), &cfg, &table)?;
            Ok(format!(
                "ablate {kind}: {} layers, best layer {} (APCER {:.2}% at BPCER {}%)",
                table.rows.len(),
                table.best_layer,
                table.rows[table.best_layer - 1].apcer,
                cfg.ablation_bpcer
            ))
        }
        Command::Bench { runs, full } => {
            let model = if full { ModelConfig::full() } else { cfg.model.clone() };
            let result = bench_topologies(&model, runs, cfg.seed())?;
            write_report(&out, "bench.json", &cfg, &result)?;
            Ok(format!(
                "bench: params {} vs {} (ratio {:.3}), median latency {:.3} ms vs {:.3} ms (ratio {:.3})",
                result.unified.params_total,
                result.sequential.params_total,
                result.param_ratio,
                result.unified.median_latency_ms,
                result.sequential.median_latency_ms,
                result.latency_ratio
            ))
        }
        Command::Metrics { scores } => {
            let records = read_scores(&scores)?;
            let report = evaluate(&records, &cfg.metrics)?;
            write_report(&out, "metrics.json", &cfg, &report)?;
            Ok(serde_json::to_string(&report)?)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let split = build_dataset(&cfg.data, cfg.seed())?;
    let dir = output_path(out, DATA_DIR)?;
    split.export(&dir)?;
    write_report(out, "data/config.json", cfg, &serde_json::json!({
        "train_samples": split.train.len(),
        "test_samples": split.test.len(),
        "train_identities": split.train_identities,
        "test_identities": split.test_identities,
    }))?;
    Ok(format!(
        "gen-data: {} train / {} test samples ({} / {} identities) -> {}",
        split.train.len(),
        split.test.len(),
        split.train_identities.len(),
        split.test_identities.len(),
        dir.display()
    ))
}

fn load_data(out: &Path) -> Result<DatasetSplit> {
    let dir = output_path(out, DATA_DIR)?;
    if !dir.join("train").join("manifest.csv").exists() {
        return Err(Error::invalid(format!("no dataset in {}; run gen-data first", dir.display())));
    }
    DatasetSplit::import(&dir)
}

fn check_model(cfg: &RunConfig, found: &ModelConfig, file: &str) -> Result<()> {
    if found != &cfg.model {
        return Err(Error::invalid(format!("{file} was trained with a different model config")));
    }
    Ok(())
}

fn load_frm(cfg: &RunConfig, out: &Path) -> Result<FrmModel> {
    let path = output_path(out, FRM_CKPT)?;
    if !path.exists() {
        return Err(Error::invalid(format!("{} not found; run train-frm first", path.display())));
    }
    let ckpt = load_checkpoint(&path)?;
    check_model(cfg, &ckpt.model, FRM_CKPT)?;
    frm_from_checkpoint(&ckpt)
}

fn load_headed(cfg: &RunConfig, out: &Path, kind: &str, file: &str) -> Result<HeadedModel> {
    let path = output_path(out, file)?;
    if !path.exists() {
        return Err(Error::invalid(format!("{} not found; run train-{kind} first", path.display())));
    }
    let ckpt = load_checkpoint(&path)?;
    check_model(cfg, &ckpt.model, file)?;
    headed_from_checkpoint(&ckpt, kind)
}

/// Rebuilds a deployable system from checkpoints on disk.
pub fn load_system(cfg: &RunConfig, out: &Path, topology: Topology) -> Result<TrainedSystem> {
    let mut system = match topology {
        Topology::Sequential => TrainedSystem::sequential(
            cfg.model.clone(),
            load_frm(cfg, out)?,
            load_headed(cfg, out, "pad", PAD_CKPT)?,
            cfg.pad_layer(),
        )?,
        Topology::Unified => {
            TrainedSystem::unified(cfg.model.clone(), load_headed(cfg, out, "unified", UNIFIED_CKPT)?, cfg.pad_layer())?
        }
    };
    system.pad_ensemble = cfg.pad_ensemble;
    if let (Some(pad), Some(matching)) = (cfg.metrics.pad_threshold, cfg.metrics.match_threshold) {
        system.thresholds = Some(Thresholds { pad, matching });
    }
    Ok(system)
}

#[derive(Debug, Serialize)]
pub struct BenchComparison {
    pub model: ModelConfig,
    pub sequential: BenchReport,
    pub unified: BenchReport,
    pub param_ratio: f64,
    pub latency_ratio: f64,
}

/// Benchmarks freshly initialized systems; latency and parameter counts
/// do not depend on the weight values.
pub fn bench_topologies(model: &ModelConfig, runs: usize, seed: u64) -> Result<BenchComparison> {
    model.validate()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let backbone = BackboneParams::init(model, &mut rng);
    let heads = crate::heads::PadHeadParams::init(model, &mut rng);
    let frm = FrmModel { backbone: backbone.clone(), arcface: crate::heads::ArcFaceParams::init(model, &mut rng) };
    let headed = HeadedModel { backbone, heads };
    let layer = model.default_pad_layer();
    let seq = TrainedSystem::sequential(model.clone(), frm, headed.clone(), layer)?;
    let uni = TrainedSystem::unified(model.clone(), headed, layer)?;
    let generator = GeneratorConfig { image_size: model.image_size, ..GeneratorConfig::default() };
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let probe = render_impression(&make_identity(0, seed), Liveness::BonaFide, PaiSpecies::None, 0, &generator, &mut r)?;
    let probe: Image = probe.image.replicate_channels(model.channels);
    let sequential = benchmark(&seq, &probe, runs)?;
    let unified = benchmark(&uni, &probe, runs)?;
    Ok(BenchComparison {
        model: model.clone(),
        param_ratio: unified.params_total as f64 / sequential.params_total as f64,
        latency_ratio: unified.median_latency_ms / sequential.median_latency_ms,
        sequential,
        unified,
    })
}

fn write_report<R: Serialize>(out: &Path, name: &str, cfg: &RunConfig, result: &R) -> Result<()> {
    let doc = serde_json::json!({ "config": cfg, "result": result });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&output_path(out, name)?, text.as_bytes())
}
