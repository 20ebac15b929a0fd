use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use geoalign_core::autodiff::Tensor;
use geoalign_core::config::RunConfig;
use geoalign_core::datagen::{gen_dataset, read_dataset, write_dataset, Dataset, TripleRecord, WorldModel};
use geoalign_core::evalkit::{
    concat_features, embed_split, fit_probe, geo_aware_predict, heatmap_inr, heatmap_loc, retrieval_metrics,
    write_csv, write_pgm, GridSpec, HeatmapGrid, Labels, ProbeConfig, ProbeKind, ProbeResult, Report,
};
use geoalign_core::gradaudit::{run_audit, AuditOptions};
use geoalign_core::model::Model;
use geoalign_core::training::{train_split, Checkpoint, StepMetrics, Trainer};
use geoalign_core::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Synthetic geo-aligned contrastive pretraining.
#[derive(Parser)]
#[command(name = "geoalign", version)]
struct Cli {
    /// JSON file with RunConfig fields; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (directory with manifest.json and records.bin).
    GenData(GenDataArgs),
    /// Pretrain the three encoders and the implicit decoder.
    Pretrain(PretrainArgs),
    /// Retrieval and probing metrics for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Similarity heatmap for one sample, written as PGM and CSV.
    Heatmap(HeatmapArgs),
    /// Finite-difference audit of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Continue from a checkpoint; its stored config wins over flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    bank_capacity: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Disable temporal and flip augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeArg {
    Linear,
    Nonlinear,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Probe heads to fit on the street-view embeddings (repeatable).
    #[arg(long, value_enum, default_values_t = [ProbeArg::Linear])]
    probe: Vec<ProbeArg>,
    /// Also probe a randomly initialized encoder with the same budget.
    #[arg(long)]
    baseline: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeatmapMode {
    Loc,
    Inr,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Record index in the dataset.
    #[arg(long)]
    index: usize,
    #[arg(long, value_enum, default_value_t = HeatmapMode::Loc)]
    mode: HeatmapMode,
    /// Cell size in degrees.
    #[arg(long, default_value_t = 0.01)]
    resolution: f64,
    /// Cells on each side of the center (loc mode).
    #[arg(long)]
    half: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, message: impl Into<String>) -> anyhow::Error {
    anyhow!(Exit {
        code,
        message: message.into(),
    })
}

fn code_for(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Index { .. } | Error::EmptyBatch) => EXIT_USAGE,
        Some(Error::Format { .. } | Error::Version { .. } | Error::Io { .. } | Error::Json(_)) => EXIT_DATA,
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        _ => EXIT_CHECK,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code_for(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GAIR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("GAIR_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| exit(EXIT_USAGE, format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a, out.unwrap_or_else(|| "data".into())),
        Command::Pretrain(a) => pretrain(cfg, a, out.unwrap_or_else(|| "run".into())),
        Command::Evaluate(a) => evaluate(a, out.unwrap_or_else(|| "report.json".into())),
        Command::Heatmap(a) => heatmap(a, out.unwrap_or_else(|| "heatmap".into())),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn validated(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|e| exit(EXIT_USAGE, e.to_string()))
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs, out: PathBuf) -> Result<u8> {
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if cfg.count == 0 {
        return Err(exit(EXIT_USAGE, "--count must be at least 1"));
    }
    validated(&cfg)?;
    let world = WorldModel::generate(cfg.world())?;
    let records = gen_dataset(&world)?;
    let manifest = write_dataset(&world, &records, &out)
        .map_err(|e| exit(EXIT_USAGE, format!("cannot write dataset to {}: {e}", out.display())))?;
    write_config(&out.join("config.json"), &cfg).map_err(|e| exit(EXIT_USAGE, format!("{e:#}")))?;
    let positive = records.iter().filter(|r| r.label_class == 1).count();
    let [lo0, lo1, la0, la1] = cfg.region_deg;
    println!(
        "{}",
        json!({
            "manifest": manifest,
            "count": records.len(),
            "seed": cfg.seed,
            "config_hash": cfg.hash_hex(),
            "region_deg": [lo0, lo1, la0, la1],
            "positive_labels": positive,
        })
    );
    Ok(0)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| exit(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| exit(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn check_dataset_matches(cfg: &RunConfig, ds: &Dataset, code: u8) -> Result<()> {
    let mut expected = cfg.world();
    expected.count = ds.manifest.world.config.count;
    if ds.manifest.world.config != expected {
        return Err(exit(
            code,
            "dataset was generated with a different world configuration; pass the same --config and --seed",
        ));
    }
    if ds.records.len() <= cfg.holdout {
        return Err(exit(code, format!("dataset has {} records, holdout is {}", ds.records.len(), cfg.holdout)));
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &PretrainArgs) {
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(epochs, batch_size, lr, beta1, beta2, weight_decay, warmup, lambda, tau, bank_capacity, checkpoint_every);
    if a.no_augment {
        cfg.augment = false;
    }
}

fn pretrain(mut cfg: RunConfig, a: PretrainArgs, out: PathBuf) -> Result<u8> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    match &resume {
        Some(c) => cfg = c.config.clone(),
        None => {
            apply_train_flags(&mut cfg, &a);
            validated(&cfg)?;
        }
    }
    let ds = load_dataset(&a.data)?;
    check_dataset_matches(&cfg, &ds, EXIT_DATA)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_config(&out.join("config.json"), &cfg)?;

    let mut trainer = match resume {
        Some(c) => Trainer::from_checkpoint(c, &ds.records)?,
        None => Trainer::new(cfg.clone(), &ds.records)?,
    };
    let total = trainer.total_steps();
    let until = a.max_steps.map_or(total, |m| m.min(total));
    eprintln!(
        "training from step {} to {until} of {total} ({} steps per epoch)",
        trainer.step,
        trainer.steps_per_epoch()
    );
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(trainer.step > 0)
            .write(true)
            .truncate(trainer.step == 0)
            .open(&metrics_path)
            .with_context(|| format!("opening {}", metrics_path.display()))?,
    );
    let every = cfg.checkpoint_every;
    let spe = trainer.steps_per_epoch();
    let result = trainer.run(until, |t, m: &StepMetrics| {
        writeln!(metrics, "{}", serde_json::to_string(m)?).map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if (m.step + 1) % spe == 0 {
            eprintln!(
                "epoch {} step {} incl {:.4} secl {:.4} grad_norm {:.3}",
                (m.step + 1) / spe,
                m.step + 1,
                m.incl,
                m.secl,
                m.grad_norm
            );
        }
        if every > 0 && t.step % every == 0 {
            t.checkpoint().save(&out.join(format!("step-{:08}.ckpt", t.step)))?;
        }
        Ok(())
    });
    metrics.flush()?;
    match result {
        Ok(()) => {
            let path = out.join("final.ckpt");
            trainer.checkpoint().save(&path)?;
            println!("{}", json!({ "checkpoint": path, "step": trainer.step, "config_hash": cfg.hash_hex() }));
            Ok(0)
        }
        Err(Error::Numeric(msg)) => {
            // The failing step never reached the optimizer, so the trainer
            // still holds the last good state.
            let path = out.join("last-good.ckpt");
            trainer.checkpoint().save(&path)?;
            Err(exit(
                EXIT_NUMERIC,
                format!("diverged at step {}: {msg}; last good state saved to {}", trainer.step, path.display()),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn class_labels(records: &[TripleRecord], idx: &[usize]) -> Labels {
    Labels::Class {
        labels: idx.iter().map(|&i| records[i].label_class as usize).collect(),
        classes: 2,
    }
}

fn probe_kind(p: ProbeArg) -> (ProbeKind, &'static str) {
    match p {
        ProbeArg::Linear => (ProbeKind::Linear, "linear"),
        ProbeArg::Nonlinear => (ProbeKind::Nonlinear, "nonlinear"),
    }
}

fn log_probs(res: &ProbeResult, x: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    (0..x.rows())
        .map(|i| {
            let s = res.head.predict(x.row(i))?;
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = s.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            Ok(s.iter().map(|v| v - z).collect())
        })
        .collect()
}

fn evaluate(a: EvaluateArgs, out: PathBuf) -> Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.config.clone();
    let ds = load_dataset(&a.data)?;
    check_dataset_matches(&cfg, &ds, EXIT_DATA)?;
    let recs = &ds.records;
    let (model, store) = ckpt.restore_model()?;
    let (train, hold) = train_split(recs.len(), cfg.holdout)?;
    let tr = embed_split(&model, &store, recs, &train)?;
    let te = embed_split(&model, &store, recs, &hold)?;
    let mut report = Report::new(&cfg);
    report.push("meta", "train", "step", ckpt.step as f64);

    let truth: Vec<usize> = (0..hold.len()).collect();
    let r = retrieval_metrics(&te.s, &te.z, &truth, &[1, 5, 10])?;
    for (k, v) in &r.recall {
        report.push("retrieval_sv_to_rs", "holdout", &format!("recall@{k}"), *v);
    }
    report.push("retrieval_sv_to_rs", "holdout", "median_rank", r.median_rank);
    report.push("retrieval_sv_to_rs", "holdout", "chance@1", 1.0 / hold.len() as f64);

    let pcfg = ProbeConfig {
        steps: cfg.probe_steps,
        lr: cfg.probe_lr,
        hidden: cfg.probe_hidden,
        weight_decay: 0.0,
        seed: cfg.seed,
    };
    let (ytr, yte) = (class_labels(recs, &train), class_labels(recs, &hold));
    let random = if a.baseline {
        let (m, s) = Model::init::<f32>(cfg.model(), cfg.seed)?;
        Some((
            embed_split(&m, &s, recs, &train)?,
            embed_split(&m, &s, recs, &hold)?,
        ))
    } else {
        None
    };
    let mut kinds = a.probe.clone();
    kinds.dedup();
    for p in kinds {
        let (kind, name) = probe_kind(p);
        let res = fit_probe(&tr.s, &ytr, &te.s, &yte, kind, &pcfg)?;
        report.push(&format!("probe_{name}_field_sign"), "holdout", res.metric, res.value);
        if let Some((rtr, rte)) = &random {
            let base = fit_probe(&rtr.s, &ytr, &rte.s, &yte, kind, &pcfg)?;
            report.push(&format!("probe_{name}_field_sign_random_init"), "holdout", base.metric, base.value);
        }
    }

    // Geo-aware classification: image and location probes fused by adding log-probabilities.
    let img = fit_probe(&tr.s, &ytr, &te.s, &yte, ProbeKind::Linear, &pcfg)?;
    let loc = fit_probe(&tr.e, &ytr, &te.e, &yte, ProbeKind::Linear, &pcfg)?;
    let (lpi, lpl) = (log_probs(&img, &te.s)?, log_probs(&loc, &te.e)?);
    let Labels::Class { labels, .. } = &yte else { unreachable!() };
    let mut hits = 0;
    for i in 0..hold.len() {
        hits += (geo_aware_predict(&lpi[i], &lpl[i])?.argmax == labels[i]) as usize;
    }
    report.push("geo_aware_classification", "holdout", "accuracy_image_only", img.value);
    report.push("geo_aware_classification", "holdout", "accuracy_fused", hits as f64 / hold.len() as f64);

    // Geo-aware regression of the field value.
    let value = |idx: &[usize]| Labels::Value(idx.iter().map(|&i| recs[i].label_reg).collect());
    let only = fit_probe(&tr.s, &value(&train), &te.s, &value(&hold), ProbeKind::Linear, &pcfg)?;
    let fused = fit_probe(
        &concat_features(&tr.s, &tr.e)?,
        &value(&train),
        &concat_features(&te.s, &te.e)?,
        &value(&hold),
        ProbeKind::Linear,
        &pcfg,
    )?;
    report.push("geo_regression", "holdout", "rmse_image_only", only.value);
    report.push("geo_regression", "holdout", "rmse_concat", fused.value);

    let text = report.to_json();
    fs::write(&out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    println!("{text}");
    Ok(0)
}

fn heatmap(a: HeatmapArgs, out: PathBuf) -> Result<u8> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.config.clone();
    let ds = load_dataset(&a.data)?;
    check_dataset_matches(&cfg, &ds, EXIT_DATA)?;
    if a.index >= ds.records.len() {
        return Err(exit(
            EXIT_USAGE,
            format!("--index {} out of range for {} records", a.index, ds.records.len()),
        ));
    }
    if !(a.resolution > 0.0) {
        return Err(exit(EXIT_USAGE, "--resolution must be positive"));
    }
    let (model, store) = ckpt.restore_model()?;
    let rec = &ds.records[a.index];
    let emb = embed_split(&model, &store, &ds.records, &[a.index])?;
    let sv = emb.s.row(0);
    let grid: HeatmapGrid = match a.mode {
        HeatmapMode::Loc => {
            let spec = GridSpec {
                center: rec.loc,
                resolution_deg: a.resolution,
                half: a.half.unwrap_or(cfg.heatmap_half),
            };
            heatmap_loc(&model, &store, sv, &spec)?
        }
        HeatmapMode::Inr => {
            let [_, c, h, w] = <[usize; 4]>::try_from(rec.rs.shape()).expect("rank 4");
            let rs = Tensor::new(vec![1, c, h, w], rec.rs.data()[..c * h * w].to_vec())?;
            heatmap_inr(&model, &store, &rs, &rec.footprint, sv, a.resolution)?
        }
    };
    let with_ext = |ext: &str| {
        let mut p = out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (pgm, csv, meta) = (with_ext(".pgm"), with_ext(".csv"), with_ext(".json"));
    write_pgm(&pgm, &grid)?;
    write_csv(&csv, &grid)?;
    let (i, j) = grid.argmax();
    let peak = grid.cell_point(i, j)?;
    let truth = grid.cell_of(rec.loc);
    let summary = json!({
        "mode": match a.mode { HeatmapMode::Loc => "loc", HeatmapMode::Inr => "inr" },
        "index": a.index,
        "rows": grid.rows,
        "cols": grid.cols,
        "resolution_deg": grid.resolution_deg,
        "origin_deg": [grid.origin_lon, grid.origin_lat],
        "argmax_cell": [i, j],
        "argmax_deg": [peak.lon_deg(), peak.lat_deg()],
        "argmax_value": grid.get(i, j),
        "true_cell": truth,
        "true_deg": [rec.loc.lon_deg(), rec.loc.lat_deg()],
        "pgm": pgm,
        "csv": csv,
        "config_hash": cfg.hash_hex(),
        "config": cfg,
    });
    fs::write(&meta, serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "argmax cell ({i}, {j}) at lon {:.5} lat {:.5}, value {:.4}; true location lon {:.5} lat {:.5}",
        peak.lon_deg(),
        peak.lat_deg(),
        grid.get(i, j),
        rec.loc.lon_deg(),
        rec.loc.lat_deg()
    );
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    if a.instances == 0 {
        return Err(exit(EXIT_USAGE, "--instances must be at least 1"));
    }
    let opts = AuditOptions {
        instances: a.instances,
        inject_fault: a.inject_fault,
        ..AuditOptions::default()
    };
    let reports = run_audit(&opts)?;
    println!("{:<20} {:>14} {:>10} {:>8}  result", "check", "max_rel_err", "tolerance", "coords");
    for r in &reports {
        println!(
            "{:<20} {:>14.3e} {:>10.0e} {:>8}  {}",
            r.op_name,
            r.max_relative_error,
            r.tolerance,
            r.coords_checked,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { 0 } else { EXIT_CHECK })
}
