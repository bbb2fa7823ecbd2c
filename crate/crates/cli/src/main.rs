use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use priormap_core::params::ParamSet;
use priormap_core::pipeline::{self, streams};
use priormap_core::synth::{load_dataset, load_manifest, write_dataset};
use priormap_core::train::{log_header, log_row};
use priormap_core::{Error, Model, PriorBank, PriorMode, RunConfig, Scene, Variant};

#[derive(Parser)]
#[command(name = "priormap", version, about = "Prior-anchored map decoding on synthetic scenes")]
struct Cli {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval scene sets.
    GenData,
    /// Cluster the training elements and write the prior bank.
    FitPriors,
    /// Train a decoder.
    Train {
        #[arg(long, value_name = "prior|random")]
        prior_mode: Option<PriorMode>,
    },
    /// Score a trained decoder on the eval scenes.
    Eval {
        #[arg(long, value_name = "prior|random")]
        prior_mode: Option<PriorMode>,
    },
    /// Collect matching-stability series of every trained mode.
    StabilityReport,
    /// Time the cross-attention variants.
    BenchAttn {
        /// Variant to time; repeat for several.
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<Variant>,
        #[arg(long)]
        repeats: Option<usize>,
        /// CSV destination instead of `<out_dir>/bench/bench.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Io { .. } | Error::Parse { .. }) => 3,
        Some(Error::Divergence { .. } | Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::FitPriors => fit_priors(&cfg),
        Command::Train { prior_mode } => {
            if let Some(m) = prior_mode {
                cfg.train.prior_mode = m;
            }
            train(&cfg)
        }
        Command::Eval { prior_mode } => {
            if let Some(m) = prior_mode {
                cfg.train.prior_mode = m;
            }
            eval(&cfg)
        }
        Command::StabilityReport => stability_report(&cfg),
        Command::BenchAttn { variants, repeats, out } => {
            if !variants.is_empty() {
                cfg.bench.variants = variants;
            }
            if let Some(r) = repeats {
                cfg.bench.repeats = r;
            }
            cfg.validate()?;
            bench_attn(&cfg, out.as_deref())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    for (split, count, stream) in
        [("train", cfg.data.train_count, streams::TRAIN_DATA), ("eval", cfg.data.eval_count, streams::EVAL_DATA)]
    {
        let dir = cfg.data_dir(split);
        let m = write_dataset(&dir, &cfg.scene, count, cfg.stream_seed(stream))?;
        info!("{split}: {count} scenes in {} (fingerprint {})", dir.display(), m.fingerprint());
    }
    cfg.write_snapshot(&cfg.out_dir.join("data"))?;
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<(String, Vec<Scene>)> {
    let dir = cfg.data_dir(split);
    let (manifest, scenes) = load_dataset(&dir)
        .with_context(|| format!("loading {split} scenes from {} (run gen-data first)", dir.display()))?;
    Ok((manifest.fingerprint(), scenes))
}

fn fit_priors(cfg: &RunConfig) -> Result<()> {
    let (fingerprint, scenes) = load_split(cfg, "train")?;
    let (bank, fit) = pipeline::fit_priors(&scenes, &fingerprint, cfg)?;
    let path = cfg.priors_path();
    let dir = path.parent().expect("priors path has a directory");
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    bank.save(&path)?;
    write_json(
        &dir.join("clusters.json"),
        &json!({
            "iterations": fit.iterations,
            "converged": fit.converged,
            "objective": fit.objective,
            "clusters": fit.clusters,
        }),
    )?;
    cfg.write_snapshot(dir)?;
    info!("{} priors from k={} in {} iterations -> {}", bank.n_pri, cfg.prior.k, fit.iterations, path.display());
    Ok(())
}

/// The prior bank when `mode` needs one, warning when it was not fit on
/// this run's training split.
fn load_bank(cfg: &RunConfig, mode: PriorMode) -> Result<Option<PriorBank>> {
    if mode == PriorMode::Random {
        return Ok(None);
    }
    let path = cfg.priors_path();
    let bank = PriorBank::load(&path).with_context(|| format!("loading {} (run fit-priors first)", path.display()))?;
    if let Ok(m) = load_manifest(&cfg.data_dir("train")) {
        if let Some(w) = bank.fingerprint_warning(&m.fingerprint()) {
            warn!("{w}");
        }
    }
    Ok(Some(bank))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let mode = cfg.train.prior_mode;
    let (_, scenes) = load_split(cfg, "train")?;
    let bank = load_bank(cfg, mode)?;
    let samples = pipeline::prepare_samples(&scenes, cfg)?;
    let every = (cfg.train.steps / 10).max(1);
    let out = pipeline::train_model(cfg, bank.as_ref(), &samples, |r| {
        if (r.step + 1) % every == 0 {
            info!("step {}: loss {:.4}, u_t {:.3}", r.step + 1, r.loss.total, r.stability.u_t);
        }
    })?;
    let dir = cfg.train_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    out.model.params.save(&dir.join("params.json"))?;
    let mut csv = log_header(cfg.decoder.layers);
    csv.push('\n');
    for r in &out.log {
        csv.push_str(&log_row(r));
        csv.push('\n');
    }
    write(&dir.join("log.csv"), &csv)?;
    write_json(&dir.join("stability.json"), &out.summary)?;
    if cfg.train.trace_assignments {
        let traces: Vec<_> = out.log.iter().map(|r| &r.assignments).collect();
        write_json(&dir.join("assignments.json"), &traces)?;
    }
    cfg.write_snapshot(&dir)?;
    info!(
        "{mode}: final u_t {:.4} over the last {} steps -> {}",
        out.summary.final_u_t,
        out.summary.window_steps,
        dir.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, mode: PriorMode) -> Result<Model> {
    let path = cfg.out_dir.join(format!("train-{mode}")).join("params.json");
    let params = ParamSet::load(&path)
        .with_context(|| format!("loading {} (run train --prior-mode {mode} first)", path.display()))?;
    Ok(Model::from_params(cfg.decoder, mode, params)?)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let mode = cfg.train.prior_mode;
    let (_, scenes) = load_split(cfg, "eval")?;
    let bank = load_bank(cfg, mode)?;
    let model = load_model(cfg, mode)?;
    let samples = pipeline::prepare_samples(&scenes, cfg)?;
    let report = pipeline::evaluate_model(&model, bank.as_ref(), &samples, &scenes, cfg)?;
    let dir = cfg.out_dir.join(format!("eval-{mode}"));
    report.save(&dir, "report")?;
    cfg.write_snapshot(&dir)?;
    info!("{mode}: mAP {:.4} on {} scenes -> {}", report.map, report.num_scenes, dir.display());
    Ok(())
}

/// `u_t` and per-layer `u` columns of a training log.
fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty training log")?.split(',').collect();
    let ut = header.iter().position(|h| *h == "u_t").context("training log lacks a u_t column")?;
    let layers: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("u_layer")).collect();
    let mut u_t = Vec::new();
    let mut per_layer = vec![Vec::new(); layers.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            cells
                .get(i)
                .and_then(|c| c.parse().ok())
                .with_context(|| format!("{} row {}: bad column {}", path.display(), n + 2, header[i]))
        };
        u_t.push(num(ut)?);
        for (s, &i) in per_layer.iter_mut().zip(&layers) {
            s.push(num(i)?);
        }
    }
    Ok((u_t, per_layer))
}

fn stability_report(cfg: &RunConfig) -> Result<()> {
    let eval_split = if cfg.data_dir("eval").exists() { Some(load_split(cfg, "eval")?) } else { None };
    let mut runs = Vec::new();
    let mut finals = Vec::new();
    for mode in [PriorMode::Prior, PriorMode::Random] {
        let dir = cfg.out_dir.join(format!("train-{mode}"));
        let log = dir.join("log.csv");
        if !log.exists() {
            continue;
        }
        let (u_t, u_per_layer) = read_series(&log)?;
        let summary_path = dir.join("stability.json");
        let summary: Value = serde_json::from_str(
            &fs::read_to_string(&summary_path)
                .map_err(|e| Error::Io { path: summary_path.display().to_string(), source: e })?,
        )
        .with_context(|| format!("parsing {}", summary_path.display()))?;
        let validation = match &eval_split {
            Some((_, scenes)) => {
                let bank = load_bank(cfg, mode)?;
                let model = load_model(cfg, mode)?;
                let samples = pipeline::prepare_samples(scenes, cfg)?;
                Some(pipeline::validation_stability(&model, bank.as_ref(), &samples, cfg)?.pooled)
            }
            None => None,
        };
        finals.push((mode, summary["final_u_t"].as_f64()));
        runs.push(json!({
            "prior_mode": mode,
            "summary": summary,
            "u_t_series": u_t,
            "u_per_layer_series": u_per_layer,
            "validation": validation,
        }));
    }
    if runs.is_empty() {
        bail!(Error::Config(format!(
            "no training logs under {}/train-{{prior,random}} (run train first)",
            cfg.out_dir.display()
        )));
    }
    let comparison = match finals.as_slice() {
        [(_, Some(p)), (_, Some(r))] => {
            json!({ "final_u_t_prior": p, "final_u_t_random": r, "random_minus_prior": r - p })
        }
        _ => Value::Null,
    };
    let dir = cfg.out_dir.join("stability");
    write_json(&dir.join("report.json"), &json!({ "runs": runs, "comparison": comparison }))?;
    cfg.write_snapshot(&dir)?;
    info!("stability report for {} run(s) -> {}", runs.len(), dir.display());
    Ok(())
}

fn bench_attn(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let rows = pipeline::run_bench(&cfg.bench, &cfg.bench.variants, cfg.stream_seed(streams::BENCH))?;
    let dir = cfg.out_dir.join("bench");
    let path = out.map_or_else(|| dir.join("bench.csv"), Path::to_path_buf);
    write(&path, &pipeline::bench_csv(&rows))?;
    cfg.write_snapshot(&dir)?;
    let base = rows.first().map(|r| r.mean_ms);
    for r in &rows {
        let ratio = base.map_or(1.0, |b| r.mean_ms / b);
        println!(
            "{:<18} samples {:>2}  {:>9.3} ms ± {:.3}  ({ratio:.3}× first)",
            r.variant.to_string(),
            r.sample_count,
            r.mean_ms,
            r.sd_ms
        );
    }
    info!("{} variants × {} repeats -> {}", rows.len(), cfg.bench.repeats, path.display());
    Ok(())
}
