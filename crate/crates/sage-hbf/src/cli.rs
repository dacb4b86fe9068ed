//! `sage-hbf <subcommand> --config <path> [--set k=v]... [--out dir]`
//!
//! Exit status: 0 success, 1 usage, 2 configuration, 3 data or output,
//! 4 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use sage_hbf_core::channel::Dataset;
use sage_hbf_core::metatrain::{stream_rng, Method};
use sage_hbf_core::model::GradCheckReport;

use crate::config::{parse_method, ExperimentConfig};
use crate::error::{Result, RunError};
use crate::experiment::{self as exp, streams};
use crate::io;
use crate::report::Output;

/// Environment variable capping the worker count.
pub const THREADS_VAR: &str = "SAGE_HBF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sage-hbf", version, about = "Meta-learned hybrid beamforming experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source, target-validation and target-training datasets.
    GenData(Common),
    /// Train a backbone per seed with `train.method`.
    TrainBackbone(Common),
    /// Fine-tune the backbone on the target site.
    Finetune(Common),
    /// Zero-shot sum-rate over deployment arrays and noise levels.
    EvalZeroshot(Common),
    /// Cross table of single-array backbones against deployment arrays.
    XconfigTable(Common),
    /// Fine-tuned sum-rate against the number of real target samples.
    SweepSamples(Common),
    /// Zero-forcing, PE-AltMin and ascent-oracle sum-rates.
    Baseline(Common),
    /// Finite-difference audit of the network gradient.
    Gradcheck(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBackbone(_) => "train-backbone",
            Command::Finetune(_) => "finetune",
            Command::EvalZeroshot(_) => "eval-zeroshot",
            Command::XconfigTable(_) => "xconfig-table",
            Command::SweepSamples(_) => "sweep-samples",
            Command::Baseline(_) => "baseline",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainBackbone(c)
            | Command::Finetune(c)
            | Command::EvalZeroshot(c)
            | Command::XconfigTable(c)
            | Command::SweepSamples(c)
            | Command::Baseline(c)
            | Command::Gradcheck(c) => c,
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sage-hbf {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| RunError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    // A pool from an earlier in-process run stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cmd: &Command) -> Result<()> {
    configure_threads()?;
    let c = cmd.common();
    let cfg = ExperimentConfig::load(&c.config, &c.set)?;
    cfg.check_files()?;
    let dir = match &c.out {
        Some(d) => d.clone(),
        None => cfg.resolve(&cfg.output_dir),
    };
    let mut out = Output::create(&dir, &cfg)?;
    let outcome = match cmd {
        Command::GenData(_) => gen_data(&cfg, &mut out),
        Command::TrainBackbone(_) => train_backbones(&cfg, &mut out),
        Command::Finetune(_) => finetune(&cfg, &mut out),
        Command::EvalZeroshot(_) => eval_zeroshot(&cfg, &mut out),
        Command::XconfigTable(_) => xconfig_table(&cfg, &mut out),
        Command::SweepSamples(_) => sweep_samples(&cfg, &mut out),
        Command::Baseline(_) => baseline(&cfg, &mut out),
        Command::Gradcheck(_) => gradcheck(&cfg, &mut out),
    };
    // A failed check still leaves a manifest of what was written.
    let files = out.finish(cmd.name(), &cfg)?;
    println!("wrote {} files and manifest.json to {}", files.len(), dir.display());
    outcome
}

/// Runs `f` for every seed, in parallel, keeping seed order.
fn per_seed<T: Send>(cfg: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<(u64, T)>> {
    cfg.seeds.par_iter().map(|&s| f(s).map(|t| (s, t))).collect::<Vec<_>>().into_iter().collect()
}

fn flatten<T>(per: Vec<(u64, Vec<T>)>) -> Vec<(u64, T)> {
    per.into_iter().flat_map(|(s, rows)| rows.into_iter().map(move |r| (s, r))).collect()
}

#[derive(Debug, serde::Serialize)]
struct DatasetRow {
    file: String,
    label: String,
    n_t: usize,
    n_u: usize,
    count: usize,
    scale: f64,
}

fn write_dataset(out: &mut Output, rel: &str, d: &Dataset) -> Result<DatasetRow> {
    io::write_dataset(d, &out.path(rel))?;
    out.register(rel)?;
    let (n_t, n_u) = d.dims()?;
    Ok(DatasetRow { file: rel.into(), label: d.label.clone(), n_t, n_u, count: d.len(), scale: d.scale })
}

fn gen_data(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let ds = exp::source_domains(cfg)?;
    let mut rows = Vec::new();
    for d in &ds.domains {
        let mut rng = stream_rng(cfg.data_seed, streams::GEN_SOURCE + d.id as u64);
        let samples = d.draw(cfg.domains.samples_per_domain, ds.n_users, &mut rng)?;
        let data = Dataset { samples, label: d.label.clone(), scale: d.scale };
        rows.push((cfg.data_seed, write_dataset(out, &format!("data/source_{:02}.sagehbf", d.id), &data)?));
    }
    let target = exp::target_set(cfg, cfg.target.layout)?;
    let val = Dataset { samples: target.validation.clone(), label: target.label.clone(), scale: target.scale };
    rows.push((cfg.data_seed, write_dataset(out, "data/target_validation.sagehbf", &val)?));
    for &seed in &cfg.seeds {
        let d = exp::target_train(cfg, &target, seed, cfg.finetune.n_real_samples)?;
        rows.push((seed, write_dataset(out, &format!("data/target_train_seed{seed}.sagehbf"), &d)?));
    }
    out.csv("datasets.csv", &rows)
}

fn backbone_file(method: Method, seed: u64) -> String {
    format!("backbones/{}_seed{seed}.sagehbp", method.as_str())
}

fn train_backbones(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let ds = exp::source_domains(cfg)?;
    let method = cfg.train_method();
    let target = exp::target_set(cfg, cfg.target.layout)?;
    let link = exp::link(cfg)?;
    let trained = per_seed(cfg, |seed| {
        let t = exp::train(cfg, &ds, method, seed)?;
        let zs = exp::zero_shot(&t.params, &target, &link)?;
        Ok((t, zs))
    })?;
    let mut history = Vec::new();
    let mut summary = Vec::new();
    for (seed, (t, zs)) in trained {
        let rel = backbone_file(method, seed);
        io::save_params(&t.params, &out.path(&rel))?;
        out.register(&rel)?;
        println!("seed {seed}: {} backbone, zero-shot target sum-rate {zs:.4}", method.as_str());
        summary.push((seed, ZeroShotSummary { method: method.as_str(), target: target.label.clone(), sum_rate: zs }));
        history.extend(t.history.into_iter().map(|r| (seed, r)));
    }
    out.csv("train_history.csv", &history)?;
    out.csv("zero_shot_target.csv", &summary)
}

#[derive(Debug, serde::Serialize)]
struct ZeroShotSummary {
    method: &'static str,
    target: String,
    sum_rate: f64,
}

fn finetune(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let ds = exp::source_domains(cfg)?;
    let method = cfg.train_method();
    let target = exp::target_set(cfg, cfg.target.layout)?;
    let f = &cfg.finetune;
    let runs = per_seed(cfg, |seed| {
        let bb = exp::backbone(cfg, &ds, method, seed)?;
        exp::adapt(cfg, &bb, &target, seed, f.n_real_samples, f.aug_m)
    })?;
    let mut rows = Vec::new();
    for (seed, (params, h)) in runs {
        let rel = format!("finetuned/{}_seed{seed}.sagehbp", method.as_str());
        io::save_params(&params, &out.path(&rel))?;
        out.register(&rel)?;
        let curve = h.curve();
        println!("seed {seed}: zero-shot {:.4} -> epoch {} {:.4}", curve[0], curve.len() - 1, curve[curve.len() - 1]);
        rows.extend(exp::finetune_rows(&h, f.n_real_samples, f.aug_m).into_iter().map(|r| (seed, r)));
    }
    out.csv("finetune_history.csv", &rows)
}

fn eval_zeroshot(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let ds = exp::source_domains(cfg)?;
    let methods: Vec<Method> =
        cfg.eval.methods.iter().map(|m| parse_method(m, "eval.methods")).collect::<std::result::Result<_, _>>()?;
    let per = per_seed(cfg, |seed| {
        let mut rows = Vec::new();
        for &m in &methods {
            let bb = exp::backbone(cfg, &ds, m, seed)?;
            rows.extend(exp::zero_shot_sweep(cfg, &bb, m)?);
        }
        Ok(rows)
    })?;
    out.csv("zero_shot.csv", &flatten(per))
}

#[derive(Debug, serde::Serialize)]
struct MatrixRow {
    train_layout: String,
    deploy_layout: String,
    median_sum_rate: f64,
    /// Seeds whose row has this entry as its maximum.
    seeds_row_max: usize,
}

fn xconfig_table(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let per = per_seed(cfg, |seed| exp::xconfig_table(cfg, seed))?;
    let k = cfg.xconfig.layouts.len();
    let mut matrix = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let mut vals: Vec<f64> = per.iter().map(|(_, rows)| rows[i * k + j].sum_rate).collect();
            let wins = per
                .iter()
                .filter(|(_, rows)| (0..k).all(|jj| rows[i * k + jj].sum_rate <= rows[i * k + j].sum_rate))
                .count();
            vals.sort_by(f64::total_cmp);
            let first = &per[0].1[i * k + j];
            matrix.push((
                0,
                MatrixRow {
                    train_layout: first.train_layout.clone(),
                    deploy_layout: first.deploy_layout.clone(),
                    median_sum_rate: median_sorted(&vals),
                    seeds_row_max: wins,
                },
            ));
        }
    }
    for (_, m) in &matrix {
        println!("train {} deploy {}: median {:.4}", m.train_layout, m.deploy_layout, m.median_sum_rate);
    }
    out.csv("xconfig_table.csv", &flatten(per))?;
    out.csv("xconfig_matrix.csv", &matrix)
}

/// Median of a sorted, non-empty slice.
pub fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sweep_samples(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let ds = exp::source_domains(cfg)?;
    let method = cfg.train_method();
    let target = exp::target_set(cfg, cfg.target.layout)?;
    let per = per_seed(cfg, |seed| {
        let bb = exp::backbone(cfg, &ds, method, seed)?;
        exp::sweep_samples(cfg, &bb, &target, seed)
    })?;
    out.csv("sweep_samples.csv", &flatten(per))
}

fn baseline(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let samples = exp::baseline_samples(cfg)?;
    let per = per_seed(cfg, |seed| exp::baselines(cfg, &samples, seed))?;
    for (seed, rows) in &per {
        let mean = |m: &str| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.sum_rate).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        println!(
            "seed {seed}: mean sum-rate zf-fdp {:.4}, pe-altmin-zf {:.4}, oracle {:.4}",
            mean("zf-fdp"),
            mean("pe-altmin-zf"),
            mean("oracle")
        );
    }
    out.csv("baseline.csv", &flatten(per))
}

#[derive(Debug, serde::Serialize)]
struct GradcheckRow {
    coordinates: usize,
    within_tolerance: usize,
    fraction_within: f64,
    max_rel_error: f64,
    p99_rel_error: f64,
    tolerance: f64,
}

impl From<&GradCheckReport> for GradcheckRow {
    fn from(r: &GradCheckReport) -> Self {
        Self {
            coordinates: r.coordinates,
            within_tolerance: r.within_tolerance,
            fraction_within: r.fraction_within(),
            max_rel_error: r.max_rel_error,
            p99_rel_error: r.p99_rel_error,
            tolerance: r.tolerance,
        }
    }
}

fn gradcheck(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let per = per_seed(cfg, |seed| exp::gradcheck(cfg, seed))?;
    let rows: Vec<(u64, GradcheckRow)> = per.iter().map(|(s, r)| (*s, r.into())).collect();
    out.csv("gradcheck.csv", &rows)?;
    let mut failed = Vec::new();
    for (seed, r) in &per {
        println!(
            "seed {seed}: {}/{} coordinates within {:e} ({:.5}), p99 {:.3e}, max {:.3e}",
            r.within_tolerance,
            r.coordinates,
            r.tolerance,
            r.fraction_within(),
            r.p99_rel_error,
            r.max_rel_error
        );
        if r.fraction_within() < cfg.gradcheck.min_fraction {
            failed.push(*seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunError::Numerical(format!("gradient check below {} on seeds {failed:?}", cfg.gradcheck.min_fraction)))
    }
}
