use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cgnet::checkpoint;
use cgnet::config::RunConfig;
use cgnet::dataset::{self, expand, load_manifest, split_seen_unseen, ShapeClass, Split, SynthConfig};
use cgnet::metrics::MetricReport;
use cgnet::tensor::set_gradient_fault;
use cgnet::train::{self, load_samples, write_loss_csv};
use cgnet::verify;
use cgnet::CgNet;

const CHECKPOINT_FILE: &str = "checkpoint.cgt";
const CONFIG_FILE: &str = "config.toml";
const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "cgnet", version, about = "Class-guided camouflaged object detection at desk scale")]
struct Cli {
    /// Print a machine-readable JSON summary to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic camouflage dataset.
    Synth(SynthArgs),
    /// Train on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Partition test records into seen and unseen classes.
    Split(SplitArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().n_samples)]
    n_samples: usize,
    #[arg(long, default_value_t = SynthConfig::default().image_side)]
    image_side: usize,
    #[arg(long, default_value_t = SynthConfig::default().camouflage_strength)]
    camouflage_strength: f64,
    #[arg(long, default_value_t = SynthConfig::default().second_shape_prob)]
    second_shape_prob: f64,
    #[arg(long, default_value_t = 0)]
    test_every: usize,
    /// Comma-separated subset of blob, star, worm, ring.
    #[arg(long, value_delimiter = ',', value_enum)]
    classes: Vec<ClassArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Blob,
    Star,
    Worm,
    Ring,
}

impl From<ClassArg> for ShapeClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Blob => ShapeClass::Blob,
            ClassArg::Star => ShapeClass::Star,
            ClassArg::Worm => ShapeClass::Worm,
            ClassArg::Ring => ShapeClass::Ring,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write feature maps of the first training sample as PNGs.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitSel {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config saved next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    split: SplitSel,
    #[arg(long)]
    dump_features: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Manifest whose records all count as training data.
    #[arg(long, requires = "test_manifest")]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Single manifest partitioned by its `split` field.
    #[arg(long, conflicts_with_all = ["train_manifest", "test_manifest"])]
    manifest: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Corrupt the sigmoid backward rule (negative control).
    #[arg(long)]
    inject_grad_fault: bool,
}

/// Verification failed: exit code 1.
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.json;
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a, json),
        Command::Train(a) => cmd_train(a, json),
        Command::Eval(a) => cmd_eval(a, json),
        Command::Split(a) => cmd_split(a, json),
        Command::Gradcheck(a) => cmd_gradcheck(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn emit(json: bool, value: serde_json::Value) {
    if json {
        println!("{value}");
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(a: SynthArgs, json: bool) -> anyhow::Result<()> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        n_samples: a.n_samples,
        image_side: a.image_side,
        camouflage_strength: a.camouflage_strength,
        second_shape_prob: a.second_shape_prob,
        test_every: a.test_every,
        ..SynthConfig::default()
    };
    if !a.classes.is_empty() {
        cfg.classes = a.classes.into_iter().map(ShapeClass::from).collect();
    }
    let manifest = dataset::synth_generate(&cfg, &a.out)?;
    if json {
        emit(true, json!({ "manifest": manifest, "config": cfg }));
    } else {
        println!("wrote {} samples; manifest {}", cfg.n_samples, manifest.display());
    }
    Ok(())
}

fn select(records: Vec<dataset::SampleRecord>, sel: SplitSel) -> Vec<dataset::SampleRecord> {
    records
        .into_iter()
        .filter(|r| match sel {
            SplitSel::All => true,
            SplitSel::Train => r.split == Split::Train,
            SplitSel::Test => r.split == Split::Test,
        })
        .collect()
}

fn cmd_train(a: TrainArgs, json: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let records = select(load_manifest(&a.manifest)?, SplitSel::Train);
    if records.is_empty() {
        bail!("manifest {} has no train records", a.manifest.display());
    }
    let samples = load_samples(&expand(&records))?;
    create_dir(&a.out)?;
    let model = CgNet::new(&cfg)?;
    let every = (cfg.optim.steps / 20).max(1);
    let trace = train::train_model(&model, &samples, |row| {
        if !json && (row.step % every == 0 || row.step + 1 == cfg.optim.steps) {
            eprintln!("step {:>5}  total {:.6}", row.step, row.loss.total);
        }
    })?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, model.params())?;
    write_loss_csv(&a.out.join(LOSS_FILE), &trace)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_toml_string()).context("writing config")?;
    if a.dump_features {
        train::dump_features(&model, &samples[0], &a.out.join("features"))?;
    }
    let first = trace.first().map(|r| r.loss.total);
    let last = trace.last().map(|r| r.loss.total);
    if json {
        emit(
            true,
            json!({
                "checkpoint": ckpt,
                "loss_csv": a.out.join(LOSS_FILE),
                "steps": trace.len(),
                "samples": samples.len(),
                "initial_loss": first,
                "final_loss": last,
            }),
        );
    } else {
        println!("trained {} steps on {} samples; checkpoint {}", trace.len(), samples.len(), ckpt.display());
    }
    Ok(())
}

fn report_row(id: &str, label: &str, r: &MetricReport) -> Vec<String> {
    let mut row = vec![id.to_string(), label.to_string()];
    row.extend(r.values().iter().map(|v| format!("{v:.6}")));
    row
}

fn cmd_eval(a: EvalArgs, json: bool) -> anyhow::Result<()> {
    let cfg_path = a
        .config
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
    let cfg = load_config(Some(&cfg_path))?;
    let model = CgNet::new(&cfg)?;
    checkpoint::load_into(&checkpoint::read(&a.checkpoint)?, model.params())?;
    let records = select(load_manifest(&a.manifest)?, a.split);
    if records.is_empty() {
        bail!("no records selected from {}", a.manifest.display());
    }
    let samples = load_samples(&expand(&records))?;
    let (per, agg) = train::evaluate_model(&model, &samples, cfg.optim.batch_size)?;
    create_dir(&a.out)?;

    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(MetricReport::COLUMNS.iter().map(|c| c.to_string()));
    let mut w = csv::Writer::from_path(a.out.join("metrics_per_sample.csv"))?;
    w.write_record(&header)?;
    for (s, r) in samples.iter().zip(&per) {
        w.write_record(report_row(&s.id, &s.label, r))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(a.out.join("metrics.csv"))?;
    w.write_record(&header)?;
    w.write_record(report_row("aggregate", "*", &agg))?;
    w.flush()?;

    if a.dump_features {
        train::dump_features(&model, &samples[0], &a.out.join("features"))?;
    }
    let caveat = dataset::synth::eval_caveat(&a.manifest);
    if json {
        emit(
            true,
            json!({
                "aggregate": agg,
                "per_sample": samples.iter().zip(&per).map(|(s, r)| json!({"id": s.id, "label": s.label, "metrics": r})).collect::<Vec<_>>(),
                "synthetic": caveat.is_some(),
                "caveat": caveat,
            }),
        );
    } else {
        print_table(&samples, &per, &agg);
        if let Some(c) = caveat {
            println!("{c}");
        }
    }
    Ok(())
}

fn print_table(samples: &[train::Sample], per: &[MetricReport], agg: &MetricReport) {
    let idw = samples.iter().map(|s| s.id.len() + s.label.len() + 1).max().unwrap_or(0).max(9);
    print!("{:<idw$}", "sample");
    for c in MetricReport::COLUMNS {
        print!("  {c:>8}");
    }
    println!();
    let line = |name: &str, r: &MetricReport| {
        print!("{name:<idw$}");
        for v in r.values() {
            print!("  {v:>8.4}");
        }
        println!();
    };
    for (s, r) in samples.iter().zip(per) {
        line(&format!("{}/{}", s.id, s.label), r);
    }
    line("aggregate", agg);
}

fn cmd_split(a: SplitArgs, json: bool) -> anyhow::Result<()> {
    let (train, test) = match (a.manifest, a.train_manifest, a.test_manifest) {
        (Some(m), None, None) => {
            let all = load_manifest(&m)?;
            let (train, test): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.split == Split::Train);
            (train, test)
        }
        (None, Some(tr), Some(te)) => (load_manifest(&tr)?, load_manifest(&te)?),
        _ => bail!("pass either --manifest or both --train-manifest and --test-manifest"),
    };
    let report = split_seen_unseen(&train, &test);
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if json {
        emit(true, serde_json::to_value(&report)?);
    } else {
        let join = |s: &mut dyn Iterator<Item = &String>| s.cloned().collect::<Vec<_>>().join(", ");
        println!("seen classes ({}): {}", report.seen_classes.len(), join(&mut report.seen_classes.iter()));
        println!("unseen classes ({}): {}", report.unseen_classes.len(), join(&mut report.unseen_classes.iter()));
        println!("seen samples: {}", report.seen_samples.len());
        println!("unseen samples: {}", report.unseen_samples.len());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, json: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.encoder.prompt_size = verify::END_TO_END_SIDE;
    cfg.encoder.detector_size = verify::END_TO_END_SIDE;
    cfg.validate()?;
    set_gradient_fault(a.inject_grad_fault);
    let mut rows = verify::op_suite()?;
    rows.push(verify::end_to_end(&cfg, a.seed)?);
    set_gradient_fault(false);
    let passed = rows.iter().all(|r| r.passed);
    if json {
        emit(true, json!({ "passed": passed, "checks": rows }));
    } else {
        let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &rows {
            let mark = if r.passed { "ok" } else { "FAIL" };
            println!("{:<w$}  worst rel err {:.3e}  (tol {:.0e}, {} coords)  {mark}", r.name, r.max_rel_err, r.tol, r.checked);
        }
        println!("{}", if passed { "gradcheck passed" } else { "gradcheck FAILED" });
    }
    if passed {
        Ok(())
    } else {
        Err(VerificationFailed.into())
    }
}
