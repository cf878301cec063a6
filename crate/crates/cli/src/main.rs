mod data;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ds3_core::dataio::{
    assign_labels, inject_imbalance, load_dataset, load_label_rules, parity_rules, save_csv,
    DataSource, Dataset, Format, ImageShape, ImbalanceSpec,
};
use ds3_core::fixture::{generate, FixtureSpec};
use ds3_core::metrics::evaluate;
use ds3_core::network::{ArchSpec, DualHeadNet};
use ds3_core::report::{keyed_runs_csv, AlphaSweep, ComparisonGrid, RunReport};
use ds3_core::trainer::{
    run_repetitions, thread_count, Mode, RepetitionOptions, RoundTrace, RunOutcome, TrainConfig,
};

use data::{Manifest, Source};

#[derive(Parser)]
#[command(name = "ds3", version, about = "Deep subspace sampling for imbalanced classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load data, assign abstract labels, inject imbalance and save a manifest.
    Prepare(PrepareArgs),
    /// Train one mode over one or more seeds.
    Train(TrainArgs),
    /// Evaluate a saved model.
    Eval(EvalArgs),
    /// Run all four modes and emit an accuracy / minority-F1 / majority-F1 grid.
    Compare(CompareArgs),
    /// Run one mode over a list of alpha values.
    SweepAlpha(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Training data: a CSV path, "images,labels" for IDX, or "fixture".
    #[arg(long)]
    train: String,
    /// Test data in the same format; taken from the fixture when --train is "fixture".
    #[arg(long)]
    test: Option<String>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Image shape as CxHxW; inferred from the feature count when omitted.
    #[arg(long)]
    shape: Option<ImageShape>,
    /// JSON file mapping class name to label name, or "parity" for digit classes.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value_t = 0.8)]
    removal: f64,
    #[arg(long, default_value_t = 0.5)]
    minority_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// "fixture" or a manifest written by `prepare`.
    #[arg(long, default_value = "fixture")]
    dataset: String,
    #[arg(long, default_value = "C6-C16-F120-F64")]
    arch: ArchSpec,
    /// JSON training configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training rounds.
    #[arg(long = "T")]
    rounds: Option<usize>,
    /// Neighbors per instance.
    #[arg(long = "m")]
    neighbors: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Subspace dimension per label.
    #[arg(long = "p")]
    subspace_dim: Option<usize>,
    #[arg(long)]
    init_epochs: Option<usize>,
    #[arg(long)]
    epochs_per_round: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ds3-out")]
    out: PathBuf,
}

impl CommonArgs {
    fn config(&self, mode: Option<Mode>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(m) = mode {
            c.mode = m;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(rounds => rounds, neighbors => neighbors, alpha => alpha,
             init_epochs => init_epochs, epochs_per_round => epochs_per_round,
             lr => learning_rate, momentum => momentum, batch_size => batch_size);
        if self.subspace_dim.is_some() {
            c.subspace_dim = self.subspace_dim;
        }
        c.seed = self.seed;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "ds3-fixed")]
    mode: Mode,
    /// Write per-round traces of every run as line-delimited JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save a checkpoint after every round under OUT/rounds.
    #[arg(long)]
    save_rounds: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// "fixture" or a manifest written by `prepare`.
    #[arg(long, default_value = "fixture")]
    dataset: String,
    /// Seed the model was trained with; selects the fixture's minority classes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ds3-out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "ds3-fixed")]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "0.0025,0.005,0.01,0.02,0.04")]
    values: Vec<f64>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
    write_file(&dir.join("report.txt"), &report.to_text())?;
    write_file(&dir.join("runs.csv"), &report.runs_csv())
}

fn repeat(
    source: &Source,
    common: &CommonArgs,
    config: &TrainConfig,
    save_rounds: Option<PathBuf>,
) -> Result<(Vec<RunOutcome>, RunReport)> {
    let options = RepetitionOptions {
        threads: thread_count(),
        save_rounds,
    };
    let outcomes = run_repetitions(
        &source.run_data(),
        &common.arch,
        config,
        common.runs,
        common.seed,
        &options,
    )?;
    let report = RunReport::new(&common.arch.to_string(), Some(config), &outcomes)?;
    Ok((outcomes, report))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    run: usize,
    #[serde(flatten)]
    trace: &'a RoundTrace,
}

fn train(args: TrainArgs) -> Result<()> {
    let common = &args.common;
    let config = common.config(Some(args.mode))?;
    let source = Source::open(&common.dataset)?;
    fs::create_dir_all(&common.out)?;
    let rounds_dir = args.save_rounds.then(|| common.out.join("rounds"));
    if let Some(dir) = &rounds_dir {
        fs::create_dir_all(dir)?;
    }
    let (outcomes, report) = repeat(&source, common, &config, rounds_dir)?;
    write_report(&common.out, &report)?;
    for o in &outcomes {
        let path = common.out.join(format!("run{}.ckpt", o.run));
        o.net.save(BufWriter::new(fs::File::create(&path)?))?;
    }
    if let Some(path) = &args.trace {
        let mut text = String::new();
        for o in &outcomes {
            for t in &o.traces {
                text += &serde_json::to_string(&TraceLine { run: o.run, trace: t })?;
                text.push('\n');
            }
        }
        write_file(path, &text)?;
    }
    print!("{}", report.to_text());
    println!("config {}", serde_json::to_string(&config)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let file = fs::File::open(&args.model)
        .with_context(|| format!("opening model {}", args.model.display()))?;
    let net = DualHeadNet::load(std::io::BufReader::new(file))?;
    let source = Source::open(&args.dataset)?;
    let minority = source.minority_for(args.seed)?;
    let metrics = evaluate(&net, source.test(), &minority)?;
    let outcome = RunOutcome {
        run: 0,
        seed: args.seed,
        minority,
        metrics,
        traces: Vec::new(),
        net,
    };
    let report = RunReport::new(&outcome.net.arch().to_string(), None, &[outcome])?;
    write_report(&args.out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let common = &args.common;
    let source = Source::open(&common.dataset)?;
    let mut reports = Vec::new();
    for mode in Mode::ALL {
        let config = common.config(Some(mode))?;
        let (_, report) = repeat(&source, common, &config, None)?;
        write_report(&common.out.join(mode.name()), &report)?;
        reports.push((mode, report));
    }
    let grid = ComparisonGrid::from_reports(&reports);
    write_json(&common.out.join("grid.json"), &grid)?;
    write_file(&common.out.join("grid.txt"), &grid.to_text())?;
    let keyed: Vec<(String, &RunReport)> = reports
        .iter()
        .map(|(m, r)| (m.name().to_string(), r))
        .collect();
    write_file(&common.out.join("runs.csv"), &keyed_runs_csv(Some("mode"), &keyed))?;
    print!("{}", grid.to_text());
    Ok(())
}

fn sweep_alpha(args: SweepArgs) -> Result<()> {
    let common = &args.common;
    if args.values.is_empty() {
        bail!("--values needs at least one alpha");
    }
    let source = Source::open(&common.dataset)?;
    let mut reports = Vec::new();
    for &alpha in &args.values {
        let config = TrainConfig {
            alpha,
            ..common.config(Some(args.mode))?
        };
        let (_, report) = repeat(&source, common, &config, None)?;
        reports.push((alpha.to_string(), report));
    }
    let sweep = AlphaSweep {
        mode: args.mode,
        alphas: args.values.clone(),
        cells: reports.iter().map(|(_, r)| r.aggregate.clone()).collect(),
    };
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("sweep.json"), &sweep)?;
    write_file(&common.out.join("sweep.txt"), &sweep.to_text())?;
    let keyed: Vec<(String, &RunReport)> = reports.iter().map(|(a, r)| (a.clone(), r)).collect();
    write_file(&common.out.join("runs.csv"), &keyed_runs_csv(Some("alpha"), &keyed))?;
    print!("{}", sweep.to_text());
    Ok(())
}

fn load_source(spec: &str, format: Format, shape: Option<ImageShape>) -> Result<Dataset> {
    Ok(load_dataset(&DataSource::parse(format, spec)?, shape)?)
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let (train, test) = if args.train == "fixture" {
        let s = generate(&FixtureSpec::default())?;
        (s.train, s.test)
    } else {
        let Some(test) = &args.test else {
            bail!("--test is required unless --train is \"fixture\"");
        };
        (
            load_source(&args.train, args.format, args.shape)?,
            load_source(test, args.format, args.shape)?,
        )
    };
    let train = match args.labels.as_deref() {
        None => train,
        Some("parity") => assign_labels(&train, &parity_rules(&train)?)?,
        Some(path) => assign_labels(&train, &load_label_rules(Path::new(path))?)?,
    };
    let imbalance = ImbalanceSpec {
        minority_class_fraction_per_label: args.minority_fraction,
        removal_fraction: args.removal,
        seed: args.seed,
    };
    let (reduced, minority) = inject_imbalance(&train, &imbalance)?;

    // Saved CSVs name classes by id, so the rules are restated in that form.
    let label_rules = (0..reduced.num_classes())
        .map(|c| {
            let label = &reduced.label_names()[reduced.lambda_map()[c]];
            (c.to_string(), label.clone())
        })
        .collect();
    fs::create_dir_all(&args.out)?;
    save_csv(&reduced, &args.out.join("train.csv"))?;
    save_csv(&test, &args.out.join("test.csv"))?;
    let manifest = Manifest {
        dataset: "train.csv".into(),
        test: "test.csv".into(),
        format: "csv".into(),
        shape: reduced.shape().to_string(),
        label_rules,
        minority_class_ids: minority.iter().copied().collect(),
        seed: args.seed,
        imbalance,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "{} -> {} training instances, minority classes {:?}",
        train.len(),
        reduced.len(),
        manifest.minority_class_ids
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::SweepAlpha(a) => sweep_alpha(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
