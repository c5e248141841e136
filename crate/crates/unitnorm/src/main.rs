use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use unitnorm::artifacts::{write_history_csv, write_json, ProtocolReport, RunSummary, SearchReport};
use unitnorm::config::{self, Command, ConfigError, ConfigFile, Overrides, RunManifest};
use unitnorm::idx::{load_mnist, IdxError, MnistPaths, PixelScale};
use unitnorm::runner::run_seeds;
use unitnorm_core::check::run_checks;
use unitnorm_core::data::{MnistDataset, MNIST_CLASSES};
use unitnorm_core::optimizer::{search_learning_rate, train_full_observed, EpochRecord};
use unitnorm_core::{seeded_rng, UpdateRule};

#[derive(Parser)]
#[command(name = "unitnorm", version, about = "Unit-norm SGD for batch-normalized networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load the MNIST files and report counts and label histograms.
    Data(DataArgs),
    /// Learning-rate grid search for one seed.
    Search(RunArgs),
    /// One full run: learning-rate search (unless --base-lr), training, test error.
    Train(TrainArgs),
    /// Full runs over consecutive seeds, aggregated.
    Protocol(RunArgs),
    /// Gradient, symmetry and manifold self-checks on synthetic networks.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Bsgd,
    Un,
}

impl From<Rule> for UpdateRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Bsgd => UpdateRule::Bsgd,
            Rule::Un => UpdateRule::Un,
        }
    }
}

#[derive(Args)]
struct DataPathArgs {
    /// Directory holding the four files under their standard names.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    paths: DataPathArgs,
    /// JSON config file; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Number of hidden layers.
    #[arg(long, value_parser = ["2", "4"])]
    depth: Option<String>,
    #[arg(long, value_enum)]
    rule: Option<Rule>,
    /// Seed, or the first of consecutive seeds for `protocol`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    paths: DataPathArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file (a previous manifest works); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds run concurrently.
    #[arg(long)]
    parallel: Option<usize>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fixed base learning rate instead of the grid search.
    #[arg(long)]
    base_lr: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write check.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Process outcome; the discriminant is the exit code.
enum Failure {
    Usage(String),
    Data(String),
    Check,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<IdxError> for Failure {
    fn from(e: IdxError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<unitnorm_core::Error> for Failure {
    fn from(e: unitnorm_core::Error) -> Self {
        match e {
            unitnorm_core::Error::Data(_) => Failure::Data(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("cannot write {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Cmd::Data(a) => data(a),
        Cmd::Search(a) => search(a),
        Cmd::Train(a) => train(a),
        Cmd::Protocol(a) => protocol(a),
        Cmd::Check(a) => check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("data error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, ConfigError> {
    path.as_deref().map(ConfigFile::load).transpose().map(Option::unwrap_or_default)
}

fn path_overrides(p: &DataPathArgs) -> Overrides {
    Overrides {
        data_dir: p.data_dir.clone(),
        train_images: p.train_images.clone(),
        train_labels: p.train_labels.clone(),
        test_images: p.test_images.clone(),
        test_labels: p.test_labels.clone(),
        ..Overrides::default()
    }
}

fn manifest_for(command: Command, a: &RunArgs, base_lr: Option<f64>) -> Result<RunManifest, Failure> {
    let file = load_config(&a.config)?;
    let flags = Overrides {
        depth: a.depth.as_deref().map(|d| d.parse().expect("restricted by clap")),
        rule: a.rule.map(Into::into),
        seed: a.seed,
        runs: a.runs,
        batch_size: a.batch_size,
        base_lr,
        out_dir: a.out.clone(),
        parallel: a.parallel,
        ..path_overrides(&a.paths)
    };
    let stamp = OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default();
    Ok(config::resolve(command, &flags, &file, stamp)?)
}

/// Loads the data and checks it fits the network and the split sizes.
fn load_for(m: &RunManifest) -> Result<MnistDataset, Failure> {
    let data = load_mnist(&m.paths(), m.pixel_scale)?;
    let misfit = |msg: String| Err(Failure::Data(msg));
    if data.input_dim() != m.network.input_dim {
        return misfit(format!("images have {} pixels, the network expects {}", data.input_dim(), m.network.input_dim));
    }
    if m.network.n_classes < MNIST_CLASSES {
        if let Some(y) = data.train_labels.iter().chain(&data.test_labels).find(|&&y| y >= m.network.n_classes) {
            return misfit(format!("label {y} exceeds the network's {} classes", m.network.n_classes));
        }
    }
    let t = &m.train;
    if t.full_train_size + t.full_val_size != data.n_train() {
        return misfit(format!(
            "{} training images cannot be split {}/{}",
            data.n_train(),
            t.full_train_size,
            t.full_val_size
        ));
    }
    if t.search_train_size + t.search_val_size > data.n_train() {
        return misfit(format!(
            "too few training images for the {}+{} search subsets",
            t.search_train_size, t.search_val_size
        ));
    }
    Ok(data)
}

fn prepare_out(m: &RunManifest) -> Result<(), Failure> {
    fs::create_dir_all(&m.out_dir).map_err(io_failure(&m.out_dir))?;
    let path = m.out_dir.join("manifest.json");
    m.write(&path).map_err(io_failure(&path))
}

fn progress(quiet: bool) -> impl Fn(u64, &EpochRecord) + Sync {
    move |seed, r| {
        if !quiet {
            eprintln!(
                "seed {seed} epoch {:>2} train {:.5} val {:.5} lr {:.3e}{}",
                r.epoch,
                r.train_error,
                r.val_error,
                r.lr,
                if r.diverged { " diverged" } else { "" }
            );
        }
    }
}

fn data(a: DataArgs) -> Result<(), Failure> {
    let file = load_config(&a.config)?;
    let paths: MnistPaths = config::resolve_paths(&path_overrides(&a.paths), &file);
    let d = load_mnist(&paths, file.pixel_scale.unwrap_or(PixelScale::Unit))?;
    let histogram = |labels: &[usize]| {
        let mut h = [0usize; MNIST_CLASSES];
        labels.iter().for_each(|&y| h[y] += 1);
        h
    };
    let pixels = d.train_images.as_slice().iter().chain(d.test_images.as_slice());
    let (lo, hi) = pixels.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let report = serde_json::json!({
        "train_images": paths.train_images,
        "n_train": d.n_train(),
        "n_test": d.n_test(),
        "input_dim": d.input_dim(),
        "train_label_counts": histogram(&d.train_labels),
        "test_label_counts": histogram(&d.test_labels),
        "pixel_min": lo,
        "pixel_max": hi,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("plain JSON"));
    Ok(())
}

fn search(a: RunArgs) -> Result<(), Failure> {
    let m = manifest_for(Command::Search, &a, None)?;
    let data = load_for(&m)?;
    prepare_out(&m)?;
    let s = search_learning_rate(&data, &m.network, &m.train, &mut seeded_rng(m.seed, 0))?;
    for c in &s.candidates {
        match c.val_error {
            Some(e) => println!("lr {:e}: val_error {e}", c.lr),
            None => println!("lr {:e}: diverged", c.lr),
        }
    }
    match s.selected {
        Some(lr) => println!("selected {lr:e}"),
        None => println!("every candidate diverged"),
    }
    let path = m.out_dir.join("search.json");
    write_json(&path, &SearchReport::new(m.seed, m.train.update_rule, m.network.depth, s)).map_err(io_failure(&path))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let m = manifest_for(Command::Train, &a.run, a.base_lr)?;
    let data = load_for(&m)?;
    prepare_out(&m)?;
    let observe = progress(a.run.quiet);
    let run = match m.base_lr {
        Some(lr) => {
            let mut rng = seeded_rng(m.seed, 0);
            train_full_observed(&data, &m.network, &m.train, lr, &mut rng, &mut |r| observe(m.seed, r))?
        }
        None => run_seeds(&data, &m.network, &m.train, &[m.seed], 1, &observe)?.remove(0).1,
    };
    let csv = m.out_dir.join("history.csv");
    write_history_csv(&csv, &run.history).map_err(io_failure(&csv))?;
    let summary = RunSummary::new(m.seed, m.train.update_rule, m.network.depth, &run);
    let path = m.out_dir.join("summary.json");
    write_json(&path, &summary).map_err(io_failure(&path))?;
    match summary.test_error {
        Some(e) => {
            println!("test_error {e} base_lr {:e} epochs {}", summary.base_lr.unwrap_or(f64::NAN), summary.epochs)
        }
        None => println!("diverged after {} epochs", summary.epochs),
    }
    Ok(())
}

fn protocol(a: RunArgs) -> Result<(), Failure> {
    let m = manifest_for(Command::Protocol, &a, None)?;
    let data = load_for(&m)?;
    prepare_out(&m)?;
    let runs = run_seeds(&data, &m.network, &m.train, &m.seeds, m.parallel, &progress(a.quiet))?;
    for (seed, run) in &runs {
        let csv = m.out_dir.join(format!("history_seed{seed}.csv"));
        write_history_csv(&csv, &run.history).map_err(io_failure(&csv))?;
    }
    let report = ProtocolReport::new(m.train.update_rule, m.network.depth, &runs);
    let path = m.out_dir.join("protocol.json");
    write_json(&path, &report).map_err(io_failure(&path))?;
    for r in &report.per_run {
        match r.test_error {
            Some(e) => println!("seed {} test_error {e} epochs {}", r.seed, r.epochs),
            None => println!("seed {} diverged", r.seed),
        }
    }
    match (report.mean_test_error, report.std_test_error) {
        (Some(mean), Some(std)) => println!("mean {mean} std {std} over {} runs", report.n_valid_runs),
        _ => println!("every run diverged"),
    }
    Ok(())
}

fn check(a: CheckArgs) -> Result<(), Failure> {
    let report = run_checks(a.seed)?;
    for b in report.bounds() {
        let rel = if b.upper { "<=" } else { ">=" };
        println!("{} {:<26} {:.3e} {rel} {:.0e}", if b.holds() { "PASS" } else { "FAIL" }, b.name, b.value, b.limit);
    }
    println!("info {:<26} {:.3e}", "negative_scaling_gap", report.negative_scaling_gap);
    println!("info {:<26} {:.3e}", "default_eps_invariance_gap", report.default_eps_invariance_gap);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_failure(dir))?;
        let path = dir.join("check.json");
        write_json(&path, &report).map_err(io_failure(&path))?;
    }
    if report.failures().is_empty() {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}
