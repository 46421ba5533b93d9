use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covshift::cse::{
    cse_detect, detector_from_training, reference_window, write_events_jsonl, ControlLimit,
    DetectorParams,
};
use covshift::eval::{recompute_accuracies, run_experiment, EvalError, ExperimentConfig};
use covshift::features::{train_pca, FeatureVector};
use covshift::ingest::{generate_synthetic_stream, save_trials, write_trials, SynthConfig};

#[derive(Parser)]
#[command(
    name = "covshift",
    version,
    about = "Covariate shift detection and adaptive ensembles for EEG trial streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trial stream as trial CSV.
    Synth {
        /// TOML file with generator settings; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_trials: Option<usize>,
        #[arg(long)]
        n_train_trials: Option<usize>,
        #[arg(long)]
        n_channels: Option<usize>,
        #[arg(long)]
        class_separation: Option<f64>,
        #[arg(long)]
        shift_magnitude: Option<f64>,
        /// Shift positions in the test session, comma separated.
        #[arg(long, value_delimiter = ',')]
        shift_points: Option<Vec<usize>>,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the two-stage shift detector over a feature CSV; events go to stdout as JSON lines.
    Detect {
        /// CSV with a header row; an optional leading `trial_index` column,
        /// then one column per feature. Several consecutive rows with the
        /// same index form that trial's stage-II sample.
        #[arg(long)]
        features: PathBuf,
        /// Leading trials used as training data.
        #[arg(long)]
        train_trials: usize,
        /// Trailing trials per stage-II sample when each trial has one row.
        #[arg(long, default_value_t = 20)]
        window: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Control-limit multiplier.
        #[arg(long, default_value_t = 3.0)]
        limit: f64,
        /// Pick the smallest limit that is silent on the training rows.
        #[arg(long)]
        calibrate: bool,
        #[arg(long, default_value_t = 0.1)]
        vartheta: f64,
    },
    /// Recompute accuracies from the artifacts of a finished run.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl ToString) -> Self {
        Failure {
            code: 2,
            message: m.to_string(),
        }
    }
    fn data(m: impl ToString) -> Self {
        Failure {
            code: 3,
            message: m.to_string(),
        }
    }
    fn runtime(m: impl ToString) -> Self {
        Failure {
            code: 4,
            message: m.to_string(),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            config,
            seed,
            n_trials,
            n_train_trials,
            n_channels,
            class_separation,
            shift_magnitude,
            shift_points,
            out,
        } => synth(
            config,
            |c| {
                set(&mut c.seed, seed);
                set(&mut c.n_trials, n_trials);
                set(&mut c.n_train_trials, n_train_trials);
                set(&mut c.n_channels, n_channels);
                set(&mut c.class_separation, class_separation);
                set(&mut c.shift_magnitude, shift_magnitude);
                set(&mut c.shift_points, shift_points);
            },
            out,
        ),
        Command::Run { config, output_dir } => run(config, output_dir),
        Command::Detect {
            features,
            train_trials,
            window,
            alpha,
            limit,
            calibrate,
            vartheta,
        } => {
            let limit = if calibrate {
                ControlLimit::Calibrated
            } else {
                ControlLimit::Fixed(limit)
            };
            let params = DetectorParams {
                limit,
                vartheta,
                ..DetectorParams::default()
            };
            detect(features, train_trials, window, alpha, params)
        }
        Command::Report { dir } => report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("covshift: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn synth(
    config: Option<PathBuf>,
    overrides: impl FnOnce(&mut SynthConfig),
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    overrides(&mut cfg);
    let set = generate_synthetic_stream(&cfg).map_err(Failure::config)?;
    match out {
        Some(path) => save_trials(&set, &path).map_err(Failure::runtime),
        None => write_trials(&set, io::stdout().lock()).map_err(Failure::runtime),
    }
}

fn run(config: PathBuf, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&config)?;
    set(&mut cfg.output_dir, output_dir);
    let report = run_experiment(&cfg)?;
    println!(
        "{:<24} {:>9} {:>9} {:>9} {:>9}",
        "run", "accuracy", "warnings", "validated", "members"
    );
    for s in &report.summary {
        println!(
            "{:<24} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            s.run, s.mean_accuracy, s.mean_warnings, s.mean_validated, s.mean_final_ensemble_size
        );
    }
    for c in &report.comparisons {
        let p = c
            .p_value
            .map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"));
        println!(
            "{} vs {}: {:+.2} points, Wilcoxon p = {p}",
            c.a, c.b, c.mean_difference
        );
    }
    println!("artifacts written to {}", cfg.output_dir.display());
    Ok(())
}

/// Reads `(trial_index, features)` rows; the index column is optional.
fn read_feature_csv(path: &PathBuf) -> Result<Vec<(usize, FeatureVector)>, Failure> {
    let file =
        fs::File::open(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(Failure::data)?,
        None => return Err(Failure::data(format!("{}: empty file", path.display()))),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let indexed = cols.first() == Some(&"trial_index");
    let width = cols.len() - usize::from(indexed);
    if width == 0 {
        return Err(Failure::data("no feature columns"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(Failure::data)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Failure::data(format!("{}: line {}: {what}", path.display(), n + 2));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(bad("wrong number of columns"));
        }
        let index = if indexed {
            cells[0].parse().map_err(|_| bad("bad trial_index"))?
        } else {
            rows.len()
        };
        let values = cells[usize::from(indexed)..]
            .iter()
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("non-numeric or non-finite value"))?;
        rows.push((index, FeatureVector::new(values)));
    }
    Ok(rows)
}

/// Consecutive rows sharing a trial index form that trial's stage-II sample
/// and their mean is its stage-I feature. With one row per trial the sample
/// is instead the trailing `window` rows.
fn detect(
    path: PathBuf,
    train_trials: usize,
    window: usize,
    alpha: f64,
    params: DetectorParams,
) -> Result<(), Failure> {
    let rows = read_feature_csv(&path)?;
    let mut groups: Vec<(usize, Vec<FeatureVector>)> = Vec::new();
    for (idx, f) in rows {
        match groups.last_mut() {
            Some((last, g)) if *last == idx => g.push(f),
            _ => groups.push((idx, vec![f])),
        }
    }
    let dim = groups.first().map_or(0, |g| g.1[0].dimension());
    let grouped = groups.iter().all(|g| g.1.len() > 1);
    if grouped && groups.iter().any(|g| g.1.len() != groups[0].1.len()) {
        return Err(Failure::data("every trial needs the same number of rows"));
    }
    let window = if grouped { groups[0].1.len() } else { window };
    if train_trials < 10.max(if grouped { 0 } else { window }) || train_trials >= groups.len() {
        return Err(Failure::config(format!(
            "--train-trials must be at least 10 (and the window) and below the trial count {}",
            groups.len()
        )));
    }
    if 2 * window < dim + 3 {
        return Err(Failure::config(format!(
            "window of {window} rows too small for {dim} features"
        )));
    }
    let features: Vec<FeatureVector> = groups
        .iter()
        .map(|(_, g)| {
            let mut mean = vec![0.0; dim];
            for f in g {
                mean.iter_mut()
                    .zip(f.as_slice())
                    .for_each(|(m, v)| *m += v / g.len() as f64);
            }
            FeatureVector::new(mean)
        })
        .collect();
    let train = &features[..train_trials];
    let pca = train_pca(train).map_err(Failure::data)?;
    let mut det = detector_from_training(train, &pca, &params).map_err(Failure::data)?;
    let reference = if grouped {
        let windows: Vec<Vec<FeatureVector>> =
            groups[..train_trials].iter().map(|g| g.1.clone()).collect();
        reference_window(&windows).map_err(Failure::data)?
    } else {
        train[train_trials - window..].to_vec()
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for i in train_trials..groups.len() {
        let current = if grouped {
            groups[i].1.clone()
        } else {
            features[i + 1 - window..=i].to_vec()
        };
        let event = cse_detect(
            &mut det,
            groups[i].0,
            &features[i],
            &pca,
            &current,
            &reference,
            alpha,
        )
        .map_err(Failure::runtime)?;
        if let Some(e) = event {
            write_events_jsonl(&[e], &mut out).map_err(Failure::runtime)?;
        }
    }
    out.flush().map_err(Failure::runtime)
}

fn report(dir: PathBuf) -> Result<(), Failure> {
    let table = recompute_accuracies(&dir)?;
    let mut totals: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
    for (unit, runs) in &table {
        for (run, acc) in runs {
            println!("{unit:<16} {run:<24} {acc:>7.2}");
            let t = totals.entry(run).or_default();
            t.0 += acc;
            t.1 += 1;
        }
    }
    for (run, (sum, n)) in totals {
        println!("{:<16} {run:<24} {:>7.2}", "mean", sum / n as f64);
    }
    Ok(())
}
