use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use assoclearn::interpreter::{IndependenceReport, SupportPattern};
use assoclearn::io::{self, ModelFile, TrainingInfo};
use assoclearn::likelihood::predict_matrix;
use assoclearn::penalty::WeightOverride;
use assoclearn::simulation::{self, Scheme, SimConfig};
use assoclearn::solver::{self, PathSpec};
use assoclearn::{BasisSet, Error, Family, GroupStructure, PenaltyMode, ResponseLayout, SolverConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "assoclearn",
    version,
    about = "Association structure learning for multivariate categorical responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a penalized model at one lambda or along a validated path.
    Fit(FitArgs),
    /// Predict joint category probabilities.
    Predict(PredictArgs),
    /// Report the independence structure implied by a fitted support.
    Interpret(InterpretArgs),
    /// Draw one simulated train/validation/test split.
    Simulate(SimulateArgs),
    /// Run a simulation study.
    Study(StudyArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// Categories per response, e.g. 2,2,2,3.
    #[arg(long = "J", value_delimiter = ',', required = true)]
    categories: Vec<usize>,
    /// Highest interaction order.
    #[arg(long = "d")]
    max_order: usize,
    #[arg(long, default_value = "mult")]
    family: String,
    #[arg(long, default_value = "overlap")]
    penalty: String,
    /// global, local or blocks=<sizes>.
    #[arg(long, default_value = "local")]
    grouping: String,
    #[arg(long, conflicts_with = "path")]
    lambda: Option<f64>,
    /// n=<count>,ratio=<lambda_min/lambda_max>.
    #[arg(long)]
    path: Option<String>,
    #[arg(long = "valid-x", requires = "valid_y")]
    valid_x: Option<PathBuf>,
    #[arg(long = "valid-y", requires = "valid_x")]
    valid_y: Option<PathBuf>,
    /// JSON list of {"effect": [...], "block": j, "weight": w}.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the full fit record as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 5000)]
    max_iter: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    x: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    model: PathBuf,
    /// Blocks with norm at or below this count as zero.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study TOML supplying the layout, signal and sizes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: u8,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// 100 replicates and 10000 test points.
    #[arg(long = "full-scale")]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<u8, Failure>;

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn parse_grouping(spec: &str, p: usize) -> Result<Vec<usize>, Failure> {
    match spec {
        "global" => Ok(vec![p]),
        "local" => Ok(vec![1; p]),
        other => {
            let sizes = other.strip_prefix("blocks=").ok_or_else(|| {
                input(format!(
                    "grouping must be global, local or blocks=<sizes>, got '{other}'"
                ))
            })?;
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| input(format!("bad block sizes '{sizes}': {e}")))?;
            if sizes.iter().any(|&s| s == 0) || sizes.iter().sum::<usize>() != p {
                return Err(input(format!(
                    "block sizes {sizes:?} must be positive and sum to p = {p}"
                )));
            }
            Ok(sizes)
        }
    }
}

fn parse_path(spec: &str) -> Result<PathSpec, Failure> {
    let mut path = PathSpec::default();
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| input(format!("path entry '{part}' is not key=value")))?;
        match key.trim() {
            "n" => path.count = value.trim().parse().map_err(|e| input(format!("path n: {e}")))?,
            "ratio" => path.ratio = value.trim().parse().map_err(|e| input(format!("path ratio: {e}")))?,
            other => return Err(input(format!("unknown path key '{other}'"))),
        }
    }
    Ok(path)
}

fn run_fit(args: FitArgs) -> Outcome {
    let layout = ResponseLayout::new(&args.categories, args.max_order)?;
    let family = Family::parse(&args.family)?;
    let penalty = PenaltyMode::parse(&args.penalty)?;
    let data = io::read_dataset(&args.x, &args.y, &layout, family)?;
    let partition = parse_grouping(&args.grouping, data.p())?;
    let gs = match &args.weights {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            let overrides: Vec<WeightOverride> =
                serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
            GroupStructure::with_overrides(&layout, &partition, penalty, &overrides)?
        }
        None => GroupStructure::new(&layout, &partition, penalty)?,
    };
    let valid = match (&args.valid_x, &args.valid_y) {
        (Some(vx), Some(vy)) => Some(io::read_dataset(vx, vy, &layout, Family::Poisson)?),
        _ => None,
    };
    if let Some(v) = &valid {
        if v.p() != data.p() {
            return Err(input(format!(
                "validation X has {} columns, training X has {}",
                v.p(),
                data.p()
            )));
        }
    }
    let mut config = SolverConfig {
        family,
        penalty,
        lambda: args.lambda,
        tol: args.tol,
        max_iter: args.max_iter,
        deterministic: args.deterministic,
        seed: args.seed,
        ..SolverConfig::default()
    };
    if let Some(spec) = &args.path {
        config.path = parse_path(spec)?;
    }
    config.validate()?;
    let basis = BasisSet::new(&layout);

    let (fit, lambda_max) = match args.lambda {
        Some(_) => {
            let mut f = solver::fit(&data, &basis, &gs, &config)?;
            if let Some(v) = &valid {
                f.validation_cross_entropy = Some(assoclearn::likelihood::cross_entropy(&f.beta, &basis, v)?);
            }
            (f, None)
        }
        None => {
            let v = valid
                .as_ref()
                .ok_or_else(|| input("a path fit needs --valid-x and --valid-y to select lambda (or pass --lambda)"))?;
            let path = solver::fit_path(&data, &basis, &gs, &config, Some(v))?;
            let best = path.best().cloned().ok_or_else(|| input("no fit on the path"))?;
            eprintln!("path: {} fits, lambda_max = {}", path.fits.len(), path.lambda_max);
            (best, Some(path.lambda_max))
        }
    };

    let created_unix = if args.deterministic {
        None
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
    };
    let info = TrainingInfo {
        n: data.n(),
        p: data.p(),
        seed: args.seed,
        created_unix,
        objective: fit.objective(),
        iterations: fit.iterations,
        converged: fit.converged,
        lambda_max,
        validation_cross_entropy: fit.validation_cross_entropy,
    };
    let model = ModelFile::from_fit(&fit, &gs, info);
    model.write(&args.out)?;
    if let Some(path) = &args.report {
        write_file(path, &fit.to_json()?)?;
    }

    println!("family: {}  penalty: {}", family.as_str(), penalty.as_str());
    println!("lambda: {}", fit.lambda);
    println!("objective: {}", fit.objective());
    println!("iterations: {} (restarts {})", fit.iterations, fit.restarts);
    println!("converged: {}", fit.converged);
    if let Some(ce) = fit.validation_cross_entropy {
        println!("validation cross-entropy: {ce}");
    }
    let effects = layout.effects();
    let penalized: Vec<String> = fit
        .support
        .iter()
        .filter(|&&(k, j)| gs.is_penalized(k, j))
        .map(|&(k, j)| format!("{}@{}", effects[k], j + 1))
        .collect();
    println!(
        "penalized support ({} blocks): {}",
        penalized.len(),
        penalized.join(" ")
    );
    println!("model written to {}", args.out.display());
    if !fit.converged {
        eprintln!("warning: solver did not converge");
        return Ok(1);
    }
    Ok(0)
}

fn run_predict(args: PredictArgs) -> Outcome {
    let model = ModelFile::read(&args.model)?;
    let layout = model.layout()?;
    let basis = BasisSet::new(&layout);
    let beta = model.beta()?;
    let x = io::read_table(&args.x)?;
    if x.values.ncols() != beta.num_predictors() {
        return Err(input(format!(
            "{} has {} columns but the model expects {}",
            args.x.display(),
            x.values.ncols(),
            beta.num_predictors()
        )));
    }
    let probs = predict_matrix(&beta, &basis, x.values.view())?;
    let text = io::probabilities_csv(&layout, &probs)?;
    match &args.out {
        Some(path) => write_file(path, &text)?,
        None => {
            // A closed pipe (e.g. `| head`) is not an error.
            let mut out = std::io::stdout().lock();
            if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(input(format!("stdout: {e}")));
                }
            }
        }
    }
    Ok(0)
}

fn run_interpret(args: InterpretArgs) -> Outcome {
    if !(args.tau >= 0.0) {
        return Err(input("tau must be >= 0"));
    }
    let model = ModelFile::read(&args.model)?;
    let beta = model.beta()?;
    let support = SupportPattern::from_blocks(&beta, args.tau);
    let report = IndependenceReport::from_support(&support)?;
    print!("{}", report.text);
    if let Some(path) = &args.json {
        write_file(path, &report.to_json()?)?;
    }
    if !report.hierarchy_ok {
        eprintln!("warning: {} hierarchy violations", report.violations.len());
        return Ok(1);
    }
    Ok(0)
}

fn load_sim_config(path: Option<&PathBuf>) -> Result<SimConfig, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            Ok(SimConfig::from_toml_str(&text)?)
        }
        None => Ok(SimConfig::default()),
    }
}

fn run_simulate(args: SimulateArgs) -> Outcome {
    let scheme = Scheme::try_from(args.scheme)?;
    let mut config = load_sim_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.n == 0 || args.p < 2 {
        return Err(input("simulate needs n >= 1 and p >= 2"));
    }
    let layout = config.layout()?;
    let basis = BasisSet::new(&layout);
    let data = simulation::replicate_data(&config, &basis, scheme, args.n, args.p, args.replicate)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| input(format!("{}: {e}", args.out_dir.display())))?;
    let mut x_header = vec!["intercept".to_string()];
    x_header.extend((1..=args.p).map(|j| format!("x{j}")));
    let y_header: Vec<String> = (0..layout.card())
        .map(|i| {
            format!(
                "y{}",
                io::cell_label(&layout, i).replace(['(', ')'], "").replace(',', "_")
            )
        })
        .collect();
    for (name, d) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        write_file(
            &args.out_dir.join(format!("{name}_x.csv")),
            &io::matrix_csv(&x_header, d.x())?,
        )?;
        write_file(
            &args.out_dir.join(format!("{name}_y.csv")),
            &io::matrix_csv(&y_header, d.y())?,
        )?;
    }
    let truth = assoclearn::blocks::BlocksRecord::from(&data.beta_star);
    write_file(
        &args.out_dir.join("truth.json"),
        &serde_json::to_string_pretty(&truth).map_err(Error::from)?,
    )?;
    println!(
        "wrote scheme {scheme} data (n = {}, p = {}) to {}",
        args.n,
        args.p,
        args.out_dir.display()
    );
    Ok(0)
}

fn run_study(args: StudyArgs) -> Outcome {
    let mut config = load_sim_config(args.config.as_ref())?;
    if args.full_scale {
        config = config.full_scale();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let result = simulation::run_study(&config)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| input(format!("{}: {e}", args.out_dir.display())))?;
    write_file(&args.out_dir.join("study.csv"), &result.rows_csv()?)?;
    write_file(&args.out_dir.join("replicates.csv"), &result.replicates_csv()?)?;
    write_file(&args.out_dir.join("plot.csv"), &result.plot_csv()?)?;
    write_file(&args.out_dir.join("study.json"), &result.to_json()?)?;
    for row in &result.rows {
        println!(
            "scheme {} n {:5} p {:3} {:9} hellinger {:.4} misclass {:.4} failures {}",
            row.scheme, row.n, row.p, row.estimator, row.hellinger_mean, row.misclassification_mean, row.failures
        );
    }
    let failures: Vec<_> = result
        .replicates
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| (r, e)))
        .collect();
    for (r, e) in &failures {
        eprintln!(
            "failed: scheme {} n {} p {} replicate {} {}: {e}",
            r.scheme, r.n, r.p, r.replicate, r.estimator
        );
    }
    Ok(if failures.is_empty() { 0 } else { 1 })
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("ASSOCLEARN_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| input(format!("ASSOCLEARN_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(input("ASSOCLEARN_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|_| match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Interpret(a) => run_interpret(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Study(a) => run_study(a),
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
