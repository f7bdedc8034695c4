use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use manicode::analysis::{run_suite, SuiteConfig};
use manicode::coders::{encode, mean_reconstruction_error, CoderConfig, CoderKind};
use manicode::dictionary::{init_dictionary, Dictionary, DEFAULT_LR};
use manicode::io::{metrics_csv, read_matrix, scatter_svg, write_matrix};
use manicode::toy_gan::{checkpoint_files, make_dataset, train, DatasetKind, TrainConfig};
use manicode::{Error, Rng};

const EXIT_FILE: u8 = 3;
const EXIT_USAGE: u8 = 2;
const EXIT_CODER: u8 = 4;
const EXIT_DIVERGED: u8 = 5;
const EXIT_CHECK_FAILED: u8 = 6;
const EXIT_STALL: u8 = 7;

#[derive(Parser)]
#[command(name = "manicode", version, about = "Feature coders, dictionary learning and property checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the columns of a matrix against a dictionary
    Encode(EncodeArgs),
    /// Train the toy GAN from a config file
    Train(TrainArgs),
    /// Run the numerical property checks on a random dictionary
    Verify(VerifyArgs),
    /// Write a toy dataset as a matrix file
    Gendata(GendataArgs),
    /// Fit a dictionary to a matrix file
    Learndict(LearndictArgs),
}

#[derive(Args)]
struct CoderArgs {
    /// ha, sc, sc+, omp, llc, sa, lcsa
    #[arg(long, default_value = "lcsa")]
    coder: CoderKind,
    #[arg(long, default_value_t = 1.2)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    kprime: usize,
    #[arg(long, default_value_t = 0.1)]
    kappa: f64,
    #[arg(long, default_value_t = 3)]
    tau: usize,
    #[arg(long, default_value_t = 1e-6)]
    rho: f64,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Inner step size of sc/sc+
    #[arg(long, default_value_t = 0.05)]
    coder_lr: f64,
}

impl CoderArgs {
    fn config(&self) -> CoderConfig {
        CoderConfig {
            kind: self.coder,
            sigma: self.sigma,
            kprime: self.kprime,
            kappa: self.kappa,
            tau: self.tau,
            rho: self.rho,
            iters: self.iters,
            lr: self.coder_lr,
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    coder: CoderArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// d,k,kprime
    #[arg(long, default_value = "8,64,8", value_parser = parse_dims)]
    dims: (usize, usize, usize),
    #[arg(long, default_value_t = 1.2)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, hide = true)]
    bound_scale: f64,
}

#[derive(Args)]
struct GendataArgs {
    /// ring8, grid25 or twomoons
    #[arg(long)]
    dataset: DatasetKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearndictArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of atoms; ignored with --init
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    /// Starting atoms instead of a random draw
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the loss before every step, one per line
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    coder: CoderArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [d, k, kp] => Ok((d, k, kp)),
        _ => Err(format!("expected d,k,kprime, got '{s}'")),
    }
}

/// An error paired with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format(_) => EXIT_FILE,
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::SamplingStall { .. } => EXIT_STALL,
        Error::Block { source, .. } => code_for(source),
        _ => EXIT_CODER,
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure::new(code_for(&err), err.to_string())
    }
}

fn file_failure(path: &Path, err: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_FILE, format!("{}: {err}", path.display()))
}

fn load(path: &Path) -> Result<manicode::Matrix, Failure> {
    read_matrix(path).map_err(|e| file_failure(path, e))
}

fn save(path: &Path, m: &manicode::Matrix) -> Result<(), Failure> {
    write_matrix(path, m).map_err(|e| file_failure(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| file_failure(path, e))
}

fn cmd_encode(args: &EncodeArgs) -> Result<(), Failure> {
    let x = load(&args.input)?;
    let atoms = load(&args.dict)?;
    let cfg = args.coder.config();
    let mut rng = Rng::new(args.seed);
    let codes = encode(&x, &atoms, &cfg, &mut rng).map_err(|e| Failure::new(EXIT_CODER, e.to_string()))?;
    let err = mean_reconstruction_error(&x, &atoms, &codes).map_err(|e| Failure::new(EXIT_CODER, e.to_string()))?;
    save(&args.out, &codes.alpha)?;
    println!("{err}");
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config).map_err(|e| file_failure(&args.config, e))?;
    let mut cfg = TrainConfig::from_config_str(&text).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = train(&cfg)?;
    let ckpt = args.out_dir.join("checkpoint");
    fs::create_dir_all(&ckpt).map_err(|e| file_failure(&ckpt, e))?;
    write_file(&args.out_dir.join("metrics.csv"), metrics_csv(&out.history).as_bytes())?;
    let svg = scatter_svg(&out.samples, &cfg.dataset.centers())?;
    write_file(&args.out_dir.join("samples.svg"), svg.as_bytes())?;
    write_file(&args.out_dir.join("config.txt"), cfg.to_config_string().as_bytes())?;
    for (name, bytes) in checkpoint_files(&out)? {
        write_file(&ckpt.join(name), &bytes)?;
    }
    if let Some(last) = out.history.last() {
        println!("step={} modes={} hq={} beta={} gamma={}", last.step, last.modes, last.hq, last.beta, last.gamma);
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let (d, k, kprime) = args.dims;
    let cfg = SuiteConfig {
        d,
        k,
        kprime,
        sigma: args.sigma,
        samples: args.samples,
        seed: args.seed,
        bound_scale: args.bound_scale,
    };
    let report = run_suite(&cfg).map_err(|e| match e {
        Error::InvalidParameter(m) => Failure::new(EXIT_USAGE, m),
        other => other.into(),
    })?;
    let text = report.to_text();
    match &args.out {
        Some(path) => write_file(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    if report.all_pass() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.existential && !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::new(EXIT_CHECK_FAILED, format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_gendata(args: &GendataArgs) -> Result<(), Failure> {
    let mut rng = Rng::new(args.seed);
    let x = make_dataset(args.dataset, args.n, &mut rng).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    save(&args.out, &x)
}

fn cmd_learndict(args: &LearndictArgs) -> Result<(), Failure> {
    let x = load(&args.input)?;
    let rng = Rng::new(args.seed);
    let mut dict = match &args.init {
        Some(path) => Dictionary::new(load(path)?, args.lr),
        None => init_dictionary(x.rows(), args.k, &mut rng.split(0)).map(|mut d| {
            d.lr = args.lr;
            d
        }),
    }
    .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    if dict.dim() != x.rows() {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("dictionary has dimension {}, data has {}", dict.dim(), x.rows()),
        ));
    }
    let cfg = args.coder.config();
    let mut coder_rng = rng.split(1);
    let coder_err = |e: Error| Failure::new(EXIT_CODER, e.to_string());
    let mut trace = Vec::with_capacity(args.steps + 1);
    for _ in 0..args.steps {
        let codes = encode(&x, dict.atoms(), &cfg, &mut coder_rng).map_err(coder_err)?;
        trace.push(dict.dl_step(&x, &codes).map_err(coder_err)?);
    }
    let codes = encode(&x, dict.atoms(), &cfg, &mut coder_rng).map_err(coder_err)?;
    let residual = x.sub(&manicode::coders::decode(&codes, dict.atoms()).map_err(coder_err)?).map_err(coder_err)?;
    let loss = residual.frobenius_sq();
    trace.push(loss);
    if let Some(path) = &args.trace {
        let text: String = trace.iter().map(|v| format!("{v}\n")).collect();
        write_file(path, text.as_bytes())?;
    }
    save(&args.out, dict.atoms())?;
    let meta_path = args.out.with_extension("meta");
    write_file(&meta_path, dict.metadata().as_bytes())?;
    println!("{loss}");
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("MANICODE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Failure::new(EXIT_USAGE, format!("MANICODE_THREADS must be a count, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Gendata(a) => cmd_gendata(a),
        Command::Learndict(a) => cmd_learndict(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
