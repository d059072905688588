mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use diffrank_core::synthworld::{self, Manifest, RequestRecord, EVAL_SPLIT, TRAIN_SPLIT};
use diffrank_core::trainer::{self, Axis, Trained};
use diffrank_core::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const TRAIN_FILE: &str = "train.jsonl";
const EVAL_FILE: &str = "eval.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const MODEL_FILE: &str = "model.bin";

#[derive(Parser)]
#[command(name = "diffrank", version, about = "Diffusion ranking on synthetic search logs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval JSONL files plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Regenerate from an existing manifest instead of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model and write model.bin and report.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to --out.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on eval.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to <out>/model.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reverse-chain length, 1..=T.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate one model per cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `name` or `name=v1,v2`; repeatable.
        #[arg(long)]
        axis: Vec<String>,
    },
    /// Export per-position interest norms for one request as CSV.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// File holding one JSON request record.
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Process failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: format!("config error: {}", msg.into()),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            msg: format!("{}: {e}", path.display()),
        }
    }

    fn missing(path: &Path) -> Self {
        Self {
            code: 3,
            msg: format!("missing artifact: {}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Io(_)) { 2 } else { 1 };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn prepare_out(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let probe = dir.join(".diffrank-write-probe");
    std::fs::write(&probe, b"").map_err(|e| Failure::io(dir, e))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(path, e))?;
    text.push('\n');
    write_file(path, text)
}

fn read_split(path: &Path) -> CliResult<Vec<RequestRecord>> {
    if !path.exists() {
        return Err(Failure::missing(path));
    }
    synthworld::load_jsonl(path).map_err(|e| match e {
        Error::Io(io) => Failure::io(path, io),
        other => Failure {
            code: 1,
            msg: format!("{}: {other}", path.display()),
        },
    })
}

fn load_checkpoint(path: &Path) -> CliResult<Trained> {
    if !path.exists() {
        return Err(Failure::missing(path));
    }
    Trained::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::io(path, io),
        other => Failure {
            code: 3,
            msg: format!("unreadable checkpoint {}: {other}", path.display()),
        },
    })
}

fn gen_data(common: &Common, manifest: Option<&Path>) -> CliResult {
    let m = match manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| Failure::missing(p))?;
            let m: Manifest = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            m.check_format().map_err(|e| Failure::config(e.to_string()))?;
            m
        }
        None => {
            let cfg = RunConfig::load(common.config.as_deref(), common.seed).map_err(Failure::config)?;
            Manifest::new(cfg.seed, cfg.data.n_train, cfg.data.n_eval, cfg.world)
        }
    };
    prepare_out(&common.out)?;
    let world = synthworld::gen_world(m.seed, &m.world)?;
    for (file, split, n) in [(TRAIN_FILE, TRAIN_SPLIT, m.n_train), (EVAL_FILE, EVAL_SPLIT, m.n_eval)] {
        let path = common.out.join(file);
        let f = std::fs::File::create(&path).map_err(|e| Failure::io(&path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let records: Vec<RequestRecord> = synthworld::gen_dataset(&world, m.seed, split, n).collect();
        let count = synthworld::write_jsonl(&mut w, &records)?;
        std::io::Write::flush(&mut w).map_err(|e| Failure::io(&path, e))?;
        println!("wrote {count} records to {}", path.display());
    }
    write_json(&common.out.join(MANIFEST_FILE), &m)
}

fn train(common: &Common, data: Option<&Path>) -> CliResult {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed).map_err(Failure::config)?;
    prepare_out(&common.out)?;
    let dir = data.unwrap_or(&common.out);
    let train_set = read_split(&dir.join(TRAIN_FILE))?;
    let eval_path = dir.join(EVAL_FILE);
    let eval_set = if eval_path.exists() { Some(read_split(&eval_path)?) } else { None };
    let (model, report) = trainer::train(&train_set, eval_set.as_deref(), &cfg.train)?;
    let model_path = common.out.join(MODEL_FILE);
    model.save(&model_path).map_err(|e| Failure::io(&model_path, e))?;
    write_json(&common.out.join("report.json"), &report)?;
    if let Some(m) = report.metrics {
        println!("auc {:.6} gauc {:.6}", m.auc, m.gauc);
    }
    Ok(())
}

fn eval(common: &Common, data: Option<&Path>, checkpoint: Option<&Path>, steps: Option<usize>) -> CliResult {
    let ckpt = checkpoint.map_or_else(|| common.out.join(MODEL_FILE), Path::to_path_buf);
    let model = load_checkpoint(&ckpt)?;
    let steps = steps.unwrap_or(model.cfg.eval_steps);
    let t_max = model.cfg.diffusion.t_steps;
    if steps < 1 || steps > t_max {
        return Err(Failure::config(format!("--steps must lie in 1..={t_max}, got {steps}")));
    }
    prepare_out(&common.out)?;
    let dir = data.unwrap_or(&common.out);
    let eval_set = read_split(&dir.join(EVAL_FILE))?;
    let m = trainer::evaluate(&model, &eval_set, steps)?;
    write_json(&common.out.join(format!("eval_steps{steps}.json")), &m)?;
    println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
    Ok(())
}

fn ablate(common: &Common, data: Option<&Path>, axis: &[String]) -> CliResult {
    let cfg = RunConfig::load(common.config.as_deref(), common.seed).map_err(Failure::config)?;
    let specs: Vec<&String> = if axis.is_empty() { cfg.ablate.axes.iter().collect() } else { axis.iter().collect() };
    let axes = specs
        .iter()
        .map(|a| Axis::parse(a))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::config(e.to_string()))?;
    prepare_out(&common.out)?;
    let dir = data.unwrap_or(&common.out);
    let train_set = read_split(&dir.join(TRAIN_FILE))?;
    let eval_set = read_split(&dir.join(EVAL_FILE))?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => cfg.ablate.seeds.clone(),
    };
    let cells = trainer::run_ablation_matrix(&train_set, &eval_set, &cfg.train, &axes, &seeds, trainer::worker_threads())?;
    write_file(&common.out.join("ablation.csv"), trainer::ablation_csv(&cells, &axes))?;
    write_json(&common.out.join("ablation.json"), &cells)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    println!("{} cells, {failed} failed", cells.len());
    Ok(())
}

fn inspect(common: &Common, checkpoint: Option<&Path>, request: &Path, steps: Option<usize>) -> CliResult {
    let ckpt = checkpoint.map_or_else(|| common.out.join(MODEL_FILE), Path::to_path_buf);
    let model = load_checkpoint(&ckpt)?;
    let records = read_split(request)?;
    let [rec] = records.as_slice() else {
        return Err(Failure::config(format!(
            "{} must hold exactly one request, found {}",
            request.display(),
            records.len()
        )));
    };
    let steps = steps.unwrap_or(model.cfg.eval_steps);
    let rows = trainer::inspect_request(&model, rec, steps)?;
    prepare_out(&common.out)?;
    let path = common.out.join("inspect.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::io(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::io(&path, e))?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.cmd {
        Command::GenData { common, manifest } => gen_data(common, manifest.as_deref()),
        Command::Train { common, data } => train(common, data.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            steps,
        } => eval(common, data.as_deref(), checkpoint.as_deref(), *steps),
        Command::Ablate { common, data, axis } => ablate(common, data.as_deref(), axis),
        Command::Inspect {
            common,
            checkpoint,
            request,
            steps,
        } => inspect(common, checkpoint.as_deref(), request, *steps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
