use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use milnce::checkpoint::Checkpoint;
use milnce::corpus::{generate_corpus, write_atomic, Corpus, GenConfig};
use milnce::evalkit::{ablation_grid, evaluate_with, AblationAxes, EvalOptions, OracleScorer, PairScorer};
use milnce::gradcheck::{gradcheck, GradcheckConfig};
use milnce::trainer::{TrainConfig, Trainer};
use milnce::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;
const EXIT_ARTIFACT: u8 = 5;

#[derive(Parser)]
#[command(name = "milnce", version, about = "Contrastive clip/narration embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Every field is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a top-level scalar of the run configuration, e.g. `seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train encoders on a corpus; writes `checkpoint.bin` and `metrics.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out streams of a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score pairs from ground truth instead of the encoders.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Finite-difference check of every loss through both encoders.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Train and evaluate every cell of an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing corpus; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// CSV output; a JSON summary is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Paths {
    corpus: PathBuf,
    run_dir: PathBuf,
    eval: PathBuf,
    ablation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.json".into(),
            run_dir: "run".into(),
            eval: "eval.json".into(),
            ablation: "ablation.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationConfig {
    axes: AblationAxes,
    seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axes: AblationAxes::default(),
            seeds: (0..5).collect(),
        }
    }
}

/// Everything one invocation needs. The top-level `seed` is the only seed;
/// it is copied into the generator, trainer and gradient-check sections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    gen: GenConfig,
    train: TrainConfig,
    eval: EvalOptions,
    gradcheck: GradcheckConfig,
    ablation: AblationConfig,
    paths: Paths,
}

const SEEDED_SECTIONS: [&str; 3] = ["gen", "train", "gradcheck"];

impl RunConfig {
    fn resolve(mut self) -> Self {
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self
    }

    /// The configuration as accepted on input: section seeds are implied by
    /// the top-level one and left out.
    fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for s in SEEDED_SECTIONS {
            if let Some(obj) = v.get_mut(s).and_then(Value::as_object_mut) {
                obj.remove("seed");
            }
        }
        v
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) => EXIT_CONFIG,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::VersionMismatch { .. } | Error::Format(_) => EXIT_ARTIFACT,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_config(text: &str, overrides: &[String]) -> CliResult<RunConfig> {
    let mut value: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("config parse error: {e}")))?
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Failure::config("config must be a JSON object"))?;
    for s in SEEDED_SECTIONS {
        if obj.get(s).and_then(|v| v.get("seed")).is_some() {
            return Err(Failure::config(format!(
                "`{s}.seed` is not allowed; set the top-level `seed`"
            )));
        }
    }
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override `{o}` is not KEY=VALUE")))?;
        match defaults.get(key) {
            Some(d) if !d.is_object() && !d.is_array() => {}
            Some(_) => return Err(Failure::config(format!("`{key}` is not a top-level scalar"))),
            None => return Err(Failure::config(format!("unknown config key `{key}`"))),
        }
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        obj.insert(key.to_string(), v);
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Failure::config(format!("invalid config: {e}")))?;
    Ok(cfg.resolve())
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = parse_config(&text, &common.overrides)?;
    cfg.gen.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: format!("{}: {e}", path.display()),
    }
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    Corpus::load(path).map_err(|e| match e {
        Error::Io(io) => io_failure(path, io),
        Error::Json(j) => Failure {
            code: EXIT_ARTIFACT,
            message: format!("{}: not a corpus file: {j}", path.display()),
        },
        other => other.into(),
    })
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("output serializes");
    out.push(b'\n');
    out
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let corpus = generate_corpus(&cfg.gen)?;
    corpus.save(out)?;
    let stats = corpus.stats();
    println!(
        "wrote {} ({} streams, {} segments): misaligned fraction {:.4}, irrelevant fraction {:.4}",
        out.display(),
        corpus.streams.len(),
        stats.segments,
        stats.misaligned_fraction,
        stats.irrelevant_fraction
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, corpus_path: &Path, out: &Path) -> CliResult<()> {
    let corpus = load_corpus(corpus_path)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &corpus)?;
    let mut log = serde_json::to_vec(&serde_json::json!({ "config": cfg.echo() })).expect("serializes");
    log.push(b'\n');
    trainer.run_until(cfg.train.total_steps, &mut |r| {
        serde_json::to_writer(&mut log, r)?;
        log.push(b'\n');
        Ok(())
    })?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let ckpt = out.join("checkpoint.bin");
    trainer.checkpoint().save(&ckpt)?;
    write_atomic(&out.join("metrics.jsonl"), &log)?;
    println!("trained {} steps; wrote {}", trainer.step_count(), ckpt.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path, corpus_path: &Path, out: &Path, oracle: bool) -> CliResult<()> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(|e| match e {
        Error::Io(io) => io_failure(ckpt_path, io),
        other => other.into(),
    })?;
    let corpus = load_corpus(corpus_path)?;
    ckpt.config.check_corpus(&corpus)?;
    let scorer: &dyn PairScorer = if oracle { &OracleScorer } else { &ckpt.params };
    let report = evaluate_with(scorer, &ckpt.params, &corpus, &cfg.eval)?;
    let doc = serde_json::json!({
        "config": cfg.echo(),
        "checkpoint": { "step": ckpt.step, "train": ckpt.config },
        "corpus": corpus.config,
        "report": report,
    });
    write_atomic(out, &to_json(&doc))?;
    let r = &report.retrieval;
    println!(
        "R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  MedR {}  localization {:.4}{}",
        r.recall_at_k[&1],
        r.recall_at_k[&5],
        r.recall_at_k[&10],
        r.median_rank,
        report.localization.average_recall,
        report
            .probe
            .as_ref()
            .map_or(String::new(), |p| format!("  probe {:.4}", p.accuracy))
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, seed: Option<u64>, corrupt: bool) -> CliResult<()> {
    let gc = GradcheckConfig {
        seed: seed.unwrap_or(cfg.gradcheck.seed),
        corrupt,
        ..cfg.gradcheck.clone()
    };
    let report = gradcheck(&gc)?;
    let mut kinds: Vec<_> = report.checks.iter().map(|c| c.loss).collect();
    kinds.dedup();
    for kind in kinds {
        let worst = report
            .checks
            .iter()
            .filter(|c| c.loss == kind)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max);
        let verdict = if worst <= gc.tolerance { "ok" } else { "FAIL" };
        println!("{:<11} max relative error {worst:.3e}  {verdict}", kind.name());
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!(
                "gradient check failed: {:.3e} > {:.1e}",
                report.max_rel_error, gc.tolerance
            ),
        })
    }
}

fn cmd_ablate(cfg: &RunConfig, corpus_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let corpus = match corpus_path {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(&cfg.gen)?,
    };
    let table = ablation_grid(&cfg.ablation.axes, &cfg.train, &corpus, &cfg.ablation.seeds, &cfg.eval)?;
    let echo = cfg.echo();
    table.write_csv(out, &format!("config={echo}"))?;
    let summary = out.with_extension("json");
    let medians: Vec<_> = table.rows.iter().filter(|r| r.seed == "median").collect();
    write_atomic(
        &summary,
        &to_json(&serde_json::json!({ "config": echo, "corpus": corpus.config, "medians": medians, "table": table })),
    )?;
    for r in &medians {
        println!(
            "cell {:>2} {:<10} K={:<2} B={:<3} {:<16} R@10 {}  loc {}",
            r.cell,
            r.loss.name(),
            r.bag_size,
            r.batch_size,
            r.negative_mode.name(),
            r.r10.map_or("-".into(), |v| format!("{v:.4}")),
            r.loc_recall.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("wrote {} and {}", out.display(), summary.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            cmd_gen(&cfg, out.as_deref().unwrap_or(&cfg.paths.corpus))
        }
        Command::Train { common, corpus, out } => {
            let cfg = load_config(&common)?;
            cmd_train(
                &cfg,
                corpus.as_deref().unwrap_or(&cfg.paths.corpus),
                out.as_deref().unwrap_or(&cfg.paths.run_dir),
            )
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            out,
            oracle,
        } => {
            let cfg = load_config(&common)?;
            cmd_eval(
                &cfg,
                &checkpoint,
                corpus.as_deref().unwrap_or(&cfg.paths.corpus),
                out.as_deref().unwrap_or(&cfg.paths.eval),
                oracle,
            )
        }
        Command::Gradcheck {
            common,
            seed,
            corrupt_gradient,
        } => {
            let cfg = load_config(&common)?;
            cmd_gradcheck(&cfg, seed, corrupt_gradient)
        }
        Command::Ablate { common, corpus, out } => {
            let cfg = load_config(&common)?;
            cmd_ablate(&cfg, corpus.as_deref(), out.as_deref().unwrap_or(&cfg.paths.ablation))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.gen, GenConfig::default());
    }

    #[test]
    fn top_level_seed_reaches_every_section() {
        let cfg = parse_config(r#"{"seed": 7}"#, &[]).unwrap();
        assert_eq!((cfg.gen.seed, cfg.train.seed, cfg.gradcheck.seed), (7, 7, 7));
        let cfg = parse_config("{}", &["seed=9".into()]).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn strict_parsing() {
        assert_eq!(parse_config(r#"{"sed": 1}"#, &[]).unwrap_err().code, EXIT_CONFIG);
        assert_eq!(parse_config(r#"{"train": {"bagsize": 3}}"#, &[]).unwrap_err().code, EXIT_CONFIG);
        assert_eq!(parse_config(r#"{"gen": {"seed": 3}}"#, &[]).unwrap_err().code, EXIT_CONFIG);
        let err = parse_config("{\n  \"seed\": ,\n}", &[]).unwrap_err();
        assert!(err.message.contains("line 2"), "{}", err.message);
    }

    #[test]
    fn overrides_are_top_level_scalars_only() {
        assert!(parse_config("{}", &["train=1".into()]).is_err());
        assert!(parse_config("{}", &["nope=1".into()]).is_err());
        assert!(parse_config("{}", &["seed".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse_config(r#"{"seed": 4, "train": {"bag_size": 3, "loss": "nce"}}"#, &[]).unwrap();
        let again = parse_config(&cfg.echo().to_string(), &[]).unwrap();
        assert_eq!(again.echo(), cfg.echo());
        assert_eq!(again.train, cfg.train);
    }
}
