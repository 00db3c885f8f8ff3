//! Command-line front end. Flags become config overrides with the highest
//! precedence; everything else comes from `--config` and `SELFCITE_*`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::rerank::Selector;
use crate::segmenter::LanguageHint;

use super::{run, PipelineConfig, PipelineError, Task};

#[derive(Debug, Parser)]
#[command(name = "citereward", version, about = "Citation rewards, best-of-N reranking and preference data")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; per-record seeds derive from it and the record id.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct IoArgs {
    /// Input file (JSONL, or plain text for `segment`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// `oracle:<spec.json>` or an `http(s)://` scorer URL.
    #[arg(long)]
    pub scorer: Option<String>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Candidates per statement.
    #[arg(long)]
    pub n: Option<usize>,
    /// Cited-token cap.
    #[arg(long)]
    pub lmax: Option<usize>,
    /// Candidate JSONL file or `/v1/completions` sampling endpoint.
    #[arg(long)]
    pub candidates: Option<String>,
    /// Ranking criterion for candidates.
    #[arg(long)]
    pub selector: Option<Selector>,
    /// Keep candidates whose cited sentences repeat an earlier one.
    #[arg(long)]
    pub no_dedup: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split documents into numbered sentences.
    Segment {
        #[command(flatten)]
        io: IoArgs,
        /// Segmentation rules; auto-detected when unset.
        #[arg(long)]
        language: Option<LanguageHint>,
    },
    /// Score every statement's citation.
    Reward {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Best-of-N citation reranking.
    Rerank {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        rerank: RerankArgs,
        /// Audit JSONL path; defaults to `<output>.audit.jsonl`.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Build length-balanced preference pairs.
    BuildPrefs {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        rerank: RerankArgs,
        /// Smallest distance from an anchor for inserted sentences.
        #[arg(long)]
        window_min: Option<usize>,
        /// Largest distance from an anchor for inserted sentences.
        #[arg(long)]
        window_max: Option<usize>,
        /// Context token budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Shift citations to make negative examples.
    Perturb {
        #[command(flatten)]
        io: IoArgs,
        /// Smallest absolute shift applied to each span.
        #[arg(long)]
        shift_min: Option<usize>,
        /// Largest absolute shift applied to each span.
        #[arg(long)]
        shift_max: Option<usize>,
    },
    /// Surrogate-model attribution.
    Contextcite {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Ablations per statement.
        #[arg(long)]
        calls: Option<usize>,
        /// Minimum surrogate weight for a sentence to be cited.
        #[arg(long)]
        t: Option<f64>,
        /// Cumulative span mass at which selection stops.
        #[arg(long)]
        p: Option<f64>,
        /// Maximum spans per statement.
        #[arg(long)]
        k: Option<usize>,
        /// L1 penalty of the surrogate fit.
        #[arg(long)]
        lambda: Option<f64>,
        /// Weights JSONL path; defaults to `<output>.weights.jsonl`.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Drop attributed examples with too many empty statements.
    SftFilter {
        #[command(flatten)]
        io: IoArgs,
        /// Largest tolerated fraction of statements without citations.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

type Overrides = Vec<(String, Option<Value>)>;

fn set(o: &mut Overrides, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        o.push((key.to_string(), Some(v)));
    }
}

fn int(v: Option<usize>) -> Option<Value> {
    v.map(|x| Value::Integer(x as i64))
}

fn float(v: Option<f64>) -> Option<Value> {
    v.map(Value::Float)
}

fn path(v: Option<PathBuf>) -> Option<Value> {
    v.map(|p| Value::String(p.display().to_string()))
}

fn text<T: serde::Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| Value::try_from(x).expect("enum serializes to a string"))
}

fn io_overrides(o: &mut Overrides, io: IoArgs) {
    set(o, "io.input", path(io.input));
    set(o, "io.output", path(io.output));
}

fn scorer_overrides(o: &mut Overrides, s: ScorerArgs) -> Result<(), PipelineError> {
    let Some(spec) = s.scorer else {
        return Ok(());
    };
    if let Some(file) = spec.strip_prefix("oracle:") {
        o.push(("scorer.kind".into(), Some(Value::String("oracle".into()))));
        o.push(("scorer.oracle_spec_path".into(), Some(Value::String(file.into()))));
        o.push(("scorer.endpoint".into(), None));
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        o.push(("scorer.kind".into(), Some(Value::String("http".into()))));
        o.push(("scorer.endpoint".into(), Some(Value::String(spec))));
        o.push(("scorer.oracle_spec_path".into(), None));
    } else {
        return Err(PipelineError::Config(format!(
            "--scorer must be `oracle:<path>` or an http(s) URL, got `{spec}`"
        )));
    }
    Ok(())
}

fn rerank_overrides(o: &mut Overrides, r: RerankArgs) {
    set(o, "rerank.n", int(r.n));
    set(o, "rerank.l_max_tokens", int(r.lmax));
    set(o, "rerank.selector", text(r.selector));
    set(o, "io.candidates", r.candidates.map(Value::String));
    if r.no_dedup {
        o.push(("rerank.dedup".into(), Some(Value::Boolean(false))));
    }
}

impl Cli {
    /// Task plus flag overrides, in application order.
    pub fn overrides(self) -> Result<(Task, Overrides), PipelineError> {
        let mut o = Overrides::new();
        set(&mut o, "seed", self.seed.map(|s| Value::Integer(s as i64)));
        set(&mut o, "workers", int(self.workers));
        let task = match self.command {
            Command::Segment { io, language } => {
                io_overrides(&mut o, io);
                set(&mut o, "segment.language", text(language));
                Task::Segment
            }
            Command::Reward { io, scorer } => {
                io_overrides(&mut o, io);
                scorer_overrides(&mut o, scorer)?;
                Task::Reward
            }
            Command::Rerank { io, scorer, rerank, audit } => {
                io_overrides(&mut o, io);
                scorer_overrides(&mut o, scorer)?;
                rerank_overrides(&mut o, rerank);
                set(&mut o, "io.aux_output", path(audit));
                Task::Rerank
            }
            Command::BuildPrefs {
                io,
                scorer,
                rerank,
                window_min,
                window_max,
                budget,
            } => {
                io_overrides(&mut o, io);
                scorer_overrides(&mut o, scorer)?;
                rerank_overrides(&mut o, rerank);
                set(&mut o, "balance.window_min", int(window_min));
                set(&mut o, "balance.window_max", int(window_max));
                set(&mut o, "truncation.budget_tokens", int(budget));
                Task::BuildPrefs
            }
            Command::Perturb { io, shift_min, shift_max } => {
                io_overrides(&mut o, io);
                set(&mut o, "perturb.shift_min", int(shift_min));
                set(&mut o, "perturb.shift_max", int(shift_max));
                Task::Perturb
            }
            Command::Contextcite {
                io,
                scorer,
                calls,
                t,
                p,
                k,
                lambda,
                weights_out,
            } => {
                io_overrides(&mut o, io);
                scorer_overrides(&mut o, scorer)?;
                set(&mut o, "contextcite.calls", int(calls));
                set(&mut o, "extraction.t", float(t));
                set(&mut o, "extraction.p", float(p));
                set(&mut o, "extraction.k", int(k));
                set(&mut o, "contextcite.lambda", float(lambda));
                set(&mut o, "io.aux_output", path(weights_out));
                Task::Contextcite
            }
            Command::SftFilter { io, threshold } => {
                io_overrides(&mut o, io);
                set(&mut o, "sft.threshold", float(threshold));
                Task::SftFilter
            }
        };
        Ok((task, o))
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args`, runs the task and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let config_file = cli.config.clone();
    let result = cli.overrides().and_then(|(task, flags)| {
        let cfg = PipelineConfig::resolve(config_file.as_deref(), std::env::vars(), &flags)?;
        run(task, &cfg)
    });
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("citereward: {e}");
            e.exit_code()
        }
    }
}
