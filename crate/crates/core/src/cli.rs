//! Command-line front end. Every subcommand prints line-oriented
//! `key=value` reports; failures print `error class=<class>: <message>`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, save_model};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gradcheck::model_grad_check;
use crate::graph::{chronological_split, ingest_csv, reconnection_stats};
use crate::infer::cross_domain_eval;
use crate::model::ClgModel;
use crate::synth::{ambiguity_experiment, generate, to_csv, AmbiguityConfig, DegreeCorr, GeneratorKind, GeneratorSpec};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Parser)]
#[command(name = "linkgen", version, about = "Link prediction on dynamic graphs conditioned on evolution history")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// TOML file with `[encoder]`, `[time]`, `[decoder]`, `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an edge CSV and report counts.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        domain: u32,
    },
    /// Generate a synthetic edge stream.
    Gen(GenArgs),
    /// Train one model on every CSV in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test edges of a target graph given a context graph.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Context CSV, or `self` for the target's own train split.
        #[arg(long, default_value = "self")]
        context: String,
        /// Sequence length including the predicted pair.
        #[arg(long)]
        context_len: usize,
        /// Optional per-edge score CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Reconnection statistics of an edge stream.
    Analyze {
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the full encoder/decoder stack.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
    /// Synthetic experiments.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub nodes: usize,
    #[arg(long)]
    pub edges: usize,
    /// Closure or reconnect probability.
    #[arg(long)]
    pub p: f64,
    /// `+`, `-` or `0`.
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    pub degree_corr: String,
    #[arg(long, default_value_t = 0.8)]
    pub activity_skew: f64,
    #[arg(long, default_value_t = 32)]
    pub candidates: usize,
    #[arg(long, default_value_t = 32)]
    pub wedge_window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Joint training on triadic and anti-triadic graphs, evaluated with
    /// and without context.
    Ambiguity {
        #[arg(long)]
        out: PathBuf,
        /// Closure probability of both generators.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        wedge_window: Option<usize>,
        #[arg(long)]
        activity_skew: Option<f64>,
        #[arg(long)]
        candidates: Option<usize>,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<Option<Config>> {
    path.map(Config::load).transpose()
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no .csv files in {}", dir.display())));
    }
    Ok(files)
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if cli.precision == Precision::F32 {
        return Err(Error::Validation(
            "32-bit mode is not available; all computation is 64-bit".into(),
        ));
    }
    let seed = cli.seed.unwrap_or(0);
    let cfg = load_config(cli.config.as_deref())?;
    let say = |out: &mut dyn Write, s: String| -> Result<()> {
        writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
    };
    match cli.command {
        Command::Ingest { input, domain } => {
            let g = ingest_csv(&input, domain)?;
            say(
                out,
                format!(
                    "edges={} nodes={} t_min={} t_max={} domain={domain}",
                    g.num_edges(),
                    g.active_nodes(),
                    g.min_time().unwrap_or(0.0),
                    g.max_time().unwrap_or(0.0)
                ),
            )
        }
        Command::Gen(a) => {
            let spec = GeneratorSpec {
                degree_corr: a.degree_corr.parse::<DegreeCorr>()?,
                activity_skew: a.activity_skew,
                candidates: a.candidates,
                wedge_window: a.wedge_window,
                ..GeneratorSpec::new(a.kind.parse::<GeneratorKind>()?, a.nodes, a.edges, a.p, seed)
            };
            let gen = generate(&spec)?;
            write_file(&a.out, to_csv(&gen.graph).as_bytes())?;
            say(
                out,
                format!(
                    "edges={} fallbacks={} rule_events={}",
                    gen.graph.num_edges(),
                    gen.meta.fallbacks,
                    gen.meta.rule_events
                ),
            )
        }
        Command::Train { data, out: ckpt } => {
            let mut cfg = cfg.unwrap_or_default();
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let s = cfg.train.split;
            let mut domains = Vec::new();
            for (i, f) in csv_files(&data)?.iter().enumerate() {
                let g = ingest_csv(f, i as u32)?;
                domains.push(chronological_split(&g, (s[0], s[1], s[2]))?.train);
            }
            let mut model = ClgModel::new(cfg.clone(), cfg.train.seed)?;
            let mut lines = String::new();
            let mut io_err = None;
            let report = train(&mut model, &domains, &mut |r| {
                let l = r.log_line();
                if let Err(e) = writeln!(out, "{l}") {
                    io_err.get_or_insert(e);
                }
                lines.push_str(&l);
                lines.push('\n');
            })?;
            if let Some(e) = io_err {
                return Err(Error::io("<stdout>", e));
            }
            save_model(&model, &ckpt)?;
            let mut log = ckpt.clone().into_os_string();
            log.push(".metrics.log");
            write_file(Path::new(&log), lines.as_bytes())?;
            say(out, format!("steps={} checkpoint={}", report.steps, ckpt.display()))
        }
        Command::Eval {
            ckpt,
            target,
            context,
            context_len,
            scores,
        } => {
            let model = load_model(&ckpt, cfg)?;
            let s = model.cfg.train.split;
            let tg = ingest_csv(&target, 0)?;
            let split = chronological_split(&tg, (s[0], s[1], s[2]))?;
            let ctx = if context == "self" {
                split.train.clone()
            } else {
                ingest_csv(&context, 1)?
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = cross_domain_eval(&model, &split, &ctx, context_len, &mut rng)?;
            if let Some(path) = scores {
                let mut text = String::from("src,dst,t,label,score\n");
                for e in &report.scores {
                    text.push_str(&format!(
                        "{},{},{},{},{}\n",
                        tg.raw_id(e.u),
                        tg.raw_id(e.v),
                        e.t,
                        e.label,
                        e.score
                    ));
                }
                write_file(&path, text.as_bytes())?;
            }
            say(out, report.summary_line())
        }
        Command::Analyze { input } => {
            let st = reconnection_stats(&ingest_csv(&input, 0)?)?;
            let pearson = st.pearson.map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}"));
            say(out, format!("possibility={:.4} pearson={pearson}", st.possibility))
        }
        Command::Gradcheck {
            hidden,
            layers,
            per_param,
        } => {
            let r = model_grad_check(hidden, layers, per_param, seed)?;
            say(
                out,
                format!("max_rel_err={:.3e} checked={} worst={}", r.max_rel_err, r.checked, r.worst),
            )?;
            if r.max_rel_err >= 1e-4 {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} at {}",
                    r.max_rel_err, r.worst
                )));
            }
            Ok(())
        }
        Command::Experiment {
            which:
                Experiment::Ambiguity {
                    out: path,
                    p,
                    wedge_window,
                    activity_skew,
                    candidates,
                },
        } => {
            let d = AmbiguityConfig::default();
            let mut ac = AmbiguityConfig {
                seed,
                prob: p.unwrap_or(d.prob),
                wedge_window: wedge_window.unwrap_or(d.wedge_window),
                activity_skew: activity_skew.unwrap_or(d.activity_skew),
                candidates: candidates.unwrap_or(d.candidates),
                ..d
            };
            if let Some(c) = cfg {
                ac.context_lens = vec![1, c.decoder.max_len];
                ac.model = c;
            }
            let report = ambiguity_experiment(&ac, &mut |r| {
                let _ = writeln!(out, "{}", r.log_line());
            })?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            write_file(&path, json.as_bytes())?;
            for r in &report.rows {
                say(
                    out,
                    format!("graph={} context_len={} seed={} AP={:.4}", r.graph, r.context_len, r.seed, r.ap),
                )?;
            }
            Ok(())
        }
    }
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            // some messages (TOML diagnostics) span lines; keep the report on one
            let msg: Vec<String> = e.to_string().lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            eprintln!("error class={}: {}", e.class(), msg.join(" "));
            1
        }
    }
}
