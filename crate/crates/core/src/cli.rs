//! Command-line front end. Every artifact is written under `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bcr::gradient_check;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{save_corpus, save_truth, Domain};
use crate::error::Error;
use crate::eval::{ranks_csv, results_csv, results_table};
use crate::rldf::{sample_episode, FilterInput};
use crate::rng;
use crate::trainer::{generate, Dataset, Phase, TrainReport, TrainState};

/// Max relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step used by `gradcheck`.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "rlisn", version, about = "Shared-account cross-domain recommender with an RL domain filter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the `corpus` key.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Single-key override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus and its ground-truth labels.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training phase or all of them.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the latest checkpoint found in `--out`.
        #[arg(long, conflicts_with = "checkpoint")]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out targets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the recommender loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Training instances per domain in the probe batch.
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the filter's decisions for one account's held-out instance.
    InspectEpisode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        account: String,
        /// Target domain, `a` or `b`; defaults to the first available.
        #[arg(long)]
        domain: Option<String>,
        /// Sample actions instead of taking the likelier one.
        #[arg(long)]
        sample: bool,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    PretrainBcr,
    PretrainFilter,
    Joint,
    All,
}

impl PhaseArg {
    fn phases(self) -> Vec<Phase> {
        match self {
            PhaseArg::PretrainBcr => vec![Phase::PretrainBcr],
            PhaseArg::PretrainFilter => vec![Phase::PretrainFilter],
            PhaseArg::Joint => vec![Phase::Joint],
            PhaseArg::All => Phase::ALL.to_vec(),
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(one_line(&e.to_string()))
}

fn runtime(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Parse { .. } => usage(e),
        e => CliError::Runtime(one_line(&e.to_string())),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn checkpoint_file(phase: Phase) -> &'static str {
    match phase {
        Phase::PretrainBcr => "bcr.ckpt",
        Phase::PretrainFilter => "filter.ckpt",
        Phase::Joint => "joint.ckpt",
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
/// Errors go to stderr as a single `error: ...` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error: {}", one_line(first));
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(base: Option<RunConfig>, common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => base.unwrap_or_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = &common.corpus {
        if !c.exists() {
            return Err(CliError::Usage(format!("corpus not found: {}", c.display())));
        }
        cfg.corpus = c.display().to_string();
    }
    cfg.apply_overrides(&common.set).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path).map_err(runtime)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    if !cfg.corpus.is_empty() && !Path::new(&cfg.corpus).exists() {
        return Err(CliError::Usage(format!("corpus not found: {}", cfg.corpus)));
    }
    Dataset::from_config(cfg).map_err(runtime)
}

fn make_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| runtime(Error::io(path, e)))
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { common, out } => {
            let cfg = resolve_config(None, &common)?;
            make_out(&out)?;
            let (_, seqs, truth) = generate(&cfg).map_err(runtime)?;
            save_corpus(out.join("corpus.tsv"), &seqs).map_err(runtime)?;
            save_truth(out.join("truth.tsv"), &seqs, &truth).map_err(runtime)?;
            println!("wrote {} accounts to {}", seqs.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            out,
            phase,
            checkpoint,
            resume,
        } => {
            let start = match (&checkpoint, resume) {
                (Some(p), _) => Some(load_checkpoint(p)?),
                (None, true) => latest_checkpoint(&out)?,
                (None, false) => None,
            };
            let cfg = resolve_config(start.as_ref().map(|c| c.config.clone()), &common)?;
            let data = load_dataset(&cfg)?;
            make_out(&out)?;
            pool(&cfg)?.install(|| train(cfg, &data, start, phase, &out))
        }
        Command::Eval { common, out, checkpoint } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = resolve_config(Some(ck.config.clone()), &common)?;
            let data = load_dataset(&cfg)?;
            let state = TrainState::from_checkpoint(&ck, cfg.clone(), data.catalog).map_err(runtime)?;
            make_out(&out)?;
            let results = pool(&cfg)?.install(|| state.evaluate(&data)).map_err(runtime)?;
            write(out.join("eval.csv"), &results_csv(&results))?;
            write(out.join("ranks.csv"), &ranks_csv(&results, &data.account_ids()))?;
            print!("{}", results_table(&results));
            Ok(())
        }
        Command::Gradcheck { common, batch, out } => {
            let cfg = resolve_config(None, &common)?;
            let data = load_dataset(&cfg)?;
            let model = TrainState::new(cfg.clone(), data.catalog).map_err(runtime)?.model;
            let mut report = String::from("domain,tensor,max_rel_error\n");
            let mut worst = 0.0f64;
            for domain in Domain::BOTH {
                let probe: Vec<_> = data.prepared.train_in(domain).take(batch).cloned().collect();
                if probe.is_empty() {
                    continue;
                }
                let errs = gradient_check(&model, &probe, domain, None, GRADCHECK_STEP).map_err(runtime)?;
                for (name, e) in errs {
                    let _ = writeln!(report, "{domain},{name},{e:e}");
                    worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                }
            }
            if let Some(out) = out {
                make_out(&out)?;
                write(out.join("gradcheck.csv"), &report)?;
            }
            println!("max relative error {worst:e}");
            if worst < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "gradient check failed: max relative error {worst:e} >= {GRADCHECK_TOLERANCE:e}"
                )))
            }
        }
        Command::InspectEpisode {
            common,
            out,
            checkpoint,
            account,
            domain,
            sample,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = resolve_config(Some(ck.config.clone()), &common)?;
            let data = load_dataset(&cfg)?;
            let domain = match domain.as_deref() {
                None => None,
                Some(s) => Some(Domain::parse(&s.to_ascii_uppercase()).ok_or_else(|| CliError::Usage(format!("unknown domain '{s}'")))?),
            };
            let state = TrainState::from_checkpoint(&ck, cfg.clone(), data.catalog).map_err(runtime)?;
            let idx = data
                .seqs
                .iter()
                .position(|s| s.account_id == account)
                .ok_or_else(|| CliError::Usage(format!("unknown account '{account}'")))?;
            let inst = data
                .prepared
                .test
                .iter()
                .find(|i| i.account == idx && domain.is_none_or(|d| d == i.domain))
                .ok_or_else(|| CliError::Usage(format!("account '{account}' has no held-out instance in that domain")))?;
            let mode = cfg.filter().map_err(usage)?;
            let mut r = rng::stream(cfg.seed, &[20, idx as u64]);
            let input = FilterInput::evaluation(inst);
            let trace = sample_episode(&mut r, &state.filter, &state.model, &input, mode, !sample).map_err(runtime)?;
            let text = format_trace(&data, inst, mode.name(), trace.as_ref());
            make_out(&out)?;
            write(out.join(format!("episode-{account}-{}.txt", inst.domain.tag())), &text)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn latest_checkpoint(out: &Path) -> Result<Option<Checkpoint>, CliError> {
    for phase in Phase::ALL.iter().rev() {
        let p = out.join(checkpoint_file(*phase));
        if p.exists() {
            return load_checkpoint(&p).map(Some);
        }
    }
    Ok(None)
}

fn train(
    cfg: RunConfig,
    data: &Dataset,
    start: Option<Checkpoint>,
    phase: PhaseArg,
    out: &Path,
) -> Result<(), CliError> {
    let mut state = match &start {
        Some(ck) => TrainState::from_checkpoint(ck, cfg, data.catalog).map_err(runtime)?,
        None => TrainState::new(cfg, data.catalog).map_err(runtime)?,
    };
    let mut phases = phase.phases();
    // a resumed run skips phases that already finished
    if start.is_some() && phase == PhaseArg::All {
        let at = Phase::ALL.iter().position(|p| *p == state.phase).unwrap_or(0);
        let done = state.epoch >= state.phase.epochs(&state.config);
        phases = Phase::ALL[at + usize::from(done)..].to_vec();
        if phases.is_empty() {
            phases.push(state.phase);
        }
    }
    let mut report = TrainReport::default();
    for ph in phases {
        let path = out.join(checkpoint_file(ph));
        let rows = state
            .run_phase(data, ph, |st, row| {
                eprintln!(
                    "{} epoch {} loss {:.5}/{:.5} reward {:.5} ({:.2}s)",
                    row.phase.name(),
                    row.epoch,
                    row.loss[0],
                    row.loss[1],
                    row.mean_reward,
                    row.seconds
                );
                st.to_checkpoint().save(&path)
            })
            .map_err(runtime)?;
        // phases with no epochs still leave a checkpoint
        state.to_checkpoint().save(&path).map_err(runtime)?;
        report.rows.extend(rows);
    }
    write(out.join("report.csv"), &report.to_csv())
}

fn format_trace(
    data: &Dataset,
    inst: &crate::data::TrainingInstance,
    mode: &str,
    trace: Option<&crate::rldf::EpisodeTrace>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "account {}", data.seqs[inst.account].account_id);
    let _ = writeln!(s, "domain {}", inst.domain.tag());
    let _ = writeln!(s, "mode {mode}");
    let _ = writeln!(s, "history {}", inst.history.len());
    let _ = writeln!(s, "transferred {}", inst.transferred.len());
    let Some(t) = trace else {
        let _ = writeln!(s, "no transferred items");
        return s;
    };
    let _ = writeln!(s, "high_state {}", join(&t.high_state));
    let _ = writeln!(s, "revise {}", u8::from(t.high_action));
    let _ = writeln!(s, "high_reward {}", t.high_reward);
    let _ = writeln!(s, "final_reward {}", t.final_reward);
    // the reference event for relevance is the most recent own item
    let reference = inst.history.last().map(|h| h.event);
    let truth = data.truth.as_ref();
    s.push_str("event\titem\tpos\tdrop_prob\tkept\treward");
    if truth.is_some() {
        s.push_str("\tirrelevant");
    }
    s.push('\n');
    for (m, item) in inst.transferred.iter().enumerate() {
        let (p, r) = if t.drop_probs.is_empty() {
            (String::from("-"), String::from("-"))
        } else {
            (t.drop_probs[m].to_string(), t.rewards[m].to_string())
        };
        let _ = write!(
            s,
            "{}\t{}\t{}\t{p}\t{}\t{r}",
            item.event,
            item.item,
            item.pos,
            u8::from(t.kept_mask[m])
        );
        if let (Some(g), Some(re)) = (truth, reference) {
            let _ = write!(s, "\t{}", u8::from(g.irrelevant_to(inst.account, item.event, re)));
        }
        s.push('\n');
    }
    s
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_arg_expands() {
        assert_eq!(PhaseArg::All.phases(), Phase::ALL.to_vec());
        assert_eq!(PhaseArg::Joint.phases(), vec![Phase::Joint]);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "seed = 5\ndim = 12\n").unwrap();
        let common = Common {
            config: Some(p),
            seed: Some(9),
            set: vec!["dim=6".into()],
            ..Common::default()
        };
        let cfg = resolve_config(None, &common).unwrap();
        assert_eq!((cfg.seed, cfg.dim), (9, 6));
    }

    #[test]
    fn error_classes() {
        assert_eq!(run(["rlisn", "frobnicate"]), 2);
        assert_eq!(run(["rlisn", "generate", "--out", "/nonexistent/x", "--bogus"]), 2);
        assert_eq!(run(["rlisn", "gradcheck", "--config", "/nonexistent/cfg"]), 2);
        assert_eq!(run(["rlisn", "gradcheck", "--set", "dim=-3"]), 2);
        assert_eq!(run(["rlisn", "--help"]), 0);
    }
}
