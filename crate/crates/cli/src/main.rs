use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrw_cli::{run_all, run_stage, PipelineConfig, Stage, StageError, StageReport};

#[derive(Parser)]
#[command(name = "qrw", version, about = "Long-tail query rewriting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed applied to every stage (world, dataset, model, training).
    #[arg(long)]
    seed: Option<u64>,
    /// Feedback objective: rele, incr or hitrate.
    #[arg(long)]
    objective: Option<String>,
    /// Beam width for candidate generation and serving.
    #[arg(long)]
    beam_width: Option<usize>,
    /// Candidates per alignment list.
    #[arg(long)]
    contrast: Option<usize>,
    /// Weight of the list-wise loss.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Arbitrary override, e.g. `--set sft.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, query logs and annotations.
    GenWorld(Common),
    /// Build and dump the inverted index.
    BuildIndex(Common),
    /// Build the rejection-sampled instruction dataset and vocabulary.
    BuildDataset(Common),
    /// Supervised training on the instruction dataset.
    TrainSft(Common),
    /// Beam-search rewrite candidates for the training queries.
    GenCandidates(Common),
    /// Score candidates with offline feedback and rank them.
    ScoreFeedback(Common),
    /// Preference alignment on the ranked candidate lists.
    TrainAlign(Common),
    /// Offline rewriting of torso and tail queries into the lookup table.
    BuildTable(Common),
    /// Answer queries through the table with union retrieval.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Plain-text queries, one per line (default: the eval queries).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-segment evaluation report.
    Eval(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the effective configuration as TOML.
    Config(Common),
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(d) = &self.out_dir {
            o.push(format!("out_dir={:?}", d.to_string_lossy()));
        }
        if let Some(s) = self.seed {
            for k in [
                "world.seed",
                "dataset.seed",
                "model.seed",
                "sft.seed",
                "align.seed",
            ] {
                o.push(format!("{k}={s}"));
            }
        }
        if let Some(x) = &self.objective {
            o.push(format!("feedback.objective={x:?}"));
        }
        if let Some(n) = self.beam_width {
            o.push(format!("candidates.beam_width={n}"));
            o.push(format!("serving.beam_width={n}"));
        }
        if let Some(n) = self.contrast {
            o.push(format!("align.contrast={n}"));
        }
        if let Some(l) = self.lambda {
            o.push(format!("align.lambda={l:?}"));
        }
        o.extend(self.sets.iter().cloned());
        o
    }

    fn load(&self, extra: Vec<String>) -> Result<PipelineConfig, StageError> {
        let mut o = self.overrides();
        o.extend(extra);
        PipelineConfig::load(self.config.as_deref(), &o)
    }
}

fn print(report: &StageReport) {
    println!("[{}] done", report.stage.name());
    for n in &report.notes {
        for line in n.lines() {
            println!("  {line}");
        }
    }
    for o in &report.outputs {
        println!("  wrote {}", o.display());
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    let (stage, common, extra) = match cli.command {
        Command::GenWorld(c) => (Stage::GenWorld, c, vec![]),
        Command::BuildIndex(c) => (Stage::BuildIndex, c, vec![]),
        Command::BuildDataset(c) => (Stage::BuildDataset, c, vec![]),
        Command::TrainSft(c) => (Stage::TrainSft, c, vec![]),
        Command::GenCandidates(c) => (Stage::GenCandidates, c, vec![]),
        Command::ScoreFeedback(c) => (Stage::ScoreFeedback, c, vec![]),
        Command::TrainAlign(c) => (Stage::TrainAlign, c, vec![]),
        Command::BuildTable(c) => (Stage::BuildTable, c, vec![]),
        Command::Serve { common, input } => {
            let extra = input
                .map(|p| vec![format!("serve.input={:?}", p.to_string_lossy())])
                .unwrap_or_default();
            (Stage::Serve, common, extra)
        }
        Command::Eval(c) => (Stage::Eval, c, vec![]),
        Command::Run(c) => {
            let cfg = c.load(vec![])?;
            for r in run_all(&cfg)? {
                print(&r);
            }
            return Ok(());
        }
        Command::Config(c) => {
            print!("{}", c.load(vec![])?.to_toml());
            return Ok(());
        }
    };
    let cfg = common.load(extra)?;
    print(&run_stage(stage, &cfg)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors are validation failures; help and version are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
