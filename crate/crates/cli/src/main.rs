//! `docnmt` command-line interface.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use docnmt::config::KeyValues;
use docnmt::Error;

#[derive(Parser, Debug)]
#[command(name = "docnmt", version, about = "Document-level neural machine translation with memory networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// `key = value` file with defaults for this subcommand's flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for decoding; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic topic-disambiguation corpus.
    GenSynthetic(GenSyntheticArgs),
    /// Build source and target vocabularies from a training corpus.
    BuildVocab(BuildVocabArgs),
    /// Pretrain the source sentence language model.
    PretrainLm(PretrainLmArgs),
    /// Train the sentence-level model.
    TrainStage1(TrainStage1Args),
    /// Train the document model from a stage-1 checkpoint.
    TrainStage2(TrainStage2Args),
    /// Translate source documents.
    Translate(TranslateArgs),
    /// Score translations or models.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every layer and the document loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenSyntheticArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub n_docs: usize,
    #[arg(long, default_value_t = 8)]
    pub sentences_per_doc: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 7)]
    pub max_len: usize,
    #[arg(long, default_value_t = 40)]
    pub content_vocab: usize,
    #[arg(long, default_value_t = 6)]
    pub n_ambiguous: usize,
    #[arg(long, default_value_t = 0.6)]
    pub ambiguous_prob: f64,
    /// Files are written as `<name>.src` and `<name>.tgt`.
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = docnmt::corpus::DEFAULT_MIN_FREQ)]
    pub min_freq: usize,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PretrainLmArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source side of the training corpus.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub embed: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long, requires = "dev_tgt")]
    pub dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    pub dev_tgt: Option<PathBuf>,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainStage1Args {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Embedding, hidden and document widths.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Language model widths; must match the pretrained model (default: dim).
    #[arg(long)]
    pub lm_embed: Option<usize>,
    #[arg(long)]
    pub lm_hidden: Option<usize>,
    #[arg(long)]
    pub doc_hidden: Option<usize>,
    /// Representation used to query the memories.
    #[arg(long, value_enum, default_value_t = Query::Encoder)]
    pub query: Query,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainStage2Args {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Stage-1 checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Pretrained language model checkpoint.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Variant::Context)]
    pub variant: Variant,
    #[arg(long, value_enum, default_value_t = Memories::Both)]
    pub memories: Memories,
    /// Condition on the previous sentence's translation instead of a target memory.
    #[arg(long)]
    pub prev_trg: bool,
    #[arg(long, value_enum, default_value_t = TargetMemory::Generated)]
    pub target_memory: TargetMemory,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_encoder: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_decoder: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout_doc: f64,
    /// Beam for the generated target-memory translations.
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Source documents, blank line between documents.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    /// Coordinate-descent passes after the sentence-level pass.
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    /// Overrides the checkpoint's integration.
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Overrides the checkpoint's memories.
    #[arg(long, value_enum)]
    pub memories: Option<Memories>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(value_enum)]
    pub metric: Metric,
    /// Candidate translations (system a for significance).
    #[arg(long)]
    pub cand: Option<PathBuf>,
    /// System b for significance.
    #[arg(long)]
    pub cand_b: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Source documents (consistency, ppl).
    #[arg(long)]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TargetMemory::Generated)]
    pub target_memory: TargetMemory,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Context,
    Output,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Memories {
    Src,
    Trg,
    Both,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    Encoder,
    Lm,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMemory {
    Generated,
    Gold,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    Bleu1,
    Ppl,
    Consistency,
    Significance,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Finds `--config <path>` or `--config=<path>` in the raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts the config file's entries as flags right after the subcommand, so
/// flags given on the command line (parsed later) override them.
fn inject_config(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let Some(sub) = args.get(1).map(|s| s.to_string_lossy().into_owned()) else { return Ok(args) };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else { return Ok(args) };
    let known: Vec<String> = sc
        .get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "config")
        .flat_map(|l| [l.to_string(), l.replace('-', "_")])
        .collect();
    let kv = KeyValues::load(&path)?;
    kv.check_known(&known.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut injected = Vec::new();
    for key in kv.keys() {
        let flag = format!("--{}", key.replace('_', "-"));
        let value = kv.get_str(key).unwrap_or_default();
        match value {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            v => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(v));
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let args = match inject_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::PretrainLm(a) => commands::pretrain_lm(&a),
        Command::TrainStage1(a) => commands::train_stage1(&a),
        Command::TrainStage2(a) => commands::train_stage2(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
