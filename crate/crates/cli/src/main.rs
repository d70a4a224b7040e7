use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csattn::attention::Variant;
use csattn::autodiff::TensorError;
use csattn::data::{self, Condition, DecodeLine};
use csattn::decode::BeamConfig;
use csattn::experiment::{decode_examples, run_grid, DataSet, ExperimentError, GridPlan};
use csattn::kv::KvMap;
use csattn::metrics::score_corpus;
use csattn::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use csattn::synth::SynthConfig;
use csattn::train::{train, StepLog, TrainConfig, TrainError};
use csattn::vocab::Vocab;

/// Code-switching attention experiments on synthetic bilingual data.
#[derive(Parser)]
#[command(name = "csattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora, vocabulary and manifests.
    Synth(SynthArgs),
    /// Train one model on a data condition.
    Train(TrainArgs),
    /// Beam-decode a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Score decode output against a reference manifest.
    Score(ScoreArgs),
    /// Run every plan cell for every seed and summarize.
    Grid(GridArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config file seed.
    #[arg(long, env = "CSATTN_SEED")]
    seed: Option<u64>,
    /// `key = value` synthesis settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// baseline, score-reweight, shared or independent.
    #[arg(long)]
    variant: Variant,
    /// cs, cs+a, cs+b or all.
    #[arg(long)]
    condition: Condition,
    #[arg(long, env = "CSATTN_SEED")]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Step log path [default: <out>.log].
    #[arg(long)]
    log: Option<PathBuf>,
    /// `key = value` model settings, plus `steps` and `batch_size`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    w_same: Option<f64>,
    #[arg(long)]
    w_diff: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest to decode; its directory must hold vocab.txt and synth.conf.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference manifest.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Decode output.
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// `key = value` plan; relative paths resolve against its directory.
    #[arg(long)]
    plan: PathBuf,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_kv_text(&data::read_to_string(p)?).with_context(|| format!("{}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let synth = cfg.generate()?;
    let written = data::write_dataset(&a.out, &cfg, &synth)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut ds = DataSet::open(&a.data)?;
    let mut cfg = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(p) = &a.config {
        let mut m = KvMap::parse(&data::read_to_string(p)?).with_context(|| format!("{}", p.display()))?;
        m.take_into("steps", &mut tc.steps)?;
        m.take_into("batch_size", &mut tc.batch_size)?;
        cfg.apply_kv(&mut m)?;
        m.finish().with_context(|| format!("{}", p.display()))?;
    }
    macro_rules! flag {
        ($($f:ident => $dst:expr),* $(,)?) => { $(if let Some(v) = a.$f { $dst = v; })* };
    }
    flag!(steps => tc.steps, batch_size => tc.batch_size, d_model => cfg.d_model, heads => cfg.heads, d_ff => cfg.d_ff,
        enc_layers => cfg.enc_layers, dec_layers => cfg.dec_layers, dropout => cfg.dropout,
        label_smoothing => cfg.label_smoothing, warmup => cfg.warmup, lr_factor => cfg.lr_factor,
        w_same => cfg.variant.mask.w_same, w_diff => cfg.variant.mask.w_diff, alpha => cfg.variant.mask.alpha, seed => cfg.seed);
    tc.seed = cfg.seed;
    cfg.variant.variant = a.variant;
    cfg.vocab_size = ds.vocab.len();
    cfg.feat_dim = ds.synth.features.dim;
    let mut model = Model::new(cfg)?;
    let corpora = ds.corpora(a.condition)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log");
        PathBuf::from(s)
    });
    let mut log = String::from(StepLog::HEADER);
    let losses = train(&mut model, &corpora, &ds.token_langs, &tc, &mut |s| log.push_str(&s.format()))?;
    data::write(&log_path, log)?;
    save_checkpoint(&a.out, &model, tc.steps as u64)?;
    println!("final_loss={:.6}", losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint={}", a.out.display());
    println!("log={}", log_path.display());
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    if a.beam == 0 || a.max_len == 0 {
        bail!(Usage("--beam and --max-len must be at least 1".into()));
    }
    let dir = a.manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let (vocab, synth) = data::load_dataset_meta(dir)?;
    let model = load_checkpoint(&a.ckpt)?.into_model()?;
    if model.config.vocab_size != vocab.len() {
        bail!(DataFailure(format!(
            "checkpoint expects {} vocabulary entries, {} has {}",
            model.config.vocab_size,
            dir.join(data::VOCAB_FILE).display(),
            vocab.len()
        )));
    }
    if model.config.feat_dim != synth.features.dim {
        bail!(DataFailure(format!("checkpoint expects {}-dim features, data has {}", model.config.feat_dim, synth.features.dim)));
    }
    let entries = data::load_manifest(&a.manifest)?;
    let examples = data::featurize_entries(&entries, &vocab, &synth)?;
    let langs = vocab.languages(&(0..vocab.len()).collect::<Vec<_>>())?;
    let beam = BeamConfig {
        beam: a.beam,
        max_len: a.max_len,
    };
    let lines = decode_examples(&model, &examples, &vocab, &langs, beam, None)?;
    data::write(&a.out, lines.iter().map(DecodeLine::format).collect::<String>())?;
    println!("decoded={} out={}", lines.len(), a.out.display());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let refs = data::load_manifest(&a.reference)?;
    let hyps: Vec<(String, String)> = data::parse_decode_output(&data::read_to_string(&a.hyp)?, &a.hyp.display().to_string())?
        .into_iter()
        .map(|l| (l.id, l.text))
        .collect();
    let report = score_corpus(&refs, &hyps, &vocab).map_err(|e| DataFailure(e.to_string()))?;
    print!("{}", report.to_table());
    print!("{}", report.to_kv_lines());
    Ok(())
}

fn cmd_grid(a: &GridArgs) -> Result<()> {
    let base = a.plan.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let plan = GridPlan::parse(&data::read_to_string(&a.plan)?, base).with_context(|| format!("{}", a.plan.display()))?;
    println!("runs={}", plan.runs());
    let summary = run_grid(&plan, &mut |r| {
        let how = if r.trained { "trained" } else { "skipped (complete)" };
        println!("{} {} seed={} MER={:.6} {how}", r.variant, r.condition, r.seed, r.mer);
    })?;
    let table = summary.to_table();
    data::write(&plan.out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Bad arguments discovered after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

/// Inputs that are inconsistent with each other.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct DataFailure(String);

/// 2 usage, 3 data, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        let numeric = matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
            || matches!(cause.downcast_ref::<TensorError>(), Some(TensorError::NonFinite { .. }))
            || matches!(cause.downcast_ref::<ExperimentError>(), Some(ExperimentError::Train(TrainError::NonFinite { .. })));
        if numeric {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Score(a) => cmd_score(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
