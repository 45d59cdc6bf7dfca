mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zstts_core::acoustic::{ConditioningMode, PhonemeSequence};
use zstts_core::corpus::{generate_corpus, load_manifest, CorpusLayout, Manifest};
use zstts_core::embedding::AggregatorKind;
use zstts_core::evaluation::{
    export_layer_weights, run_objective_eval, run_rhythm_transfer_eval, speaking_rate, Condition,
    TransferSpeaker,
};
use zstts_core::training::{load_model, train, DurationReference, LoadedModel};
use zstts_core::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "zstts",
    version,
    about = "Zero-shot speaker-conditioned TTS at desk scale"
)]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its speaker-disjoint split.
    GenCorpus(GenCorpusArgs),
    /// Train an acoustic model with embedding conditioning.
    Train(TrainArgs),
    /// Synthesize a mel spectrogram, optionally with rhythm transfer.
    Synth(SynthArgs),
    /// Objective evaluation on unseen speakers.
    Eval(EvalArgs),
    /// Swap the rhythm of two unseen speakers and report speaking rates.
    Rhythm(RhythmArgs),
    /// Write the softmax layer weights of every embedding module.
    ExportWeights(ExportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding train.tsv and val.tsv.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ConditioningMode>,
    #[arg(long)]
    aggregator: Option<AggregatorKind>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feed the duration embedding another utterance of the same speaker.
    #[arg(long)]
    duration_ref: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest resolving utterance ids.
    #[arg(long)]
    manifest: PathBuf,
    /// Utterance id whose phonemes are synthesized.
    #[arg(long, conflicts_with = "phonemes")]
    text: Option<String>,
    /// File of whitespace- or comma-separated phoneme ids.
    #[arg(long)]
    phonemes: Option<PathBuf>,
    #[arg(long)]
    acoustic_ref: String,
    #[arg(long)]
    duration_ref: Option<String>,
    /// Drive the length regulator with the text utterance's own durations.
    #[arg(long, requires = "text")]
    teacher_forced: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    condition: Condition,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; the JSON summary goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RhythmArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    speaker_a: String,
    #[arg(long)]
    speaker_b: String,
    /// Manifest whose phoneme strings serve as texts (default: --manifest).
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.corpus_dir = a.out.clone();
    let cfg = cfg.resolve()?;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty {
            if !a.overwrite {
                return Err(Error::InvalidArgument(format!(
                    "{} exists and is not empty; pass --overwrite to replace it",
                    a.out.display()
                )));
            }
            std::fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        }
    }
    let (all, [tr, va, te]) = generate_corpus(&cfg.corpus, &cfg.extractor, cfg.seed, &a.out)?;
    cfg.write_resolved(&a.out)?;
    println!(
        "{} utterances from {} speakers; split train {} / val {} / test {} speakers",
        all.len(),
        all.speakers().len(),
        tr.speakers().len(),
        va.speakers().len(),
        te.speakers().len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.corpus {
        cfg.corpus_dir = c;
    }
    if let Some(o) = a.out {
        cfg.train.checkpoint_dir = o;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(g) = a.aggregator {
        cfg.model.aggregator = g;
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if a.duration_ref {
        cfg.train.duration_reference = DurationReference::Speaker;
    }
    let cfg = cfg.resolve()?;
    if cfg.train.duration_reference != DurationReference::Same
        && cfg.model.mode == ConditioningMode::Common
    {
        return Err(Error::InvalidArgument(
            "a duration reference needs --mode separate; common mode has a single embedding".into(),
        ));
    }
    let layout = CorpusLayout::new(&cfg.corpus_dir);
    let train_set = load_manifest(&layout.train)?;
    let val_set = load_manifest(&layout.val)?;
    std::fs::create_dir_all(&cfg.train.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.train.checkpoint_dir, e))?;
    cfg.write_resolved(&cfg.train.checkpoint_dir)?;
    let out = train(
        &cfg.model,
        &cfg.train,
        &train_set,
        &val_set,
        a.resume.as_deref(),
    )?;
    println!(
        "step {}: train mel MAE {:.4} -> {:.4}, duration MSE {:.4} -> {:.4}; checkpoint {}",
        out.final_step,
        out.initial_train.mel_mae,
        out.final_train.mel_mae,
        out.initial_train.dur_mse,
        out.final_train.dur_mse,
        out.last_checkpoint.display()
    );
    Ok(())
}

fn parse_phoneme_file(path: &Path, inventory: usize) -> Result<PhonemeSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u16>()
                .map_err(|_| Error::format(path, format!("`{t}` is not a phoneme id")))
        })
        .collect::<Result<Vec<_>>>()?;
    let id = path
        .file_stem()
        .map_or("text".into(), |s| s.to_string_lossy().into_owned());
    PhonemeSequence::from_ids(id, &ids, inventory, None)
}

fn record<'a>(m: &'a Manifest, id: &str) -> Result<&'a zstts_core::corpus::UtteranceRecord> {
    m.find(id)
        .ok_or_else(|| Error::InvalidArgument(format!("utterance `{id}` is not in the manifest")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let LoadedModel { model, .. } = load_model(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let inventory = model.config().phoneme_inventory;
    if a.duration_ref.is_some() && model.mode() == ConditioningMode::Common {
        return Err(Error::InvalidArgument(
            "--duration-ref needs a separate-conditioning checkpoint".into(),
        ));
    }
    let (ph, teacher) = match (&a.text, &a.phonemes) {
        (Some(id), _) => {
            let r = record(&manifest, id)?;
            (
                r.phoneme_sequence(inventory)?,
                a.teacher_forced.then(|| r.durations.clone()),
            )
        }
        (None, Some(p)) => (parse_phoneme_file(p, inventory)?, None),
        (None, None) => return Err(Error::InvalidArgument("give --text or --phonemes".into())),
    };
    let ac = record(&manifest, &a.acoustic_ref)?.load_features()?;
    let dur = match &a.duration_ref {
        Some(id) => Some(record(&manifest, id)?.load_features()?),
        None => None,
    };
    let result = model.synthesize(&ph, &ac, dur.as_ref(), teacher.as_deref())?;
    write(&a.out, "")?;
    result.mel.write(&a.out)?;
    let hop = result.mel.hop_seconds;
    let rate = speaking_rate(&result.durations, hop)?;
    let listing: String = result.durations.iter().map(|d| format!("{d}\n")).collect();
    write(&a.out.with_extension("durations.txt"), &listing)?;
    let meta = serde_json::json!({
        "text": ph.id,
        "acoustic_reference": a.acoustic_ref,
        "duration_reference": a.duration_ref.as_deref().unwrap_or(&a.acoustic_ref),
        "teacher_forced": teacher.is_some(),
        "frames": result.mel.len(),
        "duration_sum": result.durations.iter().sum::<u32>(),
        "speaking_rate": rate,
    });
    write(
        &a.out.with_extension("json"),
        &serde_json::to_string_pretty(&meta).expect("plain json"),
    )?;
    println!(
        "{} frames (duration sum {}), speaking rate {:.3} phonemes/s",
        result.mel.len(),
        result.durations.iter().sum::<u32>(),
        rate
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let loaded = load_model(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let id = a.checkpoint.display().to_string();
    let report = run_objective_eval(&loaded, &id, &manifest, a.condition, a.seed)?;
    write(&a.out, &report.to_tsv())?;
    write(&a.out.with_extension("json"), &report.summary_json())?;
    println!(
        "{}: Spec. (mel MAE) {:.4}  Dur. (RMSE) {:.2} ms over {} utterances",
        a.condition,
        report.mel_mae,
        report.duration_rmse_ms,
        report.utterances.len()
    );
    Ok(())
}

fn cmd_rhythm(a: RhythmArgs) -> Result<()> {
    let loaded = load_model(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let texts_manifest = match &a.texts {
        Some(p) => load_manifest(p)?,
        None => manifest.clone(),
    };
    let speaker = |s: &str| -> Result<TransferSpeaker> {
        let recs: Vec<_> = manifest.for_speaker(s).collect();
        TransferSpeaker::from_records(&recs, a.seed)
    };
    let (sa, sb) = (speaker(&a.speaker_a)?, speaker(&a.speaker_b)?);
    let inventory = loaded.model.config().phoneme_inventory;
    let texts = texts_manifest
        .records
        .iter()
        .take(a.limit)
        .map(|r| PhonemeSequence::from_ids(r.id.clone(), &r.phonemes, inventory, None))
        .collect::<Result<Vec<_>>>()?;
    let report = run_rhythm_transfer_eval(&loaded, &sa, &sb, &texts)?;
    write(&a.out, &report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let loaded = load_model(&a.checkpoint)?;
    let table = export_layer_weights(&loaded);
    write(&a.out, &table.to_tsv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rhythm(a) => cmd_rhythm(a),
        Command::ExportWeights(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
