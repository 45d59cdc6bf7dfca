use std::path::Path;
use std::time::{Duration, Instant};

use zstts_core::acoustic::{is_duration_predictor_param, ConditioningMode, ModelConfig, TtsModel};
use zstts_core::corpus::{generate_corpus, CorpusConfig, Manifest};
use zstts_core::embedding::AggregatorKind;
use zstts_core::error::Error;
use zstts_core::features::ExtractorConfig;
use zstts_core::numerics::{Checkpoint, HasParams};
use zstts_core::training::{
    accumulate_batch, load_examples, load_model, train, BatchItem, DurationReference, TrainConfig,
};

struct Fixture {
    dir: tempfile::TempDir,
    train: Manifest,
    val: Manifest,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = CorpusConfig {
        speakers: 10,
        utterances_per_speaker: 3,
        max_phonemes: 10,
        write_waveforms: false,
        ..CorpusConfig::default()
    };
    let ex = ExtractorConfig {
        blocks: 2,
        dims: 8,
        ..ExtractorConfig::default()
    };
    let (_, [train, val, _]) =
        generate_corpus(&corpus, &ex, 5, &dir.path().join("corpus")).unwrap();
    Fixture { dir, train, val }
}

fn model_cfg(mode: ConditioningMode) -> ModelConfig {
    ModelConfig {
        mode,
        aggregator: AggregatorKind::Attentive,
        hidden: 12,
        embed_dim: 6,
        attention_hidden: 6,
        ssl_layers: 3,
        ssl_dims: 8,
        init_seed: 4,
        ..ModelConfig::default()
    }
}

fn train_cfg(dir: &Path, steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_steps: steps,
        warmup_steps: 10,
        validation_interval: 10,
        checkpoint_interval: 15,
        checkpoint_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn tensors(path: &Path) -> Vec<zstts_core::numerics::NamedTensor> {
    Checkpoint::read(path).unwrap().tensors
}

#[test]
fn zero_steps_store_the_initialization() {
    let f = fixture();
    let cfg = train_cfg(&f.dir.path().join("run"), 0);
    let mcfg = model_cfg(ConditioningMode::Separate);
    let out = train(&mcfg, &cfg, &f.train, &f.val, None).unwrap();
    assert_eq!(out.final_step, 0);
    let loaded = load_model(&out.last_checkpoint).unwrap();
    let fresh = TtsModel::<f32>::new(mcfg).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    loaded
        .model
        .visit(&mut |p| a.extend(p.value.iter().map(|x| x.to_bits())));
    fresh.visit(&mut |p| b.extend(p.value.iter().map(|x| x.to_bits())));
    assert_eq!(a, b);
}

#[test]
fn same_config_gives_bit_identical_checkpoints() {
    let f = fixture();
    let mcfg = model_cfg(ConditioningMode::Separate);
    let a = train(
        &mcfg,
        &train_cfg(&f.dir.path().join("a"), 20),
        &f.train,
        &f.val,
        None,
    )
    .unwrap();
    let b = train(
        &mcfg,
        &train_cfg(&f.dir.path().join("b"), 20),
        &f.train,
        &f.val,
        None,
    )
    .unwrap();
    assert_eq!(tensors(&a.last_checkpoint), tensors(&b.last_checkpoint));
    assert_eq!(a.history, b.history);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let f = fixture();
    for reference in [DurationReference::Same, DurationReference::Speaker] {
        let mcfg = model_cfg(ConditioningMode::Separate);
        let cfg = |name: &str, steps| TrainConfig {
            duration_reference: reference,
            ..train_cfg(&f.dir.path().join(format!("{name}-{reference:?}")), steps)
        };
        let full = train(&mcfg, &cfg("full", 40), &f.train, &f.val, None).unwrap();
        let half = train(&mcfg, &cfg("half", 20), &f.train, &f.val, None).unwrap();
        let rest = train(
            &mcfg,
            &cfg("rest", 40),
            &f.train,
            &f.val,
            Some(&half.last_checkpoint),
        )
        .unwrap();
        assert_eq!(rest.final_step, 40);
        assert_eq!(
            tensors(&full.last_checkpoint),
            tensors(&rest.last_checkpoint)
        );
    }
}

#[test]
fn resuming_with_another_mode_is_rejected() {
    let f = fixture();
    let first = train(
        &model_cfg(ConditioningMode::Separate),
        &train_cfg(&f.dir.path().join("a"), 5),
        &f.train,
        &f.val,
        None,
    )
    .unwrap();
    let err = train(
        &model_cfg(ConditioningMode::Common),
        &train_cfg(&f.dir.path().join("b"), 10),
        &f.train,
        &f.val,
        Some(&first.last_checkpoint),
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("model.mode")),
        "{err}"
    );
}

#[test]
fn corrupted_checkpoint_is_a_checkpoint_error() {
    let f = fixture();
    let mcfg = model_cfg(ConditioningMode::Separate);
    let first = train(
        &mcfg,
        &train_cfg(&f.dir.path().join("a"), 5),
        &f.train,
        &f.val,
        None,
    )
    .unwrap();
    let mut bytes = std::fs::read(&first.last_checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = f.dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_model(&bad), Err(Error::Checkpoint(_))));
    let err = train(
        &mcfg,
        &train_cfg(&f.dir.path().join("b"), 10),
        &f.train,
        &f.val,
        Some(&bad),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    let truncated = f.dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..mid]).unwrap();
    assert!(matches!(load_model(&truncated), Err(Error::Checkpoint(_))));
}

#[test]
fn duration_reference_needs_separate_mode() {
    let f = fixture();
    let cfg = TrainConfig {
        duration_reference: DurationReference::Speaker,
        ..train_cfg(&f.dir.path().join("a"), 5)
    };
    let err = train(
        &model_cfg(ConditioningMode::Common),
        &cfg,
        &f.train,
        &f.val,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn smoke_run_logs_finite_nonnegative_losses() {
    let f = fixture();
    let dir = f.dir.path().join("smoke");
    let start = Instant::now();
    let out = train(
        &model_cfg(ConditioningMode::Common),
        &train_cfg(&dir, 10),
        &f.train,
        &f.val,
        None,
    )
    .unwrap();
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(out.history.len(), 10);
    for row in &out.history {
        assert!(row.train.total.is_finite());
        assert!(row.train.mel_mae >= 0.0 && row.train.dur_mse >= 0.0);
        assert!(row.lr > 0.0);
    }
    assert!(out.history[9].val.is_some());
    let log = std::fs::read_to_string(dir.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(dir.join("last.ckpt").is_file());
    assert!(out.best_checkpoint.as_deref().is_some_and(Path::is_file));
}

#[test]
fn duration_predictor_learns_only_from_the_duration_loss() {
    let f = fixture();
    for mode in [ConditioningMode::Common, ConditioningMode::Separate] {
        let mcfg = model_cfg(mode);
        let examples = load_examples(&f.train, &mcfg).unwrap();
        let mut model = TtsModel::<f32>::new(mcfg).unwrap();
        let batch: Vec<BatchItem> = examples[..4]
            .iter()
            .map(|e| BatchItem {
                example: e,
                references: vec![&e.stack; model.embeddings.len()],
            })
            .collect();
        accumulate_batch(&mut model, &batch, 1.0, 0.0).unwrap();
        let mut touched = Vec::new();
        let mut any_mel = false;
        model.visit(&mut |p| {
            let nonzero = p.grad.iter().any(|&g| g != 0.0);
            if is_duration_predictor_param(p.name())
                || (mode == ConditioningMode::Separate && p.name().starts_with("embed.duration"))
            {
                if nonzero {
                    touched.push(p.name().to_string());
                }
            } else {
                any_mel |= nonzero;
            }
        });
        assert!(touched.is_empty(), "{mode:?}: mel loss reached {touched:?}");
        assert!(any_mel);
    }
}
