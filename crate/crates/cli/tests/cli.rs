use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[corpus]
speakers = 10
utterances_per_speaker = 2
max_phonemes = 8
write_waveforms = false

[extractor]
blocks = 2
dims = 8

[model]
hidden = 12
embed_dim = 6
attention_hidden = 6
ssl_layers = 3
ssl_dims = 8

[train]
batch_size = 2
max_steps = 4
warmup_steps = 2
validation_interval = 2
checkpoint_interval = 2
"#;

fn zstts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zstts"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        let corpus = dir.path().join("corpus");
        Self {
            dir,
            config,
            corpus,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self) {
        let out = zstts(&[
            "gen-corpus",
            "--config",
            s(&self.config),
            "--out",
            s(&self.corpus),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let run = self.path(name);
        let mut args = vec![
            "train",
            "--config",
            s(&self.config),
            "--corpus",
            s(&self.corpus),
            "--out",
            s(&run),
        ];
        args.extend_from_slice(extra);
        let out = zstts(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        run
    }

    fn test_manifest(&self) -> PathBuf {
        self.corpus.join("test.tsv")
    }

    fn test_ids(&self) -> Vec<(String, String)> {
        std::fs::read_to_string(self.test_manifest())
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                (c[0].to_string(), c[1].to_string())
            })
            .collect()
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&zstts(&["--help"])), 0);
    assert_eq!(code(&zstts(&["--version"])), 0);
    assert_eq!(code(&zstts(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&zstts(&[])), 1);
    assert_eq!(code(&zstts(&["no-such-command"])), 1);
    assert_eq!(code(&zstts(&["gen-corpus"])), 1);
    let out = zstts(&[
        "eval",
        "--checkpoint",
        "x",
        "--manifest",
        "y",
        "--condition",
        "sideways",
        "--out",
        "z",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_corpus_writes_three_manifests_and_the_resolved_config() {
    let r = Run::new();
    let out = zstts(&[
        "gen-corpus",
        "--config",
        s(&r.config),
        "--out",
        s(&r.corpus),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).contains("train 8 / val 1 / test 1"),
        "{}",
        stdout(&out)
    );
    for f in [
        "corpus.tsv",
        "train.tsv",
        "val.tsv",
        "test.tsv",
        "speakers.tsv",
        "resolved-config.toml",
    ] {
        assert!(r.corpus.join(f).is_file(), "{f}");
    }
    let resolved = std::fs::read_to_string(r.corpus.join("resolved-config.toml")).unwrap();
    assert!(resolved.contains("init_seed = 3"));
    assert!(resolved.contains("warmup_steps"));
}

#[test]
fn gen_corpus_refuses_a_non_empty_directory_without_overwrite() {
    let r = Run::new();
    r.gen();
    let before = std::fs::read(r.corpus.join("corpus.tsv")).unwrap();
    let out = zstts(&[
        "gen-corpus",
        "--config",
        s(&r.config),
        "--out",
        s(&r.corpus),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--overwrite"));
    let out = zstts(&[
        "gen-corpus",
        "--config",
        s(&r.config),
        "--out",
        s(&r.corpus),
        "--overwrite",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(before, std::fs::read(r.corpus.join("corpus.tsv")).unwrap());
}

#[test]
fn bad_ratios_name_the_field() {
    let r = Run::new();
    let cfg = r.path("bad.toml");
    std::fs::write(
        &cfg,
        format!("{SMALL}\n").replace(
            "write_waveforms = false",
            "write_waveforms = false\nsplit_train = 0.5",
        ),
    )
    .unwrap();
    let out = zstts(&["gen-corpus", "--config", s(&cfg), "--out", s(&r.corpus)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("split"), "{}", stderr(&out));
    let unknown = r.path("unknown.toml");
    std::fs::write(&unknown, "[corpus]\nspeekers = 3\n").unwrap();
    let out = zstts(&["gen-corpus", "--config", s(&unknown), "--out", s(&r.corpus)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("speekers"), "{}", stderr(&out));
}

#[test]
fn train_rejects_a_duration_reference_in_common_mode() {
    let r = Run::new();
    r.gen();
    let run = r.path("run");
    let out = zstts(&[
        "train",
        "--config",
        s(&r.config),
        "--corpus",
        s(&r.corpus),
        "--out",
        s(&run),
        "--mode",
        "common",
        "--duration-ref",
    ]);
    assert_eq!(code(&out), 1);
    assert!(!run.join("last.ckpt").exists());
}

#[test]
fn train_on_a_missing_corpus_is_a_data_error() {
    let r = Run::new();
    let out = zstts(&[
        "train",
        "--config",
        s(&r.config),
        "--corpus",
        s(&r.path("nowhere")),
        "--out",
        s(&r.path("run")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_synth_eval_rhythm_export_end_to_end() {
    let r = Run::new();
    r.gen();
    let run = r.train("run", &["--mode", "separate", "--aggregator", "attentive"]);
    for f in ["last.ckpt", "metrics.tsv", "resolved-config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let ckpt = run.join("last.ckpt");
    let ids = r.test_ids();
    let (text, _) = &ids[0];
    let (other, _) = &ids[ids.len() - 1];

    // synthesis with teacher forcing: mel length equals the ground-truth duration sum
    let mel = r.path("out/a.mel");
    let out = zstts(&[
        "synth",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&r.test_manifest()),
        "--text",
        text,
        "--acoustic-ref",
        text,
        "--duration-ref",
        other,
        "--teacher-forced",
        "--out",
        s(&mel),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(mel.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(meta["acoustic_reference"], text.as_str());
    assert_eq!(meta["duration_reference"], other.as_str());
    assert_eq!(meta["frames"], meta["duration_sum"]);
    let listed: u64 = std::fs::read_to_string(mel.with_extension("durations.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse::<u64>().unwrap())
        .sum();
    assert_eq!(meta["frames"].as_u64().unwrap(), listed);
    assert!(stdout(&out).contains(&format!("duration sum {listed}")));

    // defaulting: no duration reference means the acoustic one
    let plain = r.path("out/plain.mel");
    let out = zstts(&[
        "synth",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&r.test_manifest()),
        "--text",
        text,
        "--acoustic-ref",
        other,
        "--out",
        s(&plain),
    ]);
    if code(&out) == 0 {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(plain.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(meta["duration_reference"], other.as_str());
    } else {
        // an early checkpoint may round every predicted duration to zero
        assert_eq!(code(&out), 2, "{}", stderr(&out));
    }

    // evaluation is byte-identical across runs with the same seed
    let e1 = r.path("eval1.tsv");
    let e2 = r.path("eval2.tsv");
    for e in [&e1, &e2] {
        let out = zstts(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&r.test_manifest()),
            "--condition",
            "non-parallel",
            "--seed",
            "5",
            "--out",
            s(e),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&e1).unwrap(), std::fs::read(&e2).unwrap());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(e1.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["condition"], "non-parallel");
    assert_eq!(summary["utterances"].as_u64().unwrap() as usize, ids.len());

    // seen speakers are refused
    let out = zstts(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&r.corpus.join("train.tsv")),
        "--condition",
        "parallel",
        "--out",
        s(&r.path("seen.tsv")),
    ]);
    assert_eq!(code(&out), 2);

    let weights = r.path("weights.tsv");
    let out = zstts(&[
        "export-weights",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&weights),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(&weights).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let sum: f64 = row
            .split('\t')
            .skip(1)
            .map(|x| x.parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-6, "{row}");
    }

    // rhythm transfer between the val speaker and the test speaker
    let mixed = r.path("mixed.tsv");
    let mut lines: Vec<String> = std::fs::read_to_string(r.test_manifest())
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    lines.extend(
        std::fs::read_to_string(r.corpus.join("val.tsv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(String::from),
    );
    std::fs::write(&mixed, lines.join("\n") + "\n").unwrap();
    let val_speaker = std::fs::read_to_string(r.corpus.join("val.tsv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .to_string();
    let rhythm = r.path("rhythm.tsv");
    let out = zstts(&[
        "rhythm",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&mixed),
        "--speaker-a",
        &ids[0].1,
        "--speaker-b",
        &val_speaker,
        "--limit",
        "2",
        "--out",
        s(&rhythm),
    ]);
    // an early checkpoint may predict all-zero durations for some text
    assert!(matches!(code(&out), 0 | 2), "{}", stderr(&out));
    if code(&out) == 0 {
        assert!(rhythm.is_file());
    }
}

#[test]
fn resume_and_determinism_through_the_command_line() {
    let r = Run::new();
    r.gen();
    let a = r.train("a", &[]);
    let b = r.train("b", &[]);
    let bytes = |p: &Path| std::fs::read(p.join("last.ckpt")).unwrap();
    // the checkpoint records its own directory, so compare the exported weights instead
    let export = |run: &Path, name: &str| {
        let out = r.path(name);
        assert_eq!(
            code(&zstts(&[
                "export-weights",
                "--checkpoint",
                s(&run.join("last.ckpt")),
                "--out",
                s(&out)
            ])),
            0
        );
        std::fs::read(out).unwrap()
    };
    assert_eq!(export(&a, "wa.tsv"), export(&b, "wb.tsv"));
    assert!(!bytes(&a).is_empty());

    let out = zstts(&[
        "train",
        "--config",
        s(&r.config),
        "--corpus",
        s(&r.corpus),
        "--out",
        s(&r.path("c")),
        "--mode",
        "common",
        "--resume",
        s(&a.join("last.ckpt")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.mode"), "{}", stderr(&out));
}
