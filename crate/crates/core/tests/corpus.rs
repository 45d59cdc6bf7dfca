use std::collections::BTreeSet;
use std::path::Path;

use zstts_core::corpus::{
    generate_corpus, load_manifest, CorpusConfig, CorpusGenerator, CorpusLayout, Manifest,
};
use zstts_core::error::Error;
use zstts_core::features::ExtractorConfig;
use zstts_core::training::{train, TrainConfig};

fn fast(speakers: usize, utterances: usize) -> CorpusConfig {
    CorpusConfig {
        speakers,
        utterances_per_speaker: utterances,
        write_waveforms: false,
        extract_features: false,
        ..CorpusConfig::default()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope of a vector against its index.
fn slope(v: &[f64]) -> f64 {
    let idx: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
    let n = v.len() as f64;
    let (mi, mv) = (idx.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let num: f64 = idx.iter().zip(v).map(|(i, x)| (i - mi) * (x - mv)).sum();
    let den: f64 = idx.iter().map(|i| (i - mi) * (i - mi)).sum();
    num / den
}

fn mean_mel(g: &CorpusGenerator, spk: &zstts_core::corpus::SpeakerProfile, u: u64) -> Vec<f64> {
    let utt = g.utterance(spk, u).unwrap();
    let frames = &utt.mel.frames;
    let mut acc = vec![0.0; frames.cols()];
    for row in frames.iter_rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    acc.iter().map(|a| a / frames.rows() as f64).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn default_counts_give_640_records_and_a_26_3_3_split() {
    let dir = tempfile::tempdir().unwrap();
    let (all, [train_m, val, test]) =
        generate_corpus(&fast(32, 20), &ExtractorConfig::default(), 1, dir.path()).unwrap();
    assert_eq!(all.len(), 640);
    assert_eq!(
        [
            train_m.speakers().len(),
            val.speakers().len(),
            test.speakers().len()
        ],
        [26, 3, 3]
    );
    let sets: Vec<BTreeSet<String>> = [&train_m, &val, &test]
        .iter()
        .map(|m| m.speakers().into_iter().collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    let layout = CorpusLayout::new(dir.path());
    let loaded = load_manifest(&layout.all).unwrap();
    assert_eq!(loaded.len(), 640);
    for r in &loaded.records {
        assert_eq!(r.load_mel().unwrap().len() as u32, r.total_frames());
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_bit_identical_corpora() {
    let cfg = CorpusConfig {
        speakers: 10,
        utterances_per_speaker: 1,
        ..CorpusConfig::default()
    };
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let ex = ExtractorConfig::default();
    generate_corpus(&cfg, &ex, 9, a.path()).unwrap();
    generate_corpus(&cfg, &ex, 9, b.path()).unwrap();
    generate_corpus(&cfg, &ex, 10, c.path()).unwrap();
    let (ta, tb, tc) = (
        tree_bytes(a.path()),
        tree_bytes(b.path()),
        tree_bytes(c.path()),
    );
    assert!(ta.iter().any(|(p, _)| p.ends_with(".wav")));
    assert!(ta.iter().any(|(p, _)| p.ends_with(".feat")));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn rate_and_tilt_are_uncorrelated_across_speakers() {
    let g = CorpusGenerator::new(fast(32, 3), 4).unwrap();
    let (mut rates, mut tilts) = (Vec::new(), Vec::new());
    for s in 0..32 {
        let spk = g.speaker(s);
        let mut mean = vec![0.0; g.config().mel_bins];
        for u in 0..3 {
            for (a, x) in mean.iter_mut().zip(mean_mel(&g, &spk, u)) {
                *a += x / 3.0;
            }
        }
        rates.push(spk.rate);
        tilts.push(slope(&mean));
    }
    let rho = pearson(&rates, &tilts);
    assert!(rho.abs() < 0.3, "rate/tilt correlation {rho}");
    let rho_profile = pearson(&rates, &g_tilts(&g));
    assert!(rho_profile.abs() < 0.3, "profile correlation {rho_profile}");
}

fn g_tilts(g: &CorpusGenerator) -> Vec<f64> {
    (0..32).map(|s| g.speaker(s).tilt).collect()
}

#[test]
fn speakers_respect_the_configured_rate_range() {
    let g = CorpusGenerator::new(fast(200, 1), 2).unwrap();
    for s in 0..200 {
        let r = g.speaker(s).rate;
        assert!((0.6..=1.6).contains(&r), "rate {r}");
    }
}

#[test]
fn slow_speakers_take_longer() {
    let g = CorpusGenerator::new(fast(20, 20), 6).unwrap();
    let mean_frames = |rate: f64, speakers: std::ops::Range<u64>| {
        let mut total = 0.0;
        let mut n = 0.0;
        for s in speakers {
            let mut spk = g.speaker(s);
            spk.rate = rate;
            for u in 0..20 {
                let utt = g.utterance(&spk, u).unwrap();
                total += utt.durations.iter().sum::<u32>() as f64;
                n += 1.0;
            }
        }
        total / n
    };
    // different speakers, so texts differ as well as rates
    let slow = mean_frames(1.5, 0..10);
    let base = mean_frames(1.0, 10..20);
    assert!(slow >= 1.3 * base, "{slow} vs {base}");
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in c.iter_mut().zip(v) {
            *a += x / vs.len() as f64;
        }
    }
    c
}

#[test]
fn speakers_are_separable_by_mean_mel() {
    let g = CorpusGenerator::new(fast(32, 20), 8).unwrap();
    // per-speaker mean mel vectors from two disjoint halves of each speaker's utterances
    let (centroids, held): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..32)
        .map(|s| {
            let spk = g.speaker(s);
            let utts: Vec<Vec<f64>> = (0..20).map(|u| mean_mel(&g, &spk, u)).collect();
            (mean_of(&utts[..10]), mean_of(&utts[10..]))
        })
        .unzip();
    let (mut separated, mut pairs) = (0, 0);
    for a in 0..32 {
        for b in a + 1..32 {
            pairs += 1;
            let ok_a = dist2(&held[a], &centroids[a]) < dist2(&held[a], &centroids[b]);
            let ok_b = dist2(&held[b], &centroids[b]) < dist2(&held[b], &centroids[a]);
            separated += usize::from(ok_a && ok_b);
        }
    }
    let frac = separated as f64 / pairs as f64;
    assert!(frac >= 0.9, "{separated}/{pairs} speaker pairs separated");
}

#[test]
fn zero_inventory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        phoneme_inventory: 0,
        ..fast(4, 2)
    };
    let err = generate_corpus(&cfg, &ExtractorConfig::default(), 1, dir.path()).unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("phoneme_inventory")),
        "{err}"
    );
}

#[test]
fn bad_split_ratios_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        split_train: 0.7,
        ..fast(10, 1)
    };
    assert!(matches!(
        generate_corpus(&cfg, &ExtractorConfig::default(), 1, dir.path()),
        Err(Error::Config(_))
    ));
    let few = fast(2, 1);
    assert!(matches!(
        generate_corpus(&few, &ExtractorConfig::default(), 1, dir.path()),
        Err(Error::Config(_))
    ));
}

fn small_corpus() -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let (all, _) =
        generate_corpus(&fast(10, 2), &ExtractorConfig::default(), 3, dir.path()).unwrap();
    (dir, all)
}

#[test]
fn mel_length_mismatch_names_the_record() {
    let (dir, mut m) = small_corpus();
    m.records[3].durations[0] += 1;
    let path = dir.path().join("broken.tsv");
    m.write(&path).unwrap();
    let id = m.records[3].id.clone();
    match load_manifest(&path) {
        Err(Error::ManifestValidation { record, reason }) => {
            assert_eq!(record, id);
            assert!(reason.contains("frames"), "{reason}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn dangling_mel_path_names_the_record() {
    let (dir, m) = small_corpus();
    std::fs::remove_file(&m.records[5].mel).unwrap();
    let err = load_manifest(&CorpusLayout::new(dir.path()).all).unwrap_err();
    assert!(
        matches!(err, Error::ManifestValidation { ref record, .. } if *record == m.records[5].id),
        "{err}"
    );
}

#[test]
fn empty_manifest_loads_but_training_rejects_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.tsv");
    Manifest::new(Vec::new()).write(&path).unwrap();
    let m = load_manifest(&path).unwrap();
    assert!(m.is_empty());
    let ckpt = dir.path().join("ckpt");
    let cfg = TrainConfig {
        max_steps: 1,
        checkpoint_dir: ckpt,
        ..TrainConfig::default()
    };
    let model = zstts_core::acoustic::ModelConfig::default();
    assert!(matches!(
        train(&model, &cfg, &m, &m, None),
        Err(Error::Data(_))
    ));
}
