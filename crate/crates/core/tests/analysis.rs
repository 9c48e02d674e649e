mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use scratchprune::analysis::*;
use scratchprune::arch::{place_gates, presets, ChannelConfig};
use scratchprune::data::{make_validation_split, synth_splits, SynthSpec};
use scratchprune::gates::ImportanceConfig;
use scratchprune::train::TrainSchedule;

fn random_features(r: &mut rand_chacha::ChaCha8Rng, count: usize, len: usize) -> Vec<StructureFeature> {
    (0..count)
        .map(|i| StructureFeature {
            label: format!("f{i}"),
            ratios: (0..len).map(|_| f64::from(r.random_range(1..=64u32)) / 64.0).collect(),
        })
        .collect()
}

#[test]
fn correlation_matches_brute_force() {
    let mut r = rng(17);
    for _ in 0..100 {
        let count = r.random_range(2..8);
        let len = r.random_range(3..20);
        let feats = random_features(&mut r, count, len);
        let Ok(m) = correlation_matrix(&feats) else {
            // a constant draw is legitimately rejected
            assert!(feats.iter().any(|f| f.ratios.iter().all(|&x| x == f.ratios[0])));
            continue;
        };
        assert!(m.is_well_formed());
        for i in 0..count {
            for j in 0..count {
                let want = if i == j { 1.0 } else { naive_pearson(&feats[i].ratios, &feats[j].ratios) };
                assert!((m.values[i][j] - want).abs() < 1e-10, "{} vs {want}", m.values[i][j]);
            }
        }
    }
}

#[test]
fn structure_feature_examples() {
    let arch = presets::vgg_small([3, 8, 8], 3);
    let p = place_gates(&arch).unwrap();
    let widths = p.widths(&arch);
    let full = structure_feature(&ChannelConfig::full(&arch, &p), &arch, "full").unwrap();
    assert!(full.ratios.iter().all(|&x| x == 1.0));
    let half = ChannelConfig::leading(&widths.iter().map(|w| w / 2).collect::<Vec<_>>());
    let f = structure_feature(&half, &arch, "half").unwrap();
    assert!(f.ratios.iter().all(|&x| x == 0.5));
    let resnet = presets::resnet_tiny([3, 8, 8], 3);
    let rp = place_gates(&resnet).unwrap();
    let cfg = random_config(&resnet, &mut rng(1));
    let feat = structure_feature(&cfg, &resnet, "r").unwrap();
    assert_eq!(feat.ratios.len(), rp.len());
    assert!(feat.ratios.iter().all(|&x| x > 0.0 && x <= 1.0));
}

#[test]
fn matrix_csv_roundtrips_exactly() {
    let mut r = rng(4);
    let m = correlation_matrix(&random_features(&mut r, 5, 9)).unwrap();
    let text = m.to_csv().unwrap();
    assert!(text.starts_with("label,f0,f1,f2,f3,f4\n"));
    assert_eq!(SimilarityMatrix::from_csv(&text).unwrap(), m);
    assert!(SimilarityMatrix::from_csv("label,a,b\na,1,0.5\n").is_err());
    assert!(SimilarityMatrix::from_csv("label,a\nb,1\n").is_err());
}

fn tiny_study(checkpoint_epochs: Vec<usize>, seeds: Vec<u64>) -> StudyBundle {
    let spec = SynthSpec { per_class: 40, test_per_class: 10, image_size: 6, ..Default::default() };
    let (train, test) = synth_splits(&spec, 0).unwrap();
    let (train, val) = make_validation_split(&train, 8, 0).unwrap();
    let cfg = StudyConfig {
        arch: two_conv_arch(3, 8, 6, 3),
        checkpoint_epochs,
        seeds,
        budget_ratio: 0.5,
        importance: ImportanceConfig { epochs: 1, batch_size: 16, ..Default::default() },
        max_iters: 20,
        tolerance: 0.1,
        pretrain: TrainSchedule { lr0: 0.05, ..TrainSchedule::step_decay(2) },
        scratch: TrainSchedule { lr0: 0.05, ..TrainSchedule::step_decay(1) },
        budget_training: true,
        lottery_init: false,
    };
    run_pretrain_effect_study(&cfg, &StudyData { train: &train, val: &val, test: &test }).unwrap()
}

#[test]
fn random_only_study_gives_one_cross_seed_matrix() {
    let bundle = tiny_study(vec![0], vec![0, 1]);
    assert_eq!(bundle.sources, vec![Source::RandomInit]);
    assert_eq!(bundle.runs.len(), 2);
    assert!(bundle.per_seed.is_empty());
    assert_eq!(bundle.cross_seed.len(), 1);
    let (name, m) = &bundle.cross_seed[0];
    assert_eq!(name, "rand");
    assert_eq!(m.labels, vec!["s0/rand", "s1/rand"]);
    assert_eq!(bundle.summary.len(), 1);
}

#[test]
fn study_bookkeeping_and_report() {
    let bundle = tiny_study(vec![1, 2], vec![0, 1, 2]);
    assert_eq!(bundle.runs.len(), 9);
    assert_eq!(bundle.per_seed.len(), 3);
    for (seed, m) in &bundle.per_seed {
        assert_eq!(m.labels, vec![format!("s{seed}/rand"), format!("s{seed}/e1"), format!("s{seed}/e2")]);
        assert!(m.is_well_formed());
    }
    let names: Vec<&str> = bundle.cross_seed.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["rand", "e1", "e2", "checkpoints"]);
    assert_eq!(bundle.cross_seed[3].1.len(), 6);
    let labels: Vec<&str> = bundle.summary.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["rand", "e1", "e2"]);
    for row in &bundle.summary {
        let accs: Vec<f64> = bundle.runs.iter().filter(|r| r.source.tag() == row.label).map(|r| r.report.test_accuracy).collect();
        assert_eq!(mean_std(&accs), (row.mean_acc, row.std_acc));
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let files = emit_report(&bundle, &a).unwrap();
    emit_report(&bundle, &b).unwrap();
    assert_eq!(files.len(), 3 + 4 + 2);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let parsed = SimilarityMatrix::from_csv(&std::fs::read_to_string(a.join("matrix_seed1.csv")).unwrap()).unwrap();
    assert_eq!(parsed, bundle.per_seed[1].1);
    let channels = std::fs::read_to_string(a.join("channels.csv")).unwrap();
    assert_eq!(channels.lines().next(), Some("layer_id,label,kept,original"));
    assert_eq!(channels.lines().count(), 1 + 9 * bundle.gated_layers.len());
}

#[test]
fn unwritable_destination_is_an_io_error() {
    let bundle = tiny_study(vec![0], vec![0, 1]);
    let file = tempfile::NamedTempFile::new().unwrap();
    assert!(emit_report(&bundle, &file.path().join("sub")).is_err());
}

proptest! {
    #[test]
    fn matrices_are_well_formed(seed in any::<u64>(), count in 2usize..7, len in 2usize..12) {
        let feats = random_features(&mut rng(seed), count, len);
        if let Ok(m) = correlation_matrix(&feats) {
            prop_assert!(m.is_well_formed());
            prop_assert_eq!(SimilarityMatrix::from_csv(&m.to_csv().unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(xs in prop::collection::vec(0.0f64..1.0, 3..16), a in 0.1f64..5.0, b in -2.0f64..2.0) {
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        if let Some(r) = pearson(&xs, &ys) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
    }
}
