//! Property tests for the numeric invariants.

use proptest::prelude::*;

use aspectpd::attention::{reca_attention, AttentionParams, AttentionVariant};
use aspectpd::encoder::AspectTokenMatrix;
use aspectpd::metrics::{auc_roc, compute_metrics};
use aspectpd::protocol::segment_recording;
use aspectpd::rng::SeededRng;
use aspectpd::tape::Tape;
use aspectpd::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        axis in 0usize..2,
        seed in 0u64..u64::MAX,
    ) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::uniform(&[rows, cols], -30.0, 30.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let y = tape.softmax(xn, axis).unwrap();
        let t = tape.value(y);
        if axis == 1 {
            for r in 0..rows {
                let sum: f64 = t.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..cols {
                let sum: f64 = (0..rows).map(|r| t.at(r, c)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_matches_naive_oracle_up_to_extent_32(
        m in 1usize..=32,
        k in 1usize..=32,
        n in 1usize..=32,
        seed in 0u64..u64::MAX,
    ) {
        let mut rng = SeededRng::new(seed);
        let a = Tensor::uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[k, n], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let an = tape.leaf(a.clone());
        let bn = tape.leaf(b.clone());
        let c = tape.matmul(an, bn).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a.at(i, p) * b.at(p, j);
                }
                let got = tape.value(c).at(i, j);
                let scale = want.abs().max(1.0);
                prop_assert!((got - want).abs() / scale < 1e-12);
            }
        }
    }

    #[test]
    fn aspect_attention_rows_are_stochastic_and_hulled(
        t_len in 1usize..6,
        d in 2usize..8,
        seed in 0u64..u64::MAX,
    ) {
        let mut rng = SeededRng::new(seed);
        let k = 4;
        let ssl = Tensor::normal(&[t_len, d], 2.0, &mut rng);
        let tokens = AspectTokenMatrix {
            tokens: Tensor::normal(&[k, d], 1.5, &mut rng),
            aspect_names: (0..k).map(|i| format!("a{i}")).collect(),
        };
        let params = AttentionParams::init(AttentionVariant::m4(), d, &mut rng);
        let (z, w) = reca_attention(&ssl, &tokens, &params).unwrap();
        for sum in w.normalized_sums() {
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
        for ti in 0..t_len {
            for di in 0..d {
                let lo = (0..k).map(|ki| tokens.tokens.at(ki, di)).fold(f64::INFINITY, f64::min);
                let hi = (0..k).map(|ki| tokens.tokens.at(ki, di)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(z.at(ti, di) >= lo - 1e-12 && z.at(ti, di) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn segmenting_covers_contiguously_with_balanced_lengths(
        n_segments in 1usize..12,
        extra in 0usize..40,
        d in 1usize..4,
        seed in 0u64..u64::MAX,
    ) {
        let t = n_segments + extra;
        let mut rng = SeededRng::new(seed);
        let ssl = Tensor::uniform(&[t, d], -1.0, 1.0, &mut rng);
        let segments = segment_recording(&ssl, n_segments).unwrap();
        prop_assert_eq!(segments.len(), n_segments);
        let lengths: Vec<usize> = segments.iter().map(|s| s.dim(0)).collect();
        prop_assert_eq!(lengths.iter().sum::<usize>(), t);
        let min = lengths.iter().min().unwrap();
        let max = lengths.iter().max().unwrap();
        prop_assert!(max - min <= 1);
        let mut rebuilt = Vec::new();
        for s in &segments {
            rebuilt.extend_from_slice(s.data());
        }
        prop_assert_eq!(rebuilt.as_slice(), ssl.data());
    }

    #[test]
    fn all_six_metrics_match_brute_force(
        scores10 in prop::collection::vec(0usize..11, 2..40),
        labels_seed in 0u64..u64::MAX,
    ) {
        let scores: Vec<f64> = scores10.iter().map(|&s| s as f64 / 10.0).collect();
        let mut rng = SeededRng::new(labels_seed);
        let labels: Vec<u8> = scores.iter().map(|_| rng.below(2) as u8).collect();
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();

        // Independent counting-loop oracle.
        let n = scores.len() as f64;
        let (mut tp, mut fp, mut tn, mut fne) = (0f64, 0f64, 0f64, 0f64);
        for (s, &l) in scores.iter().zip(&labels) {
            let pred_pos = *s >= 0.5;
            if pred_pos && l == 1 { tp += 1.0; }
            if pred_pos && l == 0 { fp += 1.0; }
            if !pred_pos && l == 0 { tn += 1.0; }
            if !pred_pos && l == 1 { fne += 1.0; }
        }
        prop_assert_eq!(m.accuracy, (tp + tn) / n);
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let sensitivity = if tp + fne == 0.0 { 0.0 } else { tp / (tp + fne) };
        let specificity = if tn + fp == 0.0 { 0.0 } else { tn / (tn + fp) };
        prop_assert_eq!(m.precision, precision);
        prop_assert_eq!(m.sensitivity, sensitivity);
        prop_assert_eq!(m.specificity, specificity);
        let f1 = if precision + sensitivity == 0.0 {
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        prop_assert_eq!(m.f1, f1);

        // Pairwise AUC oracle with half-weight ties.
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (si, &li) in scores.iter().zip(&labels) {
            for (sj, &lj) in scores.iter().zip(&labels) {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        let expected_auc = if pairs == 0.0 { None } else { Some(num / pairs) };
        prop_assert_eq!(auc_roc(&scores, &labels), expected_auc);
        prop_assert_eq!(m.auc, expected_auc);
    }
}

#[test]
fn normalization_stats_are_speaker_provenanced() {
    use aspectpd::dataset::{Dataset, Label, SampleRecord, Task};
    use aspectpd::encoder::{compute_feature_stats, AspectFeatureSet, AspectFeatures};
    use aspectpd::folds::make_folds;

    let mut rng = SeededRng::new(5);
    let mut samples = Vec::new();
    for class in 0..2u8 {
        for s in 0..6 {
            let label = if class == 0 { Label::Hc } else { Label::Pd };
            let speaker = format!("{}{s:02}", label.as_str());
            for u in 0..2 {
                samples.push(SampleRecord {
                    utterance_id: format!("{speaker}_u{u}"),
                    speaker_id: speaker.clone(),
                    task: Task::Ddk,
                    ssl_path: "unused".into(),
                    features: AspectFeatureSet::new(vec![AspectFeatures {
                        name: "a".into(),
                        values: vec![rng.normal(), rng.normal()],
                    }])
                    .unwrap(),
                    label,
                });
            }
        }
    }
    let dataset = Dataset::new(samples).unwrap();
    for seed in 0..20 {
        let plan = make_folds(&dataset, 3, 2, seed).unwrap();
        for fold in &plan.outer {
            let train: Vec<&SampleRecord> = dataset
                .samples
                .iter()
                .filter(|s| fold.train_speakers.contains(&s.speaker_id))
                .collect();
            let stats = compute_feature_stats(
                train.iter().map(|s| (s.speaker_id.as_str(), &s.features)),
            )
            .unwrap();
            // The provenance tag names exactly the training speakers, so
            // leakage of a test speaker is detectable.
            for t in &fold.test_speakers {
                assert!(!stats.source_speakers.contains(t));
            }
            assert_eq!(stats.source_speakers.len(), fold.train_speakers.len());
        }
    }
}
