use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsadv::data::{
    load_ucr, parse_ucr, preprocess, remap_labels, stratified_split, to_ucr_string, write_ucr, Dataset, TimeSeries,
};

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let classes = rng.gen_range(2..5);
    let mut series = Vec::new();
    for c in 0..classes {
        for _ in 0..rng.gen_range(2..12) {
            let id = series.len();
            series.push(TimeSeries::new(vec![rng.gen::<f64>()], c, id));
        }
    }
    Dataset {
        name: "random".into(),
        series,
        classes: (0..classes as i64).collect(),
    }
}

#[test]
fn split_halves_are_balanced_disjoint_and_complete() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let d = random_dataset(&mut rng);
        let split = stratified_split(&d, trial).unwrap();
        let eval_ids: BTreeSet<usize> = split.d_eval.series.iter().map(|s| s.source_id).collect();
        let test_ids: BTreeSet<usize> = split.d_test.series.iter().map(|s| s.source_id).collect();
        assert!(eval_ids.is_disjoint(&test_ids));
        assert_eq!(eval_ids.len() + test_ids.len(), d.len());
        let (ce, ct) = (split.d_eval.class_counts(), split.d_test.class_counts());
        for (a, b) in ce.iter().zip(&ct) {
            assert!(a >= b && a - b <= 1, "trial {trial}: {ce:?} vs {ct:?}");
        }
        let again = stratified_split(&d, trial).unwrap();
        assert_eq!(again, split);
    }
}

#[test]
fn ucr_rows_parse_per_format() {
    let d = parse_ucr("x", "1\t0.5\t-0.3\n", '\t').unwrap();
    assert_eq!(d.series[0].raw_label, 1);
    assert_eq!(d.series[0].values, vec![0.5, -0.3]);
    let d = parse_ucr("x", "-1\t0.0\n", '\t').unwrap();
    assert_eq!(d.series[0].raw_label, -1);
    assert_eq!(d.series[0].values, vec![0.0]);
    let err = parse_ucr("x", "1\t0.1\n2\tabc\n", '\t').unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn missing_test_file_is_named() {
    let err = load_ucr(std::path::Path::new("/nonexistent/X_TEST.tsv"), '\t').unwrap_err();
    assert!(err.to_string().contains("X_TEST.tsv"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ucr_round_trip_is_bit_exact(
        rows in prop::collection::vec(
            (-3i64..4, prop::collection::vec(-1e6f64..1e6, 5)), 2..20),
        comma in any::<bool>(),
    ) {
        let delim = if comma { ',' } else { '\t' };
        let mut text = String::new();
        for (label, values) in &rows {
            text.push_str(&label.to_string());
            for v in values {
                text.push(delim);
                text.push_str(&format!("{v:?}"));
            }
            text.push('\n');
        }
        let loaded = parse_ucr("rt", &text, delim).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.tsv");
        write_ucr(&loaded, &path, delim).unwrap();
        let back = load_ucr(&path, delim).unwrap();
        prop_assert_eq!(to_ucr_string(&back, delim), to_ucr_string(&loaded, delim));
        for (a, b) in back.series.iter().zip(&loaded.series) {
            prop_assert_eq!(a.raw_label, b.raw_label);
            let bits_a: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        let distinct: BTreeSet<i64> = rows.iter().map(|r| r.0).collect();
        if distinct.len() >= 2 {
            let remapped = remap_labels(back).unwrap();
            prop_assert_eq!(remapped.classes, distinct.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn preprocess_hits_target_length_and_normalizes(
        values in prop::collection::vec(prop::option::weighted(0.8, -50.0f64..50.0), 2..40),
        target in 1usize..80,
    ) {
        let finite = values.iter().filter(|v| v.is_some()).count();
        prop_assume!(finite >= 2);
        let s = TimeSeries {
            values: values.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            label: Some(0),
            raw_label: 0,
            source_id: 0,
        };
        let plain = preprocess(&s, target, false).unwrap();
        prop_assert_eq!(plain.values.len(), target);
        prop_assert!(plain.values.iter().all(|v| v.is_finite()));
        let z = preprocess(&s, target, true).unwrap();
        prop_assert_eq!(z.values.len(), target);
        let n = target as f64;
        let mean = z.values.iter().sum::<f64>() / n;
        let sd = (z.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let constant = plain.values.iter().all(|&v| v == plain.values[0]);
        if constant {
            prop_assert!(z.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!(mean.abs() < 1e-9, "mean {}", mean);
            prop_assert!((sd - 1.0).abs() < 1e-9, "sd {}", sd);
        }
    }
}
