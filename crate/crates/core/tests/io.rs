use proptest::prelude::*;
use suml_core::datagen::{generate_world, read_dataset, sample_dataset, write_dataset, View, VideoSample, WorldSpec};
use suml_core::model::{Checkpoint, EncoderStack, ModelSpec};
use suml_core::numerics::{RealMatrix, RealVector};
use suml_core::{atomic_write, Error};

fn bits(samples: &[VideoSample]) -> Vec<u64> {
    samples
        .iter()
        .flat_map(|s| s.frames.as_slice().iter().chain(s.narration.as_slice()).map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn empty_and_single_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    assert!(read_dataset(&path).unwrap().is_empty());

    let world = generate_world(&WorldSpec::default()).unwrap();
    let one = sample_dataset(&world, View::Tpv, 1, 3).unwrap();
    write_dataset(&one, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    assert_eq!(read_dataset(&path).unwrap(), one);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let world = generate_world(&WorldSpec::default()).unwrap();
    write_dataset(&sample_dataset(&world, View::Fpv, 2, 0).unwrap(), &path).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": 1}\n");
    std::fs::write(&path, text).unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(read_dataset(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn failed_write_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    let res = atomic_write(&path, |w| {
        w.write_all(b"partial").unwrap();
        Err(Error::EmptySet)
    });
    assert!(res.is_err());
    assert!(!path.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn checkpoint_rejects_inconsistent_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let stack = EncoderStack::init(View::Fpv, &ModelSpec::default(), 4, 6, 3, 1);
    Checkpoint::new("stage2", stack.clone()).save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().stack, stack);
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"n_classes\": 3", "\"n_classes\": 4", 1);
    std::fs::write(&path, text).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(f64::MIN_POSITIVE),
        Just(-0.0),
    ]
}

fn sample() -> impl Strategy<Value = VideoSample> {
    (1usize..4, 2usize..6, 2usize..6, proptest::collection::vec(finite(), 36), any::<bool>()).prop_map(
        |(t, d, td, raw, tpv)| {
            let frames = RealMatrix::from_fn(t, d, |r, c| raw[(r * d + c) % raw.len()]);
            let mut n: Vec<f64> = (0..td).map(|k| raw[k].abs().min(1e3) + 1e-3 * (k + 1) as f64).collect();
            let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            n.iter_mut().for_each(|x| *x /= norm);
            VideoSample {
                id: format!("s{t}{d}"),
                view: if tpv { View::Tpv } else { View::Fpv },
                verb_id: t,
                noun_id: d,
                action_id: t * 10 + d,
                frames,
                narration: RealVector::new(n).unwrap(),
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_corpora_round_trip_bitwise(samples in proptest::collection::vec(sample(), 100)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(bits(&back), bits(&samples));
        prop_assert_eq!(back, samples);
    }
}
