mod common;

use std::collections::BTreeMap;
use std::path::Path;

use handseg::checkpoint::Checkpoint;
use handseg::detect::{load_detections, save_detections, DetectionRecord};
use handseg::eval::*;
use handseg::network::{Network, NetworkSpec};
use handseg::pgm;
use handseg::preprocess::BBox;
use handseg::train::{loss_csv, StepRecord, LOSS_CSV_HEADER};
use handseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_save_load_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut net = Network::build(common::tiny_spec(), 9).unwrap();
    let (x, _, _) = common::random_batch(net.spec(), 2, 1);
    net.forward_train(&x).unwrap();
    net.save_checkpoint(&path).unwrap();
    let back = Network::load_checkpoint(&path).unwrap();
    assert_eq!(back.spec(), net.spec());
    for ((na, a), (nb, b)) in net.parameters().iter().zip(back.parameters()) {
        assert_eq!(na, &nb);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    for ((_, a), (_, b)) in net.state_tensors().iter().zip(back.state_tensors()) {
        assert_eq!(*a, b);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Network::build(common::tiny_spec(), 1).unwrap().save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(Network::load_checkpoint(&path).is_err(), "cut at {cut}");
    }
}

#[test]
fn checkpoint_with_other_classes_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Network::build(common::tiny_spec(), 1).unwrap().save_checkpoint(&path).unwrap();
    let other = NetworkSpec {
        classes_per_decoder: 5,
        ..common::tiny_spec()
    };
    assert!(matches!(Network::load_checkpoint_matching(&path, &other), Err(Error::SpecMismatch(_))));
    assert!(Network::load_checkpoint_matching(&path, &common::tiny_spec()).is_ok());
}

fn random_precision(rng: &mut ChaCha8Rng) -> PrecisionCurve {
    let images: Vec<[Option<f64>; 5]> = (0..rng.random_range(1..30))
        .map(|_| std::array::from_fn(|f| (f != 4 && rng.random_bool(0.8)).then(|| if rng.random_bool(0.1) { f64::INFINITY } else { rng.random_range(0.0..8.0) })))
        .collect();
    if images.iter().flatten().all(Option::is_none) {
        return random_precision(rng);
    }
    fingertip_precision(&images, &default_precision_thresholds()).unwrap()
}

#[test]
fn metric_csvs_parse_back_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dir = tempfile::tempdir().unwrap();
    for _ in 0..50 {
        let prec = random_precision(&mut rng);
        let frames: Vec<Vec<u8>> = (0..5).map(|_| (0..40).map(|_| rng.random_range(0..7)).collect()).collect();
        let preds: Vec<Vec<u8>> = frames.iter().map(|f| f.iter().map(|&c| if rng.random_bool(0.2) { 0 } else { c }).collect()).collect();
        let seg = seg_error_curve(&common::slices(&preds), &common::slices(&frames), &default_seg_thresholds()).unwrap();
        let report = Report {
            precision: Some(prec.clone()),
            segmentation: vec![("components".into(), seg.clone())],
        };
        let files = emit_report(dir.path(), &report).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("precision.csv")).unwrap();
        let table = parse_precision_csv(&text, Path::new("precision.csv")).unwrap();
        let want = prec.table();
        assert_eq!(table.thresholds, want.thresholds);
        assert_eq!(table.overall, want.overall);
        for f in 0..5 {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&table.per_finger[f]), bits(&want.per_finger[f]));
        }
        let text = std::fs::read_to_string(dir.path().join("segmentation_components.csv")).unwrap();
        assert!(text.starts_with(SEGMENTATION_HEADER));
        assert_eq!(parse_segmentation_csv(&text, Path::new("s.csv")).unwrap(), (seg.thresholds, seg.fractions));
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.lines().any(|l| l.starts_with("thumb_precision_at_1.0,")));
    }
}

#[test]
fn empty_report_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics");
    assert!(emit_report(&out, &Report::default()).is_err());
    assert!(!out.exists());
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let history: Vec<StepRecord> = (0..4)
        .map(|i| StepRecord {
            step: i,
            lr: 1e-3,
            loss_components: 1.0 / (i + 1) as f64,
            loss_fingertips: 0.5,
            loss_total: 1.0 / (i + 1) as f64 + 0.5,
        })
        .collect();
    let csv = loss_csv(&history);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
    for (rec, line) in history.iter().zip(lines) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(v, vec![rec.step as f64, rec.lr, rec.loss_components, rec.loss_fingertips, rec.loss_total]);
    }
}

proptest! {
    #[test]
    fn detections_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = BTreeMap::new();
        for i in 0..rng.random_range(0..8) {
            let boxes = (0..rng.random_range(1..4))
                .map(|_| {
                    let (x0, y0) = (rng.random_range(0..100), rng.random_range(0..100));
                    let b = BBox::new(x0, y0, x0 + rng.random_range(0..50), y0 + rng.random_range(0..50)).unwrap();
                    (b, rng.random_range(0..=1000) as f32 / 1000.0)
                })
                .collect();
            recs.insert(format!("frame_{i:04}"), DetectionRecord { boxes });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.txt");
        save_detections(&path, &recs).unwrap();
        prop_assert_eq!(load_detections(&path, Some((150, 150))).unwrap(), recs);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d16: Vec<u16> = (0..w * h).map(|_| rng.random()).collect();
        let d8: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
        let dir = tempfile::tempdir().unwrap();
        let (p16, p8) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
        pgm::write16(&p16, w, h, &d16).unwrap();
        pgm::write8(&p8, w, h, &d8).unwrap();
        prop_assert_eq!(pgm::read16(&p16).unwrap(), (w, h, d16));
        prop_assert_eq!(pgm::read8(&p8).unwrap(), (w, h, d8));
    }
}
