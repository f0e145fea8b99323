//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p handseg --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use handseg::checkpoint::Checkpoint;
use handseg::eval::*;
use handseg::gradcheck::{gradcheck, standard_cases, LayerCase, SEEDS, TOLERANCE};
use handseg::network::{count_params, Network, NetworkSpec, WidthMultiplier};
use handseg::preprocess::{prepare_sample, threshold_hand, ThresholdParams};
use handseg::synth::{make_dataset, occlusion_scene, SynthConfig};
use handseg::train::{synthetic_samples, Budget, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REFERENCE_SAVINGS: usize = 10_014_563;
const TRAIN_SCENES: u64 = 500;
const HELD_OUT_SCENES: u64 = 200;
const STEPS: u64 = 2000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut ok = true;
    for case in standard_cases() {
        let limit = if matches!(case, LayerCase::Linear { .. }) { 1e-4 } else { TOLERANCE };
        for seed in SEEDS {
            let r = gradcheck(&case, seed).map_err(|e| format!("{}: {e}", case.name()))?;
            ok &= r.passes(limit);
            let w = worst.entry(case.name()).or_insert(0.0);
            *w = w.max(r.max_rel_error());
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let net = worst.get("network").copied().unwrap_or(f64::NAN);
    check(
        ok && elapsed < Duration::from_secs(120),
        format!("{} cases x {} seeds, worst {max:.2e} (network {net:.2e}), {:.1}s", worst.len(), SEEDS.len(), elapsed.as_secs_f64()),
    )
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let gaps: Vec<f32> = (0..50).map(|_| common::conv_oracle_gap(&common::conv_case(&mut rng))).collect();
    let worst = gaps.iter().copied().fold(0.0, f32::max);
    check(worst <= 1e-5, format!("50 shapes, max |diff| {worst:.2e}"))
}

fn sharing_arithmetic() -> Outcome {
    let mut specs = vec![NetworkSpec::default(), common::tiny_spec(), NetworkSpec::desk_scale()];
    for (num, den) in [(1, 8), (1, 2), (2, 1), (3, 4)] {
        specs.push(NetworkSpec::default().with_width(WidthMultiplier::new(num, den).unwrap()));
    }
    for stages in 1..=5 {
        specs.push(common::tiny_spec().with_stages(stages));
    }
    specs.push(NetworkSpec {
        input_channels: 3,
        ..NetworkSpec::default()
    });
    for s in &specs {
        let c = count_params(s);
        if !(c.savings == c.encoder && c.total_independent - c.total_shared == c.savings && c.total_shared == c.encoder + 2 * c.decoder && c.savings > 0) {
            return Err(format!("identity broken for {s:?}: {c:?}"));
        }
    }
    let d = count_params(&NetworkSpec::default());
    let gap = d.savings as i64 - REFERENCE_SAVINGS as i64;
    Ok(format!(
        "{} specs; default saves {} vs reference {REFERENCE_SAVINGS} (diff {gap:+}, informational)",
        specs.len(),
        d.savings
    ))
}

fn encoder_additivity() -> Outcome {
    let spec = common::tiny_spec();
    let mut worst = 0f32;
    for seed in [5u64, 6, 7] {
        let mut net = Network::build(spec.clone(), seed).unwrap();
        let (x, comp, tips) = common::random_batch(&spec, 2, seed + 100);
        let both = common::branch_gradients(&mut net, &x, &comp, &tips, [true, true]);
        let a = common::branch_gradients(&mut net, &x, &comp, &tips, [true, false]);
        let b = common::branch_gradients(&mut net, &x, &comp, &tips, [false, true]);
        for (name, g) in both.with_prefix("encoder.") {
            let (ga, gb) = (a.get(name).unwrap(), b.get(name).unwrap());
            for i in 0..g.len() {
                worst = worst.max((g[i] - (ga[i] + gb[i])).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("3 seeds, max |diff| {worst:.2e}"))
}

fn eq1_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ThresholdParams::default();
    let mut compared = 0;
    for i in 0..100 {
        let (frame, bbox) = common::random_frame(&mut rng);
        let want = common::eq1_oracle(&frame, &bbox, params.t);
        let got = threshold_hand(&frame, &bbox, &params).ok().map(|crop| {
            let mut full = vec![0u16; 256];
            for y in bbox.y0..=bbox.y1 {
                for x in bbox.x0..=bbox.x1 {
                    full[y * 16 + x] = crop.depth[(y - bbox.y0) * bbox.width() + x - bbox.x0];
                }
            }
            full
        });
        if got != want {
            return Err(format!("frame {i} differs"));
        }
        compared += want.is_some() as usize;
    }
    Ok(format!("100 frames bit-exact ({compared} with valid depth)"))
}

struct Trained {
    net: Network,
    elapsed: Duration,
}

fn train_desk_scale() -> Result<Trained, String> {
    let params = ThresholdParams::default();
    let spec = NetworkSpec::desk_scale();
    let size = spec.input_size.0;
    let start = Instant::now();
    let train = synthetic_samples(&SynthConfig::default(), 1, 0..TRAIN_SCENES, &params, size).map_err(|e| e.to_string())?;
    let net = Network::build(spec, 3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        budget: Budget::Steps(STEPS),
        seed: 3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(net, cfg).map_err(|e| e.to_string())?;
    t.run(&train, |_| {}).map_err(|e| e.to_string())?;
    Ok(Trained {
        net: t.into_network(),
        elapsed: start.elapsed(),
    })
}

fn convergence(trained: &Trained) -> Outcome {
    let params = ThresholdParams::default();
    let size = trained.net.spec().input_size.0;
    let held_out = synthetic_samples(&SynthConfig::default(), 2, 0..HELD_OUT_SCENES, &params, size).map_err(|e| e.to_string())?;
    let ev = evaluate(&trained.net, &held_out, &default_precision_thresholds(), &default_seg_thresholds(), 1.0).map_err(|e| e.to_string())?;
    let [c, f] = ev.accuracy;
    let mins = trained.elapsed.as_secs_f64() / 60.0;
    check(
        c >= 0.9 && f >= 0.9 && mins < 30.0,
        format!("{STEPS} steps on {TRAIN_SCENES} scenes in {mins:.1} min; held-out accuracy components {c:.3}, fingertips {f:.3}"),
    )
}

fn occlusion(trained: &Trained) -> Outcome {
    let cfg = SynthConfig::default();
    let params = ThresholdParams::default();
    let size = trained.net.spec().input_size.0;
    let mut samples = Vec::new();
    let mut hidden = Vec::new();
    for i in 0..100 {
        let (frame, labels, f) = occlusion_scene(&cfg, 4, i).map_err(|e| e.to_string())?;
        let bbox = labels.hand_bbox(cfg.bbox_margin).ok_or("scene without a hand")?;
        samples.push(prepare_sample(&frame, &labels, &bbox, &params, size).map_err(|e| e.to_string())?);
        hidden.push(f);
    }
    let ev = evaluate(&trained.net, &samples, &default_precision_thresholds(), &default_seg_thresholds(), 1.0).map_err(|e| e.to_string())?;
    let absent = ev.tips.iter().zip(&hidden).filter(|(t, &f)| t[f].is_none()).count();
    check(absent >= 90, format!("occluded tip absent in {absent}/100 scenes"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seg_t = default_seg_thresholds();
    for case in 0..1000 {
        let errors: Vec<f64> = (0..rng.random_range(1..60))
            .map(|_| if rng.random_bool(0.2) { f64::INFINITY } else { rng.random_range(0.0..10.0) })
            .collect();
        let mut t: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..40) as f64 * 0.25).collect();
        t.sort_by(f64::total_cmp);
        let c = precision_curve(&errors, &t).map_err(|e| e.to_string())?;
        if c.raw != common::count_below(&errors, &t) || c.normalized.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("precision case {case}"));
        }
        let len = rng.random_range(1..30);
        let truth: Vec<Vec<u8>> = (0..rng.random_range(1..8)).map(|_| (0..len).map(|_| rng.random_range(0..7)).collect()).collect();
        let pred: Vec<Vec<u8>> = truth
            .iter()
            .map(|f| f.iter().map(|&c| if rng.random_bool(0.3) { rng.random_range(0..7) } else { c }).collect())
            .collect();
        let s = seg_error_curve(&common::slices(&pred), &common::slices(&truth), &seg_t).map_err(|e| e.to_string())?;
        if s.fractions != common::seg_fraction_oracle(&pred, &truth, &seg_t) || s.fractions.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("segmentation case {case}"));
        }
    }
    let worked = precision_curve(&[0.5, 1.2, 0.9], &[1.0]).map_err(|e| e.to_string())?;
    check(
        worked.raw == [2] && worked.normalized == [2.0 / 3.0],
        format!("1000 precision + 1000 segmentation sets exact, worked example raw {} normalized {:.4}", worked.raw[0], worked.normalized[0]),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();

    let mut net = Network::build(common::tiny_spec(), 9).unwrap();
    let (x, _, _) = common::random_batch(net.spec(), 2, 1);
    net.forward_train(&x).unwrap();
    let ckpt = root.join("net.ckpt");
    net.save_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let back = Network::load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    if Checkpoint::from_network(&back).to_bytes() != Checkpoint::from_network(&net).to_bytes() {
        return Err("checkpoint reload differs".into());
    }

    let cfg = SynthConfig::default();
    let (a, b) = (root.join("a"), root.join("b"));
    make_dataset(&a, 10, 99, &cfg).map_err(|e| e.to_string())?;
    make_dataset(&b, 10, 99, &cfg).map_err(|e| e.to_string())?;
    let files = same_tree(&a, &b)?;

    let images: Vec<[Option<f64>; 5]> = (0..20)
        .map(|i| std::array::from_fn(|f| ((i + f) % 3 != 0).then(|| (i as f64 * 0.37 + f as f64) % 4.0)))
        .collect();
    let prec = fingertip_precision(&images, &default_precision_thresholds()).map_err(|e| e.to_string())?;
    let report = Report {
        precision: Some(prec.clone()),
        segmentation: vec![],
    };
    let out = root.join("metrics");
    emit_report(&out, &report).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(out.join("precision.csv")).map_err(|e| e.to_string())?;
    let table = parse_precision_csv(&text, Path::new("precision.csv")).map_err(|e| e.to_string())?;
    let want = prec.table();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let csv_ok = table.thresholds == want.thresholds && table.overall == want.overall && (0..5).all(|f| bits(&table.per_finger[f]) == bits(&want.per_finger[f]));
    check(csv_ok, format!("checkpoint bit-exact, dataset {files} files byte-identical, precision CSV exact"))
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    let mut stack = vec![a.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let other = b.join(p.strip_prefix(a).unwrap());
            if std::fs::read(&p).ok() != std::fs::read(&other).ok() {
                return Err(format!("{} differs", other.display()));
            }
            count += 1;
        }
    }
    Ok(count)
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("FAIL  {name}: {d} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn main() {
    let mut results = vec![
        run("gradient correctness", gradient_correctness),
        run("convolution oracle", conv_oracle),
        run("sharing arithmetic", sharing_arithmetic),
        run("encoder-gradient additivity", encoder_additivity),
        run("threshold oracle", eq1_oracle),
        run("metric oracles", metric_oracles),
        run("round trips", round_trips),
    ];
    match catch_unwind(train_desk_scale) {
        Ok(Ok(trained)) => {
            results.push(run("desk-scale convergence", || convergence(&trained)));
            results.push(run("occlusion behaviour", || occlusion(&trained)));
        }
        failed => {
            let why = match failed {
                Ok(Err(e)) => e,
                _ => "training panicked".into(),
            };
            results.push(run("desk-scale convergence", || Err(why.clone())));
            results.push(run("occlusion behaviour", || Err(format!("no trained network: {why}"))));
        }
    }
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
