use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use handseg::checkpoint::Checkpoint;
use handseg::detect::load_detections;
use handseg::eval::{emit_report, evaluate};
use handseg::gradcheck::{gradcheck as check_case, standard_cases, SEEDS, TOLERANCE};
use handseg::network::{Network, Part};
use handseg::pgm;
use handseg::pipeline::{infer_frame, nearest_region};
use handseg::preprocess::{BBox, RgbdFrame};
use handseg::synth::{self, Split, FINGERS};
use handseg::train::{load_samples_with, loss_csv, Trainer};

use crate::config::PipelineConfig;
use crate::CliError;

/// Per-frame parameter saving quoted for the full-size reference network.
const REFERENCE_SAVINGS: usize = 10_014_563;

fn io(context: impl std::fmt::Display, e: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

/// A scratch directory next to the output. Nothing reaches the output until
/// `commit`, so a failed command leaves no partial files behind.
struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    fn new(target: &Path) -> Result<Self, CliError> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(parent).map_err(|e| io(format!("creating {}", parent.display()), e))?;
        let dir = tempfile::Builder::new().prefix(".handseg-").tempdir_in(parent).map_err(|e| io("creating staging directory", e))?;
        Ok(Staging { dir, target: target.to_path_buf() })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path().join(name);
        fs::write(&p, bytes).map_err(|e| io(format!("writing {}", p.display()), e))
    }

    /// Moves every staged entry into the target, replacing entries of the same name.
    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(&self.target).map_err(|e| io(format!("creating {}", self.target.display()), e))?;
        let mut entries: Vec<_> = fs::read_dir(self.path()).map_err(|e| io("listing staging directory", e))?.collect::<Result<_, _>>().map_err(|e| io("listing staging directory", e))?;
        entries.sort_by_key(|e| e.file_name());
        let mut moved = Vec::new();
        for entry in entries {
            let dest = self.target.join(entry.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest).map_err(|e| io(format!("replacing {}", dest.display()), e))?;
            }
            fs::rename(entry.path(), &dest).map_err(|e| io(format!("moving into {}", dest.display()), e))?;
            moved.push(dest);
        }
        Ok(moved)
    }
}

fn square_input(net_size: (usize, usize)) -> Result<usize, CliError> {
    match net_size {
        (h, w) if h == w => Ok(w),
        (h, w) => Err(CliError::Usage(format!("input size {h}x{w} is not square"))),
    }
}

fn load_network(cfg: &PipelineConfig) -> Result<Network, CliError> {
    let path = cfg.input(&cfg.checkpoint, "checkpoint")?;
    let net = if cfg.spec_overridden { Network::load_checkpoint_matching(path, &cfg.spec)? } else { Network::load_checkpoint(path)? };
    Ok(net)
}

pub fn synth(cfg: &PipelineConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require(&cfg.out, "out")?;
    let stage = Staging::new(out)?;
    let (train, test) = synth::make_dataset(stage.path(), cfg.scenes, seed, &cfg.synth)?;
    stage.commit()?;
    println!("{} training and {} test scenes in {}", train.len(), test.len(), out.display());
    Ok(())
}

pub fn train(cfg: &PipelineConfig) -> Result<(), CliError> {
    let tcfg = cfg.train_config()?;
    let dataset = cfg.input(&cfg.dataset, "dataset")?;
    let out = cfg.require(&cfg.out, "out")?;
    let mut trainer = match &cfg.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if cfg.spec_overridden && ckpt.spec != cfg.spec {
                return Err(CliError::Data(format!("{} was trained with a different network spec", p.display())));
            }
            Trainer::resume(&ckpt, tcfg.clone())?
        }
        None => Trainer::new(Network::build(cfg.spec.clone(), tcfg.seed)?, tcfg.clone())?,
    };
    let size = square_input(trainer.network().spec().input_size)?;
    let data = load_samples_with(dataset, Split::Train, detections_for(cfg, dataset).as_deref(), &cfg.threshold, size)?;
    let total = tcfg.total_steps(data.len());
    eprintln!("training on {} samples for {total} steps", data.len());
    trainer.run(&data, |r| {
        if (r.step + 1) % 100 == 0 || r.step + 1 == total {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", r.step + 1, r.loss_total, r.lr);
        }
    })?;
    let stage = Staging::new(out)?;
    stage.write("model.ckpt", &trainer.checkpoint().to_bytes())?;
    stage.write("loss.csv", loss_csv(trainer.history()).as_bytes())?;
    stage.commit()?;
    match trainer.history().last() {
        Some(r) => println!("step {} loss {:.4}; wrote {}", trainer.step_count(), r.loss_total, out.display()),
        None => println!("nothing to train at step {}; wrote {}", trainer.step_count(), out.display()),
    }
    Ok(())
}

/// The configured detections file, else the dataset's own.
fn detections_for(cfg: &PipelineConfig, dataset: &Path) -> Option<PathBuf> {
    cfg.detections.clone().or_else(|| Some(dataset.join(synth::DETECTIONS_FILE)).filter(|p| p.exists()))
}

pub fn eval(cfg: &PipelineConfig) -> Result<(), CliError> {
    let net = load_network(cfg)?;
    let dataset = cfg.input(&cfg.dataset, "dataset")?;
    let out = cfg.require(&cfg.out, "out")?;
    let size = square_input(net.spec().input_size)?;
    let samples = load_samples_with(dataset, Split::Test, detections_for(cfg, dataset).as_deref(), &cfg.threshold, size)?;
    let ev = evaluate(&net, &samples, &cfg.precision_thresholds, &cfg.seg_thresholds, cfg.unit_scale)?;
    let mut acc = String::from("branch,accuracy\n");
    for (name, a) in ["components", "fingertips"].iter().zip(ev.accuracy) {
        writeln!(acc, "{name},{a}").expect("writing to a String");
        println!("{name} accuracy {a:.4}");
    }
    let stage = Staging::new(out)?;
    emit_report(stage.path(), &ev.report)?;
    stage.write("accuracy.csv", acc.as_bytes())?;
    for path in stage.commit()? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_bbox(s: &str) -> Result<BBox, CliError> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| CliError::Usage(format!("--bbox expects x0,y0,x1,y1, got {s:?}")))?;
    match v[..] {
        [x0, y0, x1, y1] => BBox::new(x0, y0, x1, y1).map_err(|e| CliError::Usage(e.to_string())),
        _ => Err(CliError::Usage(format!("--bbox expects four numbers, got {s:?}"))),
    }
}

pub fn infer(cfg: &PipelineConfig, frame_path: &Path, bbox: Option<&str>, truth: Option<&Path>) -> Result<(), CliError> {
    let net = load_network(cfg)?;
    let out = cfg.require(&cfg.out, "out")?;
    let (w, h, depth) = pgm::read16(frame_path)?;
    let frame = RgbdFrame::new(w, h, depth)?;
    let bbox = match (bbox, &cfg.detections) {
        (Some(b), _) => parse_bbox(b)?,
        (None, Some(det)) => {
            let id = frame_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let records = load_detections(det, Some((w, h)))?;
            records.get(&id).and_then(|r| r.best()).ok_or_else(|| CliError::Data(format!("{} has no box for frame {id:?}", det.display())))?
        }
        (None, None) => nearest_region(&frame)?,
    };
    let pred = infer_frame(&net, &frame, &bbox, &cfg.threshold)?;
    let mut tips = String::from("finger,x,y\n");
    for (name, t) in FINGERS.iter().zip(&pred.tips) {
        match t {
            Some([x, y]) => writeln!(tips, "{name},{x},{y}"),
            None => writeln!(tips, "{name},,"),
        }
        .expect("writing to a String");
    }
    let stage = Staging::new(out)?;
    stage.write("components.pgm", &pgm::encode8(w, h, &pred.components))?;
    stage.write("fingertips.pgm", &pgm::encode8(w, h, &pred.fingertips))?;
    stage.write("tips.csv", tips.as_bytes())?;
    println!("box {},{},{},{}", bbox.x0, bbox.y0, bbox.x1, bbox.y1);
    if let Some(t) = truth {
        let (tw, th, labels) = pgm::read8(t)?;
        if (tw, th) != (w, h) {
            return Err(CliError::Data(format!("{} is {tw}x{th}, frame is {w}x{h}", t.display())));
        }
        let (right, total) = labels.iter().zip(&pred.components).filter(|(&l, _)| l != 0).fold((0, 0), |(r, n), (l, p)| (r + (l == p) as usize, n + 1));
        if total == 0 {
            return Err(CliError::Data(format!("{} has no hand pixels", t.display())));
        }
        println!("component accuracy {:.4} over {total} hand pixels", right as f64 / total as f64);
    }
    stage.commit()?;
    for (name, t) in FINGERS.iter().zip(&pred.tips) {
        match t {
            Some([x, y]) => println!("{name} {x:.1} {y:.1}"),
            None => println!("{name} absent"),
        }
    }
    Ok(())
}

pub fn gradcheck() -> Result<(), CliError> {
    let mut failed = 0;
    for case in standard_cases() {
        for seed in SEEDS {
            let report = check_case(&case, seed)?;
            let ok = report.passes(TOLERANCE);
            failed += !ok as usize;
            println!("{:<5} {:<16} seed {seed:<5} max rel {:.2e} over {} values", if ok { "PASS" } else { "FAIL" }, report.case, report.max_rel_error(), report.checked());
        }
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks above {TOLERANCE:e}")));
    }
    println!("all gradient checks below {TOLERANCE:e}");
    Ok(())
}

pub fn params(cfg: &PipelineConfig) -> Result<(), CliError> {
    let spec = &cfg.spec;
    println!("{:<24} {:>8} {:>6} {:>6} {:>10}", "layer", "part", "in", "out", "params");
    for l in spec.layers() {
        let part = match l.part {
            Part::Encoder => "encoder".to_string(),
            Part::Decoder(d) => format!("dec{d}"),
        };
        println!("{:<24} {:>8} {:>6} {:>6} {:>10}", l.name, part, l.in_channels, l.out_channels, l.param_count());
    }
    let c = spec.count_params();
    println!("encoder           {}", c.encoder);
    println!("decoder (each)    {}", c.decoder);
    println!("shared total      {}", c.total_shared);
    println!("two networks      {}", c.total_independent);
    println!("savings           {}", c.savings);
    println!("reference savings {REFERENCE_SAVINGS} (difference {:+})", c.savings as i64 - REFERENCE_SAVINGS as i64);
    Ok(())
}

pub fn bench(cfg: &PipelineConfig) -> Result<(), CliError> {
    let seed = cfg.seed.unwrap_or(0);
    let net = match &cfg.checkpoint {
        Some(_) => load_network(cfg)?,
        None => Network::build(cfg.spec.clone(), seed)?,
    };
    square_input(net.spec().input_size)?;
    let frames = (0..cfg.bench_frames as u64).map(|i| synth::scene(&cfg.synth, seed, i).map(|s| s.0)).collect::<Result<Vec<_>, _>>()?;
    if frames.is_empty() {
        return Err(CliError::Usage("bench_frames must be positive".into()));
    }
    let start = Instant::now();
    for f in &frames {
        let bbox = nearest_region(f)?;
        infer_frame(&net, f, &bbox, &cfg.threshold)?;
    }
    let secs = start.elapsed().as_secs_f64();
    println!("{} frames in {secs:.3} s: {:.2} frames/s", frames.len(), frames.len() as f64 / secs);
    Ok(())
}
