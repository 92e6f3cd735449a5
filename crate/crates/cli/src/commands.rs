//! Stage implementations. Every stage reads from and writes to fixed
//! subdirectories of `work_dir` and leaves a config echo beside its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use stress::acquisition::{acquire, add_frame_noise, read_scan, write_scan, Frame};
use stress::metrics::{
    keypoints_from_csv, keypoints_to_csv, metrics_from_csv, metrics_to_csv, pck, KeypointRecord, KeypointRole, MetricRow,
};
use stress::models::{loss_to_csv, ModelBundle};
use stress::motion::{synthesize_trajectory, volume_at_time, KeypointSet, Trajectory};
use stress::phantom::generate_phantom;
use stress::pipeline::{
    baseline_si, baseline_sti, baseline_ti, evaluate_frames, read_series, run_inference, run_training, smore_config,
    write_series, Method,
};
use stress::volume::io::{load_volume, save_volume};
use stress::volume::Volume;
use stress::{Error, Result};

use crate::config::{ExperimentConfig, FrameSelection};
use crate::plot;

pub const OBJECT_FILE: &str = "object.strvol";
pub const KEYPOINTS_FILE: &str = "keypoints.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PCK_FILE: &str = "pck.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!("missing input {}; run `stress {stage}` first", path.display())))
    }
}

fn keypoint_records(frame: usize, kp: &KeypointSet, role: KeypointRole) -> Vec<KeypointRecord> {
    kp.points().iter().enumerate().map(|(id, p)| KeypointRecord { frame, id: id as u32, position: *p, role }).collect()
}

fn load_keypoints(path: &Path) -> Result<Vec<KeypointRecord>> {
    keypoints_from_csv(&fs::read_to_string(path)?)
}

pub fn phantom(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let spec = stress::phantom::PhantomSpec { seed: cfg.seed, ..cfg.phantom.clone() };
    let (object, kp) = generate_phantom(&spec)?;
    let dir = cfg.dir("phantom");
    cfg.write_echo(&dir)?;
    save_volume(&object, dir.join(OBJECT_FILE))?;
    fs::write(dir.join(KEYPOINTS_FILE), keypoints_to_csv(&keypoint_records(0, &kp, KeypointRole::Truth)))?;
    Ok(dir)
}

fn initial_keypoints(cfg: &ExperimentConfig) -> Result<KeypointSet> {
    let path = cfg.dir("phantom").join(KEYPOINTS_FILE);
    require(&path, "phantom")?;
    let records = load_keypoints(&path)?;
    let point = |id: u32| {
        records
            .iter()
            .find(|r| r.frame == 0 && r.id == id)
            .map(|r| r.position)
            .ok_or_else(|| Error::Format(format!("{} lacks keypoint {id} of frame 0", path.display())))
    };
    Ok(KeypointSet::new(point(0)?, point(1)?, point(2)?))
}

pub fn trajectory(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let kp = initial_keypoints(cfg)?;
    let dt = cfg.simulation.trajectory_dt_s;
    let traj = synthesize_trajectory(&kp, cfg.protocol.total_duration_s() + dt, dt, &cfg.motion, cfg.seed.wrapping_add(1))?;
    let dir = cfg.dir("trajectory");
    cfg.write_echo(&dir)?;
    traj.save_csv(dir.join(TRAJECTORY_FILE))?;
    Ok(dir)
}

/// Writes the scan and, beside it, the true object at each frame's midpoint.
pub fn acquire_scan(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let object_path = cfg.dir("phantom").join(OBJECT_FILE);
    let traj_path = cfg.dir("trajectory").join(TRAJECTORY_FILE);
    require(&object_path, "phantom")?;
    require(&traj_path, "trajectory")?;
    let object = load_volume(&object_path)?;
    let traj = Trajectory::load_csv(&traj_path)?;
    let clean = acquire(&object, &traj, &cfg.protocol)?;
    let sigma = cfg.simulation.noise_fraction * object.max();
    let frames = add_frame_noise(&clean, sigma, cfg.seed.wrapping_add(2))?;

    let scan_dir = cfg.dir("scan");
    cfg.write_echo(&scan_dir)?;
    write_scan(&scan_dir, &frames, &cfg.protocol, sigma)?;

    let mut truth = Vec::with_capacity(frames.len());
    let mut keypoints = Vec::new();
    let initial = traj.keypoints()[0];
    for f in &frames {
        let t = cfg.protocol.frame_mid_time(f.index);
        truth.push(volume_at_time(&object, &traj, t)?);
        let moved = traj.displacement_at(t)?;
        keypoints.extend(keypoint_records(f.index, &initial.map(|p| moved.apply(p)), KeypointRole::Truth));
    }
    let truth_dir = cfg.dir("truth");
    cfg.write_echo(&truth_dir)?;
    write_series(&truth_dir, "truth", &frames, &cfg.protocol, &truth)?;
    fs::write(truth_dir.join(KEYPOINTS_FILE), keypoints_to_csv(&keypoints))?;
    Ok(scan_dir)
}

fn load_frames(cfg: &ExperimentConfig) -> Result<Vec<Frame>> {
    let dir = cfg.dir("scan");
    require(&dir.join("manifest.json"), "acquire")?;
    let (manifest, frames) = read_scan(&dir)?;
    if manifest.protocol != cfg.protocol {
        return Err(Error::State(format!("scan in {} was acquired with a different protocol", dir.display())));
    }
    Ok(frames)
}

fn training_frames<'a>(cfg: &ExperimentConfig, frames: &'a [Frame]) -> Result<&'a [Frame]> {
    let n = frames.len();
    if cfg.stress.held_out >= n {
        return Err(Error::Config(format!("stress.held_out = {} leaves no training frames out of {n}", cfg.stress.held_out)));
    }
    Ok(&frames[..n - cfg.stress.held_out])
}

pub fn train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let frames = load_frames(cfg)?;
    let bundle = run_training(training_frames(cfg, &frames)?, &cfg.stress_config())?;
    let dir = cfg.dir("model");
    cfg.write_echo(&dir)?;
    bundle.save(dir.join(MODEL_FILE))?;
    fs::write(dir.join("sr_loss.csv"), loss_to_csv(&bundle.sr_loss))?;
    if bundle.bdn.is_some() {
        fs::write(dir.join("bdn_loss.csv"), loss_to_csv(&bundle.bdn_loss))?;
    }
    Ok(dir)
}

fn recon_dir(cfg: &ExperimentConfig, method: &str) -> PathBuf {
    cfg.dir("recon").join(method)
}

pub fn infer(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let frames = load_frames(cfg)?;
    let model = cfg.dir("model").join(MODEL_FILE);
    require(&model, "train")?;
    let bundle = ModelBundle::load(&model)?;
    let out = run_inference(&frames, &bundle, &cfg.stress_config())?;
    let dir = recon_dir(cfg, Method::Stress.name());
    cfg.write_echo(&dir)?;
    write_series(&dir, Method::Stress.name(), &frames, &cfg.protocol, &out)?;
    Ok(dir)
}

pub fn baseline(cfg: &ExperimentConfig, method: Method) -> Result<PathBuf> {
    let frames = load_frames(cfg)?;
    let out = match method {
        Method::Si => baseline_si(&frames, &cfg.protocol)?,
        Method::Ti => baseline_ti(&frames, &cfg.protocol)?,
        Method::Sti => baseline_sti(&frames, &cfg.protocol)?,
        Method::Smore => {
            let scfg = smore_config(&cfg.stress_config());
            let bundle = run_training(training_frames(cfg, &frames)?, &scfg)?;
            run_inference(&frames, &bundle, &scfg)?
        }
        Method::Stress => return Err(Error::Config("stress is not a baseline; use `stress train` and `stress infer`".into())),
    };
    let dir = recon_dir(cfg, method.name());
    cfg.write_echo(&dir)?;
    write_series(&dir, method.name(), &frames, &cfg.protocol, &out)?;
    Ok(dir)
}

fn available_methods(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let root = cfg.dir("recon");
    let mut names = Vec::new();
    if root.is_dir() {
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if entry.path().join("manifest.json").exists() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn evaluate(cfg: &ExperimentConfig, methods: &[String], predicted: Option<(&Path, &str)>) -> Result<PathBuf> {
    let truth_dir = cfg.dir("truth");
    require(&truth_dir.join("manifest.json"), "acquire")?;
    let (truth_manifest, truth) = read_series(&truth_dir)?;
    let methods = if methods.is_empty() { available_methods(cfg)? } else { methods.to_vec() };
    if methods.is_empty() {
        return Err(Error::State(format!("no reconstructions under {}", cfg.dir("recon").display())));
    }
    let n = truth.len();
    let first = match cfg.metrics.frames {
        FrameSelection::HeldOut => n.checked_sub(cfg.stress.held_out).filter(|_| cfg.stress.held_out > 0).ok_or_else(|| {
            Error::Config(format!("stress.held_out = {} does not select frames out of {n}", cfg.stress.held_out))
        })?,
        FrameSelection::All => 0,
    };
    let mut rows: Vec<MetricRow> = Vec::new();
    for method in &methods {
        let dir = recon_dir(cfg, method);
        require(&dir.join("manifest.json"), "infer` or `stress baseline")?;
        let (manifest, est) = read_series(&dir)?;
        let frames_match = manifest.frames.len() == n
            && manifest.frames.iter().zip(&truth_manifest.frames).all(|(a, b)| a.k == b.k);
        if !frames_match {
            return Err(Error::Shape(format!("{} does not cover the same frames as the ground truth", dir.display())));
        }
        let items: Vec<(usize, &Volume, &Volume)> =
            (first..n).map(|i| (truth_manifest.frames[i].k, &est[i], &truth[i])).collect();
        rows.extend(evaluate_frames(method, &items, cfg.metrics.ssim_mode, cfg.metrics.mask_threshold)?);
    }
    let dir = cfg.dir("metrics");
    cfg.write_echo(&dir)?;
    fs::write(dir.join(METRICS_FILE), metrics_to_csv(&rows))?;

    if let Some((path, label)) = predicted {
        require(path, "evaluate")?;
        let pred: Vec<KeypointRecord> =
            load_keypoints(path)?.into_iter().filter(|r| r.role == KeypointRole::Predicted).collect();
        let truth_kp = load_keypoints(&truth_dir.join(KEYPOINTS_FILE))?;
        let frames: std::collections::BTreeSet<usize> = pred.iter().map(|r| r.frame).collect();
        let truth_kp: Vec<KeypointRecord> = truth_kp.into_iter().filter(|r| frames.contains(&r.frame)).collect();
        let curve = pck(&pred, &truth_kp, &cfg.metrics.pck_thresholds_mm)?;
        let mut text = String::from("label,threshold_mm,pck_percent\n");
        for (s, p) in curve {
            text.push_str(&format!("{label},{s},{p}\n"));
        }
        fs::write(dir.join(PCK_FILE), text)?;
    }
    Ok(dir)
}

/// Parsed `label,threshold_mm,pck_percent` rows grouped by label.
pub fn read_pck(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("label,threshold_mm,pck_percent") {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::Format(format!("{} line {}: {line:?}", path.display(), i + 2));
        let mut parts = line.split(',');
        let (Some(label), Some(s), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let s: f64 = s.parse().map_err(|_| bad())?;
        let p: f64 = p.parse().map_err(|_| bad())?;
        curves.entry(label.to_string()).or_default().push((s, p));
    }
    Ok(curves)
}

/// Mean of each (method, metric) over frames.
pub fn summarize(rows: &[MetricRow]) -> Vec<(String, String, f64)> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.method.clone(), r.metric.clone())).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|((m, k), (s, n))| (m, k, s / n as f64)).collect()
}

pub fn report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let metrics_dir = cfg.dir("metrics");
    let metrics_path = metrics_dir.join(METRICS_FILE);
    require(&metrics_path, "evaluate")?;
    let rows = metrics_from_csv(&fs::read_to_string(&metrics_path)?)?;
    let dir = cfg.dir("report");
    cfg.write_echo(&dir)?;
    fs::write(dir.join(METRICS_FILE), metrics_to_csv(&rows))?;

    let summary = summarize(&rows);
    let mut text = String::from("method,metric,mean\n");
    for (m, k, v) in &summary {
        text.push_str(&format!("{m},{k},{}\n", stress::metrics::format_value(*v)));
    }
    fs::write(dir.join(SUMMARY_FILE), text)?;

    for metric in ["psnr", "ssim"] {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.metric == metric) {
            series.entry(r.method.clone()).or_default().push((r.frame as f64, r.value));
        }
        if series.is_empty() {
            continue;
        }
        let y_label = if metric == "psnr" { "PSNR (dB)" } else { "SSIM" };
        plot::line_chart(&dir.join(format!("{metric}.svg")), &metric.to_uppercase(), "frame", y_label, &series)?;
    }
    let pck_path = metrics_dir.join(PCK_FILE);
    if pck_path.exists() {
        let curves = read_pck(&pck_path)?;
        fs::copy(&pck_path, dir.join(PCK_FILE))?;
        plot::line_chart(&dir.join("pck.svg"), "PCK", "threshold (mm)", "PCK (%)", &curves)?;
    }
    Ok(dir)
}
