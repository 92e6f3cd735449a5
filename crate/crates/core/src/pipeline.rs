//! Training from a scan, inference into a high-resolution series, the
//! interpolation baselines, and a simulated benchmark.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{acquire, add_frame_noise, frame_file_name, simulate_second_stage, Frame, ScanProtocol};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricRow, SsimMode};
use crate::models::{train_bdn, train_sr, BDNConfig, BdnWeights, ModelBundle, SRConfig, SrWeights};
use crate::motion::{synthesize_trajectory, volume_at_time, KeypointSet, MotionStats, Trajectory};
use crate::nn::Tensor;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::sampling::{default_context, temporal_window, PairSet, PatchGrid};
use crate::volume::io::{load_volume, save_volume};
use crate::volume::{foreground_mask, interpolate_frame, interpolate_slices, transpose_xz, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StressConfig {
    pub protocol: ScanProtocol,
    /// Temporal context half-width `L`; `N_I / 2` rounded up when absent.
    pub context: Option<usize>,
    pub patch: PatchGrid,
    pub enable_bdn: bool,
    pub sr: SRConfig,
    pub bdn: BDNConfig,
    /// Seeds both networks; overrides `sr.seed` and `bdn.seed`.
    pub seed: u64,
    /// Planes per forward pass at inference.
    pub inference_batch: usize,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            protocol: ScanProtocol::default(),
            context: None,
            patch: PatchGrid::default(),
            enable_bdn: false,
            sr: SRConfig::default(),
            bdn: BDNConfig::default(),
            seed: 0,
            inference_batch: 2,
        }
    }
}

impl StressConfig {
    /// Desk-scale networks and 32-pixel patches.
    pub fn desk(protocol: ScanProtocol) -> Self {
        Self {
            protocol,
            patch: PatchGrid { patch_size: 32, ..PatchGrid::default() },
            sr: SRConfig::desk(),
            bdn: BDNConfig::desk(),
            ..Self::default()
        }
    }

    pub fn context(&self) -> usize {
        self.context.unwrap_or_else(|| default_context(self.protocol.n_interleave))
    }

    pub fn sr_config(&self) -> SRConfig {
        SRConfig { in_channels: 2 * self.context() + 1, seed: self.seed, ..self.sr.clone() }
    }

    pub fn bdn_config(&self) -> BDNConfig {
        BDNConfig { seed: self.seed.wrapping_add(1), ..self.bdn.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.patch.validate()?;
        if self.patch.patch_size < 8 {
            return Err(Error::Config(format!("patch.patch_size must be >= 8, got {}", self.patch.patch_size)));
        }
        if self.inference_batch == 0 {
            return Err(Error::Config("inference_batch must be >= 1".into()));
        }
        self.sr_config().validate()?;
        if self.enable_bdn {
            self.bdn_config().validate()?;
        }
        Ok(())
    }
}

fn check_sequence(frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::State("no frames given".into()));
    }
    for f in frames {
        f.validate()?;
    }
    if frames.windows(2).any(|w| w[1].index != w[0].index + 1) {
        return Err(Error::State("frames must be consecutive and in acquisition order".into()));
    }
    Ok(())
}

/// Interpolated second-stage volumes and axis-swapped frames for training.
pub fn prepare_training(frames: &[Frame], cfg: &StressConfig) -> Result<PairSet> {
    cfg.validate()?;
    check_sequence(frames)?;
    let l = cfg.context();
    if frames.len() < 2 * l + 1 {
        return Err(Error::State(format!("{} frames cannot fill a context window of {}", frames.len(), 2 * l + 1)));
    }
    let volumes: Vec<(Volume, Volume)> = frames
        .par_iter()
        .map(|f| {
            let f_t = transpose_xz(&interpolate_frame(f, &cfg.protocol)?);
            let second = simulate_second_stage(&f_t, &cfg.protocol, f.index)?;
            let [.., nz] = f_t.shape();
            let s = interpolate_slices(&second.stack, &second.z_indices, nz, f_t.spacing()[2])?;
            Ok((s, f_t))
        })
        .collect::<Result<_>>()?;
    let (lr, hr): (Vec<Volume>, Vec<Volume>) = volumes.into_iter().unzip();
    let targets: Vec<usize> = (1..=frames.len()).collect();
    let set = PairSet::new(lr, hr, &targets, l, &cfg.patch)?;
    if set.is_empty() {
        return Err(Error::State("no training patch passed the foreground filter".into()));
    }
    Ok(set)
}

/// Trains the optional denoiser, then the super-resolution network.
pub fn run_training(frames: &[Frame], cfg: &StressConfig) -> Result<ModelBundle> {
    let data = prepare_training(frames, cfg)?;
    let (bdn, bdn_loss) = if cfg.enable_bdn {
        let (w, h) = train_bdn(&data, &cfg.bdn_config())?;
        (Some(w), h)
    } else {
        (None, Vec::new())
    };
    let (sr, sr_loss) = train_sr(&data, &cfg.sr_config(), bdn.as_ref())?;
    Ok(ModelBundle { sr, bdn, sr_loss, bdn_loss })
}

/// Denoises every acquired slice of a frame.
pub fn denoise_frame(frame: &Frame, bdn: &BdnWeights) -> Result<Frame> {
    let [nx, ny, nz] = frame.stack.shape();
    let input = Tensor::from_vec(1, nz, ny, nx, frame.stack.data().to_vec())?;
    let out = bdn.forward(&input)?;
    Ok(Frame { stack: frame.stack.with_data(out.data)?, ..frame.clone() })
}

fn apply_sr(weights: &SrWeights, inputs: &[&Volume], batch: usize) -> Result<Volume> {
    let [nx, ny, nz] = inputs[0].shape();
    let c = inputs.len();
    let mut out = inputs[c / 2].clone();
    let mut x0 = 0;
    while x0 < nx {
        let xs: Vec<usize> = (x0..(x0 + batch).min(nx)).collect();
        let mut data = Vec::with_capacity(c * xs.len() * ny * nz);
        for v in inputs {
            for &x in &xs {
                data.extend(v.plane_x(x));
            }
        }
        let y = weights.forward(&Tensor::from_vec(c, xs.len(), ny, nz, data)?)?;
        for (i, &x) in xs.iter().enumerate() {
            out.set_plane_x(x, y.image(0, i));
        }
        x0 += batch;
    }
    Ok(out)
}

/// One super-resolved volume per frame on the full slice grid.
pub fn run_inference(frames: &[Frame], bundle: &ModelBundle, cfg: &StressConfig) -> Result<Vec<Volume>> {
    cfg.validate()?;
    check_sequence(frames)?;
    let l = cfg.context();
    if bundle.sr.config.in_channels != 2 * l + 1 {
        return Err(Error::State(format!(
            "model expects {} input frames but the context window holds {}",
            bundle.sr.config.in_channels,
            2 * l + 1
        )));
    }
    let interpolated: Vec<Volume> = frames
        .par_iter()
        .map(|f| match (&bundle.bdn, cfg.enable_bdn) {
            (Some(h), true) => interpolate_frame(&denoise_frame(f, h)?, &cfg.protocol),
            (None, true) => Err(Error::State("denoising is enabled but the model has no denoiser".into())),
            _ => interpolate_frame(f, &cfg.protocol),
        })
        .collect::<Result<_>>()?;
    let n = frames.len();
    (1..=n)
        .into_par_iter()
        .map(|k| {
            let window: Vec<&Volume> = temporal_window(k, l, n).iter().map(|&i| &interpolated[i - 1]).collect();
            apply_sr(&bundle.sr, &window, cfg.inference_batch)
        })
        .collect()
}

/// Spatial interpolation: cubic B-spline along z per frame.
pub fn baseline_si(frames: &[Frame], protocol: &ScanProtocol) -> Result<Vec<Volume>> {
    frames.par_iter().map(|f| interpolate_frame(f, protocol)).collect()
}

/// Temporal interpolation: each missing slice is interpolated linearly in
/// time between the nearest earlier and later acquisitions of the same slice
/// location, evaluated at the frame's midpoint time. At the ends of the
/// series the nearest acquisition in time is copied.
pub fn baseline_ti(frames: &[Frame], protocol: &ScanProtocol) -> Result<Vec<Volume>> {
    check_sequence(frames)?;
    let nz = protocol.num_slices;
    // per slice location: (frame position, acquisition time, slice number)
    let mut acquisitions: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); nz];
    for (pos, f) in frames.iter().enumerate() {
        for (m, &z) in f.z_indices.iter().enumerate() {
            if z >= nz {
                return Err(Error::Shape(format!("slice {z} outside a {nz}-slice protocol")));
            }
            acquisitions[z].push((pos, f.times[m], m));
        }
    }
    if let Some(z) = acquisitions.iter().position(|a| a.is_empty()) {
        return Err(Error::State(format!("slice location {z} is never acquired")));
    }
    let [nx, ny, _] = frames[0].stack.shape();
    frames
        .par_iter()
        .enumerate()
        .map(|(pos, f)| {
            let t = protocol.frame_mid_time(f.index);
            let slices: Vec<Vec<f32>> = (0..nz)
                .map(|z| {
                    let acq = &acquisitions[z];
                    if let Some(&(_, _, m)) = acq.iter().find(|a| a.0 == pos) {
                        return f.slice(m).to_vec();
                    }
                    let before = acq.iter().rev().find(|a| a.0 < pos);
                    let after = acq.iter().find(|a| a.0 > pos);
                    match (before, after) {
                        (Some(&(p0, t0, m0)), Some(&(p1, t1, m1))) => {
                            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                            let (a, b) = (frames[p0].slice(m0), frames[p1].slice(m1));
                            a.iter().zip(b).map(|(&u, &v)| ((1.0 - w) * u as f64 + w * v as f64) as f32).collect()
                        }
                        (Some(&(p, _, m)), None) | (None, Some(&(p, _, m))) => frames[p].slice(m).to_vec(),
                        (None, None) => unreachable!(),
                    }
                })
                .collect();
            let [sx, sy, _] = f.stack.spacing();
            let [ox, oy, oz] = f.stack.origin();
            let origin_z = oz - f.z_indices[0] as f32 * protocol.slice_spacing_mm as f32;
            Volume::from_slices(nx, ny, &slices, [sx, sy, protocol.slice_spacing_mm as f32], [ox, oy, origin_z])
        })
        .collect()
}

/// Spatio-temporal interpolation: the mean of SI and TI at missing slices.
pub fn baseline_sti(frames: &[Frame], protocol: &ScanProtocol) -> Result<Vec<Volume>> {
    let si = baseline_si(frames, protocol)?;
    let ti = baseline_ti(frames, protocol)?;
    frames
        .iter()
        .zip(si.iter().zip(&ti))
        .map(|(f, (s, t))| {
            let plane = s.shape()[0] * s.shape()[1];
            let mut data: Vec<f32> = s.data().iter().zip(t.data()).map(|(&a, &b)| ((a as f64 + b as f64) / 2.0) as f32).collect();
            for &z in &f.z_indices {
                data[z * plane..(z + 1) * plane].copy_from_slice(t.slice_z(z));
            }
            s.with_data(data)
        })
        .collect()
}

/// Single-frame variant: the same machinery with no temporal context.
pub fn smore_config(cfg: &StressConfig) -> StressConfig {
    StressConfig { context: Some(0), ..cfg.clone() }
}

pub fn baseline_smore(frames: &[Frame], cfg: &StressConfig) -> Result<Vec<Volume>> {
    let cfg = smore_config(cfg);
    let bundle = run_training(frames, &cfg)?;
    run_inference(frames, &bundle, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Si,
    Ti,
    Sti,
    Smore,
    Stress,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Si => "si",
            Method::Ti => "ti",
            Method::Sti => "sti",
            Method::Smore => "smore",
            Method::Stress => "stress",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" => Ok(Method::Si),
            "ti" => Ok(Method::Ti),
            "sti" => Ok(Method::Sti),
            "smore" => Ok(Method::Smore),
            "stress" => Ok(Method::Stress),
            other => Err(Error::Config(format!("unknown method {other:?} (si, ti, sti, smore, stress)"))),
        }
    }
}

/// Masked PSNR and SSIM rows for each `(frame number, estimate, truth)`.
pub fn evaluate_frames(
    method: &str,
    items: &[(usize, &Volume, &Volume)],
    mode: SsimMode,
    mask_threshold: f32,
) -> Result<Vec<MetricRow>> {
    let rows: Vec<Vec<MetricRow>> = items
        .par_iter()
        .map(|&(k, est, truth)| {
            let mask = foreground_mask(truth, mask_threshold)?;
            let p = psnr(est, truth, &mask)?;
            let s = ssim(est, truth, &mask, mode)?;
            Ok(vec![
                MetricRow { frame: k, method: method.into(), metric: "psnr".into(), value: p },
                MetricRow { frame: k, method: method.into(), metric: "ssim".into(), value: s },
            ])
        })
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

/// Mean of one metric for one method.
pub fn mean_metric(rows: &[MetricRow], method: &str, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| r.method == method && r.metric == metric).map(|r| r.value).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesRecord {
    pub k: usize,
    pub time_s: f64,
    pub file: String,
}

/// Manifest of a reconstructed high-resolution series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub method: String,
    pub frames: Vec<SeriesRecord>,
}

/// Writes `manifest.json` plus one STRVOL1 volume per frame.
pub fn write_series(dir: impl AsRef<Path>, method: &str, frames: &[Frame], protocol: &ScanProtocol, volumes: &[Volume]) -> Result<()> {
    if frames.len() != volumes.len() {
        return Err(Error::Shape(format!("{} volumes for {} frames", volumes.len(), frames.len())));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(frames.len());
    for (f, v) in frames.iter().zip(volumes) {
        let file = frame_file_name(f.index);
        save_volume(v, dir.join(&file))?;
        records.push(SeriesRecord { k: f.index, time_s: protocol.frame_mid_time(f.index), file });
    }
    let manifest = SeriesManifest { method: method.into(), frames: records };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_series(dir: impl AsRef<Path>) -> Result<(SeriesManifest, Vec<Volume>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: SeriesManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let volumes = manifest.frames.iter().map(|r| load_volume(dir.join(&r.file))).collect::<Result<_>>()?;
    Ok((manifest, volumes))
}

/// A simulated dynamic scan of a moving phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub phantom: PhantomSpec,
    pub motion: MotionStats,
    pub protocol: ScanProtocol,
    /// Rician sigma as a fraction of the phantom maximum.
    pub noise_fraction: f32,
    /// Trailing frames excluded from training.
    pub held_out: usize,
    pub trajectory_dt_s: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            motion: MotionStats::default(),
            protocol: ScanProtocol::default(),
            noise_fraction: 0.0,
            held_out: 5,
            trajectory_dt_s: 0.05,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    /// 64³ moving phantom, 16 frames of 0.5 s stacks.
    pub fn desk(n_interleave: usize, noise_fraction: f32, seed: u64) -> Self {
        let protocol = ScanProtocol {
            n_interleave,
            num_slices: 64,
            stack_duration_s: 0.5,
            num_stacks: (16 / n_interleave.max(1)).max(1),
            ..ScanProtocol::default()
        };
        Self { protocol, noise_fraction, seed, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub object: Volume,
    pub keypoints: KeypointSet,
    pub trajectory: Trajectory,
    pub frames: Vec<Frame>,
    /// The moving object at each frame's midpoint time.
    pub truth: Vec<Volume>,
    pub noise_sigma: f32,
}

impl Scenario {
    pub fn training_frames(&self, held_out: usize) -> &[Frame] {
        &self.frames[..self.frames.len().saturating_sub(held_out)]
    }

    pub fn held_out_positions(&self, held_out: usize) -> std::ops::Range<usize> {
        self.frames.len().saturating_sub(held_out)..self.frames.len()
    }
}

pub fn simulate_scenario(spec: &BenchmarkSpec) -> Result<Scenario> {
    spec.protocol.validate()?;
    let phantom = PhantomSpec { seed: spec.seed, ..spec.phantom.clone() };
    if phantom.shape[2] != spec.protocol.num_slices {
        return Err(Error::Config(format!(
            "phantom depth {} differs from protocol.num_slices {}",
            phantom.shape[2], spec.protocol.num_slices
        )));
    }
    if spec.held_out >= spec.protocol.num_frames() {
        return Err(Error::Config("held_out must leave at least one training frame".into()));
    }
    let (object, keypoints) = generate_phantom(&phantom)?;
    let duration = spec.protocol.total_duration_s() + spec.trajectory_dt_s;
    let trajectory = synthesize_trajectory(&keypoints, duration, spec.trajectory_dt_s, &spec.motion, spec.seed.wrapping_add(1))?;
    let clean = acquire(&object, &trajectory, &spec.protocol)?;
    let noise_sigma = spec.noise_fraction * object.max();
    let frames = add_frame_noise(&clean, noise_sigma, spec.seed.wrapping_add(2))?;
    let truth = frames
        .par_iter()
        .map(|f| volume_at_time(&object, &trajectory, spec.protocol.frame_mid_time(f.index)))
        .collect::<Result<_>>()?;
    Ok(Scenario { object, keypoints, trajectory, frames, truth, noise_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Vec3;
    use crate::volume::DEFAULT_MASK_THRESHOLD;

    fn small_spec(n_i: usize, stats: MotionStats) -> BenchmarkSpec {
        BenchmarkSpec {
            phantom: PhantomSpec {
                shape: [24, 24, 24],
                eye_left_mm: [-3.0, 5.0, 2.0],
                eye_right_mm: [3.0, 5.0, 2.0],
                shoulder_mid_mm: [0.0, -3.0, -8.0],
                ..PhantomSpec::default()
            },
            motion: stats,
            protocol: ScanProtocol { n_interleave: n_i, num_slices: 24, num_stacks: 3, ..ScanProtocol::default() },
            held_out: 2,
            ..BenchmarkSpec::default()
        }
    }

    fn z_constant_frames(n_i: usize) -> (Vec<Frame>, ScanProtocol, Volume) {
        let protocol = ScanProtocol { n_interleave: n_i, num_slices: 16, num_stacks: 3, ..ScanProtocol::default() };
        let object = Volume::from_fn([12, 10, 16], [1.0; 3], |x, y, _| 0.1 + (x * 10 + y) as f32 / 200.0).unwrap();
        let kp = KeypointSet::new(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0));
        let traj = Trajectory::stationary(kp, protocol.total_duration_s()).unwrap();
        (acquire(&object, &traj, &protocol).unwrap(), protocol, object)
    }

    #[test]
    fn si_and_ti_exact_on_static_z_constant_object() {
        for n_i in [1, 2, 4] {
            let (frames, protocol, object) = z_constant_frames(n_i);
            for est in [baseline_si(&frames, &protocol).unwrap(), baseline_ti(&frames, &protocol).unwrap()] {
                assert_eq!(est.len(), frames.len());
                for v in est {
                    assert_eq!(v.data(), object.data());
                }
            }
        }
    }

    #[test]
    fn ti_and_sti_match_per_voxel_oracle() {
        let spec = small_spec(2, MotionStats::default());
        let sc = simulate_scenario(&spec).unwrap();
        let p = &spec.protocol;
        let ti = baseline_ti(&sc.frames, p).unwrap();
        let si = baseline_si(&sc.frames, p).unwrap();
        let sti = baseline_sti(&sc.frames, p).unwrap();
        let [nx, ny, nz] = sc.object.shape();
        // oracle: scan the whole series for each voxel
        for (pos, f) in sc.frames.iter().enumerate() {
            let t = p.frame_mid_time(f.index);
            for z in 0..nz {
                let acquired = f.z_indices.contains(&z);
                let mut samples: Vec<(usize, f64, usize)> = Vec::new();
                for (q, g) in sc.frames.iter().enumerate() {
                    if let Some(m) = g.z_indices.iter().position(|&zz| zz == z) {
                        samples.push((q, g.times[m], m));
                    }
                }
                for y in 0..ny {
                    for x in 0..nx {
                        let val = |q: usize, m: usize| sc.frames[q].stack.get(x, y, m) as f64;
                        let expected = if acquired {
                            let m = f.z_indices.iter().position(|&zz| zz == z).unwrap();
                            val(pos, m)
                        } else {
                            let prev = samples.iter().filter(|s| s.0 < pos).last();
                            let next = samples.iter().find(|s| s.0 > pos);
                            match (prev, next) {
                                (Some(a), Some(b)) => {
                                    let w = (t - a.1) / (b.1 - a.1);
                                    val(a.0, a.2) + w * (val(b.0, b.2) - val(a.0, a.2))
                                }
                                (Some(a), None) | (None, Some(a)) => val(a.0, a.2),
                                _ => unreachable!(),
                            }
                        };
                        let got = ti[pos].get(x, y, z) as f64;
                        assert!((got - expected).abs() < 1e-6, "TI frame {pos} voxel ({x},{y},{z})");
                        let s = sti[pos].get(x, y, z) as f64;
                        let want = if acquired { expected } else { (expected + si[pos].get(x, y, z) as f64) / 2.0 };
                        assert!((s - want).abs() < 1e-6, "STI frame {pos} voxel ({x},{y},{z})");
                    }
                }
            }
        }
    }

    #[test]
    fn identity_model_reproduces_interpolated_frames() {
        let spec = small_spec(2, MotionStats::default());
        let sc = simulate_scenario(&spec).unwrap();
        let cfg = StressConfig { patch: PatchGrid::new(16, 8), ..StressConfig::desk(spec.protocol.clone()) };
        let bundle = ModelBundle { sr: SrWeights::init(&cfg.sr_config()).unwrap(), bdn: None, sr_loss: vec![], bdn_loss: vec![] };
        let out = run_inference(&sc.frames, &bundle, &cfg).unwrap();
        let si = baseline_si(&sc.frames, &spec.protocol).unwrap();
        assert_eq!(out.len(), sc.frames.len());
        for (a, b) in out.iter().zip(&si) {
            assert_eq!(a.shape(), [24, 24, 24]);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-5));
        }
        let wrong = StressConfig { context: Some(2), ..cfg.clone() };
        assert!(matches!(run_inference(&sc.frames, &bundle, &wrong), Err(Error::State(_))));
        let needs_bdn = StressConfig { enable_bdn: true, ..cfg };
        assert!(run_inference(&sc.frames, &bundle, &needs_bdn).is_err());
    }

    #[test]
    fn training_pairs_on_static_z_constant_scan_are_exact() {
        // constant along both interleaved axes (z, and x after the swap)
        let protocol = ScanProtocol { n_interleave: 2, num_slices: 16, num_stacks: 3, ..ScanProtocol::default() };
        let object = Volume::from_fn([16, 10, 16], [1.0; 3], |_, y, _| 0.1 + y as f32 / 20.0).unwrap();
        let kp = KeypointSet::new(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0));
        let traj = Trajectory::stationary(kp, protocol.total_duration_s()).unwrap();
        let frames = acquire(&object, &traj, &protocol).unwrap();
        let cfg = StressConfig { patch: PatchGrid::new(8, 4), ..StressConfig::desk(protocol) };
        let set = prepare_training(&frames, &cfg).unwrap();
        assert!(!set.is_empty());
        for i in 0..set.len() {
            let p = set.get(i);
            assert_eq!(p.channels, 3);
            assert_eq!(p.center(), &p.hr[..]);
        }
    }

    #[test]
    fn too_few_frames_rejected() {
        let (frames, protocol, _) = z_constant_frames(4);
        let cfg = StressConfig { patch: PatchGrid::new(8, 4), ..StressConfig::desk(protocol) };
        assert!(matches!(run_training(&frames[..3], &cfg), Err(Error::State(_))));
    }

    #[test]
    fn short_training_without_denoiser_is_deterministic() {
        let spec = small_spec(2, MotionStats::default());
        let sc = simulate_scenario(&spec).unwrap();
        let mut cfg = StressConfig { patch: PatchGrid::new(16, 8), ..StressConfig::desk(spec.protocol.clone()) };
        cfg.sr = SRConfig { num_blocks: 1, num_channels: 8, iterations: 5, batch_size: 2, ..cfg.sr };
        let a = run_training(sc.training_frames(2), &cfg).unwrap();
        let b = run_training(sc.training_frames(2), &cfg).unwrap();
        assert!(a.bdn.is_none());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(a.sr_loss.len(), 5);

        cfg.enable_bdn = true;
        cfg.bdn = BDNConfig { num_channels: 4, num_layers: 2, iterations: 3, batch_size: 2, ..cfg.bdn };
        let c = run_training(sc.training_frames(2), &cfg).unwrap();
        assert!(c.bdn.is_some());
        assert_eq!(c.bdn_loss.len(), 3);
        let out = run_inference(&sc.frames, &c, &cfg).unwrap();
        assert_eq!(out.len(), sc.frames.len());
    }

    #[test]
    fn scenario_truth_and_evaluation() {
        let spec = small_spec(2, MotionStats::stationary());
        let sc = simulate_scenario(&spec).unwrap();
        assert_eq!(sc.truth.len(), spec.protocol.num_frames());
        assert_eq!(sc.truth[0], sc.object);
        let items: Vec<(usize, &Volume, &Volume)> = sc.truth.iter().enumerate().map(|(i, t)| (i + 1, t, t)).collect();
        let rows = evaluate_frames("si", &items, SsimMode::Volumetric, DEFAULT_MASK_THRESHOLD).unwrap();
        assert_eq!(rows.len(), 2 * items.len());
        assert_eq!(mean_metric(&rows, "si", "psnr"), Some(f64::INFINITY));
        assert_eq!(mean_metric(&rows, "si", "ssim"), Some(1.0));
        assert_eq!(mean_metric(&rows, "ti", "ssim"), None);
    }

    #[test]
    fn series_roundtrip() {
        let (frames, protocol, _) = z_constant_frames(2);
        let vols = baseline_si(&frames, &protocol).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_series(dir.path(), "si", &frames, &protocol, &vols).unwrap();
        let (manifest, back) = read_series(dir.path()).unwrap();
        assert_eq!(manifest.method, "si");
        assert_eq!(manifest.frames.len(), frames.len());
        assert_eq!(manifest.frames[2].time_s, protocol.frame_mid_time(3));
        assert_eq!(back, vols);
        assert!(matches!(write_series(dir.path(), "si", &frames[1..], &protocol, &vols), Err(Error::Shape(_))));
    }
}
