//! Interleaved multi-slice acquisition.
//!
//! A stack of `num_slices` slices is split into `n_interleave` subsets by
//! residue class; each subset acquired within one stack forms a frame. Frames
//! are numbered chronologically starting at 1.
//!
//! Timing: frame `k` starts at `(k - 1) * T_stack / N_I`, and its slices fire
//! in ascending z every `T_stack / num_slices` seconds.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Trajectory;
use crate::volume::io::{load_volume, save_volume};
use crate::volume::{add_rician_noise_abs, resample_plane, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanProtocol {
    pub n_interleave: usize,
    pub num_slices: usize,
    pub slice_spacing_mm: f64,
    pub in_plane_spacing_mm: f64,
    pub stack_duration_s: f64,
    pub num_stacks: usize,
}

impl Default for ScanProtocol {
    fn default() -> Self {
        Self {
            n_interleave: 2,
            num_slices: 64,
            slice_spacing_mm: 1.0,
            in_plane_spacing_mm: 1.0,
            stack_duration_s: 2.0,
            num_stacks: 8,
        }
    }
}

impl ScanProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_interleave == 0 {
            return Err(Error::Config("protocol.n_interleave must be >= 1".into()));
        }
        if self.num_slices < self.n_interleave {
            return Err(Error::Config(format!(
                "protocol.num_slices ({}) must be >= n_interleave ({})",
                self.num_slices, self.n_interleave
            )));
        }
        if self.num_stacks == 0 {
            return Err(Error::Config("protocol.num_stacks must be >= 1".into()));
        }
        for (name, v) in [
            ("slice_spacing_mm", self.slice_spacing_mm),
            ("in_plane_spacing_mm", self.in_plane_spacing_mm),
            ("stack_duration_s", self.stack_duration_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("protocol.{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.n_interleave * self.num_stacks
    }

    pub fn total_duration_s(&self) -> f64 {
        self.num_stacks as f64 * self.stack_duration_s
    }

    pub fn frame_duration_s(&self) -> f64 {
        self.stack_duration_s / self.n_interleave as f64
    }

    /// Start time of frame `k` (1-based).
    pub fn frame_start(&self, k: usize) -> f64 {
        (k - 1) as f64 * self.frame_duration_s()
    }

    /// Acquisition time of the `m`-th slice (0-based, ascending z) of frame `k`.
    pub fn slice_time(&self, k: usize, m: usize) -> f64 {
        self.frame_start(k) + m as f64 * self.stack_duration_s / self.num_slices as f64
    }

    /// Midpoint of frame `k`'s acquisition window.
    pub fn frame_mid_time(&self, k: usize) -> f64 {
        self.frame_start(k) + 0.5 * self.frame_duration_s()
    }
}

/// One interleaved subset of one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Chronological frame number `k`, 1-based.
    pub index: usize,
    /// Subset number `i` (1-based); the frame's residue class is `i - 1`.
    pub subset: usize,
    /// Stack number `j`, 1-based.
    pub stack_index: usize,
    pub z_indices: Vec<usize>,
    pub times: Vec<f64>,
    /// Acquired slices stacked along z at the frame's native grid.
    pub stack: Volume,
}

impl Frame {
    pub fn num_slices(&self) -> usize {
        self.z_indices.len()
    }

    pub fn slice(&self, m: usize) -> &[f32] {
        self.stack.slice_z(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.z_indices.len();
        if self.times.len() != n || self.stack.shape()[2] != n {
            return Err(Error::Shape(format!("frame {} slice/time/index counts disagree", self.index)));
        }
        if self.z_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format(format!("frame {} z indices not ascending", self.index)));
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format(format!("frame {} times not ascending", self.index)));
        }
        Ok(())
    }
}

/// Chronological frame number of subset `i` in stack `j` (both 1-based).
pub fn frame_index(subset_i: usize, stack_j: usize, n_interleave: usize) -> Result<usize> {
    if n_interleave == 0 || subset_i == 0 || subset_i > n_interleave || stack_j == 0 {
        return Err(Error::Config(format!(
            "invalid frame coordinates subset {subset_i}, stack {stack_j}, N_I {n_interleave}"
        )));
    }
    Ok(n_interleave * (stack_j - 1) + subset_i)
}

/// Inverse of [`frame_index`]: `(subset_i, stack_j)` of frame `k`.
pub fn frame_coordinates(k: usize, n_interleave: usize) -> (usize, usize) {
    ((k - 1) % n_interleave + 1, (k - 1) / n_interleave + 1)
}

/// Residue-class partition of `0..num_slices`, subset `i` holding `z ≡ i - 1`.
pub fn slice_subsets(num_slices: usize, n_interleave: usize) -> Vec<Vec<usize>> {
    (0..n_interleave).map(|r| (r..num_slices).step_by(n_interleave).collect()).collect()
}

/// Simulates the interleaved scan of `static_v` moving along `traj`.
///
/// `static_v` must hold `num_slices` z-planes. Each slice is sampled from the
/// object posed at that slice's own acquisition time.
pub fn acquire(static_v: &Volume, traj: &Trajectory, protocol: &ScanProtocol) -> Result<Vec<Frame>> {
    protocol.validate()?;
    let [nx, ny, nz] = static_v.shape();
    if nz != protocol.num_slices {
        return Err(Error::Shape(format!(
            "object has {nz} z-planes, protocol expects {}",
            protocol.num_slices
        )));
    }
    if traj.start() > 0.0 || traj.end() < protocol.total_duration_s() {
        return Err(Error::State(format!(
            "trajectory covers [{}, {}] s but the scan needs [0, {}] s",
            traj.start(),
            traj.end(),
            protocol.total_duration_s()
        )));
    }
    let subsets = slice_subsets(protocol.num_slices, protocol.n_interleave);
    let mut jobs = Vec::new();
    for k in 1..=protocol.num_frames() {
        let (i, _) = frame_coordinates(k, protocol.n_interleave);
        for (m, &z) in subsets[i - 1].iter().enumerate() {
            jobs.push((k, z, protocol.slice_time(k, m)));
        }
    }
    let planes: Vec<Vec<f32>> = jobs
        .par_iter()
        .map(|&(_, z, t)| resample_plane(static_v, &traj.displacement_at(t)?, z))
        .collect::<Result<_>>()?;

    let [sx, sy, sz] = static_v.spacing();
    let [ox, oy, oz] = static_v.origin();
    let mut frames = Vec::with_capacity(protocol.num_frames());
    let mut cursor = 0;
    for k in 1..=protocol.num_frames() {
        let (i, j) = frame_coordinates(k, protocol.n_interleave);
        let z_indices = subsets[i - 1].clone();
        let n = z_indices.len();
        let times = jobs[cursor..cursor + n].iter().map(|j| j.2).collect();
        let stack = Volume::from_slices(
            nx,
            ny,
            &planes[cursor..cursor + n],
            [sx, sy, sz * protocol.n_interleave as f32],
            [ox, oy, oz + z_indices[0] as f32 * sz],
        )?;
        cursor += n;
        frames.push(Frame { index: k, subset: i, stack_index: j, z_indices, times, stack });
    }
    Ok(frames)
}

/// Corrupts every frame with Rician noise of absolute standard deviation
/// `sigma`; frame `k` draws from stream `seed + k`.
pub fn add_frame_noise(frames: &[Frame], sigma: f32, seed: u64) -> Result<Vec<Frame>> {
    frames
        .iter()
        .map(|f| {
            let stack = add_rician_noise_abs(&f.stack, sigma, seed.wrapping_add(f.index as u64))?;
            Ok(Frame { stack, ..f.clone() })
        })
        .collect()
}

/// Re-acquires an interpolated, axis-swapped frame volume along its z axis
/// using the same interleave phase as frame `k`. The object is frozen, so
/// the reported times are nominal.
pub fn simulate_second_stage(frame_vol_t: &Volume, protocol: &ScanProtocol, k: usize) -> Result<Frame> {
    let [nx, ny, nz] = frame_vol_t.shape();
    let n_i = protocol.n_interleave;
    if n_i == 0 || nz < n_i {
        return Err(Error::Shape(format!("z extent {nz} is smaller than N_I = {n_i}")));
    }
    if k == 0 {
        return Err(Error::Config("frame numbers start at 1".into()));
    }
    let (i, j) = frame_coordinates(k, n_i);
    let z_indices = slice_subsets(nz, n_i).swap_remove(i - 1);
    let slices: Vec<Vec<f32>> = z_indices.iter().map(|&z| frame_vol_t.slice_z(z).to_vec()).collect();
    let [sx, sy, sz] = frame_vol_t.spacing();
    let [ox, oy, oz] = frame_vol_t.origin();
    let stack = Volume::from_slices(nx, ny, &slices, [sx, sy, sz * n_i as f32], [ox, oy, oz + z_indices[0] as f32 * sz])?;
    let start = protocol.frame_start(k);
    let step = protocol.stack_duration_s / nz as f64;
    let times = (0..z_indices.len()).map(|m| start + m as f64 * step).collect();
    Ok(Frame { index: k, subset: i, stack_index: j, z_indices, times, stack })
}

/// Reassembles the frames of stack `j` into a full slice grid.
pub fn reassemble_stack(frames: &[Frame], protocol: &ScanProtocol, stack_j: usize) -> Result<Volume> {
    let members: Vec<&Frame> = frames.iter().filter(|f| f.stack_index == stack_j).collect();
    if members.len() != protocol.n_interleave {
        return Err(Error::State(format!(
            "stack {stack_j} has {} frames, expected {}",
            members.len(),
            protocol.n_interleave
        )));
    }
    let [nx, ny, _] = members[0].stack.shape();
    let mut slices = vec![Vec::new(); protocol.num_slices];
    for f in &members {
        for (m, &z) in f.z_indices.iter().enumerate() {
            slices[z] = f.slice(m).to_vec();
        }
    }
    if slices.iter().any(|s| s.is_empty()) {
        return Err(Error::State(format!("stack {stack_j} does not cover every slice")));
    }
    let [sx, sy, _] = members[0].stack.spacing();
    let [ox, oy, oz] = members[0].stack.origin();
    let origin_z = oz - members[0].z_indices[0] as f32 * protocol.slice_spacing_mm as f32;
    Volume::from_slices(nx, ny, &slices, [sx, sy, protocol.slice_spacing_mm as f32], [ox, oy, origin_z])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub k: usize,
    pub subset: usize,
    pub stack: usize,
    pub z_indices: Vec<usize>,
    pub times: Vec<f64>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanManifest {
    pub protocol: ScanProtocol,
    /// Absolute Rician noise standard deviation applied to the frames.
    pub noise_sigma: f32,
    pub frames: Vec<FrameRecord>,
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.strvol")
}

/// Writes `manifest.json` plus one STRVOL1 file per frame.
pub fn write_scan(dir: impl AsRef<Path>, frames: &[Frame], protocol: &ScanProtocol, noise_sigma: f32) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(frames.len());
    for f in frames {
        let file = frame_file_name(f.index);
        save_volume(&f.stack, dir.join(&file))?;
        records.push(FrameRecord {
            k: f.index,
            subset: f.subset,
            stack: f.stack_index,
            z_indices: f.z_indices.clone(),
            times: f.times.clone(),
            file,
        });
    }
    let manifest = ScanManifest { protocol: protocol.clone(), noise_sigma, frames: records };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_scan(dir: impl AsRef<Path>) -> Result<(ScanManifest, Vec<Frame>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ScanManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    manifest.protocol.validate()?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for r in &manifest.frames {
        let stack = load_volume(dir.join(&r.file))?;
        let frame = Frame {
            index: r.k,
            subset: r.subset,
            stack_index: r.stack,
            z_indices: r.z_indices.clone(),
            times: r.times.clone(),
            stack,
        };
        frame.validate()?;
        frames.push(frame);
    }
    Ok((manifest, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{synthesize_trajectory, volume_at_time, KeypointSet, MotionStats, Vec3};

    #[test]
    fn frame_index_examples() {
        assert_eq!(frame_index(1, 1, 3).unwrap(), 1);
        assert_eq!(frame_index(2, 1, 3).unwrap(), 2);
        assert_eq!(frame_index(2, 5, 2).unwrap(), 10);
        assert!(frame_index(4, 1, 3).is_err());
        assert!(frame_index(0, 1, 3).is_err());
    }

    #[test]
    fn frame_index_is_chronological_bijection() {
        for n in 1..5 {
            let mut seen = Vec::new();
            for j in 1..6 {
                for i in 1..=n {
                    let k = frame_index(i, j, n).unwrap();
                    assert_eq!(frame_coordinates(k, n), (i, j));
                    seen.push(k);
                }
            }
            // acquisition order (stack-major, subset-minor) yields 1, 2, 3, ...
            assert_eq!(seen, (1..=5 * n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn subset_examples() {
        assert_eq!(slice_subsets(6, 2), vec![vec![0, 2, 4], vec![1, 3, 5]]);
        assert_eq!(slice_subsets(5, 1), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(slice_subsets(7, 3), vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
    }

    #[test]
    fn subsets_partition_the_stack() {
        for n in 1..20 {
            for ni in 1..=n {
                let mut all: Vec<usize> = slice_subsets(n, ni).concat();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    fn phantom(n: usize) -> Volume {
        let c = (n as f32 - 1.0) / 2.0;
        Volume::from_fn([n, n, n], [1.0; 3], |x, y, z| {
            let d2 = (x as f32 - c).powi(2) + 0.5 * (y as f32 - c).powi(2) + 2.0 * (z as f32 - c).powi(2);
            (1.0 - d2 / (c * c)).max(0.0) * (1.0 + 0.2 * (x as f32 * 0.9).sin())
        })
        .unwrap()
        .with_origin([-c; 3])
    }

    fn kp() -> KeypointSet {
        KeypointSet::new(Vec3::new(-3.0, 3.0, 1.0), Vec3::new(3.0, 3.0, 1.0), Vec3::new(0.0, -4.0, 0.0))
    }

    fn protocol(n_i: usize, n: usize, stacks: usize) -> ScanProtocol {
        ScanProtocol { n_interleave: n_i, num_slices: n, num_stacks: stacks, stack_duration_s: 2.0, ..Default::default() }
    }

    #[test]
    fn static_scan_reassembles_exactly() {
        let v = phantom(12);
        for n_i in [1, 2, 3, 4] {
            let p = protocol(n_i, 12, 2);
            let traj = Trajectory::stationary(kp(), p.total_duration_s()).unwrap();
            let frames = acquire(&v, &traj, &p).unwrap();
            assert_eq!(frames.len(), 2 * n_i);
            for j in 1..=2 {
                let stack = reassemble_stack(&frames, &p, j).unwrap();
                assert_eq!(stack.data(), v.data(), "N_I={n_i} stack {j}");
            }
        }
    }

    #[test]
    fn timing_is_strictly_increasing_and_short() {
        let p = protocol(3, 10, 3);
        let traj = Trajectory::stationary(kp(), p.total_duration_s()).unwrap();
        let v = phantom(10);
        let frames = acquire(&v, &traj, &p).unwrap();
        let flat: Vec<f64> = frames.iter().flat_map(|f| f.times.clone()).collect();
        assert!(flat.windows(2).all(|w| w[1] > w[0]));
        for f in &frames {
            let span = f.times.last().unwrap() - f.times[0];
            assert!(span < p.stack_duration_s / 3.0);
            f.validate().unwrap();
        }
    }

    #[test]
    fn moving_slices_match_direct_evaluation() {
        let v = phantom(10);
        let p = protocol(2, 10, 2);
        let traj = synthesize_trajectory(&kp(), 5.0, 0.1, &MotionStats::default(), 3).unwrap();
        let frames = acquire(&v, &traj, &p).unwrap();
        for f in &frames {
            for (m, (&z, &t)) in f.z_indices.iter().zip(&f.times).enumerate() {
                let snap = volume_at_time(&v, &traj, t).unwrap();
                let diff = f
                    .slice(m)
                    .iter()
                    .zip(snap.slice_z(z))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f32::max);
                assert!(diff < 1e-6);
            }
        }
    }

    #[test]
    fn short_trajectory_rejected() {
        let p = protocol(2, 8, 4);
        let traj = Trajectory::stationary(kp(), 3.0).unwrap();
        assert!(matches!(acquire(&phantom(8), &traj, &p), Err(Error::State(_))));
    }

    #[test]
    fn second_stage_phases() {
        let v = Volume::from_fn([2, 3, 8], [1.0; 3], |_, _, z| z as f32).unwrap();
        let p1 = protocol(1, 8, 1);
        assert_eq!(simulate_second_stage(&v, &p1, 3).unwrap().z_indices, (0..8).collect::<Vec<_>>());
        let p2 = protocol(2, 8, 1);
        let s1 = simulate_second_stage(&v, &p2, 1).unwrap();
        assert_eq!(s1.z_indices, vec![0, 2, 4, 6]);
        assert_eq!(s1.slice(1), v.slice_z(2));
        assert_eq!(simulate_second_stage(&v, &p2, 4).unwrap().z_indices, vec![1, 3, 5, 7]);
        let p9 = protocol(9, 9, 1);
        assert!(simulate_second_stage(&v, &p9, 1).is_err());
    }

    #[test]
    fn second_stage_on_z_constant_volume_interpolates_back() {
        let v = Volume::from_fn([3, 4, 9], [1.0; 3], |x, y, _| (x * 4 + y) as f32 * 0.1).unwrap();
        let p = protocol(3, 9, 1);
        for k in 1..=3 {
            let s = simulate_second_stage(&v, &p, k).unwrap();
            let back = crate::volume::interpolate_frame(&s, &protocol(3, 9, 1)).unwrap();
            assert_eq!(back.data(), v.data());
        }
    }

    #[test]
    fn scan_directory_roundtrip() {
        let v = phantom(8);
        let p = protocol(2, 8, 2);
        let traj = Trajectory::stationary(kp(), p.total_duration_s()).unwrap();
        let frames = acquire(&v, &traj, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scan(dir.path(), &frames, &p, 0.0).unwrap();
        let (manifest, back) = read_scan(dir.path()).unwrap();
        assert_eq!(manifest.protocol, p);
        assert_eq!(back, frames);
    }
}
