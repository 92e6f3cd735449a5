//! Keypoint-based rigid head pose and synthetic motion trajectories.
//!
//! A pose frame is built from three landmarks: the two eyes and the midpoint
//! of the shoulders. `X` runs from the left to the right eye, `Y` is the unit
//! normal of the landmark plane, `Z = X x Y` and the origin is the landmark
//! centroid. The sign of `Y` is chosen so that `Z` points from the shoulders
//! towards the eyes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_affine, Volume};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSet {
    pub eye_left: Vec3,
    pub eye_right: Vec3,
    pub shoulder_mid: Vec3,
}

impl KeypointSet {
    pub fn new(eye_left: Vec3, eye_right: Vec3, shoulder_mid: Vec3) -> Self {
        Self { eye_left, eye_right, shoulder_mid }
    }

    pub fn points(&self) -> [Vec3; 3] {
        [self.eye_left, self.eye_right, self.shoulder_mid]
    }

    pub fn map(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self { eye_left: f(&self.eye_left), eye_right: f(&self.eye_right), shoulder_mid: f(&self.shoulder_mid) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Columns are the unit axes X, Y, Z.
    pub rotation: Matrix3<f64>,
    pub origin: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !(err < 1e-6) || !((det - 1.0).abs() < 1e-6) {
        return Err(Error::State(format!(
            "matrix is not a proper rotation (orthogonality error {err:.3e}, det {det:.6})"
        )));
    }
    Ok(())
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

pub fn pose_from_keypoints(kp: &KeypointSet) -> Result<Pose> {
    let across = kp.eye_right - kp.eye_left;
    let down = kp.shoulder_mid - kp.eye_left;
    let normal = across.cross(&down);
    let scale = across.norm() * down.norm();
    if !(normal.norm() > 1e-9 * scale) || scale == 0.0 {
        return Err(Error::DegenerateKeypoints("landmarks are collinear or coincident".into()));
    }
    let x = across.normalize();
    let mut y = normal.normalize();
    let mut z = x.cross(&y);
    let eye_mid = (kp.eye_left + kp.eye_right) / 2.0;
    if z.dot(&(eye_mid - kp.shoulder_mid)) < 0.0 {
        y = -y;
        z = -z;
    }
    let origin = (kp.eye_left + kp.eye_right + kp.shoulder_mid) / 3.0;
    Ok(Pose { rotation: Matrix3::from_columns(&[x, y, z]), origin })
}

/// The rigid map taking frame `a` onto frame `b`.
pub fn relative_transform(a: &Pose, b: &Pose) -> RigidTransform {
    let rotation = b.rotation * a.rotation.transpose();
    let translation = b.origin - rotation * a.origin;
    RigidTransform { rotation, translation }
}

/// Speed statistics of a motion trajectory. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionStats {
    pub rot_mean_deg_s: f64,
    pub rot_std_deg_s: f64,
    pub rot_max_deg_s: f64,
    pub trans_mean_mm_s: f64,
    pub trans_std_mm_s: f64,
    pub trans_max_mm_s: f64,
    /// Cutoff of the first-order low-pass applied to the velocity noise.
    pub cutoff_hz: f64,
}

impl Default for MotionStats {
    /// Fetal head motion statistics measured on real landmark series.
    fn default() -> Self {
        Self {
            rot_mean_deg_s: 3.10,
            rot_std_deg_s: 3.75,
            rot_max_deg_s: 59.7,
            trans_mean_mm_s: 2.40,
            trans_std_mm_s: 1.80,
            trans_max_mm_s: 21.36,
            cutoff_hz: 0.1,
        }
    }
}

impl MotionStats {
    pub fn stationary() -> Self {
        Self {
            rot_mean_deg_s: 0.0,
            rot_std_deg_s: 0.0,
            rot_max_deg_s: 0.0,
            trans_mean_mm_s: 0.0,
            trans_std_mm_s: 0.0,
            trans_max_mm_s: 0.0,
            cutoff_hz: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rot_mean_deg_s", self.rot_mean_deg_s),
            ("rot_std_deg_s", self.rot_std_deg_s),
            ("rot_max_deg_s", self.rot_max_deg_s),
            ("trans_mean_mm_s", self.trans_mean_mm_s),
            ("trans_std_mm_s", self.trans_std_mm_s),
            ("trans_max_mm_s", self.trans_max_mm_s),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("motion.{name} must be finite and non-negative")));
            }
        }
        if !(self.cutoff_hz > 0.0) || !self.cutoff_hz.is_finite() {
            return Err(Error::Config("motion.cutoff_hz must be positive".into()));
        }
        if self.rot_mean_deg_s > 0.0 && self.rot_mean_deg_s >= self.rot_max_deg_s {
            return Err(Error::Config("motion.rot_mean_deg_s must be below rot_max_deg_s".into()));
        }
        if self.trans_mean_mm_s > 0.0 && self.trans_mean_mm_s >= self.trans_max_mm_s {
            return Err(Error::Config("motion.trans_mean_mm_s must be below trans_max_mm_s".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    keypoints: Vec<KeypointSet>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, keypoints: Vec<KeypointSet>) -> Result<Self> {
        if times.len() < 2 || times.len() != keypoints.len() {
            return Err(Error::State(format!(
                "trajectory needs >= 2 samples with matching keypoints ({} times, {} keypoint sets)",
                times.len(),
                keypoints.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::State("trajectory times must be finite and strictly increasing".into()));
        }
        let poses = keypoints.iter().map(pose_from_keypoints).collect::<Result<Vec<_>>>()?;
        Ok(Self { times, keypoints, poses })
    }

    /// A motionless trajectory over `[0, duration_s]`.
    pub fn stationary(kp: KeypointSet, duration_s: f64) -> Result<Self> {
        Self::new(vec![0.0, duration_s], vec![kp, kp])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn keypoints(&self) -> &[KeypointSet] {
        &self.keypoints
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Pose at `t`: linear in origin, spherical-linear in rotation.
    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::State(format!(
                "time {t} outside trajectory range [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let i = match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => return Ok(self.poses[i]),
            Err(i) => i - 1,
        };
        let f = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        let (a, b) = (&self.poses[i], &self.poses[i + 1]);
        let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(a.rotation));
        let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(b.rotation));
        let q = qa.slerp(&qb, f);
        Ok(Pose { rotation: *q.to_rotation_matrix().matrix(), origin: a.origin.lerp(&b.origin, f) })
    }

    /// Rigid displacement from the initial pose to the pose at `t`.
    pub fn displacement_at(&self, t: f64) -> Result<RigidTransform> {
        Ok(relative_transform(&self.poses[0], &self.pose_at(t)?))
    }

    /// Per-interval rotation (deg/s) and translation (mm/s) speeds.
    pub fn speeds(&self) -> Vec<(f64, f64)> {
        self.poses
            .windows(2)
            .zip(self.times.windows(2))
            .map(|(p, t)| {
                let dt = t[1] - t[0];
                let rel = relative_transform(&p[0], &p[1]);
                (rel.angle().to_degrees() / dt, (p[1].origin - p[0].origin).norm() / dt)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,elx,ely,elz,erx,ery,erz,smx,smy,smz\n");
        for (t, kp) in self.times.iter().zip(&self.keypoints) {
            write!(s, "{t}").unwrap();
            for p in kp.points() {
                write!(s, ",{},{},{}", p.x, p.y, p.z).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty trajectory CSV".into()))?;
        if header.trim() != "t_s,elx,ely,elz,erx,ery,erz,smx,smy,smz" {
            return Err(Error::Format(format!("unexpected trajectory header `{header}`")));
        }
        let mut times = Vec::new();
        let mut kps = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("trajectory row {}: {e}", n + 2)))?;
            if vals.len() != 10 {
                return Err(Error::Format(format!("trajectory row {} has {} fields", n + 2, vals.len())));
            }
            times.push(vals[0]);
            let p = |i: usize| Vec3::new(vals[i], vals[i + 1], vals[i + 2]);
            kps.push(KeypointSet::new(p(1), p(4), p(7)));
        }
        Self::new(times, kps)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// First-order low-pass filtered Gaussian vector process with unit
/// per-component stationary variance.
fn filtered_noise(n: usize, dt: f64, cutoff_hz: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let alpha = (-2.0 * std::f64::consts::PI * cutoff_hz * dt).exp();
    let gain = (1.0 - alpha * alpha).sqrt();
    let mut draw = || {
        Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
    };
    let mut v = draw();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(v);
        v = v * alpha + draw() * gain;
    }
    out
}

/// Scales `raw` so that the mean of `min(s * |v|, max)` equals `target`.
fn rescale_speeds(raw: &mut [Vec3], target: f64, max: f64) {
    if target == 0.0 || raw.is_empty() {
        raw.iter_mut().for_each(|v| *v = Vec3::zeros());
        return;
    }
    let norms: Vec<f64> = raw.iter().map(|v| v.norm()).collect();
    let cap = max * (1.0 - 1e-9);
    let mean_at = |s: f64| norms.iter().map(|&n| (s * n).min(cap)).sum::<f64>() / norms.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_at(hi) < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    for (v, &n) in raw.iter_mut().zip(&norms) {
        let speed = s * n;
        if speed > cap {
            *v *= cap / n;
        } else {
            *v *= s;
        }
    }
}

/// Synthetic rigid head motion starting from `initial` landmarks.
///
/// Angular and linear velocities are low-pass filtered Gaussian processes,
/// rescaled so that their mean speeds match `stats` and clipped at the
/// configured maxima. Rotation happens about the landmark centroid.
pub fn synthesize_trajectory(
    initial: &KeypointSet,
    duration_s: f64,
    dt_s: f64,
    stats: &MotionStats,
    seed: u64,
) -> Result<Trajectory> {
    if !(dt_s > 0.0) || !(duration_s > dt_s) || !duration_s.is_finite() {
        return Err(Error::Config(format!(
            "trajectory needs duration > dt > 0 (duration {duration_s}, dt {dt_s})"
        )));
    }
    stats.validate()?;
    let pose0 = pose_from_keypoints(initial)?;
    let steps = (duration_s / dt_s).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = filtered_noise(steps, dt_s, stats.cutoff_hz, &mut rng);
    let mut vel = filtered_noise(steps, dt_s, stats.cutoff_hz, &mut rng);
    rescale_speeds(&mut omega, stats.rot_mean_deg_s.to_radians(), stats.rot_max_deg_s.to_radians());
    rescale_speeds(&mut vel, stats.trans_mean_mm_s, stats.trans_max_mm_s);

    let mut times = Vec::with_capacity(steps + 1);
    let mut kps = Vec::with_capacity(steps + 1);
    let mut rot = Matrix3::identity();
    let mut origin = pose0.origin;
    let local = initial.map(|p| p - pose0.origin);
    for i in 0..=steps {
        times.push(i as f64 * dt_s);
        if rot == Matrix3::identity() && origin == pose0.origin {
            kps.push(*initial);
        } else {
            kps.push(local.map(|p| rot * p + origin));
        }
        if i < steps {
            let step = Rotation3::from_scaled_axis(omega[i] * dt_s);
            rot = step.matrix() * rot;
            origin += vel[i] * dt_s;
        }
    }
    Trajectory::new(times, kps)
}

/// The static volume moved by the trajectory displacement at time `t`.
pub fn volume_at_time(static_v: &Volume, traj: &Trajectory, t: f64) -> Result<Volume> {
    let disp = traj.displacement_at(t)?;
    resample_affine(static_v, &disp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_kp() -> KeypointSet {
        KeypointSet::new(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0))
    }

    fn assert_close(a: &Vec3, b: &Vec3, tol: f64) {
        assert!((a - b).norm() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn pose_of_hand_example() {
        let p = pose_from_keypoints(&sample_kp()).unwrap();
        assert_close(&p.rotation.column(0).into(), &Vec3::new(1.0, 0.0, 0.0), 1e-12);
        // Y sign picked so that Z points from the shoulder towards the eyes
        assert_close(&p.rotation.column(1).into(), &Vec3::new(0.0, 0.0, -1.0), 1e-12);
        assert_close(&p.rotation.column(2).into(), &Vec3::new(0.0, 1.0, 0.0), 1e-12);
        assert_close(&p.origin, &Vec3::new(0.0, -1.0 / 3.0, 0.0), 1e-12);
        check_rotation(&p.rotation).unwrap();
    }

    #[test]
    fn collinear_keypoints_rejected() {
        let kp = KeypointSet::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0));
        assert!(matches!(pose_from_keypoints(&kp), Err(Error::DegenerateKeypoints(_))));
    }

    #[test]
    fn relative_transform_examples() {
        let a = pose_from_keypoints(&sample_kp()).unwrap();
        let id = relative_transform(&a, &a);
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let shifted = sample_kp().map(|p| p + Vec3::new(5.0, 0.0, 0.0));
        let b = pose_from_keypoints(&shifted).unwrap();
        let t = relative_transform(&a, &b);
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert_close(&t.translation, &Vec3::new(5.0, 0.0, 0.0), 1e-12);
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0)
            .prop_map(|(a, b, c)| *Rotation3::from_scaled_axis(Vec3::new(a, b, c)).matrix())
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vec3> {
        (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    fn arb_kp() -> impl Strategy<Value = KeypointSet> {
        (arb_vec(30.0), arb_vec(30.0), arb_vec(30.0))
            .prop_map(|(a, b, c)| KeypointSet::new(a, b, c))
            .prop_filter("non-degenerate", |kp| pose_from_keypoints(kp).is_ok())
    }

    proptest! {
        #[test]
        fn pose_is_rigidly_equivariant(kp in arb_kp(), r in arb_rotation(), t in arb_vec(50.0)) {
            let p = pose_from_keypoints(&kp).unwrap();
            let moved = pose_from_keypoints(&kp.map(|x| r * x + t)).unwrap();
            prop_assert!((moved.rotation - r * p.rotation).abs().max() < 1e-6);
            prop_assert!((moved.origin - (r * p.origin + t)).norm() < 1e-6);
            prop_assert!(check_rotation(&p.rotation).is_ok());
        }

        #[test]
        fn relative_transforms_compose(a in arb_kp(), b in arb_kp(), c in arb_kp()) {
            let (pa, pb, pc) = (
                pose_from_keypoints(&a).unwrap(),
                pose_from_keypoints(&b).unwrap(),
                pose_from_keypoints(&c).unwrap(),
            );
            let ab = relative_transform(&pa, &pb);
            let bc = relative_transform(&pb, &pc);
            let ac = relative_transform(&pa, &pc);
            let chained = bc.compose(&ab);
            prop_assert!((chained.rotation - ac.rotation).abs().max() < 1e-6);
            prop_assert!((chained.translation - ac.translation).norm() < 1e-6);
            // mapping a's frame onto b's
            prop_assert!((ab.rotation * pa.rotation - pb.rotation).abs().max() < 1e-6);
            prop_assert!((ab.apply(&pa.origin) - pb.origin).norm() < 1e-6);
        }
    }

    fn head_kp() -> KeypointSet {
        KeypointSet::new(Vec3::new(-8.0, 10.0, 5.0), Vec3::new(8.0, 10.0, 5.0), Vec3::new(0.0, -15.0, 0.0))
    }

    #[test]
    fn default_statistics_are_matched() {
        let stats = MotionStats::default();
        let traj = synthesize_trajectory(&head_kp(), 300.0, 0.1, &stats, 7).unwrap();
        let speeds = traj.speeds();
        let n = speeds.len() as f64;
        let rot_mean = speeds.iter().map(|s| s.0).sum::<f64>() / n;
        let trans_mean = speeds.iter().map(|s| s.1).sum::<f64>() / n;
        assert!((rot_mean / 3.10 - 1.0).abs() < 0.2, "rotation mean {rot_mean}");
        assert!((trans_mean / 2.40 - 1.0).abs() < 0.2, "translation mean {trans_mean}");
        for (r, t) in speeds {
            assert!(r <= stats.rot_max_deg_s * (1.0 + 1e-6));
            assert!(t <= stats.trans_max_mm_s * (1.0 + 1e-6));
        }
    }

    #[test]
    fn clipping_respects_tight_maxima() {
        let stats = MotionStats { rot_max_deg_s: 4.0, trans_max_mm_s: 3.0, ..MotionStats::default() };
        let traj = synthesize_trajectory(&head_kp(), 120.0, 0.05, &stats, 3).unwrap();
        for (r, t) in traj.speeds() {
            assert!(r <= 4.0 * (1.0 + 1e-6), "{r}");
            assert!(t <= 3.0 * (1.0 + 1e-6), "{t}");
        }
    }

    #[test]
    fn zero_speeds_give_static_trajectory() {
        let traj = synthesize_trajectory(&head_kp(), 10.0, 0.5, &MotionStats::stationary(), 1).unwrap();
        assert!(traj.keypoints().iter().all(|k| *k == head_kp()));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let s = MotionStats::default();
        let a = synthesize_trajectory(&head_kp(), 20.0, 0.25, &s, 11).unwrap();
        let b = synthesize_trajectory(&head_kp(), 20.0, 0.25, &s, 11).unwrap();
        let c = synthesize_trajectory(&head_kp(), 20.0, 0.25, &s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_synthesis_inputs() {
        let s = MotionStats::default();
        assert!(synthesize_trajectory(&head_kp(), 1.0, 2.0, &s, 0).is_err());
        let bad = MotionStats { rot_mean_deg_s: -1.0, ..s };
        assert!(synthesize_trajectory(&head_kp(), 10.0, 1.0, &bad, 0).is_err());
    }

    #[test]
    fn knot_poses_are_reproduced() {
        let traj = synthesize_trajectory(&head_kp(), 5.0, 0.5, &MotionStats::default(), 4).unwrap();
        for (t, p) in traj.times().iter().zip(traj.poses()) {
            assert_eq!(traj.pose_at(*t).unwrap(), *p);
        }
        assert!(traj.pose_at(-0.1).is_err());
        assert!(traj.pose_at(5.01).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let traj = synthesize_trajectory(&head_kp(), 3.0, 0.5, &MotionStats::default(), 9).unwrap();
        let back = Trajectory::from_csv(&traj.to_csv()).unwrap();
        assert_eq!(back, traj);
        assert!(Trajectory::from_csv("t,a\n1,2\n").is_err());
    }

    fn blob(n: usize) -> Volume {
        let c = (n as f32 - 1.0) / 2.0;
        Volume::from_fn([n, n, n], [1.0; 3], |x, y, z| {
            let d2 = (x as f32 - c).powi(2) + (y as f32 - c).powi(2) + (z as f32 - c).powi(2);
            (-d2 / 8.0).exp()
        })
        .unwrap()
        .with_origin([-c; 3])
    }

    #[test]
    fn volume_at_start_is_static() {
        let v = blob(12);
        let traj = synthesize_trajectory(&head_kp(), 4.0, 0.5, &MotionStats::default(), 2).unwrap();
        let out = volume_at_time(&v, &traj, 0.0).unwrap();
        let diff = out.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
        assert!(volume_at_time(&v, &traj, 4.5).is_err());
    }

    #[test]
    fn static_trajectory_leaves_volume_untouched() {
        let v = blob(10);
        let traj = Trajectory::stationary(head_kp(), 8.0).unwrap();
        for t in [0.0, 1.3, 8.0] {
            assert_eq!(volume_at_time(&v, &traj, t).unwrap(), v);
        }
    }

    #[test]
    fn translation_reaching_one_voxel_shifts_volume() {
        let v = blob(10);
        let kp1 = head_kp().map(|p| p + Vec3::new(0.0, 2.0, 0.0));
        let traj = Trajectory::new(vec![0.0, 2.0], vec![head_kp(), kp1]).unwrap();
        let out = volume_at_time(&v, &traj, 1.0).unwrap();
        for z in 0..10 {
            for x in 0..10 {
                assert_eq!(out.get(x, 0, z), 0.0);
                for y in 1..10 {
                    assert!((out.get(x, y, z) - v.get(x, y - 1, z)).abs() < 1e-6);
                }
            }
        }
    }
}
