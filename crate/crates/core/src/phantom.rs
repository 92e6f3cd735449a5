//! Procedural head-like phantom: nested soft-edged ellipsoids modulated by
//! band-limited texture, with three embedded landmarks.

use nalgebra::{Matrix3, Rotation3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{KeypointSet, Vec3};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: [f32; 3],
    /// Total ellipsoid count, including the enclosing head ellipsoid.
    pub num_ellipsoids: usize,
    /// Relative amplitude of the multiplicative texture.
    pub texture_amplitude: f32,
    /// Gaussian smoothing scale of the texture noise.
    pub smoothness_mm: f32,
    /// Landmarks in world millimetres (the grid is centred on the origin).
    pub eye_left_mm: [f64; 3],
    pub eye_right_mm: [f64; 3],
    pub shoulder_mid_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing_mm: [1.0; 3],
            num_ellipsoids: 10,
            texture_amplitude: 0.25,
            smoothness_mm: 1.2,
            eye_left_mm: [-8.0, 15.0, 4.0],
            eye_right_mm: [8.0, 15.0, 4.0],
            shoulder_mid_mm: [0.0, -8.0, -22.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn keypoints(&self) -> KeypointSet {
        KeypointSet::new(
            Vec3::from(self.eye_left_mm),
            Vec3::from(self.eye_right_mm),
            Vec3::from(self.shoulder_mid_mm),
        )
    }

    /// World position of the first voxel; the grid is centred on zero.
    pub fn origin(&self) -> [f32; 3] {
        [0, 1, 2].map(|i| -(self.shape[i] as f32 - 1.0) / 2.0 * self.spacing_mm[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 16) {
            return Err(Error::Config(format!("phantom shape {:?} must be at least 16^3", self.shape)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom spacing must be positive".into()));
        }
        if !(self.texture_amplitude >= 0.0) || !(self.smoothness_mm > 0.0) {
            return Err(Error::Config("phantom texture amplitude must be >= 0 and smoothness > 0".into()));
        }
        let origin = self.origin();
        for p in self.keypoints().points() {
            for i in 0..3 {
                let lo = origin[i] as f64;
                let hi = lo + (self.shape[i] - 1) as f64 * self.spacing_mm[i] as f64;
                if !(p[i] >= lo && p[i] <= hi) {
                    return Err(Error::Config(format!(
                        "keypoint ({:.1}, {:.1}, {:.1}) lies outside the field of view",
                        p.x, p.y, p.z
                    )));
                }
            }
        }
        crate::motion::pose_from_keypoints(&self.keypoints())?;
        Ok(())
    }
}

struct Ellipsoid {
    center: Vec3,
    axes: Vec3,
    rotation: Matrix3<f64>,
    intensity: f64,
}

impl Ellipsoid {
    /// Approximate inward distance (mm) from the surface; negative outside.
    fn depth(&self, p: &Vec3) -> f64 {
        let q = self.rotation.transpose() * (p - self.center);
        let r = (q.x / self.axes.x).powi(2) + (q.y / self.axes.y).powi(2) + (q.z / self.axes.z).powi(2);
        (1.0 - r.sqrt()) * self.axes.min()
    }
}

// Width of the soft inner edge ramp, mm.
const EDGE_MM: f64 = 1.5;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Separable Gaussian blur with replicate boundaries, in voxel units.
fn gaussian_blur(data: &mut [f64], shape: [usize; 3], sigma: [f64; 3]) {
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let n = shape[axis] as isize;
        let stride = [1, shape[0], shape[0] * shape[1]][axis];
        let lines = data.len() / shape[axis];
        let mut line = vec![0.0; shape[axis]];
        for l in 0..lines {
            // start index of line l along `axis`
            let start = match axis {
                0 => l * shape[0],
                1 => (l / shape[0]) * shape[0] * shape[1] + l % shape[0],
                _ => l,
            };
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[start + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i + k as isize - radius).clamp(0, n - 1);
                    acc += w * line[j as usize];
                }
                data[start + i as usize * stride] = acc / norm;
            }
        }
    }
}

/// Generates the phantom volume and its landmarks.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, KeypointSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.shape;
    let origin = spec.origin();
    let fov = Vec3::new(
        nx as f64 * spec.spacing_mm[0] as f64,
        ny as f64 * spec.spacing_mm[1] as f64,
        nz as f64 * spec.spacing_mm[2] as f64,
    );

    let mut shapes = Vec::new();
    if spec.num_ellipsoids > 0 {
        let head = Ellipsoid {
            center: Vec3::zeros(),
            axes: Vec3::new(0.40 * fov.x, 0.36 * fov.y, 0.42 * fov.z),
            rotation: Matrix3::identity(),
            intensity: 0.35,
        };
        for _ in 1..spec.num_ellipsoids {
            let scale = rng.random_range(0.15..0.55);
            let axes = Vec3::new(
                head.axes.x * scale * rng.random_range(0.6..1.0),
                head.axes.y * scale * rng.random_range(0.6..1.0),
                head.axes.z * scale * rng.random_range(0.6..1.0),
            );
            let room = Vec3::new(head.axes.x - axes.x, head.axes.y - axes.y, head.axes.z - axes.z) * 0.7;
            let center = Vec3::new(
                rng.random_range(-1.0..1.0) * room.x,
                rng.random_range(-1.0..1.0) * room.y,
                rng.random_range(-1.0..1.0) * room.z,
            );
            let angles: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.6..0.6));
            let rotation = *Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).matrix();
            shapes.push(Ellipsoid { center, axes, rotation, intensity: rng.random_range(0.2..0.95) });
        }
        let kp = spec.keypoints();
        for eye in [kp.eye_left, kp.eye_right] {
            shapes.push(Ellipsoid { center: eye, axes: Vec3::new(3.5, 3.0, 3.0), rotation: Matrix3::identity(), intensity: 0.9 });
        }
        shapes.insert(0, head);
    }

    let n = nx * ny * nz;
    let mut texture: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sigma = [0, 1, 2].map(|i| spec.smoothness_mm as f64 / spec.spacing_mm[i] as f64);
    gaussian_blur(&mut texture, spec.shape, sigma);
    let std = (texture.iter().map(|t| t * t).sum::<f64>() / n as f64).sqrt().max(1e-12);

    let mut data = vec![0.0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = Vec3::new(
                    origin[0] as f64 + x as f64 * spec.spacing_mm[0] as f64,
                    origin[1] as f64 + y as f64 * spec.spacing_mm[1] as f64,
                    origin[2] as f64 + z as f64 * spec.spacing_mm[2] as f64,
                );
                let mut value = 0.0;
                let mut inside = false;
                for e in &shapes {
                    let d = e.depth(&p);
                    if d > 0.0 {
                        inside = true;
                        let w = smoothstep(d / EDGE_MM);
                        value = value * (1.0 - w) + e.intensity * w;
                    }
                }
                if inside {
                    let i = x + nx * (y + ny * z);
                    let textured = value * (1.0 + spec.texture_amplitude as f64 * texture[i] / std);
                    data[i] = textured.clamp(0.01, 1.0) as f32;
                }
            }
        }
    }
    let volume = Volume::new(spec.shape, spec.spacing_mm, origin, data)?;
    Ok((volume, spec.keypoints()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn small() -> PhantomSpec {
        PhantomSpec {
            shape: [32, 32, 32],
            eye_left_mm: [-4.0, 7.0, 2.0],
            eye_right_mm: [4.0, 7.0, 2.0],
            shoulder_mid_mm: [0.0, -4.0, -11.0],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let (a, ka) = generate_phantom(&small()).unwrap();
        let (b, kb) = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ka, kb);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.max() > 0.5);
        let other = generate_phantom(&PhantomSpec { seed: 6, ..small() }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn empty_spec_gives_zero_volume() {
        let spec = PhantomSpec { num_ellipsoids: 0, texture_amplitude: 0.0, ..small() };
        let (v, _) = generate_phantom(&spec).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn background_is_exactly_zero_at_corners() {
        let (v, _) = generate_phantom(&small()).unwrap();
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(31, 31, 31), 0.0);
        assert_eq!(v.get(0, 31, 0), 0.0);
    }

    #[test]
    fn keypoints_outside_fov_rejected() {
        let spec = PhantomSpec { eye_left_mm: [0.0, 100.0, 0.0], ..small() };
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
        assert!(generate_phantom(&PhantomSpec { shape: [8, 16, 16], ..small() }).is_err());
    }

    #[test]
    fn z_spectrum_has_energy_beyond_quarter_sampling_nyquist() {
        let (v, _) = generate_phantom(&PhantomSpec { seed: 1, ..Default::default() }).unwrap();
        let [nx, ny, nz] = v.shape();
        let fft = FftPlanner::new().plan_fft_forward(nz);
        let mut power = vec![0.0f64; nz];
        for y in 0..ny {
            for x in 0..nx {
                let mut col: Vec<Complex<f64>> = (0..nz).map(|z| Complex::new(v.get(x, y, z) as f64, 0.0)).collect();
                fft.process(&mut col);
                for (p, c) in power.iter_mut().zip(&col) {
                    *p += c.norm_sqr();
                }
            }
        }
        // N_I = 4 keeps every fourth slice: Nyquist at nz / 8 cycles per stack
        let cutoff = nz / 8;
        let total: f64 = power[1..].iter().sum();
        let high: f64 = (cutoff + 1..=nz - cutoff - 1).map(|f| power[f]).sum();
        assert!(high / total > 1e-3, "high-frequency fraction {}", high / total);
    }
}
