//! Regular 3D scalar grids and the voxel-level operations applied to them.
//!
//! Storage is x-fastest: `index = x + nx * (y + ny * z)`. Physical position of
//! voxel `(x, y, z)` is `origin + (x, y, z) * spacing` in millimetres.

mod interp;
pub mod io;
mod resample;

pub use interp::{interpolate_frame, interpolate_slices};
pub use resample::{resample_affine, resample_plane};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Default foreground threshold, as a fraction of the volume maximum.
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("volume shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("volume spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Shape(format!("volume origin {origin:?} is not finite")));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume data has {} values, shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("volume contains non-finite intensities".into()));
        }
        Ok(Self { shape, spacing, origin, data })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, spacing, [0.0; 3], vec![0.0; n])
    }

    pub fn filled(shape: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, spacing, [0.0; 3], vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel index.
    pub fn from_fn(
        shape: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, spacing, [0.0; 3], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    /// Same geometry, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, self.spacing, self.origin, data)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// The x-y plane at slice `z`, x-fastest.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.shape[0] * self.shape[1];
        &self.data[z * n..(z + 1) * n]
    }

    /// The y-z plane at fixed `x`, row-major with rows indexed by y and
    /// columns by z (`out[y * nz + z]`).
    pub fn plane_x(&self, x: usize) -> Vec<f32> {
        let [_, ny, nz] = self.shape;
        let mut out = Vec::with_capacity(ny * nz);
        for y in 0..ny {
            for z in 0..nz {
                out.push(self.get(x, y, z));
            }
        }
        out
    }

    /// Inverse of [`Volume::plane_x`]: overwrites the y-z plane at `x`.
    pub fn set_plane_x(&mut self, x: usize, plane: &[f32]) {
        let [_, ny, nz] = self.shape;
        assert_eq!(plane.len(), ny * nz, "plane size mismatch");
        for y in 0..ny {
            for z in 0..nz {
                let i = self.index(x, y, z);
                self.data[i] = plane[y * nz + z];
            }
        }
    }

    /// Stacks x-y planes (each `nx * ny`, x-fastest) along z.
    pub fn from_slices(
        nx: usize,
        ny: usize,
        slices: &[Vec<f32>],
        spacing: [f32; 3],
        origin: [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(nx * ny * slices.len());
        for (i, s) in slices.iter().enumerate() {
            if s.len() != nx * ny {
                return Err(Error::Shape(format!(
                    "slice {i} has {} values, expected {}",
                    s.len(),
                    nx * ny
                )));
            }
            data.extend_from_slice(s);
        }
        Self::new([nx, ny, slices.len()], spacing, origin, data)
    }
}

/// Boolean companion grid of a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask data does not match shape {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![true; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub(crate) fn check_companion(&self, v: &Volume) -> Result<()> {
        if self.shape != v.shape() {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match volume shape {:?}",
                self.shape,
                v.shape()
            )));
        }
        Ok(())
    }
}

/// Swaps the x and z axes: `out[a, b, c] = v[c, b, a]`.
pub fn transpose_xz(v: &Volume) -> Volume {
    let [nx, ny, nz] = v.shape;
    let mut data = Vec::with_capacity(v.data.len());
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                data.push(v.get(x, y, z));
            }
        }
    }
    let [sx, sy, sz] = v.spacing;
    let [ox, oy, oz] = v.origin;
    Volume { shape: [nz, ny, nx], spacing: [sz, sy, sx], origin: [oz, oy, ox], data }
}

/// Rician magnitude noise with `sigma = sigma_fraction * max(v)`.
pub fn add_rician_noise(v: &Volume, sigma_fraction: f32, seed: u64) -> Result<Volume> {
    if !(sigma_fraction >= 0.0) || !sigma_fraction.is_finite() {
        return Err(Error::Config(format!(
            "noise sigma fraction must be non-negative, got {sigma_fraction}"
        )));
    }
    if sigma_fraction == 0.0 {
        return Ok(v.clone());
    }
    let sigma = sigma_fraction * v.max().max(0.0);
    add_rician_noise_abs(v, sigma, seed)
}

/// Rician noise with an absolute standard deviation `sigma`.
pub fn add_rician_noise_abs(v: &Volume, sigma: f32, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma as f64)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let data = v
        .data
        .iter()
        .map(|&x| {
            let n1 = normal.sample(&mut rng);
            let n2 = normal.sample(&mut rng);
            let re = x as f64 + n1;
            ((re * re + n2 * n2).sqrt() as f32).max(0.0)
        })
        .collect();
    v.with_data(data)
}

/// Voxels strictly brighter than `threshold_fraction * max(v)`.
pub fn foreground_mask(v: &Volume, threshold_fraction: f32) -> Result<Mask> {
    if !(0.0..1.0).contains(&threshold_fraction) {
        return Err(Error::Config(format!(
            "mask threshold fraction must lie in [0, 1), got {threshold_fraction}"
        )));
    }
    let threshold = threshold_fraction * v.max();
    let data: Vec<bool> = v.data.iter().map(|&x| x > threshold).collect();
    let mask = Mask { shape: v.shape, data };
    if mask.count() == 0 {
        return Err(Error::EmptyMask("no voxel exceeds the foreground threshold".into()));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, [1.0, 1.5, 2.0], |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::zeros([0, 1, 1], [1.0; 3]).is_err());
        assert!(Volume::zeros([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![f32::NAN]).is_err());
    }

    #[test]
    fn transpose_moves_single_voxel() {
        let mut data = vec![0.0; 5 * 7 * 9];
        let v0 = Volume::zeros([5, 7, 9], [1.0, 2.0, 3.0]).unwrap();
        data[v0.index(1, 2, 3)] = 4.0;
        let v = v0.with_data(data).unwrap();
        let t = transpose_xz(&v);
        assert_eq!(t.shape(), [9, 7, 5]);
        assert_eq!(t.spacing(), [3.0, 2.0, 1.0]);
        assert_eq!(t.get(3, 2, 1), 4.0);
        assert_eq!(t.data().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn transpose_is_involution() {
        let v = random_volume([4, 3, 6], 1);
        assert_eq!(transpose_xz(&transpose_xz(&v)), v);
    }

    #[test]
    fn zero_noise_is_identity() {
        let v = random_volume([6, 6, 6], 2);
        assert_eq!(add_rician_noise(&v, 0.0, 9).unwrap(), v);
        assert!(add_rician_noise(&v, -0.1, 9).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_nonnegative() {
        let v = random_volume([8, 8, 8], 3);
        let a = add_rician_noise(&v, 0.2, 42).unwrap();
        let b = add_rician_noise(&v, 0.2, 42).unwrap();
        let c = add_rician_noise(&v, 0.2, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn rician_high_signal_std_approaches_sigma() {
        let n = 200_000;
        let v = Volume::filled([n, 1, 1], [1.0; 3], 100.0).unwrap();
        let sigma = 1.0f32;
        let noisy = add_rician_noise_abs(&v, sigma, 5).unwrap();
        let diffs: Vec<f64> = noisy.data().iter().map(|&x| x as f64 - 100.0).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn mask_threshold_examples() {
        let v = Volume::filled([3, 3, 3], [1.0; 3], 2.0).unwrap();
        assert_eq!(foreground_mask(&v, 0.0).unwrap().count(), 27);

        let mut data = vec![0.0; 27];
        data[13] = 10.0;
        let v = v.with_data(data).unwrap();
        let m = foreground_mask(&v, 0.5).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.data()[13]);

        let zeros = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(matches!(foreground_mask(&zeros, 0.01), Err(Error::EmptyMask(_))));
        assert!(foreground_mask(&v, 1.0).is_err());
    }

    #[test]
    fn mask_matches_enumeration() {
        let v = random_volume([7, 5, 6], 11);
        let max = v.data().iter().cloned().fold(0.0f32, f32::max);
        let mut expected = 0;
        for &x in v.data() {
            if x > 0.3 * max {
                expected += 1;
            }
        }
        assert_eq!(foreground_mask(&v, 0.3).unwrap().count(), expected);
    }

    #[test]
    fn plane_roundtrip() {
        let v = random_volume([3, 4, 5], 8);
        let mut w = Volume::zeros([3, 4, 5], v.spacing()).unwrap();
        for x in 0..3 {
            w.set_plane_x(x, &v.plane_x(x));
        }
        assert_eq!(v.data(), w.data());
        assert_eq!(v.plane_x(1)[2 * 5 + 3], v.get(1, 2, 3));
    }

    #[test]
    fn zero_signal_rician_mean() {
        let sigma = 0.5f32;
        let v = Volume::zeros([1_000_000, 1, 1], [1.0; 3]).unwrap();
        let noisy = add_rician_noise_abs(&v, sigma, 77).unwrap();
        let mean = noisy.data().iter().map(|&x| x as f64).sum::<f64>() / 1e6;
        let expected = sigma as f64 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.01, "mean {mean} expected {expected}");
    }
}
