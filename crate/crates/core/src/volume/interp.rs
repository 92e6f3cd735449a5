use rayon::prelude::*;

use super::Volume;
use crate::acquisition::{Frame, ScanProtocol};
use crate::error::{Error, Result};
use crate::spline::{SplineWeights, Tap};

/// Cubic B-spline upsampling of a frame along z onto the full slice grid.
pub fn interpolate_frame(frame: &Frame, protocol: &ScanProtocol) -> Result<Volume> {
    if frame.z_indices.len() < 2 {
        return Err(Error::DegenerateFrame(format!(
            "frame {} has {} slice(s)",
            frame.index,
            frame.z_indices.len()
        )));
    }
    if let Some(&z) = frame.z_indices.iter().find(|&&z| z >= protocol.num_slices) {
        return Err(Error::Shape(format!(
            "slice index {z} outside a {}-slice protocol",
            protocol.num_slices
        )));
    }
    interpolate_slices(
        &frame.stack,
        &frame.z_indices,
        protocol.num_slices,
        protocol.slice_spacing_mm as f32,
    )
}

/// Interpolates a stack whose z-planes sit at integer positions `z_indices`
/// onto the grid `0..num_out` with output slice spacing `spacing_z`.
pub fn interpolate_slices(
    stack: &Volume,
    z_indices: &[usize],
    num_out: usize,
    spacing_z: f32,
) -> Result<Volume> {
    let [nx, ny, nz] = stack.shape();
    if nz != z_indices.len() {
        return Err(Error::Shape(format!(
            "stack has {nz} planes but {} slice positions",
            z_indices.len()
        )));
    }
    let weights = SplineWeights::new(z_indices, num_out)?;
    let plane = nx * ny;
    let mut data = vec![0.0f32; plane * num_out];
    data.par_chunks_mut(plane).zip(weights.taps().par_iter()).for_each(|(out, tap)| match tap {
        Tap::Copy(i) => out.copy_from_slice(stack.slice_z(*i)),
        Tap::Blend { anchor, weights } => {
            let a = stack.slice_z(*anchor);
            let mut acc = vec![0.0f64; plane];
            for (j, &w) in weights.iter().enumerate() {
                if j == *anchor || w == 0.0 {
                    continue;
                }
                for ((s, &v), &av) in acc.iter_mut().zip(stack.slice_z(j)).zip(a) {
                    *s += w * (v as f64 - av as f64);
                }
            }
            for ((o, s), &av) in out.iter_mut().zip(acc).zip(a) {
                *o = (av as f64 + s) as f32;
            }
        }
    });
    let [sx, sy, _] = stack.spacing();
    let [ox, oy, oz] = stack.origin();
    let origin_z = oz - z_indices[0] as f32 * spacing_z;
    Volume::new([nx, ny, num_out], [sx, sy, spacing_z], [ox, oy, origin_z], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Natural cubic spline through `(xs, ys)` via the second-derivative
    /// (moment) system, solved densely by Gaussian elimination.
    fn natural_spline_oracle(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let n = xs.len();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            b[i] = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
        }
        for col in 0..n {
            let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, p);
            b.swap(col, p);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut m = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * m[c]).sum();
            m[r] = (b[r] - s) / a[r][r];
        }
        let i = (0..n - 1).find(|&i| x <= xs[i + 1]).unwrap();
        let h = xs[i + 1] - xs[i];
        let t0 = xs[i + 1] - x;
        let t1 = x - xs[i];
        m[i] * t0.powi(3) / (6.0 * h)
            + m[i + 1] * t1.powi(3) / (6.0 * h)
            + (ys[i] / h - m[i] * h / 6.0) * t0
            + (ys[i + 1] / h - m[i + 1] * h / 6.0) * t1
    }

    fn column_stack(values: &[f32]) -> Volume {
        Volume::new([1, 1, values.len()], [1.0; 3], [0.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_slices_stay_constant() {
        let stack = Volume::filled([3, 2, 3], [1.0; 3], 0.7).unwrap();
        let out = interpolate_slices(&stack, &[1, 4, 7], 9, 1.0).unwrap();
        assert_eq!(out.shape(), [3, 2, 9]);
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        let (a, b) = (1.5f32, -0.25f32);
        let stack = column_stack(&[b, 2.0 * a + b, 4.0 * a + b]);
        let out = interpolate_slices(&stack, &[0, 2, 4], 5, 1.0).unwrap();
        for z in 0..5 {
            assert!((out.get(0, 0, z) - (a * z as f32 + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_matches_moment_oracle() {
        let zs = [0usize, 2, 4, 6, 8];
        let ys: Vec<f32> = zs.iter().map(|&z| (z * z) as f32).collect();
        let out = interpolate_slices(&column_stack(&ys), &zs, 9, 1.0).unwrap();
        let xs: Vec<f64> = zs.iter().map(|&z| z as f64).collect();
        let yd: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
        for z in 0..9 {
            let expected = natural_spline_oracle(&xs, &yd, z as f64);
            assert!((out.get(0, 0, z) as f64 - expected).abs() < 1e-5, "z={z}");
        }
        // frozen from an independent natural-spline solve (scipy CubicSpline, bc natural)
        assert!((out.get(0, 0, 3) as f64 - 8.928571428571429).abs() < 1e-5);
    }

    #[test]
    fn random_columns_match_oracle_and_interpolate() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f32 / (1u64 << 24) as f32
        };
        for step in 1..5usize {
            for n in 2..8usize {
                let zs: Vec<usize> = (0..n).map(|i| 1 + i * step).collect();
                let ys: Vec<f32> = (0..n).map(|_| next()).collect();
                let num_out = zs[n - 1] + 3;
                let out = interpolate_slices(&column_stack(&ys), &zs, num_out, 1.0).unwrap();
                let xs: Vec<f64> = zs.iter().map(|&z| z as f64).collect();
                let yd: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
                for (i, &z) in zs.iter().enumerate() {
                    assert_eq!(out.get(0, 0, z), ys[i]);
                }
                for z in zs[0]..=zs[n - 1] {
                    let e = natural_spline_oracle(&xs, &yd, z as f64);
                    assert!((out.get(0, 0, z) as f64 - e).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rejects_single_slice() {
        let stack = column_stack(&[1.0]);
        assert!(matches!(
            interpolate_slices(&stack, &[0], 4, 1.0),
            Err(Error::DegenerateFrame(_))
        ));
    }
}
