//! Interpolating cubic B-splines on uniformly spaced knots.
//!
//! Coefficients use the natural boundary (`c[-1] = 2c[0] - c[1]`, mirrored at
//! the far end), which makes the spline reproduce affine data exactly. Outside
//! the knot hull the first/last sample is replicated.

use crate::error::{Error, Result};

/// Evaluation recipe for one output position.
#[derive(Debug, Clone, PartialEq)]
pub enum Tap {
    /// Output coincides with knot `i` (also used for edge replication).
    Copy(usize),
    /// `out = f[anchor] + sum_i w[i] * (f[i] - f[anchor])`.
    Blend { anchor: usize, weights: Vec<f64> },
}

/// Precomputed linear map from knot samples to evaluation positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineWeights {
    taps: Vec<Tap>,
    num_knots: usize,
}

/// Cubic B-spline basis `beta3(t)`.
pub fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Solves for natural-boundary B-spline coefficients of samples `f`.
pub fn prefilter(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n <= 2 {
        return f.to_vec();
    }
    // Endpoint rows reduce to c0 = f0 and c[n-1] = f[n-1]; interior rows are
    // (c[i-1] + 4 c[i] + c[i+1]) / 6 = f[i]. Thomas algorithm on the interior.
    let mut c = vec![0.0; n];
    c[0] = f[0];
    c[n - 1] = f[n - 1];
    let m = n - 2;
    if m == 0 {
        return c;
    }
    let mut diag = vec![4.0; m];
    let mut rhs: Vec<f64> = (1..n - 1).map(|i| 6.0 * f[i]).collect();
    rhs[0] -= c[0];
    rhs[m - 1] -= c[n - 1];
    for i in 1..m {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    let mut x = vec![0.0; m];
    x[m - 1] = rhs[m - 1] / diag[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = (rhs[i] - x[i + 1]) / diag[i];
    }
    c[1..n - 1].copy_from_slice(&x);
    c
}

/// Evaluates the spline with coefficients `c` at knot-unit position `u`.
pub fn evaluate(c: &[f64], u: f64) -> f64 {
    let n = c.len() as isize;
    let coef = |j: isize| -> f64 {
        if n == 1 {
            c[0]
        } else if j < 0 {
            2.0 * c[0] - c[(-j) as usize]
        } else if j >= n {
            2.0 * c[(n - 1) as usize] - c[(2 * (n - 1) - j) as usize]
        } else {
            c[j as usize]
        }
    };
    let base = u.floor() as isize;
    (base - 1..=base + 2).map(|j| coef(j) * bspline3(u - j as f64)).sum()
}

impl SplineWeights {
    /// Builds the map from samples at integer `knots` (strictly increasing,
    /// uniformly spaced) onto the integer grid `0..num_out`.
    pub fn new(knots: &[usize], num_out: usize) -> Result<Self> {
        let n = knots.len();
        if n < 2 {
            return Err(Error::DegenerateFrame(format!("need at least 2 slices, got {n}")));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateFrame("slice positions must be strictly increasing".into()));
        }
        let step = knots[1] - knots[0];
        if knots.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(Error::DegenerateFrame("slice positions must be uniformly spaced".into()));
        }

        // Column i of the dense map is the spline response to the unit sample e_i.
        let mut coef_cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            coef_cols.push(prefilter(&e));
        }

        let first = knots[0];
        let last = knots[n - 1];
        let taps = (0..num_out)
            .map(|z| {
                if z <= first {
                    Tap::Copy(0)
                } else if z >= last {
                    Tap::Copy(n - 1)
                } else if (z - first) % step == 0 {
                    Tap::Copy((z - first) / step)
                } else {
                    let u = (z - first) as f64 / step as f64;
                    let anchor = u.round() as usize;
                    let weights = coef_cols.iter().map(|c| evaluate(c, u)).collect();
                    Tap::Blend { anchor, weights }
                }
            })
            .collect();
        Ok(Self { taps, num_knots: n })
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn num_knots(&self) -> usize {
        self.num_knots
    }

    pub fn num_out(&self) -> usize {
        self.taps.len()
    }

    /// Applies the map to one sample vector.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.num_knots);
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Copy(i) => f[*i],
                Tap::Blend { anchor, weights } => {
                    let a = f[*anchor];
                    a + weights.iter().zip(f).map(|(w, &v)| w * (v - a)).sum::<f64>()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_partition_of_unity() {
        for k in 0..20 {
            let t = k as f64 / 20.0;
            let s: f64 = (-2..=2).map(|j| bspline3(t - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn prefilter_interpolates() {
        let f = [1.0, -2.0, 0.5, 3.0, 7.0, -1.0];
        let c = prefilter(&f);
        for (i, &v) in f.iter().enumerate() {
            assert!((evaluate(&c, i as f64) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_affine_data() {
        let knots = [0, 2, 4];
        let w = SplineWeights::new(&knots, 5).unwrap();
        let f: Vec<f64> = knots.iter().map(|&z| 3.0 * z as f64 - 1.5).collect();
        let out = w.apply(&f);
        for (z, v) in out.iter().enumerate() {
            assert!((v - (3.0 * z as f64 - 1.5)).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn replicate_edges() {
        let w = SplineWeights::new(&[2, 5, 8], 11).unwrap();
        let out = w.apply(&[1.0, 2.0, 4.0]);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 1.0);
        assert_eq!(out[9], 4.0);
        assert_eq!(out[10], 4.0);
    }

    #[test]
    fn rejects_degenerate_knots() {
        assert!(SplineWeights::new(&[3], 5).is_err());
        assert!(SplineWeights::new(&[3, 1], 5).is_err());
        assert!(SplineWeights::new(&[0, 2, 6], 8).is_err());
    }

    #[test]
    fn constants_are_exact() {
        let w = SplineWeights::new(&[1, 4, 7, 10], 12).unwrap();
        let c = 0.123_456_789f64;
        assert!(w.apply(&[c; 4]).iter().all(|&v| v == c));
    }
}
