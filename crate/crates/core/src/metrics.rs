//! Masked PSNR and SSIM, and the percentage of correct keypoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::Vec3;
use crate::volume::{Mask, Volume};

fn check_pair(a: &Volume, b: &Volume, mask: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("volumes differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    mask.check_companion(b)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask("metric mask selects no voxel".into()));
    }
    Ok(())
}

/// Masked PSNR in dB of `a` against the reference `b`.
///
/// The peak is the maximum of `b` inside the mask. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Volume, b: &Volume, mask: &Mask) -> Result<f64> {
    check_pair(a, b, mask)?;
    let mut peak = f64::NEG_INFINITY;
    let mut sse = 0.0f64;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        if m {
            peak = peak.max(y as f64);
            let d = x as f64 - y as f64;
            sse += d * d;
            n += 1;
        }
    }
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / n as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// 7x7x7 Gaussian windows.
    #[default]
    Volumetric,
    /// 7x7 Gaussian windows within each x-y slice.
    SliceWise,
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

/// Unnormalised separable Gaussian filter with zero extension.
fn filter(data: &[f64], shape: [usize; 3], axes: &[usize]) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = (taps.len() / 2) as isize;
    let strides = [1, shape[0], shape[0] * shape[1]];
    let mut cur = data.to_vec();
    for &axis in axes {
        let n = shape[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let idx = [x, y, z];
                    let i = idx[axis] as isize;
                    let base = x + shape[0] * (y + shape[1] * z);
                    let mut acc = 0.0;
                    for (k, w) in taps.iter().enumerate() {
                        let j = i + k as isize - r;
                        if j >= 0 && j < n {
                            let off = (j - i) * stride as isize;
                            acc += w * cur[(base as isize + off) as usize];
                        }
                    }
                    next[base] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Masked SSIM of `a` against the reference `b`.
///
/// Local statistics are Gaussian-weighted (sigma 1.5, 7-tap windows) over
/// in-mask voxels only, so voxels outside the mask never influence the score.
/// `C1 = (0.01 D)^2`, `C2 = (0.03 D)^2` with `D` the in-mask dynamic range of `b`.
pub fn ssim(a: &Volume, b: &Volume, mask: &Mask, mode: SsimMode) -> Result<f64> {
    check_pair(a, b, mask)?;
    let shape = a.shape();
    let axes: &[usize] = match mode {
        SsimMode::Volumetric => &[0, 1, 2],
        SsimMode::SliceWise => &[0, 1],
    };
    if axes.iter().any(|&ax| shape[ax] < SSIM_WINDOW) {
        return Err(Error::Shape(format!("volume {shape:?} is smaller than the {SSIM_WINDOW}-voxel SSIM window")));
    }
    let (lo, hi) = b
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| (lo.min(x as f64), hi.max(x as f64)));
    let range = hi - lo;
    let d = if range > 0.0 { range } else { 1.0 };
    let c1 = (SSIM_K1 * d).powi(2);
    let c2 = (SSIM_K2 * d).powi(2);

    let m: Vec<f64> = mask.data().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    let av: Vec<f64> = a.data().iter().zip(&m).map(|(&x, &w)| x as f64 * w).collect();
    let bv: Vec<f64> = b.data().iter().zip(&m).map(|(&x, &w)| x as f64 * w).collect();
    let aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();

    let wsum = filter(&m, shape, axes);
    let [mu_a, mu_b, e_aa, e_bb, e_ab] = [av, bv, aa, bb, ab].map(|v| filter(&v, shape, axes));

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..m.len() {
        if m[i] == 0.0 {
            continue;
        }
        let w = wsum[i];
        let (ma, mb) = (mu_a[i] / w, mu_b[i] / w);
        let va = e_aa[i] / w - ma * ma;
        let vb = e_bb[i] / w - mb * mb;
        let cov = e_ab[i] / w - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointRole {
    Predicted,
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRecord {
    pub frame: usize,
    pub id: u32,
    pub position: Vec3,
    pub role: KeypointRole,
}

/// Percentage of predicted keypoints whose error is strictly below each
/// threshold (mm).
pub fn pck(predicted: &[KeypointRecord], truth: &[KeypointRecord], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if truth.is_empty() {
        return Err(Error::State("no ground-truth keypoints".into()));
    }
    let mut pred = BTreeMap::new();
    for r in predicted {
        if pred.insert((r.frame, r.id), r.position).is_some() {
            return Err(Error::Format(format!("duplicate prediction for frame {}, id {}", r.frame, r.id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut errors = Vec::with_capacity(truth.len());
    let mut missing = Vec::new();
    for t in truth {
        if !seen.insert((t.frame, t.id)) {
            return Err(Error::Format(format!("duplicate ground truth for frame {}, id {}", t.frame, t.id)));
        }
        match pred.get(&(t.frame, t.id)) {
            Some(p) => errors.push((p - t.position).norm()),
            None => missing.push(format!("({}, {})", t.frame, t.id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::State(format!("unmatched keypoints (frame, id): {}", missing.join(" "))));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&s| (s, errors.iter().filter(|&&e| e < s).count() as f64 / n * 100.0))
        .collect())
}

pub fn keypoints_to_csv(records: &[KeypointRecord]) -> String {
    let mut s = String::from("frame,id,x_mm,y_mm,z_mm,role\n");
    for r in records {
        let role = match r.role {
            KeypointRole::Predicted => "predicted",
            KeypointRole::Truth => "truth",
        };
        writeln!(s, "{},{},{},{},{},{}", r.frame, r.id, r.position.x, r.position.y, r.position.z, role).unwrap();
    }
    s
}

pub fn keypoints_from_csv(text: &str) -> Result<Vec<KeypointRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "frame,id,x_mm,y_mm,z_mm,role" => {}
        other => return Err(Error::Format(format!("unexpected keypoint header {other:?}"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Format(format!("keypoint row {}: {what}", n + 2));
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad coordinate"));
        let role = match f[5] {
            "predicted" => KeypointRole::Predicted,
            "truth" | "ground_truth" => KeypointRole::Truth,
            _ => return Err(bad("role must be predicted or truth")),
        };
        out.push(KeypointRecord {
            frame: f[0].parse().map_err(|_| bad("bad frame"))?,
            id: f[1].parse().map_err(|_| bad("bad id"))?,
            position: Vec3::new(num(f[2])?, num(f[3])?, num(f[4])?),
            role,
        });
    }
    Ok(out)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("frame,method,metric,value\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.frame, r.method, r.metric, format_value(r.value)).unwrap();
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("frame,method,metric,value") {
        return Err(Error::Format("unexpected metrics CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("metrics row {} needs 4 fields", n + 2)));
            }
            let value = match f[3] {
                "inf" => f64::INFINITY,
                v => v.parse().map_err(|_| Error::Format(format!("metrics row {}: bad value", n + 2)))?,
            };
            Ok(MetricRow {
                frame: f[0].parse().map_err(|_| Error::Format(format!("metrics row {}: bad frame", n + 2)))?,
                method: f[1].to_string(),
                metric: f[2].to_string(),
                value,
            })
        })
        .collect()
}
