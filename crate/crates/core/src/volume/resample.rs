use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::Volume;
use crate::error::{Error, Result};
use crate::motion::RigidTransform;

const SNAP: f64 = 1e-9;

/// Precomputed inverse mapping from output voxel indices to input indices.
struct InverseMap {
    // continuous input index = base + x * step_x + y * step_y + z * step_z
    base: Vector3<f64>,
    step_x: Vector3<f64>,
    step_y: Vector3<f64>,
    step_z: Vector3<f64>,
}

impl InverseMap {
    fn new(v: &Volume, transform: &RigidTransform) -> Result<Self> {
        let m = transform.rotation;
        if !m.iter().all(|x| x.is_finite()) || m.determinant().abs() < 1e-12 {
            return Err(Error::SingularTransform);
        }
        let inv = m.try_inverse().ok_or(Error::SingularTransform)?;
        let spacing = Vector3::from(v.spacing().map(|s| s as f64));
        let origin = Vector3::from(v.origin().map(|o| o as f64));
        let to_index = Matrix3::from_diagonal(&spacing.map(|s| 1.0 / s));
        // index(q) = D^-1 (inv (origin + S i - t) - origin)
        let a = to_index * inv * Matrix3::from_diagonal(&spacing);
        let base = to_index * (inv * (origin - transform.translation) - origin);
        Ok(Self { base, step_x: a.column(0).into(), step_y: a.column(1).into(), step_z: a.column(2).into() })
    }
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

#[inline]
fn trilinear(v: &Volume, c: Vector3<f64>) -> f32 {
    let [nx, ny, nz] = v.shape();
    let (cx, cy, cz) = (snap(c.x), snap(c.y), snap(c.z));
    if cx <= -1.0 || cy <= -1.0 || cz <= -1.0 || cx >= nx as f64 || cy >= ny as f64 || cz >= nz as f64 {
        return 0.0;
    }
    let (x0, y0, z0) = (cx.floor(), cy.floor(), cz.floor());
    let (fx, fy, fz) = (cx - x0, cy - y0, cz - z0);
    let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
    let fetch = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            v.get(x as usize, y as usize, z as usize) as f64
        }
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc as f32
}

fn plane_with(v: &Volume, map: &InverseMap, z: usize) -> Vec<f32> {
    let [nx, ny, _] = v.shape();
    let mut out = Vec::with_capacity(nx * ny);
    let pz = map.base + map.step_z * z as f64;
    for y in 0..ny {
        let py = pz + map.step_y * y as f64;
        for x in 0..nx {
            out.push(trilinear(v, py + map.step_x * x as f64));
        }
    }
    out
}

/// One output x-y plane (slice `z`) of [`resample_affine`].
pub fn resample_plane(v: &Volume, transform: &RigidTransform, z: usize) -> Result<Vec<f32>> {
    if z >= v.shape()[2] {
        return Err(Error::Shape(format!("slice {z} outside volume of depth {}", v.shape()[2])));
    }
    let map = InverseMap::new(v, transform)?;
    Ok(plane_with(v, &map, z))
}

/// `out(p) = v(T^-1 p)` on the input grid, trilinear, zero outside the FOV.
pub fn resample_affine(v: &Volume, transform: &RigidTransform) -> Result<Volume> {
    let map = InverseMap::new(v, transform)?;
    let planes: Vec<Vec<f32>> = (0..v.shape()[2]).into_par_iter().map(|z| plane_with(v, &map, z)).collect();
    v.with_data(planes.concat())
}
