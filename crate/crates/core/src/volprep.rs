//! CT volume preprocessing: isotropic cubic B-spline resampling, HU
//! clipping and per-volume z-scoring, plus the raw `RVL1` volume format.
//!
//! `RVL1` layout (all little-endian): magic `RVL1`, `u32` nx, ny, nz,
//! `f32` sx, sy, sz (mm), then nx·ny·nz `f32` voxels with x fastest.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVL1";
pub const TARGET_SPACING: [f64; 3] = [2.0, 2.0, 2.0];
pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 800.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero dimension in {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidVolume("dimensions overflow".into()))?;
        if voxels.len() != count {
            return Err(Error::InvalidVolume(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("voxel {i} is not finite")));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }
}

pub fn write_rvol<W: Write>(mut w: W, v: &Volume) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(28 + 4 * v.voxels.len());
    buf.extend_from_slice(MAGIC);
    for d in v.dims {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for s in v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_rvol<R: Read>(mut r: R) -> Result<Volume> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::parse("rvol", e))?;
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(Error::parse("rvol", "missing RVL1 header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let dims = [0, 1, 2].map(|k| u32::from_le_bytes(word(4 + 4 * k)) as usize);
    let spacing = [0, 1, 2].map(|k| f32::from_le_bytes(word(16 + 4 * k)));
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = count.and_then(|c| c.checked_mul(4)).and_then(|c| c.checked_add(28));
    if expected != Some(bytes.len()) {
        return Err(Error::parse(
            "rvol",
            format!("{} bytes do not match dims {dims:?}", bytes.len()),
        ));
    }
    let voxels = bytes[28..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, voxels)
}

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2
const HORIZON_TOL: f64 = 1e-14;

/// In-place conversion of samples to cubic B-spline coefficients with
/// mirror (whole-sample symmetric) boundaries.
fn prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= gain;
    }

    let horizon = (HORIZON_TOL.ln() / z.abs().ln()).ceil() as usize;
    c[0] = if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for v in &c[1..horizon] {
            sum += zn * v;
            zn *= z;
        }
        sum
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n = z2n * z2n * iz;
        for v in &c[1..n - 1] {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    };
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}

fn bspline3(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        2.0 / 3.0 - t * t + 0.5 * t * t * t
    } else if t < 2.0 {
        let u = 2.0 - t;
        u * u * u / 6.0
    } else {
        0.0
    }
}

fn mirror(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Value of the spline with coefficients `c` at continuous index `x`.
fn interpolate(c: &[f64], x: f64) -> f64 {
    let base = x.floor() as i64;
    (base - 1..=base + 2)
        .map(|k| c[mirror(k, c.len())] * bspline3(x - k as f64))
        .sum()
}

/// Resamples one axis of `data` (laid out x-fastest with `dims`) to `n_out`
/// samples. Output sample `k` sits at input index `(k + ½)·step − ½`, so
/// voxel centers of the two grids share the same physical extent center.
fn resample_axis(data: &[f64], dims: [usize; 3], axis: usize, n_out: usize, step: f64) -> Vec<f64> {
    let n_in = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let stride_in = dims[..axis].iter().product::<usize>();
    let stride_out = out_dims[..axis].iter().product::<usize>();
    let lines: usize = dims.iter().product::<usize>() / n_in;

    let positions: Vec<f64> = (0..n_out).map(|k| (k as f64 + 0.5) * step - 0.5).collect();
    // Line `l` is identified by its coordinates on the other two axes.
    let resampled: Vec<Vec<f64>> = (0..lines)
        .into_par_iter()
        .map(|l| {
            let (lo, hi) = (l % stride_in, l / stride_in);
            let mut line: Vec<f64> = (0..n_in).map(|i| data[lo + stride_in * (i + n_in * hi)]).collect();
            prefilter(&mut line);
            positions.iter().map(|&x| interpolate(&line, x)).collect()
        })
        .collect();

    let mut out = vec![0.0; out_dims.iter().product()];
    for (l, line) in resampled.into_iter().enumerate() {
        let (lo, hi) = (l % stride_in, l / stride_in);
        for (k, v) in line.into_iter().enumerate() {
            out[lo + stride_out * (k + n_out * hi)] = v;
        }
    }
    out
}

/// Output extent along one axis: `round_half_up(n·s / target)`, at least 1.
pub fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target + 0.5).floor() as usize).max(1)
}

/// Separable cubic B-spline resampling to `target` spacing (mm).
pub fn resample_to(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidVolume(format!("non-positive target spacing {target:?}")));
    }
    let mut data: Vec<f64> = v.voxels.iter().map(|&x| f64::from(x)).collect();
    let mut dims = v.dims;
    for axis in 0..3 {
        let s = f64::from(v.spacing[axis]);
        let n_out = resampled_len(dims[axis], s, target[axis]);
        data = resample_axis(&data, dims, axis, n_out, target[axis] / s);
        dims[axis] = n_out;
    }
    Volume::new(
        dims,
        target.map(|t| t as f32),
        data.into_iter().map(|x| x as f32).collect(),
    )
}

pub fn resample(v: &Volume) -> Volume {
    resample_to(v, TARGET_SPACING).expect("resampling a valid volume yields a valid volume")
}

/// Clamps to [−1000, 800] HU, then z-scores with the clipped volume's mean
/// and population standard deviation. Volumes with std below 1e-8 become
/// all zeros.
pub fn clip_normalize(v: &Volume) -> Volume {
    let clipped: Vec<f64> = v.voxels.iter().map(|&x| f64::from(x.clamp(HU_MIN, HU_MAX))).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let voxels = if std < 1e-8 {
        vec![0.0; clipped.len()]
    } else {
        clipped.iter().map(|x| ((x - mean) / std) as f32).collect()
    };
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        voxels,
    }
}

pub fn preprocess(v: &Volume) -> Volume {
    clip_normalize(&resample(v))
}
