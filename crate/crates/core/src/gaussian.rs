//! Gaussian kernels and latent-augmented Gaussian particles.
//!
//! The optimizer works on unconstrained storage ([`KernelParams`]): raw
//! quaternions, log-scales and pre-sigmoid opacities. [`GaussianKernel`] is
//! the constrained view handed to the renderer and to file formats.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{sigmoid, write_f64s, Reader};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    pub mu: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rot: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Unconstrained storage for one kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawKernel {
    pub mu: [f64; 3],
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl GaussianKernel {
    pub fn covariance(&self) -> Mat3 {
        build_covariance(self.rot, self.scale)
    }

    /// Inverse of [`normalize_kernel`]; opacity is clamped away from {0, 1}.
    pub fn to_raw(&self) -> RawKernel {
        let o = self.opacity.clamp(1e-12, 1.0 - 1e-12);
        RawKernel {
            mu: self.mu,
            rot: self.rot,
            log_scale: self.scale.map(f64::ln),
            opacity_logit: (o / (1.0 - o)).ln(),
            color: self.color,
        }
    }
}

pub fn quat_normalize(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(contract(format!("quaternion {q:?} cannot be normalized")));
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Quaternion for a rotation of `angle` radians about the unit `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let (s, c) = (angle / 2.0).sin_cos();
    [c, axis[0] * s, axis[1] * s, axis[2] * s]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `R diag(s) diag(s) R^T` for a unit quaternion `rot`.
pub fn build_covariance(rot: [f64; 4], scale: [f64; 3]) -> Mat3 {
    let r = quat_to_matrix(rot);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum();
        }
    }
    out
}

pub fn normalize_kernel(raw: &RawKernel) -> Result<GaussianKernel> {
    Ok(GaussianKernel {
        mu: raw.mu,
        rot: quat_normalize(raw.rot)?,
        scale: raw.log_scale.map(f64::exp),
        opacity: sigmoid(raw.opacity_logit),
        color: raw.color,
    })
}

/// A kernel paired with its latent dynamics state.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParticle {
    pub kernel: GaussianKernel,
    pub latent_local: Vec<f64>,
    /// Shared by every particle of one system.
    pub latent_global: Arc<[f64]>,
}

/// Structure-of-arrays kernel storage in unconstrained form.
///
/// Shapes: `mu [N,3]`, `rot [N,4]`, `log_scale [N,3]`, `opacity_logit [N,1]`,
/// `color [N,3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub mu: Tensor,
    pub rot: Tensor,
    pub log_scale: Tensor,
    pub opacity_logit: Tensor,
    pub color: Tensor,
}

pub const KERNEL_FIELDS: [&str; 5] = ["mu", "rot", "log_scale", "opacity_logit", "color"];

impl KernelParams {
    pub fn empty() -> Self {
        Self::from_raw(&[])
    }

    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_raw(raw: &[RawKernel]) -> Self {
        let n = raw.len();
        let flat = |f: &dyn Fn(&RawKernel) -> Vec<f64>, w: usize| {
            Tensor::new(&[n, w], raw.iter().flat_map(f).collect())
        };
        Self {
            mu: flat(&|k| k.mu.to_vec(), 3),
            rot: flat(&|k| k.rot.to_vec(), 4),
            log_scale: flat(&|k| k.log_scale.to_vec(), 3),
            opacity_logit: flat(&|k| vec![k.opacity_logit], 1),
            color: flat(&|k| k.color.to_vec(), 3),
        }
    }

    pub fn from_kernels(kernels: &[GaussianKernel]) -> Self {
        Self::from_raw(&kernels.iter().map(|k| k.to_raw()).collect::<Vec<_>>())
    }

    pub fn raw(&self, i: usize) -> RawKernel {
        let r = |t: &Tensor| t.row_slice(i).to_vec();
        RawKernel {
            mu: r(&self.mu).try_into().unwrap(),
            rot: r(&self.rot).try_into().unwrap(),
            log_scale: r(&self.log_scale).try_into().unwrap(),
            opacity_logit: self.opacity_logit.data()[i],
            color: r(&self.color).try_into().unwrap(),
        }
    }

    pub fn kernels(&self) -> Result<Vec<GaussianKernel>> {
        (0..self.len()).map(|i| normalize_kernel(&self.raw(i))).collect()
    }

    pub fn field(&self, name: &str) -> &Tensor {
        match name {
            "mu" => &self.mu,
            "rot" => &self.rot,
            "log_scale" => &self.log_scale,
            "opacity_logit" => &self.opacity_logit,
            "color" => &self.color,
            _ => panic!("unknown kernel field {name}"),
        }
    }

    pub fn field_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "mu" => &mut self.mu,
            "rot" => &mut self.rot,
            "log_scale" => &mut self.log_scale,
            "opacity_logit" => &mut self.opacity_logit,
            "color" => &mut self.color,
            _ => panic!("unknown kernel field {name}"),
        }
    }

    /// New set made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self::from_raw(&rows.iter().map(|&i| self.raw(i)).collect::<Vec<_>>())
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|i| self.mu.row_slice(i).try_into().unwrap())
            .collect()
    }
}

/// Mean distance to the `k` nearest other points (brute force), per point.
pub fn mean_knn_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            let k = k.min(d.len());
            if k == 0 {
                0.1
            } else {
                d[..k].iter().sum::<f64>() / k as f64
            }
        })
        .collect()
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Isotropic kernels at `points`, sized by the mean distance to 3 neighbours.
pub fn init_kernels(points: &[[f64; 3]], colors: &[[f64; 3]], opacity: f64) -> KernelParams {
    let d = mean_knn_distance(points, 3);
    let raw: Vec<RawKernel> = points
        .iter()
        .zip(colors)
        .zip(&d)
        .map(|((&mu, &color), &d)| {
            GaussianKernel {
                mu,
                rot: [1.0, 0.0, 0.0, 0.0],
                scale: [d.max(1e-4); 3],
                opacity,
                color,
            }
            .to_raw()
        })
        .collect();
    KernelParams::from_raw(&raw)
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"PDSPART\0";
const SNAPSHOT_VERSION: u32 = 1;

/// Writes a particle-set snapshot.
///
/// ```text
/// magic "PDSPART\0", version u32 = 1, count u64, latent_dim u32, global_dim u32
/// global feature f64 * global_dim
/// per particle: mu f64*3, rot f64*4, scale f64*3, opacity f64, color f64*3,
///               latent_local f64*latent_dim
/// ```
pub fn write_snapshot(particles: &[GaussianParticle], mut w: impl Write) -> Result<()> {
    let latent_dim = particles.first().map_or(0, |p| p.latent_local.len());
    let global: &[f64] = particles.first().map_or(&[], |p| &p.latent_global);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(particles.len() as u64).to_le_bytes())?;
    w.write_all(&(latent_dim as u32).to_le_bytes())?;
    w.write_all(&(global.len() as u32).to_le_bytes())?;
    write_f64s(&mut w, global)?;
    for p in particles {
        if p.latent_local.len() != latent_dim {
            return Err(contract("particles disagree on latent dimension"));
        }
        let k = &p.kernel;
        let mut rec = Vec::with_capacity(14 + latent_dim);
        rec.extend_from_slice(&k.mu);
        rec.extend_from_slice(&k.rot);
        rec.extend_from_slice(&k.scale);
        rec.push(k.opacity);
        rec.extend_from_slice(&k.color);
        rec.extend_from_slice(&p.latent_local);
        write_f64s(&mut w, &rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(r: impl Read) -> Result<Vec<GaussianParticle>> {
    let mut r = Reader(r);
    if r.bytes(8)? != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a particle snapshot (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let count = r.u64()? as usize;
    let latent_dim = r.u32()? as usize;
    let global_dim = r.u32()? as usize;
    let global: Arc<[f64]> = r.f64s(global_dim)?.into();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = r.f64s(14 + latent_dim)?;
        out.push(GaussianParticle {
            kernel: GaussianKernel {
                mu: v[0..3].try_into().unwrap(),
                rot: v[3..7].try_into().unwrap(),
                scale: v[7..10].try_into().unwrap(),
                opacity: v[10],
                color: v[11..14].try_into().unwrap(),
            },
            latent_local: v[14..].to_vec(),
            latent_global: global.clone(),
        });
    }
    Ok(out)
}

pub fn save_snapshot(particles: &[GaussianParticle], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_snapshot(particles, std::io::BufWriter::new(f))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Vec<GaussianParticle>> {
    read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
}
