//! Synthetic multi-view dynamic scenes with analytic ground truth.
//!
//! Dataset directory layout:
//!
//! - `cameras.json`: the [`SceneSpec`], the split threshold, and one entry per
//!   frame with its id, timestamp, camera (row-major 4x4 world-to-camera
//!   `view`, `fx`, `fy`, `cx`, `cy`, `width`, `height`, `near`) and the
//!   file names of its images;
//! - `<id>.png`: 8-bit RGB ground truth;
//! - `<id>.f64`: the same image as a raw float dump (see [`crate::render`]);
//! - `particles.bin`: ground-truth kernels at `t = 0` as a particle snapshot.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gaussian::{
    load_snapshot, quat_from_axis_angle, quat_mul, quat_normalize, quat_to_matrix, save_snapshot, GaussianKernel,
    GaussianParticle,
};
use crate::render::{load_raw, render_kernels, save_png, save_raw, Camera, RasterMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Rotation,
    Translation,
    FallingBall,
    Compound,
}

impl std::str::FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(Self::Rotation),
            "translation" => Ok(Self::Translation),
            "falling_ball" => Ok(Self::FallingBall),
            "compound" => Ok(Self::Compound),
            other => Err(contract(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub kind: MotionKind,
    /// Radians per unit time about `axis` through the origin.
    pub angular_velocity: f64,
    pub axis: [f64; 3],
    pub velocity: [f64; 3],
    /// Downward (-z) acceleration of the falling ball.
    pub gravity: f64,
    pub initial_height: f64,
    pub n_gaussians: usize,
    pub n_cameras: usize,
    pub n_timesteps: usize,
    pub resolution: usize,
    /// Focal length in multiples of the image width.
    pub focal_factor: f64,
    pub camera_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: MotionKind::Rotation,
            angular_velocity: 1.0,
            axis: [0.0, 0.0, 1.0],
            velocity: [0.5, 0.0, 0.0],
            gravity: 1.0,
            initial_height: 0.4,
            n_gaussians: 200,
            n_cameras: 12,
            n_timesteps: 21,
            resolution: 64,
            focal_factor: 1.3,
            camera_radius: 3.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `t < threshold` trains.
    Less,
    /// `t <= threshold` trains.
    LessOrEqual,
}

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 0.0) {
        return Err(contract("rotation axis must be non-zero"));
    }
    Ok(v.map(|x| x / n))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 || self.n_cameras == 0 || self.resolution == 0 {
            return Err(contract("scene needs at least one Gaussian, camera and pixel"));
        }
        if self.n_timesteps < 2 {
            return Err(contract("scene needs at least two timesteps"));
        }
        if matches!(self.kind, MotionKind::Rotation | MotionKind::Compound) {
            unit(self.axis)?;
        }
        Ok(())
    }

    /// Rigid motion at time `t`: rotation quaternion and translation.
    fn rigid(&self, t: f64) -> ([f64; 4], [f64; 3]) {
        let no_rot = [1.0, 0.0, 0.0, 0.0];
        let axis = unit(self.axis).unwrap_or([0.0, 0.0, 1.0]);
        match self.kind {
            MotionKind::Rotation => (quat_from_axis_angle(axis, self.angular_velocity * t), [0.0; 3]),
            MotionKind::Translation => (no_rot, self.velocity.map(|v| v * t)),
            MotionKind::FallingBall => (no_rot, [0.0, 0.0, -0.5 * self.gravity * t * t]),
            MotionKind::Compound => (
                quat_from_axis_angle(axis, self.angular_velocity * t),
                self.velocity.map(|v| v * t),
            ),
        }
    }

    /// Analytic position at time `t` of the point that sits at `mu0` at `t = 0`.
    pub fn trajectory(&self, mu0: [f64; 3], t: f64) -> [f64; 3] {
        let (q, d) = self.rigid(t);
        let r = quat_to_matrix(q);
        [0, 1, 2].map(|i| r[i][0] * mu0[0] + r[i][1] * mu0[1] + r[i][2] * mu0[2] + d[i])
    }

    /// Kernel advected to time `t`.
    pub fn advect(&self, k: &GaussianKernel, t: f64) -> GaussianKernel {
        let (q, _) = self.rigid(t);
        GaussianKernel {
            mu: self.trajectory(k.mu, t),
            rot: quat_normalize(quat_mul(q, k.rot)).unwrap_or(k.rot),
            ..k.clone()
        }
    }

    pub fn timestamps(&self) -> Vec<f64> {
        let n = self.n_timesteps;
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    /// Cameras on a sphere around the origin, elevations between -20 and 50
    /// degrees, azimuths by the golden angle.
    pub fn cameras(&self) -> Vec<Camera> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let n = self.n_cameras;
        (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                let elev = (-20.0 + 70.0 * frac).to_radians();
                let az = golden * i as f64;
                let r = self.camera_radius;
                let eye = [r * elev.cos() * az.cos(), r * elev.cos() * az.sin(), r * elev.sin()];
                let f = self.focal_factor * self.resolution as f64;
                Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], f, self.resolution, self.resolution)
            })
            .collect()
    }

    /// Ground-truth kernels at `t = 0`.
    pub fn template(&self, seed: u64) -> Vec<GaussianKernel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bands = [[0.9, 0.2, 0.15], [0.95, 0.8, 0.2], [0.2, 0.75, 0.3], [0.2, 0.4, 0.95]];
        let ball = self.kind == MotionKind::FallingBall;
        let (half, volume) = if ball {
            ([0.3; 3], 4.0 / 3.0 * std::f64::consts::PI * 0.027)
        } else {
            ([0.8, 0.25, 0.25], 1.6 * 0.5 * 0.5)
        };
        let spacing = (volume / self.n_gaussians as f64).cbrt();
        let mut out = Vec::with_capacity(self.n_gaussians);
        while out.len() < self.n_gaussians {
            let p = half.map(|h| rng.random_range(-h..h));
            if ball && p.iter().map(|v| v * v).sum::<f64>() > 0.09 {
                continue;
            }
            let band = if ball {
                ((p[2] / 0.3 + 1.0) * 2.0).clamp(0.0, 3.999) as usize
            } else {
                ((p[0] / 0.8 + 1.0) * 2.0).clamp(0.0, 3.999) as usize
            };
            let q = quat_normalize([0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0))).unwrap_or([1.0, 0.0, 0.0, 0.0]);
            let scale = [0, 1, 2].map(|_| spacing * rng.random_range(0.45..0.75));
            let mu = if ball { [p[0], p[1], p[2] + self.initial_height] } else { p };
            out.push(GaussianKernel {
                mu,
                rot: q,
                scale,
                opacity: 0.9,
                color: bands[band],
            });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub t: f64,
    pub camera_index: usize,
    pub camera: Camera,
    pub png: String,
    pub raw: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    spec: SceneSpec,
    seed: u64,
    split_threshold: f64,
    split_rule: SplitRule,
    frames: Vec<FrameRecord>,
}

/// Frames with their ground-truth images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub split_threshold: f64,
    pub split_rule: SplitRule,
    pub frames: Vec<FrameRecord>,
    pub images: Vec<Tensor>,
    /// Ground-truth kernels at `t = 0`.
    pub particles: Vec<GaussianKernel>,
}

/// Renders every (camera, timestep) frame of the scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let particles = spec.template(seed);
    let cams = spec.cameras();
    let mut frames = Vec::new();
    let mut images = Vec::new();
    for (ti, &t) in spec.timestamps().iter().enumerate() {
        let moved: Vec<GaussianKernel> = particles.iter().map(|k| spec.advect(k, t)).collect();
        for (ci, cam) in cams.iter().enumerate() {
            let id = format!("c{ci:02}_t{ti:03}");
            images.push(render_kernels(&moved, cam, RasterMode::Tiled));
            frames.push(FrameRecord {
                png: format!("{id}.png"),
                raw: format!("{id}.f64"),
                id,
                t,
                camera_index: ci,
                camera: cam.clone(),
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        split_threshold: 0.75,
        split_rule: SplitRule::Less,
        frames,
        images,
        particles,
    })
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (f, img) in self.frames.iter().zip(&self.images) {
            save_png(img, dir.join(&f.png))?;
            save_raw(img, dir.join(&f.raw))?;
        }
        let index = DatasetIndex {
            spec: self.spec.clone(),
            seed: self.seed,
            split_threshold: self.split_threshold,
            split_rule: self.split_rule,
            frames: self.frames.clone(),
        };
        std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&index)?)?;
        let global: Arc<[f64]> = Arc::from(Vec::new());
        let parts: Vec<GaussianParticle> = self
            .particles
            .iter()
            .map(|k| GaussianParticle {
                kernel: k.clone(),
                latent_local: Vec::new(),
                latent_global: global.clone(),
            })
            .collect();
        save_snapshot(&parts, dir.join("particles.bin"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("cameras.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        let mut images = Vec::with_capacity(index.frames.len());
        for f in &index.frames {
            f.camera.validate()?;
            if !(0.0..=1.0).contains(&f.t) {
                return Err(contract(format!("frame {} has timestamp {} outside [0, 1]", f.id, f.t)));
            }
            let img = load_raw(dir.join(&f.raw))
                .map_err(|e| contract(format!("frame {} is missing or unreadable: {e}", f.id)))?;
            if img.shape() != [f.camera.height, f.camera.width, 3] {
                return Err(contract(format!("frame {} image does not match its camera", f.id)));
            }
            images.push(img);
        }
        let particles = match load_snapshot(dir.join("particles.bin")) {
            Ok(p) => p.into_iter().map(|p| p.kernel).collect(),
            Err(Error::Io(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            spec: index.spec,
            seed: index.seed,
            split_threshold: index.split_threshold,
            split_rule: index.split_rule,
            frames: index.frames,
            images,
            particles,
        })
    }

    /// Frame indices of the earliest timestamp.
    pub fn first_bucket(&self) -> Vec<usize> {
        let t0 = self.frames.iter().map(|f| f.t).fold(f64::INFINITY, f64::min);
        (0..self.frames.len()).filter(|&i| self.frames[i].t == t0).collect()
    }

    /// `(train, extrapolation)` frame indices under the dataset's own split.
    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        split_dataset(self, self.split_threshold, self.split_rule)
    }
}

/// Partitions frame indices by timestamp.
pub fn split_dataset(ds: &Dataset, threshold: f64, rule: SplitRule) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(contract(format!("split threshold must lie in (0, 1), got {threshold}")));
    }
    let (train, extra): (Vec<usize>, Vec<usize>) = (0..ds.frames.len()).partition(|&i| {
        let t = ds.frames[i].t;
        match rule {
            SplitRule::Less => t < threshold,
            SplitRule::LessOrEqual => t <= threshold,
        }
    });
    if train.is_empty() || extra.is_empty() {
        return Err(contract(format!(
            "split at {threshold} leaves an empty side ({} train, {} extrapolation)",
            train.len(),
            extra.len()
        )));
    }
    Ok((train, extra))
}

/// Mean distance between predicted positions and the analytic trajectory of
/// the canonical positions.
pub fn center_error(spec: &SceneSpec, canonical: &[[f64; 3]], predicted: &[[f64; 3]], t: f64) -> Result<f64> {
    if canonical.len() != predicted.len() || canonical.is_empty() {
        return Err(contract("center error needs matching, non-empty position lists"));
    }
    let total: f64 = canonical
        .iter()
        .zip(predicted)
        .map(|(c, p)| crate::gaussian::dist(&spec.trajectory(*c, t), p))
        .sum();
    Ok(total / canonical.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn trajectory_examples() {
        let rot = SceneSpec {
            angular_velocity: 2.0 * std::f64::consts::PI * 0.5,
            ..Default::default()
        };
        assert!(close(rot.trajectory([1.0, 0.0, 0.3], 0.5), [0.0, 1.0, 0.3], 1e-12));
        let tr = SceneSpec {
            kind: MotionKind::Translation,
            velocity: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        assert!(close(tr.trajectory([0.1, 0.2, 0.3], 0.25), [0.35, 0.2, 0.3], 1e-12));
        let ball = SceneSpec {
            kind: MotionKind::FallingBall,
            gravity: 9.8,
            ..Default::default()
        };
        for t in [0.0, 0.3, 1.0] {
            let p = ball.trajectory([0.0, 0.0, 2.0], t);
            assert!((2.0 - p[2] - 0.5 * 9.8 * t * t).abs() < 1e-12);
        }
    }

    fn tiny() -> SceneSpec {
        SceneSpec {
            n_gaussians: 30,
            n_cameras: 3,
            n_timesteps: 5,
            resolution: 16,
            ..Default::default()
        }
    }

    #[test]
    fn generated_frames_agree_with_trajectory() {
        let spec = tiny();
        let ds = generate_scene(&spec, 3).unwrap();
        assert_eq!(ds.frames.len(), 15);
        for (f, img) in ds.frames.iter().zip(&ds.images) {
            let moved: Vec<GaussianKernel> = ds
                .particles
                .iter()
                .map(|k| GaussianKernel {
                    mu: spec.trajectory(k.mu, f.t),
                    ..spec.advect(k, f.t)
                })
                .collect();
            assert_eq!(&render_kernels(&moved, &f.camera, RasterMode::Reference), img);
        }
        assert!(ds.images[0].max_abs() > 0.1, "object should be visible");
    }

    #[test]
    fn dataset_round_trip_is_exact_and_deterministic() {
        let spec = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_scene(&spec, 5).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let dir2 = tempfile::tempdir().unwrap();
        generate_scene(&spec, 5).unwrap().save(dir2.path()).unwrap();
        for f in ["cameras.json", "particles.bin", "c01_t002.png", "c01_t002.f64"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
        std::fs::remove_file(dir.path().join("c00_t001.f64")).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("c00_t001"), "{err}");
    }

    #[test]
    fn split_examples() {
        let spec = SceneSpec {
            n_cameras: 1,
            n_timesteps: 21,
            resolution: 4,
            n_gaussians: 1,
            ..Default::default()
        };
        let ds = generate_scene(&spec, 0).unwrap();
        let (tr, ex) = split_dataset(&ds, 0.75, SplitRule::Less).unwrap();
        assert_eq!((tr.len(), ex.len()), (15, 6));
        assert!(ex.iter().all(|&i| ds.frames[i].t >= 0.75));
        let (tr, ex) = split_dataset(&ds, 0.75, SplitRule::LessOrEqual).unwrap();
        assert_eq!((tr.len(), ex.len()), (16, 5));
        let (tr, ex) = split_dataset(&ds, 0.9, SplitRule::LessOrEqual).unwrap();
        assert_eq!((tr.len(), ex.len()), (19, 2));
        assert!(split_dataset(&ds, 1.0, SplitRule::Less).is_err());
        assert!(split_dataset(&ds, 0.01, SplitRule::Less).is_ok());
        let mut all: Vec<usize> = tr.into_iter().chain(ex).collect();
        all.sort();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert_eq!(ds.first_bucket(), vec![0]);
    }

    #[test]
    fn center_error_of_exact_prediction_is_zero() {
        let spec = SceneSpec::default();
        let canon = [[0.5, 0.1, 0.0], [-0.3, 0.2, 0.1]];
        let pred: Vec<[f64; 3]> = canon.iter().map(|c| spec.trajectory(*c, 0.9)).collect();
        assert!(center_error(&spec, &canon, &pred, 0.9).unwrap() < 1e-15);
        let still = center_error(&spec, &canon, &canon, 0.9).unwrap();
        assert!(still > 0.1);
    }
}
