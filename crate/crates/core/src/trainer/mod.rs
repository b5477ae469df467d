//! Warm-up, joint optimization, densification and checkpoints.

mod config;
mod densify;
mod model;

pub use config::{Ablation, AblationAxis, DensifyConfig, LearningRates, TrainConfig};
pub use densify::{densify_prune, DensifyOutcome, GradStats};
pub use model::{bind_kernels, kernel_var, Model, HASH_TABLE};

pub use crate::metrics::{compute_loss, dssim};

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Checkpoint, Graph};
use crate::error::{contract, Error, Result};
use crate::gaussian::{init_kernels, KernelParams, KERNEL_FIELDS};
use crate::latent::{regroup_schedule, Aabb, Grouping, RegroupEvent};
use crate::metrics::loss_graph;
use crate::render::{render_graph, Camera};
use crate::scene::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub particles: usize,
}

pub const LOG_HEADER: &str = "step,phase,loss,l1,dssim,particles";

impl LogRow {
    pub fn csv(&self) -> String {
        let phase = match self.phase {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        };
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{}",
            self.step, phase, self.loss, self.l1, self.dssim, self.particles
        )
    }
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step random stream, independent of how the run was resumed.
fn step_rng(seed: u64, step: usize, salt: u64) -> ChaCha8Rng {
    let mut z = seed ^ salt.rotate_left(17) ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Kernels carved from the silhouettes of the given views: random points in
/// the volume seen by every view, kept where every view shows foreground.
pub fn carve_init(ds: &Dataset, frames: &[usize], cfg: &TrainConfig) -> Result<KernelParams> {
    if frames.is_empty() {
        return Err(contract("no views to initialize from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696e_6974);
    let cam0 = &ds.frames[frames[0]].camera;
    let d = cam0.position().iter().map(|v| v * v).sum::<f64>().sqrt();
    let half = d * (cam0.width.max(cam0.height) as f64 / 2.0) / cam0.fx.min(cam0.fy);
    let pixel = |cam: &Camera, img: &Tensor, p: [f64; 3]| -> Option<[f64; 3]> {
        let c = cam.to_camera(p);
        if c[2] <= cam.near {
            return None;
        }
        let x = (cam.fx * c[0] / c[2] + cam.cx).round();
        let y = (cam.fy * c[1] / c[2] + cam.cy).round();
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            return None;
        }
        let i = (y as usize * cam.width + x as usize) * 3;
        Some([img.data()[i], img.data()[i + 1], img.data()[i + 2]])
    };
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..400 * cfg.init_points.max(1) {
        if points.len() >= cfg.init_points {
            break;
        }
        let p = [0, 1, 2].map(|_| rng.random_range(-half..half));
        let mut sum = [0.0; 3];
        let mut ok = true;
        for &f in frames {
            match pixel(&ds.frames[f].camera, &ds.images[f], p) {
                Some(c) if c.iter().cloned().fold(0.0, f64::max) > 0.05 => {
                    for k in 0..3 {
                        sum[k] += c[k];
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            points.push(p);
            colors.push(sum.map(|s| s / frames.len() as f64));
        }
    }
    if points.len() < 4 {
        // nothing in the views: start from a sparse random cloud
        points = (0..cfg.init_points.max(4))
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-half..half)))
            .collect();
        colors = vec![[0.5; 3]; points.len()];
    }
    Ok(init_kernels(&points, &colors, cfg.init_opacity))
}

/// The full training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub step: usize,
    pub phase: Phase,
    pub log: Vec<LogRow>,
    pub scene_extent: f64,
    adam: IndexMap<String, AdamState>,
    stats: GradStats,
}

const KERNEL_PREFIX: &str = "kernel.";

impl Trainer {
    /// Fresh trainer with kernels carved from the dataset's earliest views.
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let bucket = ds.first_bucket();
        if bucket.is_empty() {
            return Err(contract("dataset has no frames"));
        }
        let kernels = carve_init(ds, &bucket, &cfg)?;
        Ok(Self::with_kernels(cfg, kernels, scene_extent(ds)))
    }

    pub fn with_kernels(cfg: TrainConfig, kernels: KernelParams, scene_extent: f64) -> Self {
        let mut adam = IndexMap::new();
        for f in KERNEL_FIELDS {
            adam.insert(format!("{KERNEL_PREFIX}{f}"), AdamState::new(kernels.field(f).shape(), 0.0));
        }
        let stats = GradStats::new(kernels.len());
        Self {
            model: Model::new(cfg, kernels),
            step: 0,
            phase: Phase::Warmup,
            log: Vec::new(),
            scene_extent,
            adam,
            stats,
        }
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    fn lr_for(&self, name: &str) -> f64 {
        let lr = &self.cfg().lr;
        match name.strip_prefix(KERNEL_PREFIX) {
            Some("mu") => lr.position_at(self.step, self.cfg().total_steps, self.scene_extent),
            Some("rot") => lr.rotation,
            Some("log_scale") => lr.scale,
            Some("opacity_logit") => lr.opacity,
            Some("color") => lr.color,
            Some(_) => unreachable!(),
            None if name.starts_with("ode.") => lr.ode,
            None => lr.network,
        }
    }

    /// Optimizes the canonical kernels alone against the earliest views.
    pub fn warmup(&mut self, ds: &Dataset, steps: usize) -> Result<()> {
        let bucket = ds.first_bucket();
        if bucket.is_empty() {
            return Err(contract("warm-up needs at least one view in the first timestamp bucket"));
        }
        if self.phase != Phase::Warmup {
            return Err(contract("warm-up runs before joint training"));
        }
        for _ in 0..steps {
            let pick = step_rng(self.cfg().seed, self.step, 1).random_range(0..bucket.len());
            self.train_step(ds, bucket[pick])?;
        }
        Ok(())
    }

    /// Switches to joint training: creates networks and groups particles.
    pub fn begin_joint(&mut self) -> Result<()> {
        if self.phase == Phase::Joint {
            return Ok(());
        }
        self.model.init_dynamics()?;
        for (name, t) in &self.model.nets.tensors {
            self.adam.insert(name.clone(), AdamState::new(t.shape(), 0.0));
        }
        self.phase = Phase::Joint;
        Ok(())
    }

    /// Copy of a warmed-up trainer with a different ablation setting.
    pub fn fork(&self, ablation: Ablation) -> Result<Self> {
        if self.phase != Phase::Warmup {
            return Err(contract("only warm-up state can be forked"));
        }
        let mut t = self.clone();
        t.model.cfg.ablation = ablation;
        Ok(t)
    }

    /// One optimization step on frame `frame` of `ds`; returns the loss.
    pub fn train_step(&mut self, ds: &Dataset, frame: usize) -> Result<f64> {
        let rec = ds.frames.get(frame).ok_or_else(|| contract(format!("frame {frame} out of range")))?;
        let gt = &ds.images[frame];
        if self.model.kernels.is_empty() {
            return Err(contract("no particles left to optimize"));
        }
        let lambda = self.cfg().lambda;
        let mut g = Graph::new();
        let kv = bind_kernels(&mut g, &self.model.kernels, true);
        let nb = self.model.nets.bind(&mut g);
        let deformed = self.model.deform_graph(&mut g, &kv, &nb, rec.t)?;
        let img = render_graph(&mut g, &deformed, &rec.camera, self.cfg().raster);
        let gtv = g.constant(gt.clone());
        let (loss, l1, ds_node) = loss_graph(&mut g, img, gtv, lambda)?;
        let loss_v = g.value(loss).item();
        if !loss_v.is_finite() {
            return Err(Error::NumericStage {
                stage: "loss".into(),
                detail: format!("non-finite loss {loss_v} at step {}", self.step),
            });
        }
        let grads = g.backward(loss)?;

        let mut updates: Vec<(String, Tensor)> = KERNEL_FIELDS
            .iter()
            .map(|f| (format!("{KERNEL_PREFIX}{f}"), grads.get(kernel_var(&kv, f))))
            .collect();
        updates.extend(nb.grads(&grads));
        for (name, grad) in &updates {
            let lr = self.lr_for(name);
            let state = self.adam.get_mut(name).expect("adam state per parameter");
            state.lr = lr;
            let param = match name.strip_prefix(KERNEL_PREFIX) {
                Some(f) => self.model.kernels.field_mut(f),
                None => self.model.nets.get_mut(name),
            };
            adam_step(param, grad, state)?;
        }
        // colours stay displayable so clamping in the deformation is inert
        for c in self.model.kernels.color.data_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        self.stats.record(&updates[0].1);
        self.step += 1;

        if self.step % self.cfg().log_every == 0 || self.step == 1 {
            self.log.push(LogRow {
                step: self.step,
                phase: self.phase,
                loss: loss_v,
                l1: g.value(l1).item(),
                dssim: g.value(ds_node).item(),
                particles: self.model.kernels.len(),
            });
        }
        self.after_step()?;
        Ok(loss_v)
    }

    fn after_step(&mut self) -> Result<()> {
        let d = &self.cfg().densify;
        let mut events = Vec::new();
        if self.step >= d.start && self.step <= self.cfg().densify_until() && self.step % d.interval == 0 {
            let mut rng = step_rng(self.cfg().seed, self.step, 2);
            let out = densify_prune(&self.model.kernels, &self.stats, d, self.scene_extent, &mut rng);
            if out.kernels.is_empty() {
                return Err(contract("densification removed every particle"));
            }
            if out.changed() {
                for f in KERNEL_FIELDS {
                    self.adam[&format!("{KERNEL_PREFIX}{f}")].remap_rows(&out.sources);
                }
                self.model.kernels = out.kernels.clone();
                events = out.events();
            }
            self.stats = GradStats::new(self.model.kernels.len());
        }
        events.push(RegroupEvent::Iteration(self.step as u64));
        if self.phase == Phase::Joint && events.into_iter().any(regroup_schedule) {
            self.model.regroup()?;
        }
        Ok(())
    }

    /// Warm-up, then joint training on `train` frames up to `total_steps`.
    ///
    /// `on_step` sees the trainer after every step (checkpointing, progress).
    pub fn run(&mut self, ds: &Dataset, train: &[usize], mut on_step: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        if train.is_empty() {
            return Err(contract("no training frames"));
        }
        let warm = self.cfg().warmup_steps;
        while self.phase == Phase::Warmup && self.step < warm {
            self.warmup(ds, 1)?;
            on_step(self)?;
        }
        self.begin_joint()?;
        while self.step < self.cfg().total_steps {
            let pick = step_rng(self.cfg().seed, self.step, 3).random_range(0..train.len());
            self.train_step(ds, train[pick])?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = IndexMap::new();
        for f in KERNEL_FIELDS {
            params.insert(format!("{KERNEL_PREFIX}{f}"), self.model.kernels.field(f).clone());
        }
        for (k, v) in &self.model.nets.tensors {
            params.insert(k.clone(), v.clone());
        }
        let state = CheckpointState {
            step: self.step,
            phase: self.phase,
            scene_extent: self.scene_extent,
            bbox: self.model.bbox,
            grad_accum: self.stats.accum.clone(),
            grad_count: self.stats.count.clone(),
        };
        let mut blobs = IndexMap::new();
        blobs.insert("config".to_string(), self.cfg().to_json().into_bytes());
        blobs.insert("state".to_string(), serde_json::to_vec(&state).expect("state serializes"));
        if let Some(gr) = &self.model.grouping {
            blobs.insert("grouping".to_string(), gr.to_bytes());
        }
        Checkpoint {
            params,
            adam: self.adam.clone(),
            blobs,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let blob = |k: &str| ck.blobs.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let cfg: TrainConfig = serde_json::from_slice(blob("config")?)?;
        let state: CheckpointState = serde_json::from_slice(blob("state")?)?;
        let mut kernels = KernelParams::empty();
        for f in KERNEL_FIELDS {
            let t = ck
                .params
                .get(&format!("{KERNEL_PREFIX}{f}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks kernel field {f}")))?;
            *kernels.field_mut(f) = t.clone();
        }
        let mut model = Model::new(cfg, kernels);
        for (k, v) in &ck.params {
            if !k.starts_with(KERNEL_PREFIX) {
                model.nets.insert(k.clone(), v.clone());
            }
        }
        model.bbox = state.bbox;
        model.grouping = ck.blobs.get("grouping").map(|b| Grouping::from_bytes(b)).transpose()?;
        Ok(Self {
            model,
            step: state.step,
            phase: state.phase,
            log: Vec::new(),
            scene_extent: state.scene_extent,
            adam: ck.adam.clone(),
            stats: GradStats {
                accum: state.grad_accum,
                count: state.grad_count,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    step: usize,
    phase: Phase,
    scene_extent: f64,
    bbox: Option<Aabb>,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
}

/// 1.1 times the largest camera distance from the cameras' mean position.
pub fn scene_extent(ds: &Dataset) -> f64 {
    let pos: Vec<[f64; 3]> = ds.frames.iter().map(|f| f.camera.position()).collect();
    if pos.is_empty() {
        return 1.0;
    }
    let n = pos.len() as f64;
    let c = [0, 1, 2].map(|i| pos.iter().map(|p| p[i]).sum::<f64>() / n);
    1.1 * pos.iter().map(|p| crate::gaussian::dist(p, &c)).fold(0.0, f64::max).max(1e-6)
}
