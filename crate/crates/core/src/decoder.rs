//! Per-particle deformation heads and their application to kernels.
//!
//! The motion head emits 27 raw values per particle:
//!
//! | columns | meaning |
//! |---|---|
//! | 0..3, 3 | rotation axis, angle |
//! | 4..7, 7 | scale direction, magnitude |
//! | 8..11, 11 | shear direction (xy, xz, yz), magnitude |
//! | 12..15, 15 | velocity direction, magnitude |
//! | 16..19, 19 | nonlinear translation direction, magnitude |
//! | 20..24 | quaternion delta |
//! | 24..27 | log-scale delta |
//!
//! Directions are normalized, magnitudes pass through `cap * tanh`. With the
//! affine composition disabled, columns 12..15 are used as a raw displacement
//! and `A` is zero. The appearance head emits a colour delta.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::gaussian::{mat_vec, quat_normalize, GaussianKernel, Mat3};
use crate::nn::{init_linear, linear, Bound, Params};
use crate::render::KernelVars;
use crate::tensor::Tensor;

pub const MOTION_RAW: usize = 27;
pub const AFFINE_RAW: usize = 20;
const DIR_EPS: f64 = 1e-6;
/// First column of each direction triple in the affine block.
const DIRECTION_COLS: [usize; 5] = [0, 4, 8, 12, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionCaps {
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
    pub translation: f64,
}

impl Default for MotionCaps {
    fn default() -> Self {
        Self {
            rotation: 0.5,
            scale: 0.2,
            shear: 0.2,
            translation: 0.5,
        }
    }
}

impl MotionCaps {
    /// Upper bound on the spectral norm of any composed `A`.
    pub fn spectral_bound(&self) -> f64 {
        self.rotation + self.scale + std::f64::consts::SQRT_2 * self.shear
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Hidden layers in the motion head.
    pub motion_depth: usize,
    /// Hidden layers in the appearance head.
    pub appearance_depth: usize,
    pub caps: MotionCaps,
    pub appearance: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            motion_depth: 4,
            appearance_depth: 5,
            caps: MotionCaps::default(),
            appearance: true,
        }
    }
}

/// What the decoder sees besides the local features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// Evolved global feature `g_t`.
    Global,
    /// Initial global feature `g_0` plus the query time.
    GlobalAndTime,
    /// Query time only.
    TimeOnly,
}

impl DecoderInput {
    fn uses_global(self) -> bool {
        !matches!(self, DecoderInput::TimeOnly)
    }

    fn uses_time(self) -> bool {
        !matches!(self, DecoderInput::Global)
    }
}

/// Per-particle deformation on plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub a: Mat3,
    pub b: [f64; 3],
    pub d_rot: [f64; 4],
    pub d_log_scale: [f64; 3],
    pub d_color: [f64; 3],
}

impl Deformation {
    pub fn identity() -> Self {
        Self {
            a: [[0.0; 3]; 3],
            b: [0.0; 3],
            d_rot: [0.0; 4],
            d_log_scale: [0.0; 3],
            d_color: [0.0; 3],
        }
    }
}

/// `μ' = μ + Aμ + b`, `q' = normalize(q + Δq)`, `s' = s·exp(ΔS)`, `c' = clamp(c + Δc)`.
pub fn apply_deformation(k: &GaussianKernel, d: &Deformation) -> Result<GaussianKernel> {
    let am = mat_vec(&d.a, k.mu);
    let mu = [0, 1, 2].map(|i| k.mu[i] + am[i] + d.b[i]);
    let rot = if d.d_rot == [0.0; 4] {
        k.rot
    } else {
        let q = [0, 1, 2, 3].map(|i| k.rot[i] + d.d_rot[i]);
        quat_normalize(q).map_err(|_| Error::NumericStage {
            stage: "apply_deformation".into(),
            detail: "rotation plus delta is (near) zero".into(),
        })?
    };
    Ok(GaussianKernel {
        mu,
        rot,
        scale: [0, 1, 2].map(|i| k.scale[i] * d.d_log_scale[i].exp()),
        opacity: k.opacity,
        color: [0, 1, 2].map(|i| (k.color[i] + d.d_color[i]).clamp(0.0, 1.0)),
    })
}

/// Graph outputs of the decoder for all particles.
#[derive(Clone, Copy, Debug)]
pub struct DeformVars {
    /// `[N, 9]` row-major `A`, absent when the affine composition is off.
    pub a: Option<Var>,
    pub b: Var,
    pub d_rot: Var,
    pub d_log_scale: Var,
    pub d_color: Option<Var>,
}

impl DeformVars {
    /// Value-level deformation of row `i`.
    pub fn row(&self, g: &Graph, i: usize) -> Result<Deformation> {
        let n = g.value(self.b).rows();
        if i >= n {
            return Err(contract(format!("particle index {i} out of range for {n} particles")));
        }
        let take = |v: Var| g.value(v).row_slice(i).to_vec();
        let mut d = Deformation::identity();
        if let Some(a) = self.a {
            let r = take(a);
            d.a = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
        }
        d.b.copy_from_slice(&take(self.b));
        d.d_rot.copy_from_slice(&take(self.d_rot));
        d.d_log_scale.copy_from_slice(&take(self.d_log_scale));
        if let Some(c) = self.d_color {
            d.d_color.copy_from_slice(&take(c));
        }
        Ok(d)
    }
}

fn selector(entries: &[(usize, usize, f64)]) -> Tensor {
    let mut t = Tensor::zeros(&[3, 9]);
    for &(src, dst, v) in entries {
        t.data_mut()[src * 9 + dst] = v;
    }
    t
}

/// `(A [N,9], b [N,3])` from the 20 affine raw columns.
pub fn compose_affine(g: &mut Graph, raw: Var, caps: &MotionCaps) -> (Var, Var) {
    let dir = |g: &mut Graph, at: usize| {
        let v = g.slice_cols(raw, at, 3);
        g.normalize_rows(v, DIR_EPS)
    };
    let mag = |g: &mut Graph, at: usize, cap: f64| {
        let v = g.slice_cols(raw, at, 1);
        let v = g.tanh(v);
        g.scale(v, cap)
    };
    // constant maps from a 3-vector to flattened 3x3 matrices
    let cross = g.constant(selector(&[(2, 1, -1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 5, -1.0), (1, 6, -1.0), (0, 7, 1.0)]));
    let rows = g.constant(selector(&[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (1, 4, 1.0), (1, 5, 1.0), (2, 6, 1.0), (2, 7, 1.0), (2, 8, 1.0)]));
    let cols = g.constant(selector(&[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 3, 1.0), (1, 4, 1.0), (2, 5, 1.0), (0, 6, 1.0), (1, 7, 1.0), (2, 8, 1.0)]));
    let diag = g.constant(selector(&[(0, 0, 1.0), (1, 4, 1.0), (2, 8, 1.0)]));
    let sym = g.constant(selector(&[(0, 1, 1.0), (0, 3, 1.0), (1, 2, 1.0), (1, 6, 1.0), (2, 5, 1.0), (2, 7, 1.0)]));
    let eye = g.constant(Tensor::matrix(1, 9, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let ones = g.constant(Tensor::matrix(3, 1, vec![1.0; 3]));

    // rotation: sin(m) K(u) + (1 - cos m)(u u^T - |u|^2 I)
    let u = dir(g, 0);
    let m = mag(g, 3, caps.rotation);
    let k = g.matmul(u, cross);
    let ui = g.matmul(u, rows);
    let uj = g.matmul(u, cols);
    let uu = g.mul(ui, uj);
    let u2 = g.square(u);
    let u2 = g.matmul(u2, ones);
    let u2i = g.matmul(u2, eye);
    let k2 = g.sub(uu, u2i);
    let s = g.sin(m);
    let c = g.cos(m);
    let one_minus_c = g.neg(c);
    let one_minus_c = g.offset(one_minus_c, 1.0);
    let r1 = g.mul_col(k, s);
    let r2 = g.mul_col(k2, one_minus_c);
    let rot = g.add(r1, r2);

    let su = dir(g, 4);
    let sm = mag(g, 7, caps.scale);
    let sv = g.mul_col(su, sm);
    let sd = g.matmul(sv, diag);

    let hu = dir(g, 8);
    let hm = mag(g, 11, caps.shear);
    let hv = g.mul_col(hu, hm);
    let hs = g.matmul(hv, sym);

    let a = g.add(rot, sd);
    let a = g.add(a, hs);

    let vu = dir(g, 12);
    let vm = mag(g, 15, caps.translation);
    let nu = dir(g, 16);
    let nm = mag(g, 19, caps.translation);
    let bv = g.mul_col(vu, vm);
    let bn = g.mul_col(nu, nm);
    let b = g.add(bv, bn);
    (a, b)
}

/// Motion and appearance heads over `concat(global, local[, t])`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDecoder {
    pub cfg: DecoderConfig,
    pub global_dim: usize,
    pub local_dim: usize,
    pub input: DecoderInput,
    pub affine: bool,
}

impl KernelDecoder {
    pub fn validate(&self) -> Result<()> {
        if self.cfg.hidden == 0 || self.cfg.motion_depth == 0 || self.cfg.appearance_depth == 0 {
            return Err(contract("decoder width and depths must be positive"));
        }
        Ok(())
    }

    fn init_head(&self, p: &mut Params, head: &str, depth: usize, out: usize, rng: &mut ChaCha8Rng) {
        let h = self.cfg.hidden;
        if self.input.uses_global() {
            init_linear(p, &format!("dec.{head}.in_g"), self.global_dim, h, false, rng);
        }
        if self.input.uses_time() {
            init_linear(p, &format!("dec.{head}.in_t"), 1, h, false, rng);
        }
        init_linear(p, &format!("dec.{head}.in_l"), self.local_dim, h, false, rng);
        for l in 1..depth {
            init_linear(p, &format!("dec.{head}.h{l}"), h, h, false, rng);
        }
        init_linear(p, &format!("dec.{head}.out"), h, out, true, rng);
    }

    /// Parameters under `dec.`. Final layers start at zero except the affine
    /// direction columns; with zero magnitudes the deformation is still the
    /// identity.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Params {
        let mut p = Params::new();
        self.init_head(&mut p, "motion", self.cfg.motion_depth, MOTION_RAW, rng);
        if self.affine {
            // direction columns start random so the zero magnitudes get gradient
            let bound = 1.0 / (self.cfg.hidden as f64).sqrt();
            let w = p.get_mut("dec.motion.out.w");
            for r in 0..self.cfg.hidden {
                for &c in DIRECTION_COLS.iter() {
                    for k in c..c + 3 {
                        w.data_mut()[r * MOTION_RAW + k] = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        if self.cfg.appearance {
            self.init_head(&mut p, "app", self.cfg.appearance_depth, 3, rng);
        }
        p
    }

    fn head(&self, g: &mut Graph, b: &Bound, head: &str, depth: usize, global: Option<Var>, local: Var, t: f64) -> Var {
        // the shared global/time input contributes one row, broadcast over particles
        let mut shared = b.var(&format!("dec.{head}.in_l.b"));
        if let (true, Some(gv)) = (self.input.uses_global(), global) {
            let gp = linear(g, b, &format!("dec.{head}.in_g"), gv);
            shared = g.add(shared, gp);
        }
        if self.input.uses_time() {
            let tv = g.constant(Tensor::matrix(1, 1, vec![t]));
            let tp = linear(g, b, &format!("dec.{head}.in_t"), tv);
            shared = g.add(shared, tp);
        }
        let w = b.var(&format!("dec.{head}.in_l.w"));
        let x = g.matmul(local, w);
        let x = g.add_row(x, shared);
        let mut x = g.relu(x);
        for l in 1..depth {
            x = linear(g, b, &format!("dec.{head}.h{l}"), x);
            x = g.relu(x);
        }
        linear(g, b, &format!("dec.{head}.out"), x)
    }

    /// Deformations for all particles with local features `local [N, L*F]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, global: Option<Var>, local: Var, t: f64) -> Result<DeformVars> {
        if self.input.uses_global() && global.is_none() {
            return Err(contract("decoder input mode needs a global feature"));
        }
        if g.value(local).cols() != self.local_dim {
            return Err(contract(format!(
                "decoder expects {} local features, got {}",
                self.local_dim,
                g.value(local).cols()
            )));
        }
        let raw = self.head(g, b, "motion", self.cfg.motion_depth, global, local, t);
        let (a, disp) = if self.affine {
            let aff = g.slice_cols(raw, 0, AFFINE_RAW);
            let (a, d) = compose_affine(g, aff, &self.cfg.caps);
            (Some(a), d)
        } else {
            (None, g.slice_cols(raw, 12, 3))
        };
        let d_rot = g.slice_cols(raw, 20, 4);
        let d_log_scale = g.slice_cols(raw, 24, 3);
        let d_color = if self.cfg.appearance {
            Some(self.head(g, b, "app", self.cfg.appearance_depth, global, local, t))
        } else {
            None
        };
        Ok(DeformVars {
            a,
            b: disp,
            d_rot,
            d_log_scale,
            d_color,
        })
    }

    /// Value-level deformation of particle `index`.
    pub fn decode(&self, p: &Params, global: Option<&Tensor>, local: &Tensor, t: f64, index: usize) -> Result<Deformation> {
        if index >= local.rows() {
            return Err(contract(format!("particle index {index} out of range for {} particles", local.rows())));
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let gv = global.map(|t| g.constant(t.clone()));
        let l = g.constant(Tensor::matrix(1, local.cols(), local.row_slice(index).to_vec()));
        let d = self.forward(&mut g, &b, gv, l, t)?;
        d.row(&g, 0)
    }
}

/// Deformed kernel handles (unconstrained form).
pub fn apply_graph(g: &mut Graph, k: &KernelVars, d: &DeformVars) -> KernelVars {
    let mut mu = k.mu;
    if let Some(a) = d.a {
        let am = g.batched_matvec3(a, k.mu);
        mu = g.add(mu, am);
    }
    let mu = g.add(mu, d.b);
    let rot = g.add(k.rot, d.d_rot);
    let log_scale = g.add(k.log_scale, d.d_log_scale);
    let color = match d.d_color {
        Some(dc) => {
            let c = g.add(k.color, dc);
            g.clamp(c, 0.0, 1.0)
        }
        None => k.color,
    };
    KernelVars {
        mu,
        rot,
        log_scale,
        opacity_logit: k.opacity_logit,
        color,
    }
}
