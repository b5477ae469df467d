use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::autodiff::{Graph, Var};
use crate::decoder::{apply_graph, DecoderInput, KernelDecoder};
use crate::error::{contract, Error, Result};
use crate::gaussian::{normalize_kernel, GaussianKernel, GaussianParticle, KernelParams, RawKernel, KERNEL_FIELDS};
use crate::latent::{Aabb, Grouping, HashGrid, LatentState, BBOX_MARGIN};
use crate::nn::{Bound, Params};
use crate::ode::DynamicsField;
use crate::render::{render_graph, Camera, KernelVars};
use crate::tensor::Tensor;

pub const HASH_TABLE: &str = "hash.table";

/// Canonical kernels plus, once joint training has begun, the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: TrainConfig,
    pub kernels: KernelParams,
    pub nets: Params,
    pub bbox: Option<Aabb>,
    pub grouping: Option<Grouping>,
}

/// Puts kernel tensors on the graph, as inputs or constants.
pub fn bind_kernels(g: &mut Graph, k: &KernelParams, trainable: bool) -> KernelVars {
    let mut put = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
    KernelVars {
        mu: put(&k.mu),
        rot: put(&k.rot),
        log_scale: put(&k.log_scale),
        opacity_logit: put(&k.opacity_logit),
        color: put(&k.color),
    }
}

pub fn kernel_var(kv: &KernelVars, field: &str) -> Var {
    match field {
        "mu" => kv.mu,
        "rot" => kv.rot,
        "log_scale" => kv.log_scale,
        "opacity_logit" => kv.opacity_logit,
        "color" => kv.color,
        _ => panic!("unknown kernel field {field}"),
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("{name}: {m}")),
        Error::NumericStage { stage, detail } => Error::NumericStage {
            stage: format!("{name}/{stage}"),
            detail,
        },
        other => other,
    })
}

impl Model {
    pub fn new(cfg: TrainConfig, kernels: KernelParams) -> Self {
        Self {
            cfg,
            kernels,
            nets: Params::new(),
            bbox: None,
            grouping: None,
        }
    }

    /// True once the dynamics networks exist.
    pub fn is_dynamic(&self) -> bool {
        !self.nets.tensors.is_empty()
    }

    pub fn hash_grid(&self) -> Result<HashGrid> {
        let bbox = self.bbox.ok_or_else(|| contract("hash grid box is not set"))?;
        HashGrid::new(self.cfg.hash.clone(), bbox)
    }

    pub fn field(&self) -> DynamicsField {
        DynamicsField::new(self.cfg.encoder.global_dim, self.cfg.ode.clone())
    }

    pub fn decoder(&self) -> KernelDecoder {
        let ab = self.cfg.ablation;
        let input = match (ab.latent_space, ab.neural_ode) {
            (false, _) => DecoderInput::TimeOnly,
            (true, true) => DecoderInput::Global,
            (true, false) => DecoderInput::GlobalAndTime,
        };
        KernelDecoder {
            cfg: self.cfg.decoder.clone(),
            global_dim: self.cfg.encoder.global_dim,
            local_dim: self.cfg.hash.out_dim(),
            input,
            affine: ab.affine,
        }
    }

    /// Fixes the hash box around the current kernels, creates the networks
    /// and groups the particles.
    pub fn init_dynamics(&mut self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(contract("cannot start joint training without particles"));
        }
        self.cfg.validate()?;
        let pos = self.kernels.positions();
        self.bbox = Some(Aabb::around(&pos, BBOX_MARGIN)?);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x6e65_7473);
        let mut nets = Params::new();
        nets.insert(HASH_TABLE, self.cfg.hash.init_table(&mut rng));
        if self.cfg.ablation.latent_space {
            nets.merge(self.cfg.encoder.init_params(&mut rng))?;
            if self.cfg.ablation.neural_ode {
                nets.merge(self.field().init_params(&mut rng))?;
            }
        }
        let dec = self.decoder();
        dec.validate()?;
        nets.merge(dec.init_params(&mut rng))?;
        self.nets = nets;
        self.regroup()
    }

    pub fn regroup(&mut self) -> Result<()> {
        if self.cfg.ablation.latent_space {
            let enc = &self.cfg.encoder;
            self.grouping = Some(Grouping::compute(&self.kernels.positions(), enc.n_centers, enc.k_neighbors)?);
        }
        Ok(())
    }

    /// Local features `[N, L*F]` and, when used, the global feature at `t`.
    fn latent_graph(&self, g: &mut Graph, kv: &KernelVars, nb: &Bound, t: f64) -> Result<(Var, Option<Var>)> {
        let grid = self.hash_grid()?;
        let local = grid.encode_graph(g, kv.mu, nb.var(HASH_TABLE));
        if !self.cfg.ablation.latent_space {
            return Ok((local, None));
        }
        let grouping = self.grouping.as_ref().ok_or_else(|| contract("particles are not grouped"))?;
        let g0 = stage("global encoder", self.cfg.encoder.encode_global(g, nb, kv.mu, grouping))?;
        if !self.cfg.ablation.neural_ode {
            return Ok((local, Some(g0)));
        }
        let gt = stage("ode", self.field().solve(g, nb, g0, 0.0, t))?;
        Ok((local, Some(gt)))
    }

    /// Deformed kernels at time `t`; the canonical kernels when static.
    pub fn deform_graph(&self, g: &mut Graph, kv: &KernelVars, nb: &Bound, t: f64) -> Result<KernelVars> {
        if !self.is_dynamic() {
            return Ok(*kv);
        }
        let (local, global) = self.latent_graph(g, kv, nb, t)?;
        let d = stage("decoder", self.decoder().forward(g, nb, global, local, t))?;
        Ok(apply_graph(g, kv, &d))
    }

    /// Latent state `(g_t, l)`; `g_t` is empty when the latent space is off.
    pub fn latent_state(&self, t: f64) -> Result<LatentState> {
        if !self.is_dynamic() {
            return Err(contract("model has no latent state before joint training"));
        }
        let mut g = Graph::new();
        let kv = bind_kernels(&mut g, &self.kernels, false);
        let nb = self.nets.bind(&mut g);
        let (local, global) = self.latent_graph(&mut g, &kv, &nb, t)?;
        Ok(LatentState {
            global: global.map_or(Tensor::zeros(&[1, 0]), |v| g.value(v).clone()),
            local: g.value(local).clone(),
        })
    }

    /// Unconstrained kernel arrays at time `t`.
    pub fn kernels_at(&self, t: f64) -> Result<KernelParams> {
        let mut g = Graph::new();
        let kv = bind_kernels(&mut g, &self.kernels, false);
        let nb = self.nets.bind(&mut g);
        let d = self.deform_graph(&mut g, &kv, &nb, t)?;
        let mut out = KernelParams::empty();
        for f in KERNEL_FIELDS {
            *out.field_mut(f) = g.value(kernel_var(&d, f)).clone();
        }
        Ok(out)
    }

    pub fn render(&self, cam: &Camera, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let kv = bind_kernels(&mut g, &self.kernels, false);
        let nb = self.nets.bind(&mut g);
        let d = self.deform_graph(&mut g, &kv, &nb, t)?;
        let img = render_graph(&mut g, &d, cam, self.cfg.raster);
        Ok(g.value(img).clone())
    }

    /// Particles (constrained kernels plus latent state) at time `t`.
    pub fn particles_at(&self, t: f64) -> Result<Vec<GaussianParticle>> {
        let k = self.kernels_at(t)?;
        let (local, global) = if self.is_dynamic() {
            let s = self.latent_state(t)?;
            (Some(s.local), Arc::<[f64]>::from(s.global.data()))
        } else {
            (None, Arc::from(Vec::new()))
        };
        (0..k.len())
            .map(|i| {
                let raw: RawKernel = k.raw(i);
                Ok(GaussianParticle {
                    kernel: normalize_kernel(&raw)?,
                    latent_local: local.as_ref().map_or(Vec::new(), |l| l.row_slice(i).to_vec()),
                    latent_global: global.clone(),
                })
            })
            .collect()
    }

    pub fn kernels_constrained(&self, t: f64) -> Result<Vec<GaussianKernel>> {
        self.kernels_at(t)?.kernels()
    }
}
