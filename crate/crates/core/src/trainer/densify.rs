use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::DensifyConfig;
use crate::gaussian::{quat_to_matrix, KernelParams, RawKernel};
use crate::latent::RegroupEvent;
use crate::tensor::Tensor;

/// Accumulated position-gradient norms per particle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one step's `mu` gradient; rows with an exactly zero gradient were
    /// not visible and are skipped.
    pub fn record(&mut self, mu_grad: &Tensor) {
        for i in 0..self.accum.len().min(mu_grad.rows()) {
            let n = mu_grad.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                self.accum[i] += n;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

/// Result of one densify/prune pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub kernels: KernelParams,
    /// Source row of every output row; `None` for freshly created kernels.
    pub sources: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub deleted: usize,
}

impl DensifyOutcome {
    pub fn changed(&self) -> bool {
        self.cloned + self.split + self.deleted > 0
    }

    pub fn events(&self) -> Vec<RegroupEvent> {
        let mut ev = Vec::new();
        if self.cloned > 0 {
            ev.push(RegroupEvent::Clone);
        }
        if self.split > 0 {
            ev.push(RegroupEvent::Split);
        }
        if self.deleted > 0 {
            ev.push(RegroupEvent::Delete);
        }
        ev
    }
}

/// Clones small high-gradient kernels, splits large ones into two smaller
/// samples, and deletes nearly transparent ones.
pub fn densify_prune(
    k: &KernelParams,
    stats: &GradStats,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> DensifyOutcome {
    let n = k.len();
    let min_logit = (cfg.min_opacity / (1.0 - cfg.min_opacity)).ln();
    let size_limit = cfg.dense_fraction * extent;
    let mut rows: Vec<RawKernel> = Vec::new();
    let mut sources = Vec::new();
    let mut fresh: Vec<RawKernel> = Vec::new();
    let (mut cloned, mut split, mut deleted) = (0, 0, 0);
    let mut budget = cfg.max_particles.saturating_sub(n);
    for i in 0..n {
        let raw = k.raw(i);
        if raw.opacity_logit < min_logit {
            deleted += 1;
            continue;
        }
        let hot = stats.count.get(i).is_some_and(|&c| c > 0) && stats.mean(i) >= cfg.grad_threshold;
        let big = raw.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp() > size_limit;
        if hot && budget > 0 {
            budget -= 1;
            if big {
                split += 1;
                let q = raw.rot;
                let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
                let r = quat_to_matrix(q.map(|v| v / qn));
                let s = raw.log_scale.map(f64::exp);
                for _ in 0..2 {
                    let z: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                    let off = [0, 1, 2].map(|a| (0..3).map(|b| r[a][b] * s[b] * z[b]).sum::<f64>());
                    fresh.push(RawKernel {
                        mu: [0, 1, 2].map(|a| raw.mu[a] + off[a]),
                        log_scale: raw.log_scale.map(|v| v - cfg.split_factor.ln()),
                        ..raw.clone()
                    });
                }
                continue;
            }
            cloned += 1;
            fresh.push(raw.clone());
        }
        rows.push(raw);
        sources.push(Some(i));
    }
    sources.extend(std::iter::repeat_n(None, fresh.len()));
    rows.extend(fresh);
    DensifyOutcome {
        kernels: KernelParams::from_raw(&rows),
        sources,
        cloned,
        split,
        deleted,
    }
}
