//! Point-group tokens pooled by self-attention into one global feature.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::group::Grouping;
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::nn::{init_linear, linear, Bound, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalEncoderConfig {
    pub n_centers: usize,
    pub k_neighbors: usize,
    /// Width of the per-group embedding (and the attention model width).
    pub group_feat_dim: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub global_dim: usize,
}

impl Default for GlobalEncoderConfig {
    fn default() -> Self {
        Self {
            n_centers: 64,
            k_neighbors: 16,
            group_feat_dim: 64,
            attn_layers: 4,
            attn_heads: 4,
            global_dim: 256,
        }
    }
}

const POINT_HIDDEN: usize = 64;
const POINT_OUT: usize = 128;
const LN_EPS: f64 = 1e-5;

impl GlobalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_heads == 0 || self.group_feat_dim % self.attn_heads != 0 {
            return Err(contract(format!(
                "group_feat_dim {} must be divisible by attn_heads {}",
                self.group_feat_dim, self.attn_heads
            )));
        }
        if self.n_centers == 0 || self.k_neighbors == 0 || self.global_dim == 0 {
            return Err(contract("global encoder sizes must be positive"));
        }
        Ok(())
    }

    /// Parameters under the `enc.` prefix.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Params {
        let d = self.group_feat_dim;
        let mut p = Params::new();
        init_linear(&mut p, "enc.point1", 3, POINT_HIDDEN, false, rng);
        init_linear(&mut p, "enc.point2", POINT_HIDDEN, POINT_OUT, false, rng);
        init_linear(&mut p, "enc.token", POINT_OUT + 3, d, false, rng);
        for l in 0..self.attn_layers {
            for m in ["q", "k", "v", "o"] {
                init_linear(&mut p, &format!("enc.attn{l}.{m}"), d, d, false, rng);
            }
            init_linear(&mut p, &format!("enc.attn{l}.ff1"), d, 2 * d, false, rng);
            init_linear(&mut p, &format!("enc.attn{l}.ff2"), 2 * d, d, false, rng);
        }
        init_linear(&mut p, "enc.out", d, self.global_dim, false, rng);
        p
    }

    /// `g0 [1, G]` from particle positions `mu [N, 3]` and a cached grouping.
    pub fn encode_global(&self, g: &mut Graph, b: &Bound, mu: Var, grouping: &Grouping) -> Result<Var> {
        if grouping.groups.is_empty() {
            return Err(contract("global encoding needs at least one group"));
        }
        let k = grouping.group_size();
        if grouping.groups.iter().any(|grp| grp.len() != k) || k == 0 {
            return Err(contract("groups must be non-empty and of equal size"));
        }
        let n = g.value(mu).rows();
        if grouping.centers.iter().chain(grouping.groups.iter().flatten()).any(|&i| i >= n) {
            return Err(contract("grouping refers to particles that no longer exist"));
        }
        let members: Vec<usize> = grouping.groups.iter().flatten().copied().collect();
        let anchors: Vec<usize> = grouping
            .centers
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, k))
            .collect();
        let pts = g.gather_rows(mu, &members);
        let ctr = g.gather_rows(mu, &anchors);
        let rel = g.sub(pts, ctr);

        let h = linear(g, b, "enc.point1", rel);
        let h = g.relu(h);
        let h = linear(g, b, "enc.point2", h);
        let h = g.relu(h);
        let pooled = g.group_max(h, k);
        let centers = g.gather_rows(mu, &grouping.centers);
        let tok = g.concat_cols(&[pooled, centers]);
        let mut x = linear(g, b, "enc.token", tok);

        for l in 0..self.attn_layers {
            let y = g.layer_norm_rows(x, LN_EPS);
            let a = self.attention(g, b, l, y);
            x = g.add(x, a);
            let y = g.layer_norm_rows(x, LN_EPS);
            let y = linear(g, b, &format!("enc.attn{l}.ff1"), y);
            let y = g.relu(y);
            let y = linear(g, b, &format!("enc.attn{l}.ff2"), y);
            x = g.add(x, y);
        }
        let out = linear(g, b, "enc.out", x);
        let tokens = g.value(out).rows();
        Ok(g.group_max(out, tokens))
    }

    fn attention(&self, g: &mut Graph, b: &Bound, layer: usize, x: Var) -> Var {
        let d = self.group_feat_dim;
        let hd = d / self.attn_heads;
        let q = linear(g, b, &format!("enc.attn{layer}.q"), x);
        let k = linear(g, b, &format!("enc.attn{layer}.k"), x);
        let v = linear(g, b, &format!("enc.attn{layer}.v"), x);
        let heads: Vec<Var> = (0..self.attn_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, hd);
                let kh = g.slice_cols(k, h * hd, hd);
                let vh = g.slice_cols(v, h * hd, hd);
                let kt = g.transpose(kh);
                let s = g.matmul(qh, kt);
                let s = g.scale(s, 1.0 / (hd as f64).sqrt());
                let w = g.softmax_rows(s);
                g.matmul(w, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        linear(g, b, &format!("enc.attn{layer}.o"), cat)
    }
}
