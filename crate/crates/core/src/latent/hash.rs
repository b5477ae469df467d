//! Multi-resolution hash grid over a bounded box.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
pub const MAX_TABLE_SIZE: usize = 1 << 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub table_size: usize,
    pub feat_dim: usize,
    pub primes: [u32; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            n_min: 16,
            n_max: 512,
            table_size: MAX_TABLE_SIZE,
            feat_dim: 2,
            primes: HASH_PRIMES,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(contract(format!("hash grid needs at least 2 levels, got {}", self.levels)));
        }
        if self.n_min < 1 || self.n_max <= self.n_min {
            return Err(contract(format!(
                "hash grid resolutions need n_max > n_min >= 1, got {}..{}",
                self.n_min, self.n_max
            )));
        }
        if self.table_size == 0 || self.table_size > MAX_TABLE_SIZE {
            return Err(contract(format!("hash table size {} outside 1..=2^19", self.table_size)));
        }
        if self.feat_dim == 0 {
            return Err(contract("hash feature dimension must be positive"));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.levels * self.feat_dim
    }

    /// Grid resolution of every level, geometric from `n_min` to `n_max`.
    pub fn resolution_levels(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let growth = ((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.levels - 1) as f64;
        Ok((0..self.levels)
            .map(|i| {
                let n = self.n_min as f64 * (growth * i as f64).exp();
                // absorb rounding so exact powers land on their integer
                (n * (1.0 + 1e-12)).floor() as usize
            })
            .collect())
    }

    /// Spatial hash of an integer grid vertex, in `[0, table_size)`.
    pub fn hash_index(&self, v: [u32; 3]) -> usize {
        let h = (v[0].wrapping_mul(self.primes[0]))
            ^ (v[1].wrapping_mul(self.primes[1]))
            ^ (v[2].wrapping_mul(self.primes[2]));
        h as usize % self.table_size
    }

    /// Table of shape `[levels * table_size, feat_dim]`, uniform in `±1e-4`.
    pub fn init_table(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.levels * self.table_size * self.feat_dim;
        Tensor::new(
            &[self.levels * self.table_size, self.feat_dim],
            (0..n).map(|_| rng.random_range(-1e-4..1e-4)).collect(),
        )
    }
}

/// Axis-aligned box that positions are normalized against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub const UNIT: Aabb = Aabb {
        min: [0.0; 3],
        max: [1.0; 3],
    };

    /// Tight box around `points` grown by `margin` of its extent on each side.
    pub fn around(points: &[[f64; 3]], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(contract("bounding box of an empty point set"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        for d in 0..3 {
            let pad = ((max[d] - min[d]) * margin).max(1e-6);
            min[d] -= pad;
            max[d] += pad;
        }
        Ok(Self { min, max })
    }

    fn extent(&self, d: usize) -> f64 {
        self.max[d] - self.min[d]
    }
}

struct Corner {
    index: usize,
    weight: f64,
    /// d weight / d normalized coordinate
    dweight: [f64; 3],
}

fn level_corners(cfg: &HashGridConfig, res: usize, p: [f64; 3]) -> [Corner; 8] {
    let x = p.map(|c| c * res as f64);
    let base = x.map(|c| c.floor());
    let f = [x[0] - base[0], x[1] - base[1], x[2] - base[2]];
    let bi = base.map(|c| c as u32);
    std::array::from_fn(|corner| {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w1 = |d: usize| if o[d] == 1 { f[d] } else { 1.0 - f[d] };
        let dw1 = |d: usize| if o[d] == 1 { 1.0 } else { -1.0 } * res as f64;
        let (wx, wy, wz) = (w1(0), w1(1), w1(2));
        Corner {
            index: cfg.hash_index([bi[0] + o[0] as u32, bi[1] + o[1] as u32, bi[2] + o[2] as u32]),
            weight: wx * wy * wz,
            dweight: [dw1(0) * wy * wz, wx * dw1(1) * wz, wx * wy * dw1(2)],
        }
    })
}

/// Hash-grid encoder: configuration, per-level resolutions and the box.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub cfg: HashGridConfig,
    pub resolutions: Vec<usize>,
    pub bbox: Aabb,
}

impl HashGrid {
    pub fn new(cfg: HashGridConfig, bbox: Aabb) -> Result<Self> {
        let resolutions = cfg.resolution_levels()?;
        Ok(Self { cfg, resolutions, bbox })
    }

    /// Position mapped into the unit cube, clamped; `inside[d]` is false
    /// where clamping was active.
    pub fn normalize(&self, mu: [f64; 3]) -> ([f64; 3], [bool; 3]) {
        let mut p = [0.0; 3];
        let mut inside = [true; 3];
        for d in 0..3 {
            let u = (mu[d] - self.bbox.min[d]) / self.bbox.extent(d);
            inside[d] = (0.0..=1.0).contains(&u);
            p[d] = u.clamp(0.0, 1.0);
        }
        (p, inside)
    }

    /// Features for a position already in the unit cube.
    pub fn encode_normalized(&self, p: [f64; 3], table: &Tensor) -> Vec<f64> {
        let fd = self.cfg.feat_dim;
        let mut out = vec![0.0; self.cfg.out_dim()];
        for (lvl, &res) in self.resolutions.iter().enumerate() {
            for c in level_corners(&self.cfg, res, p) {
                let row = table.row_slice(lvl * self.cfg.table_size + c.index);
                for k in 0..fd {
                    out[lvl * fd + k] += c.weight * row[k];
                }
            }
        }
        out
    }

    /// Local feature vector for a world-space position.
    pub fn encode_local(&self, mu: [f64; 3], table: &Tensor) -> Vec<f64> {
        self.encode_normalized(self.normalize(mu).0, table)
    }

    /// Differentiable encoding of `mu [N, 3]` against `table [L*M, F]`.
    pub fn encode_graph(&self, g: &mut Graph, mu: Var, table: Var) -> Var {
        let pos = g.value(mu).clone();
        let tab = g.value(table);
        let n = pos.rows();
        let mut out = Vec::with_capacity(n * self.cfg.out_dim());
        for i in 0..n {
            let r = pos.row_slice(i);
            out.extend(self.encode_local([r[0], r[1], r[2]], tab));
        }
        let out = Tensor::matrix(n, self.cfg.out_dim(), out);
        g.custom(Box::new(HashEncodeOp { grid: self.clone() }), &[mu, table], out)
    }
}

struct HashEncodeOp {
    grid: HashGrid,
}

impl CustomOp for HashEncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (pos, table) = (inputs[0], inputs[1]);
        let cfg = &self.grid.cfg;
        let fd = cfg.feat_dim;
        let mut g_pos = Tensor::zeros(pos.shape());
        let mut g_tab = Tensor::zeros(table.shape());
        for i in 0..pos.rows() {
            let r = pos.row_slice(i);
            let (p, inside) = self.grid.normalize([r[0], r[1], r[2]]);
            let go = grad.row_slice(i);
            let mut dp = [0.0; 3];
            for (lvl, &res) in self.grid.resolutions.iter().enumerate() {
                for c in level_corners(cfg, res, p) {
                    let row_idx = lvl * cfg.table_size + c.index;
                    let entry = table.row_slice(row_idx);
                    let gt = g_tab.row_slice_mut(row_idx);
                    for k in 0..fd {
                        let gk = go[lvl * fd + k];
                        gt[k] += c.weight * gk;
                        for d in 0..3 {
                            dp[d] += c.dweight[d] * entry[k] * gk;
                        }
                    }
                }
            }
            let gp = g_pos.row_slice_mut(i);
            for d in 0..3 {
                if inside[d] {
                    gp[d] = dp[d] / self.grid.bbox.extent(d);
                }
            }
        }
        vec![Some(g_pos), Some(g_tab)]
    }
}
