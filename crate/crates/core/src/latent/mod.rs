//! Initial latent state: hash-grid local features per particle and one
//! attention-pooled global feature for the whole particle set.

mod global;
mod group;
mod hash;

pub use global::GlobalEncoderConfig;
pub use group::{fps, knn_group, lexicographic_seed, Grouping};
pub use hash::{Aabb, HashGrid, HashGridConfig, HASH_PRIMES, MAX_TABLE_SIZE};

use crate::tensor::Tensor;

/// Margin added around the warm-up particles when fixing the hash box.
pub const BBOX_MARGIN: f64 = 0.05;
/// Regroup period in training iterations.
pub const REGROUP_INTERVAL: u64 = 500;

/// `(g, l)`: global feature `[1, G]` and local features `[N, L*F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub global: Tensor,
    pub local: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegroupEvent {
    Clone,
    Split,
    Delete,
    Iteration(u64),
}

/// Whether FPS/KNN groupings must be recomputed after `event`.
pub fn regroup_schedule(event: RegroupEvent) -> bool {
    match event {
        RegroupEvent::Clone | RegroupEvent::Split | RegroupEvent::Delete => true,
        RegroupEvent::Iteration(i) => i > 0 && i % REGROUP_INTERVAL == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, check_gradient_at, Graph};
    use crate::gaussian::dist;
    use crate::nn::Params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HashGridConfig {
        HashGridConfig {
            levels: 2,
            n_min: 4,
            n_max: 8,
            table_size: 1 << 12,
            feat_dim: 2,
            primes: HASH_PRIMES,
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn resolution_examples() {
        let mut c = HashGridConfig {
            levels: 2,
            ..Default::default()
        };
        assert_eq!(c.resolution_levels().unwrap(), vec![16, 512]);
        c.levels = 16;
        let r = c.resolution_levels().unwrap();
        assert_eq!(r[1], 20);
        assert_eq!(r[15], 512);
        c.n_max = 16;
        assert!(c.resolution_levels().is_err());
        c.n_max = 512;
        c.levels = 1;
        assert!(c.resolution_levels().is_err());
    }

    #[test]
    fn hash_examples() {
        let c = HashGridConfig::default();
        assert_eq!(c.hash_index([0, 0, 0]), 0);
        assert_eq!(c.hash_index([1, 0, 0]), 1);
        assert_eq!(c.hash_index([1, 1, 0]), 2_654_435_760 % c.table_size);
    }

    proptest! {
        #[test]
        fn hash_stays_in_table(x in 0u32..100_000, y in 0u32..100_000, z in 0u32..100_000, m in 1usize..=MAX_TABLE_SIZE) {
            let c = HashGridConfig { table_size: m, ..Default::default() };
            let h = c.hash_index([x, y, z]);
            prop_assert!(h < m);
            prop_assert_eq!(h, c.hash_index([x, y, z]));
        }
    }

    #[test]
    fn vertex_position_returns_table_entry() {
        let cfg = small_cfg();
        let grid = HashGrid::new(cfg.clone(), Aabb::UNIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = cfg.init_table(&mut rng);
        let mu = [0.25, 0.5, 0.75];
        let f = grid.encode_local(mu, &table);
        for (lvl, &res) in grid.resolutions.iter().enumerate() {
            let v = mu.map(|c| (c * res as f64) as u32);
            let row = table.row_slice(lvl * cfg.table_size + cfg.hash_index(v));
            assert_eq!(&f[lvl * 2..lvl * 2 + 2], row);
        }
        let zero = Tensor::zeros(table.shape());
        assert!(grid.encode_local([0.3, 0.1, 0.9], &zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_centre_is_mean_of_corners() {
        let cfg = small_cfg();
        let grid = HashGrid::new(cfg.clone(), Aabb::UNIT).unwrap();
        let table = cfg.init_table(&mut ChaCha8Rng::seed_from_u64(2));
        // centre of cell (1,2,0) at level 0 (res 4)
        let p = [1.5 / 4.0, 2.5 / 4.0, 0.5 / 4.0];
        let f = grid.encode_local(p, &table);
        let mut want = [0.0; 2];
        for corner in 0..8 {
            let v = [1 + (corner & 1) as u32, 2 + ((corner >> 1) & 1) as u32, ((corner >> 2) & 1) as u32];
            let row = table.row_slice(cfg.hash_index(v));
            want[0] += row[0] / 8.0;
            want[1] += row[1] / 8.0;
        }
        assert!((f[0] - want[0]).abs() < 1e-15 && (f[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn encoding_is_continuous_and_clamped() {
        let cfg = small_cfg();
        let grid = HashGrid::new(cfg.clone(), Aabb::around(&[[-1.0; 3], [1.0; 3]], BBOX_MARGIN).unwrap()).unwrap();
        let table = cfg.init_table(&mut ChaCha8Rng::seed_from_u64(3)).map(|v| v * 1e4);
        let mu = [0.123, -0.456, 0.789];
        let base = grid.encode_local(mu, &table);
        let mut last = f64::INFINITY;
        for e in [1e-2, 1e-4, 1e-6, 1e-8] {
            let f = grid.encode_local([mu[0] + e, mu[1] - e, mu[2] + e], &table);
            let d = f.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= last + 1e-15);
            last = d;
        }
        assert!(last < 1e-6);
        let far = grid.encode_local([50.0, 0.0, 0.0], &table);
        let edge = grid.encode_local([grid.bbox.max[0], 0.0, 0.0], &table);
        assert_eq!(far, edge);
    }

    #[test]
    fn hash_encoding_gradients() {
        let cfg = HashGridConfig {
            table_size: 64,
            ..small_cfg()
        };
        let grid = HashGrid::new(cfg.clone(), Aabb::around(&[[-1.0; 3], [1.0; 3]], BBOX_MARGIN).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = cfg.init_table(&mut rng).map(|v| v * 1e4);
        let mu = Tensor::new(&[5, 3], random_points(&mut rng, 5).concat());
        let weights = Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect());
        let (t2, w2) = (table.clone(), weights.clone());
        let by_mu = |g: &mut Graph, x| {
            let t = g.constant(t2.clone());
            let f = grid.encode_graph(g, x, t);
            let w = g.constant(w2.clone());
            let p = g.mul(f, w);
            g.sum(p)
        };
        assert!(check_gradient(by_mu, &mu, 1e-6).unwrap() <= 1e-4);
        let by_table = |g: &mut Graph, x| {
            let m = g.constant(mu.clone());
            let f = grid.encode_graph(g, m, x);
            let w = g.constant(weights.clone());
            let p = g.mul(f, w);
            g.sum(p)
        };
        assert!(check_gradient(by_table, &table, 1e-6).unwrap() <= 1e-4);
    }

    #[test]
    fn fps_examples() {
        let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(fps(&line, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps(&line, 1, 2).unwrap(), vec![2]);
        assert!(fps(&line, 5, 0).is_err());
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps(&sq, 2, 0).unwrap()[1], 3);
        assert_eq!(lexicographic_seed(&[[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 5.0, 0.0]]), 1);
    }

    /// Independent max-min oracle: re-derives every pick from scratch.
    fn fps_oracle(points: &[[f64; 3]], k: usize, seed: usize) -> Vec<usize> {
        let mut chosen = vec![seed];
        while chosen.len() < k {
            let score = |i: usize| chosen.iter().map(|&c| dist(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            let best = (0..points.len())
                .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
                .unwrap();
            chosen.push(best);
        }
        chosen
    }

    #[test]
    fn fps_and_knn_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=64);
            let pts = random_points(&mut rng, n);
            let k = rng.random_range(1..=n);
            let seed = lexicographic_seed(&pts);
            let got = fps(&pts, k, seed).unwrap();
            assert_eq!(got, fps_oracle(&pts, k, seed));
            // covering radius of the last pick bounds every point
            let r = got[..k - 1]
                .iter()
                .map(|&c| dist(&pts[got[k - 1]], &pts[c]))
                .fold(f64::INFINITY, f64::min);
            if k > 1 {
                for p in &pts {
                    let near = got.iter().map(|&c| dist(p, &pts[c])).fold(f64::INFINITY, f64::min);
                    assert!(near <= r + 1e-12);
                }
            }
            let kn = rng.random_range(1..=n);
            let groups = knn_group(&pts, &got, kn).unwrap();
            for (&c, grp) in got.iter().zip(&groups) {
                let mut all: Vec<usize> = (0..n).collect();
                all.sort_by(|&a, &b| dist(&pts[a], &pts[c]).total_cmp(&dist(&pts[b], &pts[c])).then(a.cmp(&b)));
                assert_eq!(grp, &all[..kn]);
            }
        }
    }

    #[test]
    fn knn_examples() {
        let mut pts: Vec<[f64; 3]> = (0..4).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        pts.extend((0..4).map(|i| [100.0 + i as f64 * 0.01, 0.0, 0.0]));
        let groups = knn_group(&pts, &[0, 5], 4).unwrap();
        assert!(groups[0].iter().all(|&i| i < 4));
        assert!(groups[1].iter().all(|&i| i >= 4));
        assert_eq!(knn_group(&pts, &[6], 1).unwrap(), vec![vec![6]]);
        assert!(knn_group(&pts, &[0], 9).is_err());
    }

    #[test]
    fn grouping_blob_round_trip() {
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(6), 40);
        let grp = Grouping::compute(&pts, 8, 5).unwrap();
        assert_eq!(Grouping::from_bytes(&grp.to_bytes()).unwrap(), grp);
        assert!(Grouping::from_bytes(&[1, 2, 3]).is_err());
    }

    fn encoder() -> (GlobalEncoderConfig, Params) {
        let cfg = GlobalEncoderConfig {
            n_centers: 6,
            k_neighbors: 4,
            group_feat_dim: 16,
            attn_layers: 2,
            attn_heads: 4,
            global_dim: 12,
        };
        let p = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        (cfg, p)
    }

    fn g0(cfg: &GlobalEncoderConfig, p: &Params, pts: &[[f64; 3]]) -> Vec<f64> {
        let grp = Grouping::compute(pts, cfg.n_centers, cfg.k_neighbors).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let mu = g.constant(Tensor::new(&[pts.len(), 3], pts.concat()));
        let out = cfg.encode_global(&mut g, &b, mu, &grp).unwrap();
        assert_eq!(g.shape(out), &[1, cfg.global_dim]);
        g.value(out).data().to_vec()
    }

    #[test]
    fn global_feature_ignores_particle_order() {
        let (cfg, p) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 32);
        let a = g0(&cfg, &p, &pts);
        let mut perm: Vec<usize> = (0..32).collect();
        for i in (1..32).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let b = g0(&cfg, &p, &shuffled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn group_token_ignores_member_order() {
        let (cfg, p) = encoder();
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(9), 20);
        let grp = Grouping::compute(&pts, cfg.n_centers, cfg.k_neighbors).unwrap();
        let mut rev = grp.clone();
        rev.groups.iter_mut().for_each(|g| g.reverse());
        rev.centers.reverse();
        rev.groups.reverse();
        let run = |grp: &Grouping| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let mu = g.constant(Tensor::new(&[20, 3], pts.concat()));
            let out = cfg.encode_global(&mut g, &b, mu, grp).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(&grp), run(&rev));
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() <= 1e-12);
    }

    #[test]
    fn zero_weights_propagate_output_bias() {
        let (cfg, mut p) = encoder();
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            let t = p.get_mut(&n);
            let fill = if n.ends_with(".b") { 0.25 } else { 0.0 };
            *t = t.map(|_| fill);
        }
        let one = [[0.0; 3]];
        let single = GlobalEncoderConfig {
            n_centers: 1,
            k_neighbors: 1,
            ..cfg
        };
        let a = g0(&single, &p, &one);
        assert_eq!(a, vec![0.25; single.global_dim]);
        assert_eq!(a, g0(&single, &p, &one));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let mu = g.constant(Tensor::zeros(&[1, 3]));
        assert!(single
            .encode_global(&mut g, &b, mu, &Grouping { centers: vec![], groups: vec![] })
            .is_err());
    }

    #[test]
    fn global_encoder_gradients() {
        let (cfg, p) = encoder();
        let pts = random_points(&mut ChaCha8Rng::seed_from_u64(10), 16);
        let grp = Grouping::compute(&pts, cfg.n_centers, cfg.k_neighbors).unwrap();
        let mu = Tensor::new(&[16, 3], pts.concat());
        let f = |g: &mut Graph, x| {
            let b = p.bind(g);
            let out = cfg.encode_global(g, &b, x, &grp).unwrap();
            let s = g.square(out);
            g.sum(s)
        };
        assert!(check_gradient(f, &mu, 1e-6).unwrap() <= 1e-4);
        for name in ["enc.point1.w", "enc.attn0.q.w", "enc.attn1.ff2.w", "enc.out.b"] {
            let f = |g: &mut Graph, x| {
                let mut q = p.clone();
                q.tensors.shift_remove(name);
                let mut b = q.bind(g);
                b.vars.insert(name.to_string(), x);
                let m = g.constant(mu.clone());
                let out = cfg.encode_global(g, &b, m, &grp).unwrap();
                let s = g.square(out);
                g.sum(s)
            };
            let t = p.get(name);
            let coords: Vec<usize> = (0..t.len()).step_by(7).collect();
            assert!(check_gradient_at(f, t, 1e-6, &coords).unwrap() <= 1e-4, "{name}");
        }
    }

    #[test]
    fn regroup_examples() {
        assert!(regroup_schedule(RegroupEvent::Iteration(500)));
        assert!(!regroup_schedule(RegroupEvent::Iteration(501)));
        assert!(!regroup_schedule(RegroupEvent::Iteration(0)));
        assert!(regroup_schedule(RegroupEvent::Clone));
        assert!(regroup_schedule(RegroupEvent::Split));
        assert!(regroup_schedule(RegroupEvent::Delete));
    }
}
