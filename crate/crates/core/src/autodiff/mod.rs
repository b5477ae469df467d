//! Reverse-mode differentiation, gradient checking, Adam and checkpoints.

mod adam;
mod check;
mod checkpoint;
mod graph;

pub use adam::{adam_step, AdamState};
pub use check::{analytic_gradient, check_gradient, check_gradient_at};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{write_f64s, Reader};
pub use graph::{sigmoid, CustomOp, Gradients, Graph, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).item(), 6.0);
    }

    #[test]
    fn linear_map_derivative() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.input(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let mv = g.matmul(m, v);
        let s = g.sum(mv);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(v).data(), &[1.0, 1.0]);
    }

    #[test]
    fn sin_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let y = g.sin(x);
        let gr = g.backward(y).unwrap();
        assert!((gr.get(x).item() - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_reports_offending_node() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-1.0));
        let y = g.sqrt(x);
        let s = g.sum(y);
        match g.backward(s) {
            Err(Error::NumericNode { node, op, .. }) => {
                assert_eq!(node, s.id());
                assert_eq!(op, "sum");
            }
            other => panic!("expected numeric failure, got {:?}", other.err()),
        }
        assert_eq!(g.first_non_finite(), Some((y.id(), "sqrt")));
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        let unused = g.input(Tensor::row(vec![5.0, 6.0, 7.0]));
        let y = g.sum(x);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(unused), Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn gradient_check_examples() {
        let err = check_gradient(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!(err <= 1e-6, "{err}");
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        let f = |g: &mut Graph, x: Var| {
            let s = g.square(x);
            g.sum(s)
        };
        let a = analytic_gradient(&f, &x).unwrap();
        assert_eq!(a.data(), &[2.0, 4.0, 6.0]);
        assert!(check_gradient(f, &x, 1e-4).unwrap() <= 1e-6);
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Weighted sum with fixed pseudo-random weights so every output entry
    /// matters to the scalar.
    fn weigh(g: &mut Graph, y: Var) -> Var {
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect());
        let wv = g.constant(w);
        let p = g.mul(y, wv);
        g.sum(p)
    }

    #[test]
    fn every_op_kind_passes_gradient_check() {
        type Case = (&'static str, Box<dyn Fn(&mut Graph, Var) -> Var>, f64, f64);
        let cases: Vec<Case> = vec![
            ("add", Box::new(|g, x| { let c = g.constant(Tensor::full(&[3, 4], 0.3)); g.add(x, c) }), -2.0, 2.0),
            ("sub", Box::new(|g, x| { let t = g.tanh(x); g.sub(t, x) }), -2.0, 2.0),
            ("mul", Box::new(|g, x| { let s = g.sin(x); g.mul(s, x) }), -2.0, 2.0),
            ("div", Box::new(|g, x| { let e = g.exp(x); g.div(x, e) }), -2.0, 2.0),
            ("add_row", Box::new(|g, x| { let r = g.slice_cols(x, 0, 4); let r = g.gather_rows(r, &[1]); g.add_row(x, r) }), -2.0, 2.0),
            ("mul_row", Box::new(|g, x| { let r = g.gather_rows(x, &[2]); g.mul_row(x, r) }), -2.0, 2.0),
            ("mul_col", Box::new(|g, x| { let c = g.slice_cols(x, 1, 1); g.mul_col(x, c) }), -2.0, 2.0),
            ("scale", Box::new(|g, x| g.scale(x, -1.7)), -2.0, 2.0),
            ("offset", Box::new(|g, x| { let o = g.offset(x, 0.5); g.square(o) }), -2.0, 2.0),
            ("matmul", Box::new(|g, x| { let t = g.transpose(x); g.matmul(x, t) }), -2.0, 2.0),
            ("transpose", Box::new(|g, x| { let t = g.transpose(x); g.sin(t) }), -2.0, 2.0),
            ("relu", Box::new(|g, x| g.relu(x)), 0.1, 2.0),
            ("tanh", Box::new(|g, x| g.tanh(x)), -2.0, 2.0),
            ("sigmoid", Box::new(|g, x| g.sigmoid(x)), -3.0, 3.0),
            ("exp", Box::new(|g, x| g.exp(x)), -2.0, 2.0),
            ("log", Box::new(|g, x| g.log(x)), 0.2, 3.0),
            ("sin", Box::new(|g, x| g.sin(x)), -3.0, 3.0),
            ("cos", Box::new(|g, x| g.cos(x)), -3.0, 3.0),
            ("abs", Box::new(|g, x| g.abs(x)), 0.1, 2.0),
            ("square", Box::new(|g, x| g.square(x)), -2.0, 2.0),
            ("sqrt", Box::new(|g, x| g.sqrt(x)), 0.2, 3.0),
            ("clamp", Box::new(|g, x| g.clamp(x, -10.0, 10.0)), -2.0, 2.0),
            ("softmax_rows", Box::new(|g, x| g.softmax_rows(x)), -2.0, 2.0),
            ("normalize_rows", Box::new(|g, x| g.normalize_rows(x, 1e-6)), -2.0, 2.0),
            ("layer_norm_rows", Box::new(|g, x| g.layer_norm_rows(x, 1e-5)), -2.0, 2.0),
            ("sum", Box::new(|g, x| { let s = g.sum(x); g.square(s) }), -2.0, 2.0),
            ("mean", Box::new(|g, x| { let s = g.mean(x); g.sin(s) }), -2.0, 2.0),
            ("concat_cols", Box::new(|g, x| { let t = g.tanh(x); g.concat_cols(&[x, t]) }), -2.0, 2.0),
            ("slice_cols", Box::new(|g, x| g.slice_cols(x, 1, 2)), -2.0, 2.0),
            ("gather_rows", Box::new(|g, x| g.gather_rows(x, &[2, 0, 2])), -2.0, 2.0),
            ("broadcast_rows", Box::new(|g, x| { let r = g.gather_rows(x, &[1]); let b = g.broadcast_rows(r, 5); g.sin(b) }), -2.0, 2.0),
            ("group_max", Box::new(|g, x| g.group_max(x, 3)), -2.0, 2.0),
            ("batched_matvec3", Box::new(|g, x| { let m = g.concat_cols(&[x, x, x]); let m = g.slice_cols(m, 0, 9); let v = g.slice_cols(x, 0, 3); g.batched_matvec3(m, v) }), -2.0, 2.0),
            ("reshape", Box::new(|g, x| { let r = g.reshape(x, &[4, 3]); g.softmax_rows(r) }), -2.0, 2.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, f, lo, hi) in &cases {
            for _ in 0..5 {
                let x = rand_tensor(&mut rng, &[3, 4], *lo, *hi);
                let err = check_gradient(|g, x| { let y = f(g, x); weigh(g, y) }, &x, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn adjoints_are_linear_in_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.input(xv);
        let a = g.tanh(x);
        let ra = g.sum(a);
        let b = g.square(x);
        let rb = g.mean(b);
        let both = g.add(ra, rb);
        let ga = g.backward(ra).unwrap().get(x);
        let gb = g.backward(rb).unwrap().get(x);
        let gab = g.backward(both).unwrap().get(x);
        for i in 0..gab.len() {
            assert!((gab.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let x = g.input(rand_tensor(&mut rng, &[4, 4], -1.0, 1.0));
            let w = g.input(rand_tensor(&mut rng, &[4, 4], -1.0, 1.0));
            let h = g.matmul(x, w);
            let h = g.softmax_rows(h);
            let h = g.layer_norm_rows(h, 1e-5);
            let s = g.sum(h);
            let grads = g.backward(s).unwrap();
            (g.value(h).clone(), grads.get(w))
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[1, 2], 1e-3);
        adam_step(&mut p, &Tensor::zeros(&[1, 2]), &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[1], 1e-3);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st).unwrap();
        assert!((p.item() + 1e-3).abs() < 1e-12);
    }

    #[test]
    fn adam_constant_gradient_steps_stay_at_lr() {
        // Hand recurrence for g = 1: m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999;
        // bias-corrected m2/(1-0.81) = 1, v2/(1-0.998001) = 1 -> step = lr.
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[1], 1e-3);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st).unwrap();
        let p1 = p.item();
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st).unwrap();
        assert!(((p1 - p.item()) - 1e-3).abs() < 1e-12);
        assert!((st.first_moment.item() - 0.19).abs() < 1e-15);
        assert!((st.second_moment.item() - 0.001999).abs() < 1e-15);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::row(vec![1.0, 2.0]);
        let mut st = AdamState::new(&[1, 2], 1e-3);
        assert!(adam_step(&mut p, &Tensor::scalar(1.0), &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
