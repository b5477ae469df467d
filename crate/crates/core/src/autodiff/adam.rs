//! Bias-corrected Adam.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }

    /// Keeps moments for surviving rows, zeroes them for new rows.
    ///
    /// `rows[i]` is the source row of output row `i`, or `None` for a fresh one.
    pub fn remap_rows(&mut self, rows: &[Option<usize>]) {
        fn remap(t: &Tensor, rows: &[Option<usize>]) -> Tensor {
            let c = t.cols();
            let mut out = Tensor::zeros(&[rows.len(), c]);
            for (i, src) in rows.iter().enumerate() {
                if let Some(s) = src {
                    out.row_slice_mut(i).copy_from_slice(t.row_slice(*s));
                }
            }
            out
        }
        self.first_moment = remap(&self.first_moment, rows);
        self.second_moment = remap(&self.second_moment, rows);
    }
}

pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(contract(format!(
            "adam_step shape mismatch: params {:?}, grads {:?}, moments {:?}",
            params.shape(),
            grads.shape(),
            state.first_moment.shape()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in params.data_mut().iter_mut().zip(grads.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}
