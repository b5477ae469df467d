//! Differentiable point-based splatting renderer.

mod camera;
mod image_io;
mod raster;

pub use camera::Camera;
pub use image_io::{load_png, read_raw, save_png, save_raw, load_raw, to_rgb8, write_raw, RAW_MAGIC};
pub use raster::{
    composite_pixel, compositing_weights, evaluate_alpha, project_gaussian, Frame, InputGrads,
    RasterMode, Splat2D, SplatInput, ALPHA_MAX, ALPHA_MIN, DILATION, TILE,
};

use crate::autodiff::{sigmoid, CustomOp, Graph, Var};
use crate::gaussian::GaussianKernel;
use crate::tensor::Tensor;

/// Renders constrained kernels to an `[H, W, 3]` image.
pub fn render_kernels(kernels: &[GaussianKernel], cam: &Camera, mode: RasterMode) -> Tensor {
    let inputs: Vec<SplatInput> = kernels.iter().map(SplatInput::from).collect();
    Frame::new(&inputs, cam, mode).render()
}

/// Graph handles for kernel arrays in unconstrained form
/// (`mu [N,3]`, `rot [N,4]`, `log_scale [N,3]`, `opacity_logit [N,1]`, `color [N,3]`).
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub mu: Var,
    pub rot: Var,
    pub log_scale: Var,
    pub opacity_logit: Var,
    pub color: Var,
}

struct RenderOp {
    frame: Frame,
    scale: Vec<[f64; 3]>,
    opacity: Vec<f64>,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.opacity.len();
        let g = self.frame.backward(n, grad);
        let flat3 = |v: &[[f64; 3]]| Tensor::new(&[n, 3], v.iter().flatten().copied().collect());
        let g_log_scale: Vec<[f64; 3]> = g
            .scale
            .iter()
            .zip(&self.scale)
            .map(|(gs, s)| [gs[0] * s[0], gs[1] * s[1], gs[2] * s[2]])
            .collect();
        let g_logit: Vec<f64> = g
            .opacity
            .iter()
            .zip(&self.opacity)
            .map(|(go, o)| go * o * (1.0 - o))
            .collect();
        vec![
            Some(flat3(&g.mu)),
            Some(Tensor::new(&[n, 4], g.rot.iter().flatten().copied().collect())),
            Some(flat3(&g_log_scale)),
            Some(Tensor::new(&[n, 1], g_logit)),
            Some(flat3(&g.color)),
        ]
    }
}

/// Differentiable render of the kernels in `k` seen from `cam`.
pub fn render_graph(g: &mut Graph, k: &KernelVars, cam: &Camera, mode: RasterMode) -> Var {
    let n = g.value(k.mu).rows();
    let row = |t: &Tensor, i: usize| t.row_slice(i).to_vec();
    let mut inputs = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut opac = Vec::with_capacity(n);
    for i in 0..n {
        let scale: [f64; 3] = row(g.value(k.log_scale), i)
            .iter()
            .map(|v| v.exp())
            .collect::<Vec<_>>()
            .try_into()
            .unwrap();
        let opacity = sigmoid(g.value(k.opacity_logit).data()[i]);
        inputs.push(SplatInput {
            mu: row(g.value(k.mu), i).try_into().unwrap(),
            rot: row(g.value(k.rot), i).try_into().unwrap(),
            scale,
            opacity,
            color: row(g.value(k.color), i).try_into().unwrap(),
        });
        scales.push(scale);
        opac.push(opacity);
    }
    let frame = Frame::new(&inputs, cam, mode);
    let image = frame.render();
    let op = RenderOp {
        frame,
        scale: scales,
        opacity: opac,
    };
    g.custom(
        Box::new(op),
        &[k.mu, k.rot, k.log_scale, k.opacity_logit, k.color],
        image,
    )
}

#[cfg(test)]
mod tests;
