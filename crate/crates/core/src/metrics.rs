//! Image metrics and the photometric training loss.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid positions only,
//! stabilizers `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over positions and
//! channels.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

fn window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

fn hwc(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    match *a.shape() {
        [h, w, c] if h >= SSIM_WINDOW && w >= SSIM_WINDOW && c > 0 => Ok((h, w, c)),
        _ => Err(contract(format!(
            "SSIM needs [H, W, C] images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {:?}",
            a.shape()
        ))),
    }
}

/// Valid separable filtering of one channel plane `[h, w]`.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `[oh, ow]` map back to `[h, w]`.
fn filter_adjoint(g: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * g[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * tmp[y * ow + x];
            }
        }
    }
    out
}

fn plane(img: &Tensor, ch: usize, c: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(c).copied().collect()
}

struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    cxy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Stats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let exx = filter_valid(&sq(x, x), h, w, k);
    let eyy = filter_valid(&sq(y, y), h, w, k);
    let exy = filter_valid(&sq(x, y), h, w, k);
    let n = mx.len();
    Stats {
        vx: (0..n).map(|i| exx[i] - mx[i] * mx[i]).collect(),
        vy: (0..n).map(|i| eyy[i] - my[i] * my[i]).collect(),
        cxy: (0..n).map(|i| exy[i] - mx[i] * my[i]).collect(),
        mx,
        my,
    }
}

fn ssim_map(s: &Stats, i: usize) -> (f64, f64, f64, f64, f64) {
    let n1 = 2.0 * s.mx[i] * s.my[i] + SSIM_C1;
    let n2 = 2.0 * s.cxy[i] + SSIM_C2;
    let d1 = s.mx[i] * s.mx[i] + s.my[i] * s.my[i] + SSIM_C1;
    let d2 = s.vx[i] + s.vy[i] + SSIM_C2;
    (n1 * n2 / (d1 * d2), n1, n2, d1, d2)
}

/// Mean SSIM of two `[H, W, C]` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, c) = hwc(a, b)?;
    let k = window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let s = stats(&plane(a, ch, c), &plane(b, ch, c), h, w, &k);
        for i in 0..s.mx.len() {
            total += ssim_map(&s, i).0;
        }
        count += s.mx.len();
    }
    Ok(total / count as f64)
}

/// `(1 - SSIM) / 2`.
pub fn dssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
}

/// Peak-signal-to-noise ratio for peak value 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// `(1 - λ) L1 + λ D-SSIM`.
pub fn compute_loss(rendered: &Tensor, gt: &Tensor, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let l = l1(rendered, gt)?;
    if lambda == 0.0 {
        return Ok(l);
    }
    Ok((1.0 - lambda) * l + lambda * dssim(rendered, gt)?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

struct SsimOp {
    h: usize,
    w: usize,
    c: usize,
}

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (h, w, c) = (self.h, self.w, self.c);
        let k = window();
        let mut ga = Tensor::zeros(inputs[0].shape());
        let mut gb = Tensor::zeros(inputs[1].shape());
        let oh = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        let scale = grad.item() / (oh * c) as f64;
        for ch in 0..c {
            let x = plane(inputs[0], ch, c);
            let y = plane(inputs[1], ch, c);
            let s = stats(&x, &y, h, w, &k);
            let mut ax = vec![0.0; oh];
            let mut ay = vec![0.0; oh];
            let mut bx = vec![0.0; oh];
            let mut by = vec![0.0; oh];
            let mut cc = vec![0.0; oh];
            for i in 0..oh {
                let (v, n1, n2, d1, d2) = ssim_map(&s, i);
                let d = d1 * d2;
                let dmx = 2.0 * s.my[i] * n2 / d - 2.0 * s.mx[i] * v / d1;
                let dmy = 2.0 * s.mx[i] * n2 / d - 2.0 * s.my[i] * v / d1;
                let dvx = -v / d2;
                let dcxy = 2.0 * n1 / d;
                // chain through vx = E[x^2] - mx^2 and cxy = E[xy] - mx my
                ax[i] = scale * (dmx - 2.0 * dvx * s.mx[i] - dcxy * s.my[i]);
                ay[i] = scale * (dmy - 2.0 * dvx * s.my[i] - dcxy * s.mx[i]);
                bx[i] = scale * dvx;
                by[i] = scale * dvx;
                cc[i] = scale * dcxy;
            }
            let fa = filter_adjoint(&ax, h, w, &k);
            let fay = filter_adjoint(&ay, h, w, &k);
            let fbx = filter_adjoint(&bx, h, w, &k);
            let fby = filter_adjoint(&by, h, w, &k);
            let fc = filter_adjoint(&cc, h, w, &k);
            for p in 0..h * w {
                ga.data_mut()[p * c + ch] = fa[p] + 2.0 * x[p] * fbx[p] + y[p] * fc[p];
                gb.data_mut()[p * c + ch] = fay[p] + 2.0 * y[p] * fby[p] + x[p] * fc[p];
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

/// Differentiable mean SSIM of two `[H, W, C]` images.
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (h, w, c) = hwc(g.value(a), g.value(b))?;
    let v = ssim(g.value(a), g.value(b))?;
    Ok(g.custom(Box::new(SsimOp { h, w, c }), &[a, b], Tensor::scalar(v)))
}

/// Differentiable `(1 - λ) L1 + λ D-SSIM`; also returns the L1 and D-SSIM nodes.
pub fn loss_graph(g: &mut Graph, rendered: Var, gt: Var, lambda: f64) -> Result<(Var, Var, Var)> {
    check_lambda(lambda)?;
    let d = g.sub(rendered, gt);
    let d = g.abs(d);
    let l1v = g.mean(d);
    let s = ssim_graph(g, rendered, gt)?;
    let ds = g.neg(s);
    let ds = g.offset(ds, 1.0);
    let ds = g.scale(ds, 0.5);
    let a = g.scale(l1v, 1.0 - lambda);
    let b = g.scale(ds, lambda);
    Ok((g.add(a, b), l1v, ds))
}
