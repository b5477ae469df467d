//! Projection, per-pixel alpha compositing and the analytic adjoint.
//!
//! Every visible Gaussian is projected once per camera, the projected list
//! is sorted globally by camera depth (ties by particle index), and each
//! pixel composites front to back over a black background:
//!
//! `C(p) = sum_i T_i a_i c_i`, `T_i = prod_{j<i} (1 - a_j)`,
//! `a_i = min(0.99, o_i exp(-d^T S'^-1 d / 2))`, skipped when `a_i < 1/255`.
//!
//! The reference path visits every sorted splat at every pixel. The tiled
//! path bins splats into 8x8 pixel tiles using the exact ellipse on which
//! `a_i` reaches `1/255`, then runs the identical per-pixel loop over the
//! tile's list, so both paths produce bit-identical output.

use crate::error::{contract, Result};
use crate::gaussian::{mat_mul, quat_to_matrix, GaussianKernel, Mat3};
use crate::render::Camera;
use crate::tensor::Tensor;

/// Added to the diagonal of every projected covariance.
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TILE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Pixel coordinates; pixel `(x, y)` is sampled at exactly `(x, y)`.
    pub center: [f64; 2],
    /// Symmetric `[[xx, xy], [xy, yy]]` stored as `(xx, xy, yy)`.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat2D {
    /// Inverse covariance `(xx, xy, yy)`.
    pub fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }
}

/// Clamped opacity of `splat` at pixel position `p` (no skip threshold).
pub fn evaluate_alpha(splat: &Splat2D, p: [f64; 2]) -> f64 {
    let [a, b, c] = splat.conic();
    let dx = p[0] - splat.center[0];
    let dy = p[1] - splat.center[1];
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    (splat.opacity * (-0.5 * q).exp()).min(ALPHA_MAX)
}

/// Front-to-back compositing of a depth-ascending list at one pixel.
pub fn composite_pixel(splats: &[Splat2D], p: [f64; 2]) -> Result<[f64; 3]> {
    if splats.windows(2).any(|w| w[0].depth > w[1].depth) {
        return Err(contract("composite_pixel expects splats sorted by ascending depth"));
    }
    let mut out = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let a = evaluate_alpha(s, p);
        if a < ALPHA_MIN {
            continue;
        }
        for ch in 0..3 {
            out[ch] += t * a * s.color[ch];
        }
        t *= 1.0 - a;
    }
    Ok(out)
}

/// Per-splat weights `T_i a_i` at `p` and the final transmittance.
pub fn compositing_weights(splats: &[Splat2D], p: [f64; 2]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(splats.len());
    for s in splats {
        let a = evaluate_alpha(s, p);
        if a < ALPHA_MIN {
            w.push(0.0);
            continue;
        }
        w.push(t * a);
        t *= 1.0 - a;
    }
    (w, t)
}

/// Pinhole projection with the local affine (Jacobian) approximation.
pub fn project_gaussian(kernel: &GaussianKernel, cam: &Camera) -> Option<Splat2D> {
    let p = project_one(
        0,
        &SplatInput {
            mu: kernel.mu,
            rot: kernel.rot,
            scale: kernel.scale,
            opacity: kernel.opacity,
            color: kernel.color,
        },
        cam,
    )?;
    Some(p.splat)
}

/// Renderer input for one Gaussian. `rot` need not be unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatInput {
    pub mu: [f64; 3],
    pub rot: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl From<&GaussianKernel> for SplatInput {
    fn from(k: &GaussianKernel) -> Self {
        Self {
            mu: k.mu,
            rot: k.rot,
            scale: k.scale,
            opacity: k.opacity,
            color: k.color,
        }
    }
}

#[derive(Clone, Debug)]
struct Projected {
    index: usize,
    splat: Splat2D,
    conic: [f64; 3],
    t_cam: [f64; 3],
    /// `J W`, 2x3.
    jw: [[f64; 3]; 2],
    sigma: Mat3,
    rmat: Mat3,
    qhat: [f64; 4],
    qnorm: f64,
    scale: [f64; 3],
}

fn project_one(index: usize, inp: &SplatInput, cam: &Camera) -> Option<Projected> {
    let t = cam.to_camera(inp.mu);
    if t[2] <= cam.near {
        return None;
    }
    let qnorm = inp.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    let qhat = inp.rot.map(|v| v / qnorm);
    let rmat = quat_to_matrix(qhat);
    let s = inp.scale;
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| rmat[i][k] * s[k] * s[k] * rmat[j][k]).sum();
        }
    }
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [
        [cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)],
        [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)],
    ];
    let w = cam.rotation();
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += jw[r][a] * sigma[a][b] * jw[c][b];
                }
            }
            cov[r][c] = acc;
        }
    }
    let cov2d = [cov[0][0] + DILATION, 0.5 * (cov[0][1] + cov[1][0]), cov[1][1] + DILATION];
    let splat = Splat2D {
        center: [cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy],
        cov2d,
        depth: tz,
        opacity: inp.opacity,
        color: inp.color,
    };
    let conic = splat.conic();
    Some(Projected {
        index,
        splat,
        conic,
        t_cam: t,
        jw,
        sigma,
        rmat,
        qhat,
        qnorm,
        scale: s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterMode {
    /// Every splat at every pixel.
    Reference,
    /// Tile-binned lists; same result as `Reference`.
    Tiled,
}

/// One camera's projected, depth-sorted splats plus optional tile bins.
pub struct Frame {
    width: usize,
    height: usize,
    focal: [f64; 2],
    view_rot: Mat3,
    splats: Vec<Projected>,
    tiles: Option<Vec<Vec<u32>>>,
}

fn tiles_x(width: usize) -> usize {
    width.div_ceil(TILE)
}

impl Frame {
    pub fn new(inputs: &[SplatInput], cam: &Camera, mode: RasterMode) -> Self {
        let mut splats: Vec<Projected> = inputs
            .iter()
            .enumerate()
            .filter_map(|(i, inp)| project_one(i, inp, cam))
            .collect();
        splats.sort_by(|a, b| a.splat.depth.total_cmp(&b.splat.depth).then(a.index.cmp(&b.index)));
        let tiles = (mode == RasterMode::Tiled).then(|| bin_tiles(&splats, cam.width, cam.height));
        Self {
            width: cam.width,
            height: cam.height,
            focal: [cam.fx, cam.fy],
            view_rot: cam.rotation(),
            splats,
            tiles,
        }
    }

    pub fn visible(&self) -> usize {
        self.splats.len()
    }

    /// Depth-sorted projected splats.
    pub fn splats(&self) -> Vec<Splat2D> {
        self.splats.iter().map(|p| p.splat).collect()
    }

    fn list_for(&self, x: usize, y: usize) -> PixelList<'_> {
        match &self.tiles {
            Some(t) => PixelList::Tile(&t[(y / TILE) * tiles_x(self.width) + x / TILE]),
            None => PixelList::All(self.splats.len()),
        }
    }

    /// Rendered `[H, W, 3]` image.
    pub fn render(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let mut t = 1.0;
                let mut c = [0.0; 3];
                for k in self.list_for(x, y).iter() {
                    let s = &self.splats[k];
                    let Some((a, _)) = alpha_at(s, p) else { continue };
                    for ch in 0..3 {
                        c[ch] += t * a * s.splat.color[ch];
                    }
                    t *= 1.0 - a;
                }
                out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        Tensor::new(&[h, w, 3], out)
    }

    /// Adjoints of `sum(grad_image * image)` with respect to every input.
    pub fn backward(&self, n_inputs: usize, grad_image: &Tensor) -> InputGrads {
        let (w, h) = (self.width, self.height);
        let m = self.splats.len();
        let mut g_center = vec![[0.0; 2]; m];
        let mut g_conic = vec![[0.0; 3]; m];
        let mut g_opacity = vec![0.0; m];
        let mut g_color = vec![[0.0; 3]; m];
        let mut contrib: Vec<(usize, f64, f64, bool, f64, f64)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let gp = &grad_image.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
                if gp.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let p = [x as f64, y as f64];
                contrib.clear();
                let mut t = 1.0;
                for k in self.list_for(x, y).iter() {
                    let s = &self.splats[k];
                    let Some((a, gauss)) = alpha_at(s, p) else { continue };
                    let clamped = s.splat.opacity * gauss > ALPHA_MAX;
                    contrib.push((k, a, t, clamped, p[0] - s.splat.center[0], p[1] - s.splat.center[1]));
                    t *= 1.0 - a;
                }
                let mut after = [0.0; 3];
                for &(k, a, t, clamped, dx, dy) in contrib.iter().rev() {
                    let s = &self.splats[k];
                    let c = s.splat.color;
                    for ch in 0..3 {
                        g_color[k][ch] += gp[ch] * t * a;
                    }
                    if !clamped {
                        let mut g_a = 0.0;
                        for ch in 0..3 {
                            g_a += gp[ch] * (t * c[ch] - after[ch] / (1.0 - a));
                        }
                        let gauss = a / s.splat.opacity;
                        g_opacity[k] += g_a * gauss;
                        // a = o exp(-q/2), dq/d(center) = -2 S^-1 d
                        let g_q = -0.5 * a * g_a;
                        let [ca, cb, cc] = s.conic;
                        g_center[k][0] += g_q * -2.0 * (ca * dx + cb * dy);
                        g_center[k][1] += g_q * -2.0 * (cb * dx + cc * dy);
                        g_conic[k][0] += g_q * dx * dx;
                        g_conic[k][1] += g_q * 2.0 * dx * dy;
                        g_conic[k][2] += g_q * dy * dy;
                    }
                    for ch in 0..3 {
                        after[ch] += t * a * c[ch];
                    }
                }
            }
        }
        let mut out = InputGrads::zeros(n_inputs);
        for (k, s) in self.splats.iter().enumerate() {
            chain_to_inputs(s, g_center[k], g_conic[k], &mut out, self.cam_fx_fy());
            out.opacity[s.index] += g_opacity[k];
            for ch in 0..3 {
                out.color[s.index][ch] += g_color[k][ch];
            }
        }
        out
    }

    fn cam_fx_fy(&self) -> ([f64; 2], Mat3) {
        (self.focal, self.view_rot)
    }
}

enum PixelList<'a> {
    All(usize),
    Tile(&'a [u32]),
}

impl PixelList<'_> {
    fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            PixelList::All(n) => Box::new(0..*n),
            PixelList::Tile(t) => Box::new(t.iter().map(|&k| k as usize)),
        }
    }
}

/// `(alpha, exp(-q/2))` when the splat contributes at `p`.
#[inline]
fn alpha_at(s: &Projected, p: [f64; 2]) -> Option<(f64, f64)> {
    let dx = p[0] - s.splat.center[0];
    let dy = p[1] - s.splat.center[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let gauss = (-0.5 * q).exp();
    let alpha = (s.splat.opacity * gauss).min(ALPHA_MAX);
    (alpha >= ALPHA_MIN).then_some((alpha, gauss))
}

fn bin_tiles(splats: &[Projected], width: usize, height: usize) -> Vec<Vec<u32>> {
    let (tx, ty) = (tiles_x(width), height.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); tx * ty];
    for (k, s) in splats.iter().enumerate() {
        let o = s.splat.opacity.min(ALPHA_MAX);
        if o < ALPHA_MIN {
            continue;
        }
        // alpha >= 1/255  <=>  q <= 2 ln(255 o); the ellipse q = r has
        // half-extents sqrt(r * cov_xx), sqrt(r * cov_yy).
        let r = 2.0 * (255.0 * s.splat.opacity).ln();
        let ex = (r * s.splat.cov2d[0]).sqrt() + 1.0;
        let ey = (r * s.splat.cov2d[2]).sqrt() + 1.0;
        let [cx, cy] = s.splat.center;
        let x0 = (cx - ex).floor().max(0.0);
        let x1 = (cx + ex).ceil().min(width as f64 - 1.0);
        let y0 = (cy - ey).floor().max(0.0);
        let y1 = (cy + ey).ceil().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty_i in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx_i in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tiles[ty_i * tx + tx_i].push(k as u32);
            }
        }
    }
    tiles
}

/// Per-input adjoints of a render.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrads {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl InputGrads {
    fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            scale: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

fn chain_to_inputs(s: &Projected, g_center: [f64; 2], g_conic: [f64; 3], out: &mut InputGrads, cam: ([f64; 2], Mat3)) {
    let ([fx, fy], w) = cam;
    let [ca, cb, cc] = s.conic;
    // conic = cov^-1  =>  dL/dcov = -conic G conic, G symmetric with the
    // off-diagonal adjoint split across both entries.
    let gc = [[g_conic[0], 0.5 * g_conic[1]], [0.5 * g_conic[1], g_conic[2]]];
    let k = [[ca, cb], [cb, cc]];
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += k[i][a] * gc[a][b] * k[b][j];
                }
            }
            g2[i][j] = -acc;
        }
    }
    // cov = T S T^T (+ dilation), T = J W
    let t = &s.jw;
    let mut g_sigma = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += t[i][a] * g2[i][j] * t[j][b];
                }
            }
            g_sigma[a][b] = acc;
        }
    }
    let mut g_t = [[0.0; 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for j in 0..2 {
                for a in 0..3 {
                    acc += g2[i][j] * t[j][a] * s.sigma[a][c];
                }
            }
            g_t[i][c] = 2.0 * acc;
        }
    }
    // T = J W  =>  dL/dJ = dL/dT W^T
    let mut g_j = [[0.0; 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            g_j[i][c] = (0..3).map(|k| g_t[i][k] * w[c][k]).sum();
        }
    }
    let [tx, ty, tz] = s.t_cam;
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut g_cam = [
        g_j[0][2] * (-fx / tz2),
        g_j[1][2] * (-fy / tz2),
        g_j[0][0] * (-fx / tz2) + g_j[0][2] * (2.0 * fx * tx / tz3) + g_j[1][1] * (-fy / tz2)
            + g_j[1][2] * (2.0 * fy * ty / tz3),
    ];
    g_cam[0] += g_center[0] * fx / tz;
    g_cam[1] += g_center[1] * fy / tz;
    g_cam[2] += -g_center[0] * fx * tx / tz2 - g_center[1] * fy * ty / tz2;
    let i = s.index;
    for c in 0..3 {
        out.mu[i][c] += (0..3).map(|r| w[r][c] * g_cam[r]).sum::<f64>();
    }
    // Sigma = M M^T, M = R diag(s)
    let m = mat_mul(&s.rmat, &[[s.scale[0], 0.0, 0.0], [0.0, s.scale[1], 0.0], [0.0, 0.0, s.scale[2]]]);
    let gsym = [0, 1, 2].map(|a| [0, 1, 2].map(|b| g_sigma[a][b] + g_sigma[b][a]));
    let g_m = mat_mul(&gsym, &m);
    let mut g_r = [[0.0; 3]; 3];
    for k in 0..3 {
        let mut gs = 0.0;
        for r in 0..3 {
            gs += g_m[r][k] * s.rmat[r][k];
            g_r[r][k] = g_m[r][k] * s.scale[k];
        }
        out.scale[i][k] += gs;
    }
    let [qw, qx, qy, qz] = s.qhat;
    let g = g_r;
    let g_qhat = [
        2.0 * (-qz * g[0][1] + qy * g[0][2] + qz * g[1][0] - qx * g[1][2] - qy * g[2][0] + qx * g[2][1]),
        2.0 * (qy * g[0][1] + qz * g[0][2] + qy * g[1][0] - 2.0 * qx * g[1][1] - qw * g[1][2]
            + qz * g[2][0]
            + qw * g[2][1]
            - 2.0 * qx * g[2][2]),
        2.0 * (-2.0 * qy * g[0][0] + qx * g[0][1] + qw * g[0][2] + qx * g[1][0] + qz * g[1][2]
            - qw * g[2][0]
            + qz * g[2][1]
            - 2.0 * qy * g[2][2]),
        2.0 * (-2.0 * qz * g[0][0] - qw * g[0][1] + qx * g[0][2] + qw * g[1][0] - 2.0 * qz * g[1][1]
            + qy * g[1][2]
            + qx * g[2][0]
            + qy * g[2][1]),
    ];
    let dot: f64 = (0..4).map(|c| g_qhat[c] * s.qhat[c]).sum();
    for c in 0..4 {
        out.rot[i][c] += (g_qhat[c] - s.qhat[c] * dot) / s.qnorm;
    }
}
