use super::*;
use crate::autodiff::check_gradient;
use crate::gaussian::{quat_normalize, RawKernel, KernelParams};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn front_cam(w: usize, h: usize, focal: f64) -> Camera {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], focal, w, h)
}

fn iso(mu: [f64; 3], s: f64, opacity: f64, color: [f64; 3]) -> GaussianKernel {
    GaussianKernel {
        mu,
        rot: [1.0, 0.0, 0.0, 0.0],
        scale: [s; 3],
        opacity,
        color,
    }
}

fn splat_at(center: [f64; 2], depth: f64, opacity: f64, color: [f64; 3]) -> Splat2D {
    Splat2D {
        center,
        cov2d: [1.0, 0.0, 1.0],
        depth,
        opacity,
        color,
    }
}

fn random_kernels(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianKernel> {
    (0..n)
        .map(|_| GaussianKernel {
            mu: [0, 1, 2].map(|_| rng.random_range(-0.8..0.8)),
            rot: quat_normalize([0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0))).unwrap(),
            scale: [0, 1, 2].map(|_| rng.random_range(0.05..0.4)),
            opacity: rng.random_range(0.2..0.95),
            color: [0, 1, 2].map(|_| rng.random_range(0.0..1.0)),
        })
        .collect()
}

#[test]
fn on_axis_gaussian_projects_to_principal_point() {
    let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.0, -1.0, 0.0], 80.0, 40, 30);
    let mut k = iso([0.0, 0.0, 3.0], 0.3, 0.5, [1.0; 3]);
    k.rot = quat_normalize([0.3, 0.1, -0.4, 0.2]).unwrap();
    let s = project_gaussian(&k, &cam).unwrap();
    assert!((s.center[0] - 20.0).abs() < 1e-12);
    assert!((s.center[1] - 15.0).abs() < 1e-12);
    assert!((s.depth - 3.0).abs() < 1e-12);
}

#[test]
fn vanishing_covariance_hits_dilation_floor() {
    let cam = front_cam(16, 16, 30.0);
    let s = project_gaussian(&iso([0.2, 0.1, 0.0], 1e-9, 0.5, [1.0; 3]), &cam).unwrap();
    assert!((s.cov2d[0] - DILATION).abs() < 1e-12);
    assert!(s.cov2d[1].abs() < 1e-12);
    assert!((s.cov2d[2] - DILATION).abs() < 1e-12);
}

#[test]
fn behind_near_plane_is_culled() {
    let cam = front_cam(16, 16, 30.0);
    assert!(project_gaussian(&iso([0.0, 0.0, -5.0], 0.1, 0.5, [1.0; 3]), &cam).is_none());
}

#[test]
fn projected_covariance_matches_numeric_jacobian() {
    // Camera at the origin with identity view so the camera-space mean is mu.
    let mut cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 100.0, 64, 64);
    cam.fx = 100.0;
    cam.fy = 100.0;
    let mu = [0.1, -0.2, 2.0];
    let proj = |p: [f64; 3]| [100.0 * p[0] / p[2] + 32.0, 100.0 * p[1] / p[2] + 32.0];
    let h = 1e-6;
    let mut jac = Matrix2x3::zeros();
    for c in 0..3 {
        let mut pp = mu;
        let mut pm = mu;
        pp[c] += h;
        pm[c] -= h;
        let (a, b) = (proj(pp), proj(pm));
        jac[(0, c)] = (a[0] - b[0]) / (2.0 * h);
        jac[(1, c)] = (a[1] - b[1]) / (2.0 * h);
    }
    let w = Matrix3::from_fn(|i, j| cam.rotation()[i][j]);
    let want = jac * w * Matrix3::identity() * w.transpose() * jac.transpose() + Matrix2::identity() * DILATION;
    let s = project_gaussian(&iso(mu, 1.0, 0.5, [1.0; 3]), &cam).unwrap();
    assert!((s.cov2d[0] - want[(0, 0)]).abs() < 1e-6);
    assert!((s.cov2d[1] - want[(0, 1)]).abs() < 1e-6);
    assert!((s.cov2d[2] - want[(1, 1)]).abs() < 1e-6);
    assert!((s.center[0] - proj(mu)[0]).abs() < 1e-12);
}

#[test]
fn alpha_examples() {
    let s = splat_at([3.0, 4.0], 1.0, 0.7, [1.0; 3]);
    assert!((evaluate_alpha(&s, [3.0, 4.0]) - 0.7).abs() < 1e-15);
    let s1 = splat_at([0.0, 0.0], 1.0, 1.0, [1.0; 3]);
    assert!((evaluate_alpha(&s1, [2f64.sqrt(), 0.0]) - (-1.0f64).exp()).abs() < 1e-12);
    let s0 = splat_at([0.0, 0.0], 1.0, 0.0, [1.0; 3]);
    assert_eq!(evaluate_alpha(&s0, [0.0, 0.0]), 0.0);
    assert_eq!(evaluate_alpha(&s0, [5.0, -1.0]), 0.0);
}

#[test]
fn compositing_examples() {
    assert_eq!(composite_pixel(&[], [0.0, 0.0]).unwrap(), [0.0; 3]);
    let c = [0.2, 0.5, 1.0];
    let one = composite_pixel(&[splat_at([1.0, 1.0], 1.0, 1.0, c)], [1.0, 1.0]).unwrap();
    for ch in 0..3 {
        assert!((one[ch] - c[ch] * 0.99).abs() < 1e-15);
    }
    let (c1, c2) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.5]);
    let two = composite_pixel(
        &[splat_at([0.0, 0.0], 1.0, 0.5, c1), splat_at([0.0, 0.0], 2.0, 0.5, c2)],
        [0.0, 0.0],
    )
    .unwrap();
    for ch in 0..3 {
        assert!((two[ch] - (0.5 * c1[ch] + 0.25 * c2[ch])).abs() < 1e-15);
    }
    let unsorted = [splat_at([0.0, 0.0], 2.0, 0.5, c1), splat_at([0.0, 0.0], 1.0, 0.5, c2)];
    assert!(composite_pixel(&unsorted, [0.0, 0.0]).is_err());
}

#[test]
fn empty_scene_renders_black() {
    let img = render_kernels(&[], &front_cam(8, 6, 10.0), RasterMode::Tiled);
    assert_eq!(img.shape(), &[6, 8, 3]);
    assert!(img.data().iter().all(|&v| v == 0.0));
}

#[test]
fn centred_gaussian_peaks_at_principal_point() {
    let cam = front_cam(33, 33, 40.0);
    let img = render_kernels(&[iso([0.0; 3], 0.3, 0.8, [1.0, 1.0, 1.0])], &cam, RasterMode::Reference);
    let (mut best, mut at) = (-1.0, (0, 0));
    for y in 0..33 {
        for x in 0..33 {
            let v = img.data()[(y * 33 + x) * 3];
            if v > best {
                best = v;
                at = (x, y);
            }
        }
    }
    assert_eq!((at.0 as f64, at.1 as f64), (cam.cx.floor(), cam.cy.floor()));
    assert_eq!(cam.cx, 16.5);
}

/// Independent per-pixel compositor: nalgebra projection, per-pixel sort.
fn brute_force(kernels: &[GaussianKernel], cam: &Camera) -> Vec<f64> {
    let w = Matrix3::from_fn(|i, j| cam.view[i][j]);
    let tr = Vector3::new(cam.view[0][3], cam.view[1][3], cam.view[2][3]);
    let mut out = vec![0.0; cam.width * cam.height * 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut hits: Vec<(f64, usize, f64, [f64; 3])> = Vec::new();
            for (i, k) in kernels.iter().enumerate() {
                let t = w * Vector3::from(k.mu) + tr;
                if t.z <= cam.near {
                    continue;
                }
                let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    k.rot[0], k.rot[1], k.rot[2], k.rot[3],
                ));
                let r = q.to_rotation_matrix().into_inner();
                let s = Matrix3::from_diagonal(&Vector3::from(k.scale));
                let sigma = r * s * s * r.transpose();
                let j = Matrix2x3::new(
                    cam.fx / t.z, 0.0, -cam.fx * t.x / (t.z * t.z),
                    0.0, cam.fy / t.z, -cam.fy * t.y / (t.z * t.z),
                );
                let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * DILATION;
                let center = nalgebra::Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
                let d = nalgebra::Vector2::new(x as f64, y as f64) - center;
                let m = (d.transpose() * cov.try_inverse().unwrap() * d)[(0, 0)];
                let a = (k.opacity * (-0.5 * m).exp()).min(0.99);
                if a >= 1.0 / 255.0 {
                    hits.push((t.z, i, a, k.color));
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut trans = 1.0;
            for (_, _, a, c) in hits {
                for ch in 0..3 {
                    out[(y * cam.width + x) * 3 + ch] += trans * a * c[ch];
                }
                trans *= 1.0 - a;
            }
        }
    }
    out
}

#[test]
fn matches_independent_brute_force_compositor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let ks = random_kernels(&mut rng, 3);
        let cam = front_cam(8, 8, 6.0);
        let want = brute_force(&ks, &cam);
        for mode in [RasterMode::Reference, RasterMode::Tiled] {
            let got = render_kernels(&ks, &cam, mode);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn transmittance_partitions_unity_and_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ks = random_kernels(&mut rng, 20);
    let cam = front_cam(16, 16, 12.0);
    let frame = Frame::new(&ks.iter().map(SplatInput::from).collect::<Vec<_>>(), &cam, RasterMode::Reference);
    let splats = frame.splats();
    for y in 0..16 {
        for x in 0..16 {
            let p = [x as f64, y as f64];
            let (w, t_final) = compositing_weights(&splats, p);
            let total: f64 = w.iter().sum::<f64>() + t_final;
            assert!((total - 1.0).abs() <= 1e-12);
            let mut t = 1.0;
            for s in &splats {
                let a = evaluate_alpha(s, p);
                if a < ALPHA_MIN {
                    continue;
                }
                let next = t * (1.0 - a);
                assert!(next <= t && next >= 0.0);
                t = next;
            }
        }
    }
}

#[test]
fn render_is_invariant_to_particle_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ks = random_kernels(&mut rng, 12);
    let cam = front_cam(16, 16, 12.0);
    let a = render_kernels(&ks, &cam, RasterMode::Tiled);
    let mut shuffled = ks.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    assert_eq!(a, render_kernels(&shuffled, &cam, RasterMode::Tiled));
}

#[test]
fn projected_covariance_is_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cam = Camera::look_at([2.0, 1.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 16, 16);
    for k in random_kernels(&mut rng, 200) {
        let s = project_gaussian(&k, &cam).unwrap();
        let [a, b, c] = s.cov2d;
        assert!(a >= DILATION && c >= DILATION);
        assert!(a * c - b * b > 0.0);
        // eigenvalues >= dilation floor
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        assert!(mean - rad >= DILATION - 1e-9);
    }
}

fn params_of(ks: &[GaussianKernel]) -> KernelParams {
    KernelParams::from_raw(&ks.iter().map(|k| k.to_raw()).collect::<Vec<RawKernel>>())
}

#[test]
fn image_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ks = random_kernels(&mut rng, 5);
    let kp = params_of(&ks);
    let cam = Camera::look_at([0.5, -0.3, -3.5], [0.0; 3], [0.0, -1.0, 0.0], 10.0, 16, 16);
    let weights: Vec<f64> = (0..16 * 16 * 3).map(|i| 1.0 + ((i * 13) % 7) as f64 / 7.0).collect();
    for field in crate::gaussian::KERNEL_FIELDS {
        let f = |g: &mut Graph, x: Var| {
            let mut v = [0usize; 5].map(|_| None);
            for (slot, name) in v.iter_mut().zip(crate::gaussian::KERNEL_FIELDS) {
                *slot = Some(if name == field { x } else { g.constant(kp.field(name).clone()) });
            }
            let [mu, rot, log_scale, opacity_logit, color] = v.map(Option::unwrap);
            let kv = KernelVars { mu, rot, log_scale, opacity_logit, color };
            let img = render_graph(g, &kv, &cam, RasterMode::Tiled);
            let w = g.constant(Tensor::new(&[16, 16, 3], weights.clone()));
            let p = g.mul(img, w);
            g.sum(p)
        };
        let err = check_gradient(f, kp.field(field), 1e-6).unwrap();
        assert!(err <= 1e-4, "{field}: {err}");
    }
}

#[test]
fn tiled_and_reference_paths_agree_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let n = rng.random_range(1..=50);
        let ks = random_kernels(&mut rng, n);
        let cam = Camera::look_at([0.3, 0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 30.0, 32, 32);
        let a = render_kernels(&ks, &cam, RasterMode::Reference);
        let b = render_kernels(&ks, &cam, RasterMode::Tiled);
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() <= 1e-6);
    }
}

#[test]
fn raw_and_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(&[2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect());
    save_raw(&img, dir.path().join("a.f64")).unwrap();
    assert_eq!(load_raw(dir.path().join("a.f64")).unwrap(), img);
    save_png(&img, dir.path().join("a.png")).unwrap();
    let back = load_png(dir.path().join("a.png")).unwrap();
    assert!(back.zip_map(&img, |a, b| (a - b).abs()).max_abs() <= 0.5 / 255.0 + 1e-12);
}
