//! Per-frame metrics tables, CSV output and metric-vs-time plots.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{contract, Result};
use crate::metrics::{l1, psnr, ssim};
use crate::render::Camera;
use crate::scene::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Extrapolation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Extrapolation => "extrapolation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub t: f64,
    pub split: Split,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

pub const METRICS_HEADER: &str = "frame_id,t,split,psnr,ssim,l1";

/// Split means of one metrics table.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Renders every listed frame with `render` and scores it against the dataset.
pub fn evaluate_frames(
    ds: &Dataset,
    frames: &[(usize, Split)],
    mut render: impl FnMut(&Camera, f64) -> Result<Tensor>,
) -> Result<Vec<FrameMetrics>> {
    let mut out = Vec::with_capacity(frames.len());
    for &(i, split) in frames {
        let rec = ds
            .frames
            .get(i)
            .ok_or_else(|| contract(format!("frame {i} is missing from the dataset")))?;
        let gt = ds
            .images
            .get(i)
            .ok_or_else(|| contract(format!("image for frame {} is missing", rec.id)))?;
        let img = render(&rec.camera, rec.t)?;
        out.push(FrameMetrics {
            frame_id: rec.id.clone(),
            t: rec.t,
            split,
            psnr: psnr(&img, gt)?,
            ssim: ssim(&img, gt)?,
            l1: l1(&img, gt)?,
        });
    }
    Ok(out)
}

/// Both sides of the dataset split, train frames first.
pub fn split_frames(ds: &Dataset, threshold: f64, rule: crate::scene::SplitRule) -> Result<Vec<(usize, Split)>> {
    let (train, extra) = crate::scene::split_dataset(ds, threshold, rule)?;
    Ok(train
        .into_iter()
        .map(|i| (i, Split::Train))
        .chain(extra.into_iter().map(|i| (i, Split::Extrapolation)))
        .collect())
}

pub fn summarize(rows: &[FrameMetrics], split: Split) -> Summary {
    let sel: Vec<&FrameMetrics> = rows.iter().filter(|r| r.split == split).collect();
    if sel.is_empty() {
        return Summary::default();
    }
    let n = sel.len() as f64;
    Summary {
        frames: sel.len(),
        psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
        l1: sel.iter().map(|r| r.l1).sum::<f64>() / n,
    }
}

pub fn write_metrics_csv(rows: &[FrameMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{},{:.9},{:.9},{:.9}",
            r.frame_id,
            r.t,
            r.split.name(),
            r.psnr,
            r.ssim,
            r.l1
        )?;
    }
    w.flush()?;
    Ok(())
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 30;

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * f).round();
        let y = (a.1 + (b.1 - a.1) * f).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Line chart of one metric against time: per-time means, train frames in
/// blue, extrapolation frames in red, and a grey marker at the split time.
pub fn plot_metric(rows: &[FrameMetrics], metric: fn(&FrameMetrics) -> f64) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN / 2) as f64);
    let (y0, y1) = ((PLOT_H - MARGIN) as f64, (MARGIN / 2) as f64);
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, (x0, y0), (x1, y0), black);
    draw_line(&mut img, (x0, y0), (x0, y1), black);
    if rows.is_empty() {
        return img;
    }
    // mean per distinct timestamp
    let mut pts: Vec<(f64, Split, f64, usize)> = Vec::new();
    for r in rows {
        match pts.iter_mut().find(|p| p.0 == r.t && p.1 == r.split) {
            Some(p) => {
                p.2 += metric(r);
                p.3 += 1;
            }
            None => pts.push((r.t, r.split, metric(r), 1)),
        }
    }
    let mut pts: Vec<(f64, Split, f64)> = pts.into_iter().map(|(t, s, v, n)| (t, s, v / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.2), h.max(p.2)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |t: f64, v: f64| (x0 + t.clamp(0.0, 1.0) * (x1 - x0), y0 - (v - lo) / span * (y0 - y1));
    if let Some(b) = pts.iter().find(|p| p.1 == Split::Extrapolation) {
        let x = to_px(b.0, lo).0;
        draw_line(&mut img, (x, y0), (x, y1), Rgb([170, 170, 170]));
    }
    for w in pts.windows(2) {
        let c = match w[1].1 {
            Split::Train => Rgb([30, 80, 200]),
            Split::Extrapolation => Rgb([210, 40, 40]),
        };
        draw_line(&mut img, to_px(w[0].0, w[0].2), to_px(w[1].0, w[1].2), c);
    }
    for p in &pts {
        let (x, y) = to_px(p.0, p.2);
        for d in [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)] {
            draw_line(&mut img, (x, y), (x + 2.0 * d.0, y + 2.0 * d.1), black);
        }
    }
    img
}

/// Writes `psnr_vs_t.png`, `ssim_vs_t.png` and `l1_vs_t.png` into `dir`.
pub fn write_plots(rows: &[FrameMetrics], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let charts: [(&str, fn(&FrameMetrics) -> f64); 3] =
        [("psnr", |r| r.psnr), ("ssim", |r| r.ssim), ("l1", |r| r.l1)];
    for (name, f) in charts {
        plot_metric(rows, f).save(dir.join(format!("{name}_vs_t.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_kernels, RasterMode};
    use crate::scene::{generate_scene, SceneSpec, SplitRule};

    fn small() -> Dataset {
        let spec = SceneSpec {
            n_gaussians: 20,
            n_cameras: 3,
            n_timesteps: 5,
            resolution: 16,
            ..Default::default()
        };
        generate_scene(&spec, 1).unwrap()
    }

    #[test]
    fn ground_truth_particles_reach_the_cap() {
        let ds = small();
        let frames = split_frames(&ds, 0.75, SplitRule::Less).unwrap();
        let rows = evaluate_frames(&ds, &frames, |cam, t| {
            let k: Vec<_> = ds.particles.iter().map(|p| ds.spec.advect(p, t)).collect();
            Ok(render_kernels(&k, cam, RasterMode::Tiled))
        })
        .unwrap();
        assert_eq!(rows.len(), ds.frames.len());
        for r in &rows {
            assert_eq!(r.psnr, 99.0);
            assert_eq!(r.l1, 0.0);
        }
        let s = summarize(&rows, Split::Extrapolation);
        assert_eq!(s.frames, 3 * 2);
        assert_eq!(s.psnr, 99.0);
    }

    #[test]
    fn black_model_on_black_data_reaches_the_cap() {
        let mut ds = small();
        for img in ds.images.iter_mut() {
            *img = Tensor::zeros(img.shape());
        }
        let frames = split_frames(&ds, 0.75, SplitRule::Less).unwrap();
        let rows = evaluate_frames(&ds, &frames, |cam, _| Ok(Tensor::zeros(&[cam.height, cam.width, 3]))).unwrap();
        assert!(rows.iter().all(|r| r.psnr == 99.0));
    }

    #[test]
    fn missing_frames_are_rejected() {
        let ds = small();
        let err = evaluate_frames(&ds, &[(999, Split::Train)], |_, _| unreachable!()).unwrap_err();
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn csv_and_plots_are_written() {
        let rows = vec![
            FrameMetrics {
                frame_id: "c00_t000".into(),
                t: 0.0,
                split: Split::Train,
                psnr: 30.0,
                ssim: 0.9,
                l1: 0.01,
            },
            FrameMetrics {
                frame_id: "c00_t001".into(),
                t: 1.0,
                split: Split::Extrapolation,
                psnr: 20.0,
                ssim: 0.7,
                l1: 0.05,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_metrics_csv(&rows, dir.path().join("m.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[2], "c00_t001,1.000000,extrapolation,20.000000000,0.700000000,0.050000000");
        write_plots(&rows, dir.path()).unwrap();
        let img = image::open(dir.path().join("psnr_vs_t.png")).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (PLOT_W, PLOT_H));
        assert!(img.pixels().any(|p| *p == Rgb([210, 40, 40])));
    }
}
