//! Quantitative evaluation: PSNR on all pixels, PSNR on disoccluded pixels,
//! SSIM, and depth error against held-out ground truth.

use crate::camera::CameraCalib;
use crate::dataio::RgbdDataset;
use crate::error::{Error, Result};
use crate::field::FieldPair;
use crate::losses::empty_space_margin;
use crate::render::{render_ray, RenderConfig};
use crate::rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// PSNR reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

/// A float RGB image in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageBuf {
    pub fn from_dataset(ds: &RgbdDataset, frame: usize) -> Self {
        let mut pixels = Vec::with_capacity(ds.n_pixels());
        for j in 0..ds.height() {
            for i in 0..ds.width() {
                pixels.push(ds.color_at(frame, i, j));
            }
        }
        ImageBuf { width: ds.width(), height: ds.height(), pixels }
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
    }
}

/// Peak signal-to-noise ratio over the (optionally masked) pixels, in dB.
/// Identical inputs report the cap. An empty mask yields `None`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf, mask: Option<&[bool]>) -> Result<Option<f64>> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "psnr images differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.pixels.len() {
            return Err(Error::Contract("mask length mismatch".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, (pa, pb)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        if mask.map(|m| m[k]).unwrap_or(true) {
            for ch in 0..3 {
                let d = pa[ch] - pb[ch];
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let mse = sum / (3 * count) as f64;
    if mse == 0.0 {
        return Ok(Some(PSNR_CAP));
    }
    Ok(Some((10.0 * (1.0 / mse).log10()).min(PSNR_CAP)))
}

/// Mean structural similarity over valid 11x11 windows of the luma channel,
/// with the standard constants (Gaussian sigma 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1).
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    const WINDOW: usize = 11;
    const SIGMA: f64 = 1.5;
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract("ssim images must share dimensions".into()));
    }
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let la = a.luma();
    let lb = b.luma();
    let (w, h) = (a.width, a.height);

    let mut kernel = [0.0f64; WINDOW];
    for (k, slot) in kernel.iter_mut().enumerate() {
        let d = k as f64 - (WINDOW as f64 - 1.0) / 2.0;
        *slot = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let norm: f64 = kernel.iter().sum();
    for slot in kernel.iter_mut() {
        *slot /= norm;
    }

    // Separable Gaussian filtering, valid region only.
    let filter = |img: &[f64]| -> Vec<f64> {
        let out_w = w - WINDOW + 1;
        let mut rows = vec![0.0; out_w * h];
        for j in 0..h {
            for i in 0..out_w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    s += kv * img[j * w + i + k];
                }
                rows[j * out_w + i] = s;
            }
        }
        let out_h = h - WINDOW + 1;
        let mut out = vec![0.0; out_w * out_h];
        for j in 0..out_h {
            for i in 0..out_w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    s += kv * rows[(j + k) * out_w + i];
                }
                out[j * out_w + i] = s;
            }
        }
        out
    };

    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let mul = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };

    let mu_a = filter(&la);
    let mu_b = filter(&lb);
    let sigma_aa = filter(&sq(&la));
    let sigma_bb = filter(&sq(&lb));
    let sigma_ab = filter(&mul(&la, &lb));

    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for k in 0..mu_a.len() {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = sigma_aa[k] - ma * ma;
        let vb = sigma_bb[k] - mb * mb;
        let cov = sigma_ab[k] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Marks pixels of the novel view that receive no forward-warped splat from
/// the training view (depth-warped with a z-buffer, splat radius 1).
pub fn disocclusion_mask(
    train_depth: &[f64],
    train_cam: &CameraCalib,
    novel_cam: &CameraCalib,
) -> Result<Vec<bool>> {
    if train_depth.len() != train_cam.width * train_cam.height {
        return Err(Error::Contract("depth buffer does not match camera size".into()));
    }
    let (nw, nh) = (novel_cam.width, novel_cam.height);
    let mut zbuf = vec![f64::INFINITY; nw * nh];
    for j in 0..train_cam.height {
        for i in 0..train_cam.width {
            let ray = train_cam.ray_for_pixel_center(i, j, 0.0)?;
            let x = ray.at(train_depth[j * train_cam.width + i]);
            let proj = novel_cam.project(x);
            if !proj.in_frustum {
                continue;
            }
            let (ci, cj) = novel_cam.nearest_pixel(&proj);
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (si, sj) = (ci as i64 + di, cj as i64 + dj);
                    if si >= 0 && sj >= 0 && (si as usize) < nw && (sj as usize) < nh {
                        let slot = &mut zbuf[sj as usize * nw + si as usize];
                        *slot = slot.min(proj.z);
                    }
                }
            }
        }
    }
    Ok(zbuf.iter().map(|z| z.is_infinite()).collect())
}

/// Renders a full view through the fine network (the coarse network guides
/// sampling), returning the image and the composited depth map.
pub fn render_view(
    fields: &FieldPair,
    cam: &CameraCalib,
    t: f64,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(ImageBuf, Vec<f64>)> {
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Result<(Vec<[f64; 3]>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut colors = Vec::with_capacity(w);
            let mut depths = Vec::with_capacity(w);
            for i in 0..w {
                let ray = cam.ray_for_pixel_center(i, j, t)?;
                let mut r = rng::stream(seed, "render", &[(j * w + i) as u64]);
                let (_coarse, fine) = render_ray(&fields.coarse, &fields.fine, &ray, cfg, &mut r)?;
                colors.push(fine.color);
                depths.push(fine.depth);
            }
            Ok((colors, depths))
        })
        .collect();
    let mut pixels = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for row in rows {
        let (c, d) = row?;
        pixels.extend(c);
        depth.extend(d);
    }
    Ok((ImageBuf { width: w, height: h, pixels }, depth))
}

/// Where evaluation finds its disocclusion masks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Exact masks stored with the held-out dataset.
    Generator,
    /// Forward-warp the paired training frame's depth.
    Warped,
    /// Skip the masked metric.
    None,
}

/// Per-frame evaluation numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_all: f64,
    pub psnr_occ: Option<f64>,
    pub ssim_all: f64,
    pub depth_rmse: f64,
    pub masked_pixels: usize,
}

/// Aggregated evaluation over all held-out frames.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_all: f64,
    /// Absent when no frame had a non-empty mask.
    pub psnr_occ: Option<f64>,
    pub ssim_all: f64,
    pub depth_rmse: f64,
    pub masked_pixels: usize,
    pub per_frame: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("frame  psnr_all  psnr_occ  ssim_all  depth_rmse  masked_px\n");
        for f in &self.per_frame {
            let occ = f.psnr_occ.map(|v| format!("{v:8.3}")).unwrap_or_else(|| "       -".into());
            out.push_str(&format!(
                "{:>5}  {:8.3}  {}  {:8.4}  {:10.5}  {:>9}\n",
                f.frame, f.psnr_all, occ, f.ssim_all, f.depth_rmse, f.masked_pixels
            ));
        }
        let occ = self.psnr_occ.map(|v| format!("{v:8.3}")).unwrap_or_else(|| "       -".into());
        out.push_str(&format!(
            "  all  {:8.3}  {}  {:8.4}  {:10.5}  {:>9}\n",
            self.psnr_all, occ, self.ssim_all, self.depth_rmse, self.masked_pixels
        ));
        out
    }
}

/// Renders the fine network at every held-out camera and aggregates metrics
/// over all frames. `train` supplies paired views for warped masks.
pub fn evaluate(
    fields: &FieldPair,
    heldout: &RgbdDataset,
    train: Option<&RgbdDataset>,
    cfg: &RenderConfig,
    mask_source: MaskSource,
    seed: u64,
) -> Result<EvalReport> {
    let mut per_frame = Vec::with_capacity(heldout.n_frames());
    for frame in 0..heldout.n_frames() {
        let (rendered, depth) = render_view(
            fields,
            &heldout.frames()[frame].calib,
            heldout.time(frame),
            cfg,
            seed.wrapping_add(frame as u64),
        )?;
        let truth = ImageBuf::from_dataset(heldout, frame);

        let mask: Option<Vec<bool>> = match mask_source {
            MaskSource::Generator => heldout.frames()[frame].mask.clone(),
            MaskSource::Warped => {
                let train = train.ok_or_else(|| {
                    Error::Config("warped masks need the paired training dataset".into())
                })?;
                if train.n_frames() != heldout.n_frames() {
                    return Err(Error::Config(
                        "warped masks need one training frame per held-out frame".into(),
                    ));
                }
                let td: Vec<f64> = train.frames()[frame].depth.iter().map(|&v| v as f64).collect();
                Some(disocclusion_mask(
                    &td,
                    &train.frames()[frame].calib,
                    &heldout.frames()[frame].calib,
                )?)
            }
            MaskSource::None => None,
        };

        let psnr_all = psnr(&rendered, &truth, None)?.expect("unmasked psnr always present");
        let masked_pixels = mask.as_ref().map(|m| m.iter().filter(|&&b| b).count()).unwrap_or(0);
        let psnr_occ = match &mask {
            Some(m) => psnr(&rendered, &truth, Some(m))?,
            None => None,
        };
        let ssim_all = ssim(&rendered, &truth)?;

        let mut se = 0.0;
        for (k, &d) in depth.iter().enumerate() {
            let (i, j) = (k % heldout.width(), k / heldout.width());
            let gt = heldout.depth_at(frame, i, j);
            se += (d - gt) * (d - gt);
        }
        let depth_rmse = (se / depth.len() as f64).sqrt();

        per_frame.push(FrameMetrics { frame, psnr_all, psnr_occ, ssim_all, depth_rmse, masked_pixels });
    }

    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| -> f64 {
        per_frame.iter().map(|m| f(m)).sum::<f64>() / per_frame.len() as f64
    };
    let occ_frames: Vec<f64> = per_frame.iter().filter_map(|m| m.psnr_occ).collect();
    Ok(EvalReport {
        psnr_all: mean(&|m| m.psnr_all),
        psnr_occ: (!occ_frames.is_empty())
            .then(|| occ_frames.iter().sum::<f64>() / occ_frames.len() as f64),
        ssim_all: mean(&|m| m.ssim_all),
        depth_rmse: mean(&|m| m.depth_rmse),
        masked_pixels: per_frame.iter().map(|m| m.masked_pixels).sum(),
        per_frame,
    })
}

/// Mean over rays of the accumulated density before the observed surface,
/// `sum_{s_i < D - eps} sigma_i delta_i` on the fine pass. Diagnoses haze in
/// nominally empty space.
pub fn pre_surface_density(
    fields: &FieldPair,
    dataset: &RgbdDataset,
    cfg: &RenderConfig,
    seed: u64,
    pixel_stride: usize,
) -> Result<f64> {
    let epsilon = empty_space_margin(cfg.z_near, cfg.z_far);
    let mut total = 0.0;
    let mut rays = 0usize;
    for frame in 0..dataset.n_frames() {
        for j in (0..dataset.height()).step_by(pixel_stride) {
            for i in (0..dataset.width()).step_by(pixel_stride) {
                let ray = dataset.ray_for(frame, i, j)?;
                let mut r = rng::stream(seed, "presurface", &[frame as u64, (j * dataset.width() + i) as u64]);
                let (_c, fine) = render_ray(&fields.coarse, &fields.fine, &ray, cfg, &mut r)?;
                let bound = dataset.depth_at(frame, i, j) - epsilon;
                total += fine
                    .depths
                    .iter()
                    .zip(fine.sigmas.iter().zip(&fine.deltas))
                    .filter(|(s, _)| **s < bound)
                    .map(|(_, (sig, del))| sig * del)
                    .sum::<f64>();
                rays += 1;
            }
        }
    }
    Ok(total / rays.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Vec3;
    use crate::dataio::{gen_toy_scene, ToySceneSpec};

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> ImageBuf {
        let mut pixels = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                pixels.push(f(i, j));
            }
        }
        ImageBuf { width: w, height: h, pixels }
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = image(8, 8, |i, j| [i as f64 / 8.0, j as f64 / 8.0, 0.5]);
        assert_eq!(psnr(&a, &a, None).unwrap(), Some(PSNR_CAP));
    }

    #[test]
    fn psnr_uniform_one_over_255() {
        let a = image(16, 16, |_, _| [0.5, 0.5, 0.5]);
        let b = image(16, 16, |_, _| [0.5 + 1.0 / 255.0, 0.5 + 1.0 / 255.0, 0.5 + 1.0 / 255.0]);
        let v = psnr(&a, &b, None).unwrap().unwrap();
        let expect = 20.0 * 255.0f64.log10();
        assert!((v - expect).abs() < 0.01, "{v} vs {expect}");
        assert!((v - 48.13).abs() < 0.01);
    }

    #[test]
    fn masked_psnr_with_full_mask_equals_unmasked() {
        let a = image(8, 8, |i, j| [(i * j % 7) as f64 / 7.0, 0.3, 0.9]);
        let b = image(8, 8, |i, j| [(i + j) as f64 / 16.0, 0.5, 0.1]);
        let full = vec![true; 64];
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&a, &b, Some(&full)).unwrap());
        let empty = vec![false; 64];
        assert_eq!(psnr(&a, &b, Some(&empty)).unwrap(), None);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = image(16, 16, |i, j| [i as f64 / 16.0, j as f64 / 16.0, 0.25]);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2] {
            let noisy = image(16, 16, |i, j| {
                let p = base.pixels[j * 16 + i];
                [p[0] + amp, p[1] - amp, p[2] + amp]
            });
            let v = psnr(&base, &noisy, None).unwrap().unwrap();
            assert!(v < last, "psnr must fall as noise grows");
            last = v;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = image(16, 16, |i, j| [(i as f64 / 16.0).sin().abs(), j as f64 / 16.0, 0.4]);
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ssim_is_symmetric_and_low_for_inverted() {
        let a = image(24, 24, |i, j| {
            let v = if (i / 3 + j / 3) % 2 == 0 { 0.95 } else { 0.05 };
            [v, v, v]
        });
        let b = image(24, 24, |i, j| {
            let p = a.pixels[j * 24 + i][0];
            [1.0 - p, 1.0 - p, 1.0 - p]
        });
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 0.3, "inverted high-contrast pattern: {ab}");
    }

    #[test]
    fn ssim_matches_naive_reference() {
        // Direct per-window implementation as an independent oracle.
        let a = image(16, 14, |i, j| [((i * 13 + j * 7) % 11) as f64 / 11.0, 0.2, 0.8]);
        let b = image(16, 14, |i, j| [((i * 5 + j * 3) % 9) as f64 / 9.0, 0.6, 0.1]);
        let got = ssim(&a, &b).unwrap();

        let la = a.luma();
        let lb = b.luma();
        let mut kernel = vec![0.0; 121];
        for j in 0..11 {
            for i in 0..11 {
                let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
                kernel[j * 11 + i] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let norm: f64 = kernel.iter().sum();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for j in 0..14 - 10 {
            for i in 0..16 - 10 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wj in 0..11 {
                    for wi in 0..11 {
                        let k = kernel[wj * 11 + wi] / norm;
                        let va = la[(j + wj) * 16 + i + wi];
                        let vb = lb[(j + wj) * 16 + i + wi];
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let reference = total / count as f64;
        assert!(
            (got - reference).abs() < 1e-12,
            "separable {got} vs direct {reference}"
        );
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = image(8, 8, |_, _| [0.5; 3]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn identical_cameras_have_empty_disocclusion() {
        let cam = CameraCalib::axis_aligned(16.0, 16.0, 8.0, 8.0, 16, 16, Vec3::default());
        let depth = vec![3.0; 256];
        let mask = disocclusion_mask(&depth, &cam, &cam).unwrap();
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn offset_camera_behind_occluder_sees_disocclusion() {
        let spec = ToySceneSpec { width: 24, height: 24, frames: 2, ..Default::default() };
        let (train, heldout) = gen_toy_scene(&spec).unwrap();
        let td: Vec<f64> = train.frames()[0].depth.iter().map(|&v| v as f64).collect();
        let mask =
            disocclusion_mask(&td, &train.frames()[0].calib, &heldout.frames()[0].calib).unwrap();
        assert!(mask.iter().any(|&b| b), "expected nonempty disocclusion");
    }

    #[test]
    fn warped_mask_approximates_generator_truth() {
        // Radius-1 splats blur the band boundary by about a pixel, so the
        // comparison runs on the wide-baseline scene.
        let spec = ToySceneSpec::wide_baseline();
        let (train, heldout) = gen_toy_scene(&spec).unwrap();
        for frame in [0, spec.frames - 1] {
            let td: Vec<f64> = train.frames()[frame].depth.iter().map(|&v| v as f64).collect();
            let warped =
                disocclusion_mask(&td, &train.frames()[frame].calib, &heldout.frames()[frame].calib)
                    .unwrap();
            let exact = heldout.frames()[frame].mask.as_ref().unwrap();
            let mut inter = 0usize;
            let mut union = 0usize;
            for (w, e) in warped.iter().zip(exact) {
                if *w && *e {
                    inter += 1;
                }
                if *w || *e {
                    union += 1;
                }
            }
            let iou = inter as f64 / union.max(1) as f64;
            assert!(iou >= 0.95, "frame {frame}: IoU {iou}");
        }
    }

    fn tiny_render_cfg(ds: &RgbdDataset) -> RenderConfig {
        RenderConfig { n_coarse: 8, n_fine: 8, z_near: ds.z_near(), z_far: ds.z_far(), stratified_jitter: true }
    }

    #[test]
    fn untrained_field_scores_poorly_and_reports_consistently() {
        use crate::field::{FieldArch, FieldPair};
        let spec = ToySceneSpec { width: 16, height: 16, frames: 2, ..Default::default() };
        let (train, heldout) = gen_toy_scene(&spec).unwrap();
        let arch = FieldArch::new(8, 2).with_bounds(train.world_min(), train.world_max());
        let fields = FieldPair::init(arch, 3).unwrap();
        let cfg = tiny_render_cfg(&train);
        let report = evaluate(&fields, &heldout, Some(&train), &cfg, MaskSource::Generator, 0).unwrap();
        assert!(report.psnr_all < 15.0, "untrained field gave {} dB", report.psnr_all);
        // Aggregates equal per-frame recombination.
        let mean_psnr: f64 =
            report.per_frame.iter().map(|m| m.psnr_all).sum::<f64>() / report.per_frame.len() as f64;
        assert!((report.psnr_all - mean_psnr).abs() < 1e-12);
        let table = report.table();
        assert!(table.contains("psnr_all"));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_frame.len(), report.per_frame.len());
    }

    #[test]
    fn ground_truth_against_itself_is_perfect() {
        let spec = ToySceneSpec { width: 16, height: 16, frames: 2, ..Default::default() };
        let (_, heldout) = gen_toy_scene(&spec).unwrap();
        let img = ImageBuf::from_dataset(&heldout, 0);
        assert_eq!(psnr(&img, &img, None).unwrap(), Some(PSNR_CAP));
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }
}
