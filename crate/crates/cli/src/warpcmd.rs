//! Warp preview command: run the alignment geometry on one image and dump
//! every intermediate as a PNG, plus per-landmark fit residuals.

use crate::config::RunConfig;
use aasn_core::error::Result;
use aasn_core::geometry::{
    extract_roi, fit_tps, reflect_image, warp_to_grid, LandmarkSet, Point, LANDMARK_NAMES,
};
use aasn_core::synthdata::GrayImage;
use aasn_core::tensor::grid_sample_bilinear;
use aasn_core::{Shape, Tensor};
use std::path::{Path, PathBuf};

pub struct WarpReport {
    pub out_dir: PathBuf,
    /// Per-landmark distance between the spline image of the source point
    /// and its destination, in crop pixels, in canonical landmark order.
    pub residuals: Vec<(String, f64)>,
    pub max_residual: f64,
}

/// Interleave two images as an 8-px checkerboard; alignment quality shows
/// as continuity of structures across tile borders.
fn checkerboard(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = a.shape();
    let mut data = vec![0f32; s.numel()];
    let (da, db) = (a.data(), b.data());
    for i in 0..s.h {
        for j in 0..s.w {
            let idx = i * s.w + j;
            data[idx] = if (i / 8 + j / 8) % 2 == 0 { da[idx] } else { db[idx] };
        }
    }
    Tensor::constant(Shape::new(1, 1, s.h, s.w), data)
}

pub fn run(
    cfg: &RunConfig,
    image_path: &Path,
    landmarks_path: &Path,
    verbose: bool,
) -> Result<WarpReport> {
    let mc = cfg.model_config()?;
    let (roi_h, roi_w) = mc.input_hw;

    let image = GrayImage::load_png(image_path)?.to_tensor();
    let landmarks = LandmarkSet::read_from(landmarks_path)?;

    let line = landmarks.fit_symmetry_line()?;
    let mirrored = reflect_image(&image, &line)?;
    let lm_f = landmarks.reflect_across(&line);
    let roi = extract_roi(&image, &landmarks, cfg.model.roi_margin_frac, roi_h, roi_w)?;
    let roi_f = extract_roi(&mirrored, &lm_f, cfg.model.roi_margin_frac, roi_h, roi_w)?;

    let src: Vec<Point> =
        LANDMARK_NAMES.iter().map(|n| roi.landmarks.get(n).expect("fixed schema")).collect();
    let dst: Vec<Point> =
        LANDMARK_NAMES.iter().map(|n| roi_f.landmarks.get(n).expect("fixed schema")).collect();
    let tps = fit_tps(&src, &dst, cfg.loss.lambda_tps)?;

    let grid = warp_to_grid(&tps, roi_h, roi_w, roi_h, roi_w)?;
    let warped = grid_sample_bilinear(&roi_f.image, &grid)?;
    let blend = checkerboard(&roi.image, &warped)?;

    let out_dir = Path::new(&cfg.paths.out_dir).join("warp");
    std::fs::create_dir_all(&out_dir)?;
    for (t, name) in [
        (&roi.image, "roi.png"),
        (&roi_f.image, "roi_mirrored.png"),
        (&warped, "roi_mirrored_warped.png"),
        (&blend, "checkerboard.png"),
    ] {
        GrayImage::from_tensor(t)?.save_png(&out_dir.join(name))?;
    }

    let mut residuals = Vec::with_capacity(LANDMARK_NAMES.len());
    let mut max_residual = 0f64;
    for (name, (s, d)) in LANDMARK_NAMES.iter().zip(src.iter().zip(&dst)) {
        let r = tps.apply(*s).dist(*d);
        max_residual = max_residual.max(r);
        residuals.push((name.to_string(), r));
    }
    if verbose {
        println!("landmark fit residuals (crop px):");
        for (name, r) in &residuals {
            println!("  {name:<3} {r:.3e}");
        }
        println!("  max {max_residual:.3e}");
        println!("images -> {}", out_dir.display());
    }

    Ok(WarpReport { out_dir, residuals, max_residual })
}
