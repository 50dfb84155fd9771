//! Sample preparation: everything between a stored phantom and a training
//! batch. Each sample is mirrored across its fitted symmetry line, both
//! versions are cropped to the landmark ROI, a thin-plate spline is fitted
//! from the crop onto its mirror (once, then reused), and the supervision
//! masks are rasterized. Prepared samples are cached in memory so epochs
//! and repeated evaluations never refit geometry.

use crate::config::RunConfig;
use aasn_core::error::{Error, Result};
use aasn_core::geometry::{
    extract_roi, fit_tps, reflect_image, warp_to_grid, LandmarkSet, Point, TpsWarp, LANDMARK_NAMES,
};
use aasn_core::losses::{make_contrast_mask, make_mask};
use aasn_core::model::Align;
use aasn_core::synthdata::{load_sample, LoadedSample, Manifest, SplitKind};
use aasn_core::tensor::grid_sample_bilinear;
use aasn_core::{Shape, Tensor};
use std::path::Path;

/// One sample ready for the network: the ROI crop, its aligned mirror (or
/// the grid that aligns it), and the supervision targets.
pub struct PreparedSample {
    pub name: String,
    /// ROI crop of the image, (1, 1, roi_h, roi_w).
    pub i: Tensor<f32>,
    /// ROI crop of the mirrored image; pre-warped under image alignment.
    pub i_f: Tensor<f32>,
    /// Feature-lattice sampling grid under feature alignment.
    pub grid: Option<Tensor<f32>>,
    /// Abnormality mask M on the output lattice, (1, 1, out_h, out_w).
    pub target: Tensor<f32>,
    /// Comparison-validity mask on the feature lattice, (1, 1, fh, fw).
    pub cmask: Tensor<f32>,
    /// Annotation points in crop pixel coordinates.
    pub points: Vec<Point>,
    pub label: bool,
}

/// Slot-ordered landmark points, pairing each structure with itself in the
/// mirrored frame.
fn slot_points(l: &LandmarkSet) -> Vec<Point> {
    LANDMARK_NAMES.iter().map(|n| l.get(n).expect("fixed schema")).collect()
}

/// Run the geometry pipeline for one loaded sample.
pub fn prepare_sample(cfg: &RunConfig, name: &str, s: &LoadedSample) -> Result<PreparedSample> {
    let mc = cfg.model_config()?;
    let (roi_h, roi_w) = mc.input_hw;
    let margin = cfg.model.roi_margin_frac;

    let image = s.image.to_tensor();
    let line = s.landmarks.fit_symmetry_line()?;
    let mirrored = reflect_image(&image, &line)?;
    let lm_f = s.landmarks.reflect_across(&line);

    let roi = extract_roi(&image, &s.landmarks, margin, roi_h, roi_w)?;
    let roi_f = extract_roi(&mirrored, &lm_f, margin, roi_h, roi_w)?;

    // Crop-frame spline: positions in this crop -> positions of the same
    // structure in the mirrored crop.
    let src = slot_points(&roi.landmarks);
    let dst = slot_points(&roi_f.landmarks);
    let tps = fit_tps(&src, &dst, cfg.loss.lambda_tps)?;

    let (i_f, grid) = match mc.align {
        Align::Feature => {
            let (fh, fw) = mc.feature_hw();
            (roi_f.image.clone(), Some(warp_to_grid(&tps, roi_h, roi_w, fh, fw)?))
        }
        Align::Image => {
            let px_grid = warp_to_grid(&tps, roi_h, roi_w, roi_h, roi_w)?;
            (grid_sample_bilinear(&roi_f.image, &px_grid)?, None)
        }
    };

    let points: Vec<Point> = s.lesions.iter().map(|&p| roi.to_roi(p)).collect();
    let (out_h, out_w) = mc.output_hw();
    let target = make_mask(&points, out_h, out_w, mc.output_stride, cfg.loss.dilation_radius_px)?;
    let line_roi = roi.map_line(&line)?;
    let cmask =
        make_contrast_mask(&target, &tps, &line_roi, mc.output_stride, mc.feature_stride())?;

    Ok(PreparedSample {
        name: name.to_string(),
        i: roi.image,
        i_f,
        grid,
        target,
        cmask,
        points,
        label: !s.lesions.is_empty(),
    })
}

/// The crop-frame spline alone, for diagnostics.
pub fn fit_sample_tps(
    cfg: &RunConfig,
    s: &LoadedSample,
) -> Result<(TpsWarp, Vec<Point>, Vec<Point>)> {
    let mc = cfg.model_config()?;
    let image = s.image.to_tensor();
    let line = s.landmarks.fit_symmetry_line()?;
    let mirrored = reflect_image(&image, &line)?;
    let lm_f = s.landmarks.reflect_across(&line);
    let roi =
        extract_roi(&image, &s.landmarks, cfg.model.roi_margin_frac, mc.input_hw.0, mc.input_hw.1)?;
    let roi_f =
        extract_roi(&mirrored, &lm_f, cfg.model.roi_margin_frac, mc.input_hw.0, mc.input_hw.1)?;
    let src = slot_points(&roi.landmarks);
    let dst = slot_points(&roi_f.landmarks);
    Ok((fit_tps(&src, &dst, cfg.loss.lambda_tps)?, src, dst))
}

/// Load and prepare every named sample from a dataset directory.
pub fn load_prepared(cfg: &RunConfig, root: &Path, names: &[&str]) -> Result<Vec<PreparedSample>> {
    names
        .iter()
        .map(|name| {
            let loaded = load_sample(root, name)?;
            prepare_sample(cfg, name, &loaded)
        })
        .collect()
}

/// Read the manifest of the configured dataset directory.
pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = aasn_core::synthdata::manifest_path(root);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no dataset at {} (generate one with `aasn gen-data`)",
            root.display()
        )));
    }
    Manifest::read_from(&path)
}

/// Names of one split, as owned strings.
pub fn split_names(manifest: &Manifest, kind: SplitKind) -> Vec<String> {
    manifest.names_for(kind).into_iter().map(str::to_string).collect()
}

/// Stack single-sample tensors along the batch axis.
pub fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let s = first.shape();
    let mut data = Vec::with_capacity(parts.len() * s.numel());
    for p in parts {
        if p.shape() != s {
            return Err(Error::dim("batch", format!("{} vs {}", p.shape(), s)));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::constant(Shape::new(parts.len() * s.n, s.c, s.h, s.w), data)
}

/// Assemble one batch from prepared samples: inputs, mirrored inputs,
/// per-sample grids (under feature alignment), target mask, contrast mask.
pub struct Batch {
    pub i: Tensor<f32>,
    pub i_f: Tensor<f32>,
    pub grid: Option<Tensor<f32>>,
    pub target: Tensor<f32>,
    pub cmask: Tensor<f32>,
}

pub fn make_batch(samples: &[&PreparedSample]) -> Result<Batch> {
    let i = stack(&samples.iter().map(|s| &s.i).collect::<Vec<_>>())?;
    let i_f = stack(&samples.iter().map(|s| &s.i_f).collect::<Vec<_>>())?;
    let target = stack(&samples.iter().map(|s| &s.target).collect::<Vec<_>>())?;
    let cmask = stack(&samples.iter().map(|s| &s.cmask).collect::<Vec<_>>())?;
    let grid = if samples.iter().all(|s| s.grid.is_some()) {
        Some(stack(&samples.iter().map(|s| s.grid.as_ref().unwrap()).collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok(Batch { i, i_f, grid, target, cmask })
}
