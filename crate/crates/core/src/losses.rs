//! Supervision masks and training losses.
//!
//! Masks live on cell lattices: a lattice at stride `s` over a crop has its
//! cell (i, j) centered at pixel coordinate (j*s + (s-1)/2, i*s + (s-1)/2).
//! All mask sampling is bilinear on that lattice with zero outside.

use crate::error::{Error, Result};
use crate::geometry::{Line, Point, TpsWarp};
use crate::tensor::{self, Scalar, Shape, Tensor};
use std::fmt::Write as _;
use std::path::Path;

/// Center of lattice cell (i, j) at `stride`, in crop pixel coordinates.
pub fn cell_center(i: usize, j: usize, stride: usize) -> Point {
    let s = stride as f64;
    Point::new(j as f64 * s + (s - 1.0) / 2.0, i as f64 * s + (s - 1.0) / 2.0)
}

/// Rasterize point annotations to a binary lattice mask: a cell is positive
/// iff its center lies within `radius_px` (crop pixels) of any point.
pub fn make_mask(
    points: &[Point],
    out_h: usize,
    out_w: usize,
    stride: usize,
    radius_px: f64,
) -> Result<Tensor<f32>> {
    if stride == 0 {
        return Err(Error::Contract("mask stride must be positive".into()));
    }
    if radius_px < 0.0 {
        return Err(Error::Config(format!(
            "dilation radius must be non-negative, got {radius_px}"
        )));
    }
    let r2 = radius_px * radius_px;
    let mut data = vec![0f32; out_h * out_w];
    for i in 0..out_h {
        for j in 0..out_w {
            let c = cell_center(i, j, stride);
            let hit = points.iter().any(|p| (p.x - c.x).powi(2) + (p.y - c.y).powi(2) <= r2);
            if hit {
                data[i * out_w + j] = 1.0;
            }
        }
    }
    Tensor::constant(Shape::new(1, 1, out_h, out_w), data)
}

/// Bilinear read of a lattice mask at an arbitrary crop-pixel point.
fn sample_lattice(data: &[f32], h: usize, w: usize, stride: usize, q: Point) -> f64 {
    let s = stride as f64;
    let cx = (q.x - (s - 1.0) / 2.0) / s;
    let cy = (q.y - (s - 1.0) / 2.0) / s;
    let x0 = cx.floor();
    let y0 = cy.floor();
    let fx = cx - x0;
    let fy = cy - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= h as i64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= w as i64 || wx == 0.0 {
                continue;
            }
            acc += wy * wx * data[yy as usize * w + xx as usize] as f64;
        }
    }
    acc
}

/// Build the comparison-validity mask for the contrastive loss.
///
/// A feature cell must not be pushed toward its contralateral partner when
/// either side of the comparison covers abnormal tissue. Starting from the
/// abnormality mask `m` (stride `output_stride` over the crop), this:
///
/// 1. mirrors `m` across the symmetry `line` (in crop pixel coordinates) to
///    get the abnormality mask of the mirrored image,
/// 2. pulls that mirror through the spatial alignment `warp` so it lands on
///    this image's cells, thresholding the interpolated values at 0.5,
/// 3. unions with `m` itself, and
/// 4. max-pools down to `feature_stride`.
pub fn make_contrast_mask(
    m: &Tensor<f32>,
    warp: &TpsWarp,
    line: &Line,
    output_stride: usize,
    feature_stride: usize,
) -> Result<Tensor<f32>> {
    let s = m.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim("mask", format!("expected (1,1,h,w), got {s}")));
    }
    if output_stride == 0 || feature_stride == 0 || !feature_stride.is_multiple_of(output_stride) {
        return Err(Error::Contract(format!(
            "feature stride {feature_stride} must be a positive multiple of output stride {output_stride}"
        )));
    }
    let ratio = feature_stride / output_stride;
    if !s.h.is_multiple_of(ratio) || !s.w.is_multiple_of(ratio) {
        return Err(Error::dim(
            "mask",
            format!("{}x{} lattice does not pool by {ratio}", s.h, s.w),
        ));
    }
    let data = m.data();
    // Mirror mask on the same lattice.
    let mut mirrored = vec![0f32; s.h * s.w];
    for i in 0..s.h {
        for j in 0..s.w {
            let c = cell_center(i, j, output_stride);
            mirrored[i * s.w + j] =
                sample_lattice(data, s.h, s.w, output_stride, line.reflect(c)) as f32;
        }
    }
    // Union of this image's mask with the aligned mirror mask.
    let mut union = vec![0f32; s.h * s.w];
    for i in 0..s.h {
        for j in 0..s.w {
            let c = cell_center(i, j, output_stride);
            let pulled = sample_lattice(&mirrored, s.h, s.w, output_stride, warp.apply(c));
            let own = data[i * s.w + j] >= 0.5;
            union[i * s.w + j] = if own || pulled >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    // Max-pool to the feature lattice.
    let (fh, fw) = (s.h / ratio, s.w / ratio);
    let mut out = vec![0f32; fh * fw];
    for i in 0..fh {
        for j in 0..fw {
            let mut v = 0f32;
            for di in 0..ratio {
                for dj in 0..ratio {
                    v = v.max(union[(i * ratio + di) * s.w + (j * ratio + dj)]);
                }
            }
            out[i * fw + j] = v;
        }
    }
    Tensor::constant(Shape::new(1, 1, fh, fw), out)
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss<E: Scalar>(logits: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    tensor::bce_with_logits_mean(logits, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Margin-based contrastive loss over feature cells.
///
/// With per-cell squared distance d2 summed over channels, each cell
/// contributes d2 where comparison is valid (mask 0) and relu(margin - d2)
/// where it is not (mask 1): symmetric tissue is pulled together, tissue
/// over an abnormality on either side is pushed at least `margin` apart.
pub fn contrastive_loss<E: Scalar>(
    f: &Tensor<E>,
    ff: &Tensor<E>,
    mask: &Tensor<E>,
    margin: E,
    reduction: Reduction,
) -> Result<Tensor<E>> {
    let s = f.shape();
    if ff.shape() != s {
        return Err(Error::dim("shape", format!("feature maps {s} vs {}", ff.shape())));
    }
    let ms = mask.shape();
    if ms.c != 1 || ms.h != s.h || ms.w != s.w || (ms.n != s.n && ms.n != 1) {
        return Err(Error::dim(
            "mask",
            format!("expected ({} or 1,1,{},{}), got {ms}", s.n, s.h, s.w),
        ));
    }
    if margin < E::zero() {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    // Broadcast the mask over the batch if needed; build its complement.
    let plane = ms.h * ms.w;
    let mut inside = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let srcn = if ms.n == 1 { 0 } else { n };
        inside.extend_from_slice(&mask.data()[srcn * plane..(srcn + 1) * plane]);
    }
    let outside: Vec<E> = inside.iter().map(|&v| E::one() - v).collect();
    let mshape = Shape::new(s.n, 1, s.h, s.w);
    let inside = Tensor::constant(mshape, inside)?;
    let outside = Tensor::constant(mshape, outside)?;

    let diff = tensor::sub(f, ff)?;
    let d2 = tensor::sum_channels(&tensor::mul(&diff, &diff)?);
    let pull = tensor::mul(&d2, &outside)?;
    let hinge = tensor::relu(&tensor::sub(&Tensor::full(mshape, margin), &d2)?);
    let push = tensor::mul(&hinge, &inside)?;
    let cells = tensor::sum_all(&tensor::add(&pull, &push)?);
    Ok(match reduction {
        Reduction::Sum => cells,
        Reduction::Mean => tensor::scale(&cells, E::one() / E::from_f64((s.n * s.h * s.w) as f64)),
    })
}

/// Combined objective: `bce + lambda * contrastive`.
pub fn total_loss<E: Scalar>(
    bce: &Tensor<E>,
    contrastive: &Tensor<E>,
    lambda: E,
) -> Result<Tensor<E>> {
    tensor::add(bce, &tensor::scale(contrastive, lambda))
}

// ---------------------------------------------------------------------------
// Annotation sidecars
// ---------------------------------------------------------------------------

/// Parse a point-annotation sidecar: one `x y` pair per line, `#` starts a
/// comment. An empty file means no abnormality.
pub fn parse_points(text: &str) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Format(format!(
                "line {}: expected 'x y', got {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let x = fields[0]
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("line {}: bad x coordinate", lineno + 1)))?;
        let y = fields[1]
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("line {}: bad y coordinate", lineno + 1)))?;
        out.push(Point::new(x, y));
    }
    Ok(out)
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let text = std::fs::read_to_string(path)?;
    parse_points(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {}", p.x, p.y);
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fit_tps;

    #[test]
    fn mask_marks_cells_within_radius_of_a_point() {
        let m = make_mask(&[Point::new(10.0, 10.0)], 8, 8, 4, 12.0).unwrap();
        // Cell (2,2) center (9.5, 9.5): distance ~0.71, inside.
        assert_eq!(m.at(0, 0, 2, 2), 1.0);
        // Cell (0,0) center (1.5, 1.5): distance ~12.02, just outside.
        assert_eq!(m.at(0, 0, 0, 0), 0.0);
        // Cell (0,1) center (5.5, 1.5): distance ~9.6, inside.
        assert_eq!(m.at(0, 0, 0, 1), 1.0);
        let empty = make_mask(&[], 4, 4, 4, 12.0).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    fn identity_warp() -> TpsWarp {
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(63.0, 0.0),
            Point::new(0.0, 31.0),
            Point::new(63.0, 31.0),
            Point::new(30.0, 16.0),
        ];
        fit_tps(&pts, &pts, 0.0).unwrap()
    }

    #[test]
    fn contrast_mask_unions_the_mirror_and_pools() {
        // 8x16 lattice at stride 4 over a 32x64 crop; block of positives.
        let mut data = vec![0f32; 8 * 16];
        for i in 2..4 {
            for j in 3..5 {
                data[i * 16 + j] = 1.0;
            }
        }
        let m = Tensor::constant(Shape::new(1, 1, 8, 16), data.clone()).unwrap();
        // Vertical line at x = 31.5 maps cell column j to 15 - j exactly.
        let line = Line::from_points(Point::new(31.5, 0.0), Point::new(31.5, 1.0)).unwrap();
        let mh = make_contrast_mask(&m, &identity_warp(), &line, 4, 8).unwrap();
        assert_eq!(mh.shape(), Shape::new(1, 1, 4, 8));
        // Expected union at stride 4: original block plus mirrored columns 11..13.
        let mut union = data.clone();
        for i in 0..8 {
            for j in 0..16 {
                if data[i * 16 + (15 - j)] == 1.0 {
                    union[i * 16 + j] = 1.0;
                }
            }
        }
        for i in 0..4 {
            for j in 0..8 {
                let mut want = 0f32;
                for di in 0..2 {
                    for dj in 0..2 {
                        want = want.max(union[(2 * i + di) * 16 + (2 * j + dj)]);
                    }
                }
                assert_eq!(mh.at(0, 0, i, j), want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn contrast_mask_follows_the_warp() {
        // Positive block on the right half only; warp translates by one cell
        // (4 px) in x, so the pulled mirror shifts by one lattice column.
        let mut data = vec![0f32; 8 * 16];
        data[4 * 16 + 12] = 1.0;
        let m = Tensor::constant(Shape::new(1, 1, 8, 16), data).unwrap();
        let line = Line::from_points(Point::new(31.5, 0.0), Point::new(31.5, 1.0)).unwrap();
        let src = vec![
            Point::new(0.0, 0.0),
            Point::new(63.0, 0.0),
            Point::new(0.0, 31.0),
            Point::new(63.0, 31.0),
        ];
        let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x + 4.0, p.y)).collect();
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        let mh = make_contrast_mask(&m, &warp, &line, 4, 4).unwrap();
        // Mirror of column 12 is column 3; sampling at warp(c) = c + 4px
        // reads the mirror one column to the right, so it lands on column 2.
        assert_eq!(mh.at(0, 0, 4, 2), 1.0);
        assert_eq!(mh.at(0, 0, 4, 3), 0.0);
        // Own mask is kept as-is.
        assert_eq!(mh.at(0, 0, 4, 12), 1.0);
    }

    #[test]
    fn contrastive_loss_pulls_outside_and_pushes_inside() {
        let f = Tensor::param(Shape::new(1, 2, 1, 2), vec![0.3, 0.0, 0.4, 0.0]).unwrap();
        let ff = Tensor::constant(Shape::new(1, 2, 1, 2), vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        // Cell 0 outside the mask (d2 = 0.25), cell 1 inside (d2 = 0).
        let mask = Tensor::constant(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let mean = contrastive_loss(&f, &ff, &mask, 0.5f32, Reduction::Mean).unwrap();
        assert!((mean.item() - 0.375).abs() < 1e-6);
        let sum = contrastive_loss(&f, &ff, &mask, 0.5f32, Reduction::Sum).unwrap();
        assert!((sum.item() - 0.75).abs() < 1e-6);
        mean.backward().unwrap();
        let g = f.grad().unwrap();
        // Outside cell: d(d2)/df = 2*(f - ff) halved by the mean over 2 cells.
        assert!((g[0] - 0.3).abs() < 1e-6, "{g:?}");
        assert!((g[2] - 0.4).abs() < 1e-6, "{g:?}");
        // Inside cell with d2 < margin: hinge active, but f == ff there, so
        // the distance gradient itself is zero.
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn hinge_is_inactive_exactly_at_the_margin() {
        // Inside cell with d2 exactly equal to the margin: contribution and
        // gradient must both be zero.
        let f = Tensor::param(Shape::new(1, 1, 1, 1), vec![0.5]).unwrap();
        let ff = Tensor::constant(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let mask = Tensor::constant(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let loss = contrastive_loss(&f, &ff, &mask, 0.25f32, Reduction::Sum).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert_eq!(f.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn total_loss_matches_hand_computation() {
        // BCE with zero logits and target 1 is ln 2; a fully-inside mask with
        // identical features contributes the margin; lambda halves it.
        let logits = Tensor::param(Shape::new(1, 1, 2, 2), vec![0.0; 4]).unwrap();
        let target = Tensor::constant(Shape::new(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        let bce = bce_loss(&logits, &target).unwrap();
        let f = Tensor::constant(Shape::new(1, 3, 2, 2), vec![0.7; 12]).unwrap();
        let mask = Tensor::constant(Shape::new(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        let lc = contrastive_loss(&f, &f, &mask, 0.5f32, Reduction::Mean).unwrap();
        let total = total_loss(&bce, &lc, 0.5).unwrap();
        let want = std::f64::consts::LN_2 + 0.5 * 0.5;
        assert!((total.item() as f64 - want).abs() < 1e-4, "{}", total.item());
    }

    #[test]
    fn point_sidecar_roundtrip_and_errors() {
        let pts = vec![Point::new(1.5, 2.25), Point::new(-3.0, 0.125)];
        let mut p = std::env::temp_dir();
        p.push(format!("pts_test_{}", std::process::id()));
        write_points(&p, &pts).unwrap();
        let back = read_points(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!((back[0].x, back[0].y), (1.5, 2.25));
        std::fs::remove_file(&p).ok();
        assert!(parse_points("# only a comment\n\n").unwrap().is_empty());
        assert!(matches!(parse_points("1 2 3\n"), Err(Error::Format(_))));
        assert!(matches!(parse_points("a b\n"), Err(Error::Format(_))));
    }
}
