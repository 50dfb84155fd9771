//! Landmark schema, symmetry-line fitting, ROI extraction, and thin-plate
//! spline warps.
//!
//! Conventions used throughout:
//! - Image coordinates are pixel-centered: integer (x, y) is the center of
//!   pixel (row y, column x); x runs along width, y along height.
//! - All resampling is align-corners: normalized coordinate -1 maps to the
//!   center of the first pixel and +1 to the center of the last.
//! - Angles and directions live in the same x-right / y-down frame as the
//!   images.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn mid(self, o: Point) -> Point {
        Point::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }
}

/// An infinite line through `origin` with unit direction `dir`.
///
/// The direction is canonicalized to point toward +y (toward +x when
/// horizontal) so that fitted lines compare stably across runs.
#[derive(Clone, Copy, Debug)]
pub struct Line {
    pub origin: Point,
    pub dir: Point,
}

impl Line {
    pub fn from_points(a: Point, b: Point) -> Result<Line> {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let n = (dx * dx + dy * dy).sqrt();
        if n == 0.0 {
            return Err(Error::Geometry("line through two coincident points".into()));
        }
        Ok(Line { origin: a, dir: canonical_dir(dx / n, dy / n) })
    }

    /// Mirror image of `p` across the line.
    pub fn reflect(&self, p: Point) -> Point {
        let vx = p.x - self.origin.x;
        let vy = p.y - self.origin.y;
        let along = vx * self.dir.x + vy * self.dir.y;
        // p - 2 * (component of v perpendicular to dir)
        let px = vx - along * self.dir.x;
        let py = vy - along * self.dir.y;
        Point::new(p.x - 2.0 * px, p.y - 2.0 * py)
    }

    /// Signed perpendicular offset of `p`; sign distinguishes the two sides.
    pub fn signed_offset(&self, p: Point) -> f64 {
        let vx = p.x - self.origin.x;
        let vy = p.y - self.origin.y;
        self.dir.x * vy - self.dir.y * vx
    }

    /// Angle of the direction vector in radians, in (-pi/2, pi/2] around +y.
    pub fn angle(&self) -> f64 {
        self.dir.y.atan2(self.dir.x)
    }
}

fn canonical_dir(dx: f64, dy: f64) -> Point {
    if dy < 0.0 || (dy == 0.0 && dx < 0.0) {
        Point::new(-dx, -dy)
    } else {
        Point::new(dx, dy)
    }
}

/// Total-least-squares line through a point cloud: the first principal axis
/// of the centered scatter, which minimizes the sum of squared perpendicular
/// distances.
///
/// Errors if the points are (numerically) coincident or the scatter is
/// isotropic, since no direction is then better than any other.
pub fn fit_symmetry_line(points: &[Point]) -> Result<Line> {
    if points.len() < 2 {
        return Err(Error::Geometry(format!(
            "need at least 2 points to fit a line, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p.x - cx;
        let dy = p.y - cy;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let spread = sxx + syy;
    if spread <= 0.0 {
        return Err(Error::Geometry("all points coincide; line is undefined".into()));
    }
    // Principal-axis angle of the 2x2 scatter matrix. The axis is ambiguous
    // when both the anisotropy (sxx - syy) and the covariance vanish.
    let a = sxx - syy;
    let b = 2.0 * sxy;
    if (a * a + b * b).sqrt() <= 1e-12 * spread {
        return Err(Error::Geometry("isotropic point scatter; line direction is ambiguous".into()));
    }
    let theta = 0.5 * b.atan2(a);
    Ok(Line { origin: Point::new(cx, cy), dir: canonical_dir(theta.cos(), theta.sin()) })
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

pub const LANDMARK_COUNT: usize = 16;

/// Canonical landmark order: seven left/right pairs plus two midline points.
pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "L1", "L2", "L3", "L4", "L5", "L6", "L7", //
    "R1", "R2", "R3", "R4", "R5", "R6", "R7", //
    "S1", "S2",
];

const PAIRS: usize = 7;
const S1: usize = 14;
const S2: usize = 15;

/// Pairs 4..=7 plus both midline points bound the region of interest; the
/// lower pairs sit outside it and only stabilize the symmetry line.
fn roi_flag(idx: usize) -> bool {
    match idx {
        i if i < PAIRS => i >= 3,             // L4..L7
        i if i < 2 * PAIRS => i - PAIRS >= 3, // R4..R7
        _ => true,                            // S1, S2
    }
}

#[derive(Clone, Debug)]
pub struct LandmarkSet {
    pts: [Point; LANDMARK_COUNT],
}

impl LandmarkSet {
    pub fn new(pts: [Point; LANDMARK_COUNT]) -> Self {
        LandmarkSet { pts }
    }

    pub fn get(&self, name: &str) -> Option<Point> {
        LANDMARK_NAMES.iter().position(|n| *n == name).map(|i| self.pts[i])
    }

    pub fn set(&mut self, name: &str, p: Point) -> Result<()> {
        match LANDMARK_NAMES.iter().position(|n| *n == name) {
            Some(i) => {
                self.pts[i] = p;
                Ok(())
            }
            None => Err(Error::Format(format!("unknown landmark '{name}'"))),
        }
    }

    pub fn left(&self, k: usize) -> Point {
        assert!((1..=PAIRS).contains(&k));
        self.pts[k - 1]
    }

    pub fn right(&self, k: usize) -> Point {
        assert!((1..=PAIRS).contains(&k));
        self.pts[PAIRS + k - 1]
    }

    pub fn s1(&self) -> Point {
        self.pts[S1]
    }

    pub fn s2(&self) -> Point {
        self.pts[S2]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, Point)> + '_ {
        LANDMARK_NAMES.iter().zip(self.pts.iter()).map(|(n, p)| (*n, *p))
    }

    /// Points that bound the region of interest.
    pub fn roi_points(&self) -> Vec<Point> {
        (0..LANDMARK_COUNT).filter(|&i| roi_flag(i)).map(|i| self.pts[i]).collect()
    }

    /// Candidate points on the anatomical midline: both midline landmarks
    /// and the midpoint of every left/right pair.
    pub fn axis_points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(PAIRS + 2);
        for k in 1..=PAIRS {
            out.push(self.left(k).mid(self.right(k)));
        }
        out.push(self.s1());
        out.push(self.s2());
        out
    }

    pub fn fit_symmetry_line(&self) -> Result<Line> {
        fit_symmetry_line(&self.axis_points())
    }

    /// Landmarks of the mirrored image: every point is reflected across
    /// `line`, and left/right labels are exchanged so that slot `Lk` again
    /// names the anatomically left structure in the mirrored frame.
    pub fn reflect_across(&self, line: &Line) -> LandmarkSet {
        let mut pts = [Point::new(0.0, 0.0); LANDMARK_COUNT];
        for k in 0..PAIRS {
            pts[k] = line.reflect(self.pts[PAIRS + k]);
            pts[PAIRS + k] = line.reflect(self.pts[k]);
        }
        pts[S1] = line.reflect(self.pts[S1]);
        pts[S2] = line.reflect(self.pts[S2]);
        LandmarkSet { pts }
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> LandmarkSet {
        let mut pts = self.pts;
        for p in pts.iter_mut() {
            *p = f(*p);
        }
        LandmarkSet { pts }
    }

    /// Parse a landmark sidecar: one `name x y` triple per line, `#` starts
    /// a comment. All sixteen names must appear exactly once.
    pub fn parse(text: &str) -> Result<LandmarkSet> {
        let mut seen: [Option<Point>; LANDMARK_COUNT] = [None; LANDMARK_COUNT];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let name = it.next().unwrap();
            let idx = LANDMARK_NAMES.iter().position(|n| *n == name).ok_or_else(|| {
                Error::Format(format!("line {}: unknown landmark '{}'", lineno + 1, name))
            })?;
            let parse = |s: Option<&str>, what: &str| -> Result<f64> {
                s.ok_or_else(|| {
                    Error::Format(format!("line {}: missing {what} for '{name}'", lineno + 1))
                })?
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad {what} for '{name}'", lineno + 1)))
            };
            let x = parse(it.next(), "x")?;
            let y = parse(it.next(), "y")?;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "line {}: trailing fields after '{name}'",
                    lineno + 1
                )));
            }
            if seen[idx].replace(Point::new(x, y)).is_some() {
                return Err(Error::Format(format!(
                    "line {}: duplicate landmark '{name}'",
                    lineno + 1
                )));
            }
        }
        let missing: Vec<&str> = LANDMARK_NAMES
            .iter()
            .zip(seen.iter())
            .filter(|(_, p)| p.is_none())
            .map(|(n, _)| *n)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!("missing landmarks: {}", missing.join(", "))));
        }
        let mut pts = [Point::new(0.0, 0.0); LANDMARK_COUNT];
        for (slot, p) in pts.iter_mut().zip(seen) {
            *slot = p.unwrap();
        }
        Ok(LandmarkSet { pts })
    }

    pub fn read_from(path: &Path) -> Result<LandmarkSet> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, p) in self.iter() {
            let _ = writeln!(s, "{name} {} {}", p.x, p.y);
        }
        s
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Image reflection
// ---------------------------------------------------------------------------

/// Mirror an image across an arbitrary line by sampling each output pixel at
/// its reflection. Samples that fall outside the frame read as zero.
pub fn reflect_image(image: &Tensor<f32>, line: &Line) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::Geometry(format!("image too small to reflect: {}x{}", s.h, s.w)));
    }
    let mut grid = vec![0f32; s.n * 2 * s.h * s.w];
    let plane = s.h * s.w;
    for i in 0..s.h {
        for j in 0..s.w {
            let q = line.reflect(Point::new(j as f64, i as f64));
            let u = 2.0 * q.x / (s.w as f64 - 1.0) - 1.0;
            let v = 2.0 * q.y / (s.h as f64 - 1.0) - 1.0;
            grid[i * s.w + j] = u as f32;
            grid[plane + i * s.w + j] = v as f32;
        }
    }
    let base = grid[..2 * plane].to_vec();
    for n in 1..s.n {
        grid[n * 2 * plane..(n + 1) * 2 * plane].copy_from_slice(&base);
    }
    let grid = Tensor::constant(Shape::new(s.n, 2, s.h, s.w), grid)?;
    crate::tensor::grid_sample_bilinear(image, &grid)
}

// ---------------------------------------------------------------------------
// Region of interest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

/// A fixed-size crop characterized by its source rectangle. Corner pixel
/// centers of the crop coincide with the rectangle corners (align-corners),
/// so coordinate maps between the two frames are exact affine maps.
#[derive(Clone, Debug)]
pub struct Roi {
    pub image: Tensor<f32>,
    pub rect: Rect,
    pub landmarks: LandmarkSet,
    pub out_h: usize,
    pub out_w: usize,
}

impl Roi {
    pub fn scale_x(&self) -> f64 {
        (self.out_w as f64 - 1.0) / self.rect.width()
    }

    pub fn scale_y(&self) -> f64 {
        (self.out_h as f64 - 1.0) / self.rect.height()
    }

    /// Source pixel coordinates -> crop pixel coordinates.
    pub fn to_roi(&self, p: Point) -> Point {
        Point::new((p.x - self.rect.x0) * self.scale_x(), (p.y - self.rect.y0) * self.scale_y())
    }

    /// Crop pixel coordinates -> source pixel coordinates.
    pub fn to_source(&self, p: Point) -> Point {
        Point::new(self.rect.x0 + p.x / self.scale_x(), self.rect.y0 + p.y / self.scale_y())
    }

    /// Map a line into crop coordinates. The crop scales axes unequally in
    /// general, so the direction is re-normalized after mapping.
    pub fn map_line(&self, line: &Line) -> Result<Line> {
        let a = self.to_roi(line.origin);
        let b = self.to_roi(Point::new(line.origin.x + line.dir.x, line.origin.y + line.dir.y));
        Line::from_points(a, b)
    }
}

/// Crop the landmark-bounded region and resize it to `out_h` x `out_w`.
///
/// The bounding box of the ROI landmarks is expanded by `margin_frac` of its
/// width on the left and right and of its height on the top and bottom, then
/// clipped to the image frame. Landmarks are carried into crop coordinates.
// `!(x > 0.0)`-style guards below must also reject NaN extents.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn extract_roi(
    image: &Tensor<f32>,
    landmarks: &LandmarkSet,
    margin_frac: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Roi> {
    let s = image.shape();
    if out_h < 2 || out_w < 2 {
        return Err(Error::Contract(format!(
            "crop size must be at least 2x2, got {out_h}x{out_w}"
        )));
    }
    if !(0.0..1.0).contains(&margin_frac) {
        return Err(Error::Config(format!("margin_frac must be in [0, 1), got {margin_frac}")));
    }
    let pts = landmarks.roi_points();
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let mx = margin_frac * (x1 - x0);
    let my = margin_frac * (y1 - y0);
    let rect = Rect {
        x0: (x0 - mx).max(0.0),
        y0: (y0 - my).max(0.0),
        x1: (x1 + mx).min(s.w as f64 - 1.0),
        y1: (y1 + my).min(s.h as f64 - 1.0),
    };
    if !(rect.width() > 0.0) || !(rect.height() > 0.0) {
        return Err(Error::Geometry(format!(
            "degenerate crop rectangle ({}, {}, {}, {})",
            rect.x0, rect.y0, rect.x1, rect.y1
        )));
    }
    // Align-corners sampling grid over the rectangle.
    let mut grid = vec![0f32; s.n * 2 * out_h * out_w];
    let plane = out_h * out_w;
    for i in 0..out_h {
        let sy = rect.y0 + i as f64 * rect.height() / (out_h as f64 - 1.0);
        let v = 2.0 * sy / (s.h as f64 - 1.0) - 1.0;
        for j in 0..out_w {
            let sx = rect.x0 + j as f64 * rect.width() / (out_w as f64 - 1.0);
            let u = 2.0 * sx / (s.w as f64 - 1.0) - 1.0;
            grid[i * out_w + j] = u as f32;
            grid[plane + i * out_w + j] = v as f32;
        }
    }
    let base = grid[..2 * plane].to_vec();
    for n in 1..s.n {
        grid[n * 2 * plane..(n + 1) * 2 * plane].copy_from_slice(&base);
    }
    let grid = Tensor::constant(Shape::new(s.n, 2, out_h, out_w), grid)?;
    let image_out = crate::tensor::grid_sample_bilinear(image, &grid)?;
    let sx = (out_w as f64 - 1.0) / rect.width();
    let sy = (out_h as f64 - 1.0) / rect.height();
    let mapped = landmarks.map(|p| Point::new((p.x - rect.x0) * sx, (p.y - rect.y0) * sy));
    Ok(Roi { image: image_out, rect, landmarks: mapped, out_h, out_w })
}

// ---------------------------------------------------------------------------
// Thin-plate spline
// ---------------------------------------------------------------------------

/// A fitted thin-plate spline: an affine part plus radial terms anchored at
/// the control points, fitted independently for x and y.
#[derive(Clone, Debug)]
pub struct TpsWarp {
    src: Vec<Point>,
    wx: Vec<f64>,
    ax: [f64; 3],
    wy: Vec<f64>,
    ay: [f64; 3],
}

fn tps_kernel(d2: f64) -> f64 {
    // r^2 ln r, written as 0.5 * d2 * ln(d2) to avoid the sqrt; 0 at r = 0.
    if d2 > 0.0 {
        0.5 * d2 * d2.ln()
    } else {
        0.0
    }
}

/// Fit the spline that maps every `src[i]` toward `dst[i]`.
///
/// `lambda` regularizes the radial coefficients: 0 interpolates the control
/// points exactly; larger values trade exactness for smoothness while the
/// affine part stays unpenalized (pure affine motions are always exact).
pub fn fit_tps(src: &[Point], dst: &[Point], lambda: f64) -> Result<TpsWarp> {
    let k = src.len();
    if dst.len() != k {
        return Err(Error::dim(
            "control points",
            format!("{} source vs {} destination", k, dst.len()),
        ));
    }
    if k < 3 {
        return Err(Error::Geometry(format!(
            "thin-plate spline needs at least 3 control points, got {k}"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("tps lambda must be non-negative, got {lambda}")));
    }
    let n = k + 3;
    // System matrix [[K + lambda I, P], [P^T, 0]] with two right-hand sides,
    // one per output coordinate.
    let mut a = vec![0f64; n * n];
    let mut rhs = vec![0f64; n * 2];
    for i in 0..k {
        for j in 0..k {
            let d2 = (src[i].x - src[j].x).powi(2) + (src[i].y - src[j].y).powi(2);
            a[i * n + j] = tps_kernel(d2) + if i == j { lambda } else { 0.0 };
        }
        a[i * n + k] = 1.0;
        a[i * n + k + 1] = src[i].x;
        a[i * n + k + 2] = src[i].y;
        a[k * n + i] = 1.0;
        a[(k + 1) * n + i] = src[i].x;
        a[(k + 2) * n + i] = src[i].y;
        rhs[i * 2] = dst[i].x;
        rhs[i * 2 + 1] = dst[i].y;
    }
    solve_inplace(&mut a, &mut rhs, n, 2).map_err(|_| {
        Error::Singular(
            "thin-plate spline system is singular (control points may be collinear or duplicated)"
                .into(),
        )
    })?;
    let mut wx = Vec::with_capacity(k);
    let mut wy = Vec::with_capacity(k);
    for i in 0..k {
        wx.push(rhs[i * 2]);
        wy.push(rhs[i * 2 + 1]);
    }
    let ax = [rhs[k * 2], rhs[(k + 1) * 2], rhs[(k + 2) * 2]];
    let ay = [rhs[k * 2 + 1], rhs[(k + 1) * 2 + 1], rhs[(k + 2) * 2 + 1]];
    Ok(TpsWarp { src: src.to_vec(), wx, ax, wy, ay })
}

/// Gaussian elimination with partial pivoting on a row-major `n x n` matrix
/// and `m` right-hand sides stored row-major as `n x m`.
fn solve_inplace(
    a: &mut [f64],
    rhs: &mut [f64],
    n: usize,
    m: usize,
) -> std::result::Result<(), ()> {
    let scale = a.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= 1e-12 * scale {
            return Err(());
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
            }
            for c in 0..m {
                rhs.swap(piv * m + c, col * m + c);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for c in col + 1..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            for c in 0..m {
                rhs[r * m + c] -= f * rhs[col * m + c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..m {
            let mut v = rhs[col * m + c];
            for j in col + 1..n {
                v -= a[col * n + j] * rhs[j * m + c];
            }
            rhs[col * m + c] = v / a[col * n + col];
        }
    }
    Ok(())
}

impl TpsWarp {
    pub fn apply(&self, p: Point) -> Point {
        let mut x = self.ax[0] + self.ax[1] * p.x + self.ax[2] * p.y;
        let mut y = self.ay[0] + self.ay[1] * p.x + self.ay[2] * p.y;
        for (i, s) in self.src.iter().enumerate() {
            let d2 = (p.x - s.x).powi(2) + (p.y - s.y).powi(2);
            let u = tps_kernel(d2);
            x += self.wx[i] * u;
            y += self.wy[i] * u;
        }
        Point::new(x, y)
    }

    pub fn control_points(&self) -> &[Point] {
        &self.src
    }

    /// Radial coefficients (for x and y outputs). A well-posed fit keeps
    /// them orthogonal to the affine space: their sum and their moments
    /// against the control coordinates all vanish, which is what makes the
    /// warp flat far from the controls.
    pub fn radial_weights(&self) -> (&[f64], &[f64]) {
        (&self.wx, &self.wy)
    }
}

/// Bake a pixel-space warp into a feature-map sampling grid.
///
/// Feature cell (i, j) at stride `s` covers pixels `[j*s, (j+1)*s)`, so its
/// center sits at pixel coordinate `j*s + (s-1)/2`. The warp is evaluated at
/// each cell center, and the result is converted back to fractional cell
/// coordinates of the target map, then normalized align-corners to [-1, 1].
/// A warp that translates by exactly one stride therefore shifts the grid by
/// exactly one cell.
pub fn warp_to_grid(
    warp: &TpsWarp,
    roi_h: usize,
    roi_w: usize,
    feat_h: usize,
    feat_w: usize,
) -> Result<Tensor<f32>> {
    if feat_h < 2 || feat_w < 2 || roi_h == 0 || roi_w == 0 {
        return Err(Error::Contract(format!(
            "grid needs a feature map of at least 2x2 over a non-empty crop, got {feat_h}x{feat_w} over {roi_h}x{roi_w}"
        )));
    }
    if !roi_h.is_multiple_of(feat_h) || !roi_w.is_multiple_of(feat_w) {
        return Err(Error::Contract(format!(
            "feature stride must be integral: crop {roi_h}x{roi_w} vs feature map {feat_h}x{feat_w}"
        )));
    }
    let sh = (roi_h / feat_h) as f64;
    let sw = (roi_w / feat_w) as f64;
    let mut grid = vec![0f32; 2 * feat_h * feat_w];
    let plane = feat_h * feat_w;
    for i in 0..feat_h {
        let py = i as f64 * sh + (sh - 1.0) / 2.0;
        for j in 0..feat_w {
            let px = j as f64 * sw + (sw - 1.0) / 2.0;
            let q = warp.apply(Point::new(px, py));
            let cell_x = (q.x - (sw - 1.0) / 2.0) / sw;
            let cell_y = (q.y - (sh - 1.0) / 2.0) / sh;
            grid[i * feat_w + j] = (2.0 * cell_x / (feat_w as f64 - 1.0) - 1.0) as f32;
            grid[plane + i * feat_w + j] = (2.0 * cell_y / (feat_h as f64 - 1.0) - 1.0) as f32;
        }
    }
    Tensor::constant(Shape::new(1, 2, feat_h, feat_w), grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn vertical_line_reflects_known_point() {
        // Nine points on x = 7 with varied y.
        let pts: Vec<Point> = (0..9).map(|i| Point::new(7.0, i as f64 * 3.0)).collect();
        let line = fit_symmetry_line(&pts).unwrap();
        assert!(close(line.dir.x, 0.0, 1e-12), "dir = {:?}", line.dir);
        assert!(close(line.dir.y, 1.0, 1e-12));
        assert!(close(line.origin.x, 7.0, 1e-12));
        let r = line.reflect(Point::new(10.0, 4.0));
        assert!(close(r.x, 4.0, 1e-9) && close(r.y, 4.0, 1e-9), "r = {r:?}");
    }

    #[test]
    fn fitted_line_rotates_with_the_points() {
        let base: Vec<Point> = (0..9)
            .map(|i| {
                let t = i as f64 - 4.0;
                Point::new(20.0 + 0.13 * t, 15.0 + 2.0 * t)
            })
            .collect();
        let line0 = fit_symmetry_line(&base).unwrap();
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let rotated: Vec<Point> =
            base.iter().map(|p| Point::new(c * p.x - s * p.y, s * p.x + c * p.y)).collect();
        let line1 = fit_symmetry_line(&rotated).unwrap();
        // Compare undirected angles modulo pi.
        let mut da = line1.angle() - line0.angle() - 30f64.to_radians();
        while da > std::f64::consts::FRAC_PI_2 {
            da -= std::f64::consts::PI;
        }
        while da < -std::f64::consts::FRAC_PI_2 {
            da += std::f64::consts::PI;
        }
        assert!(da.abs() < 1e-9, "angle drift {da}");
    }

    #[test]
    fn degenerate_point_sets_are_rejected() {
        let same = vec![Point::new(3.0, 4.0); 5];
        assert!(matches!(fit_symmetry_line(&same), Err(Error::Geometry(_))));
        // Perfect square: isotropic scatter, no preferred axis.
        let square = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
        ];
        assert!(matches!(fit_symmetry_line(&square), Err(Error::Geometry(_))));
    }

    fn demo_landmarks() -> LandmarkSet {
        // Flagged points (pairs 4..7 and S1/S2) span exactly (10,10)-(50,30);
        // lower pairs sit far outside to prove they do not affect the box.
        let mut pts = [Point::new(0.0, 0.0); LANDMARK_COUNT];
        let set = |pts: &mut [Point; LANDMARK_COUNT], name: &str, x: f64, y: f64| {
            let i = LANDMARK_NAMES.iter().position(|n| *n == name).unwrap();
            pts[i] = Point::new(x, y);
        };
        for k in 1..=3 {
            set(&mut pts, &format!("L{k}"), 2.0, 58.0 + k as f64);
            set(&mut pts, &format!("R{k}"), 60.0, 58.0 + k as f64);
        }
        set(&mut pts, "L4", 10.0, 10.0);
        set(&mut pts, "R4", 50.0, 10.0);
        set(&mut pts, "L5", 12.0, 18.0);
        set(&mut pts, "R5", 48.0, 18.0);
        set(&mut pts, "L6", 14.0, 24.0);
        set(&mut pts, "R6", 46.0, 24.0);
        set(&mut pts, "L7", 16.0, 30.0);
        set(&mut pts, "R7", 44.0, 30.0);
        set(&mut pts, "S1", 30.0, 12.0);
        set(&mut pts, "S2", 30.0, 28.0);
        LandmarkSet::new(pts)
    }

    #[test]
    fn roi_margin_expands_each_side_by_fraction_of_extent() {
        let img = Tensor::constant(Shape::new(1, 1, 64, 64), vec![0.0; 64 * 64]).unwrap();
        let roi = extract_roi(&img, &demo_landmarks(), 0.1, 32, 64).unwrap();
        assert_eq!(roi.rect, Rect { x0: 6.0, y0: 8.0, x1: 54.0, y1: 32.0 });
    }

    #[test]
    fn roi_rect_is_clipped_to_the_frame() {
        let img = Tensor::constant(Shape::new(1, 1, 24, 24), vec![0.0; 24 * 24]).unwrap();
        let lm = demo_landmarks().map(|p| Point::new(p.x * 0.4, p.y * 0.4));
        // Unclipped box would be (4-1.6, 4-0.8, 20+1.6, 12+0.8).
        let roi = extract_roi(&img, &lm, 0.1, 16, 32).unwrap();
        assert!(close(roi.rect.x0, 2.4, 1e-12) && close(roi.rect.x1, 21.6, 1e-12));
        let lm2 = demo_landmarks().map(|p| Point::new(p.x, p.y - 10.0));
        let roi2 = extract_roi(
            &Tensor::constant(Shape::new(1, 1, 64, 64), vec![0.0; 64 * 64]).unwrap(),
            &lm2,
            0.1,
            32,
            64,
        )
        .unwrap();
        assert!(close(roi2.rect.y0, 0.0, 1e-12), "clipped at top, got {:?}", roi2.rect);
    }

    #[test]
    fn roi_center_and_landmarks_map_exactly() {
        let img = Tensor::constant(Shape::new(1, 1, 64, 64), vec![0.0; 64 * 64]).unwrap();
        let lm = demo_landmarks();
        let roi = extract_roi(&img, &lm, 0.1, 32, 64).unwrap();
        let c = roi.to_roi(roi.rect.center());
        assert!(close(c.x, 63.0 / 2.0, 1e-12) && close(c.y, 31.0 / 2.0, 1e-12));
        // Carried landmarks agree with mapping the originals.
        for (name, p) in lm.iter() {
            let q = roi.to_roi(p);
            let r = roi.landmarks.get(name).unwrap();
            assert!(close(q.x, r.x, 1e-9) && close(q.y, r.y, 1e-9));
            let back = roi.to_source(r);
            assert!(close(back.x, p.x, 1e-9) && close(back.y, p.y, 1e-9));
        }
    }

    #[test]
    fn roi_resample_matches_manual_bilinear() {
        // 4x6 ramp image, crop the middle and compare against hand bilinear.
        let (h, w) = (4usize, 6usize);
        let data: Vec<f32> = (0..h * w).map(|i| (i * 7 % 13) as f32).collect();
        let img = Tensor::constant(Shape::new(1, 1, h, w), data.clone()).unwrap();
        let mut lm = demo_landmarks().map(|_| Point::new(2.5, 1.25));
        lm.set("L4", Point::new(1.0, 0.5)).unwrap();
        lm.set("R7", Point::new(4.0, 2.5)).unwrap();
        let roi = extract_roi(&img, &lm, 0.0, 3, 4).unwrap();
        assert_eq!(roi.rect, Rect { x0: 1.0, y0: 0.5, x1: 4.0, y1: 2.5 });
        let sample = |x: f64, y: f64| -> f64 {
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            let at = |yy: usize, xx: usize| data[yy * w + xx] as f64;
            at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, (x0 + 1).min(w - 1)) * fx * (1.0 - fy)
                + at((y0 + 1).min(h - 1), x0) * (1.0 - fx) * fy
                + at((y0 + 1).min(h - 1), (x0 + 1).min(w - 1)) * fx * fy
        };
        for i in 0..3 {
            for j in 0..4 {
                let sx = 1.0 + j as f64 * 3.0 / 3.0;
                let sy = 0.5 + i as f64 * 2.0 / 2.0;
                let got = roi.image.at(0, 0, i, j) as f64;
                assert!(close(got, sample(sx, sy), 1e-5), "({i},{j}): {got} vs {}", sample(sx, sy));
            }
        }
    }

    #[test]
    fn degenerate_roi_box_is_an_error() {
        let img = Tensor::constant(Shape::new(1, 1, 8, 8), vec![0.0; 64]).unwrap();
        let lm = demo_landmarks().map(|_| Point::new(4.0, 4.0));
        assert!(matches!(extract_roi(&img, &lm, 0.1, 8, 8), Err(Error::Geometry(_))));
    }

    #[test]
    fn reflect_across_swaps_left_and_right_slots() {
        let lm = demo_landmarks();
        let line = Line::from_points(Point::new(30.0, 0.0), Point::new(30.0, 10.0)).unwrap();
        let r = lm.reflect_across(&line);
        for k in 1..=7 {
            let want_l = line.reflect(lm.right(k));
            let got_l = r.left(k);
            assert!(close(want_l.x, got_l.x, 1e-12) && close(want_l.y, got_l.y, 1e-12));
            let want_r = line.reflect(lm.left(k));
            let got_r = r.right(k);
            assert!(close(want_r.x, got_r.x, 1e-12) && close(want_r.y, got_r.y, 1e-12));
        }
        // L4 (10,10) across x=30 lands at (50,10), the original R4.
        assert!(close(r.right(4).x, 50.0, 1e-12));
    }

    #[test]
    fn reflect_image_across_center_is_a_horizontal_flip() {
        let (h, w) = (4usize, 8usize);
        let data: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
        let img = Tensor::constant(Shape::new(1, 1, h, w), data.clone()).unwrap();
        let line = Line::from_points(Point::new(3.5, 0.0), Point::new(3.5, 1.0)).unwrap();
        let out = reflect_image(&img, &line).unwrap();
        for i in 0..h {
            for j in 0..w {
                let want = data[i * w + (w - 1 - j)];
                let got = out.at(0, 0, i, j);
                assert!((got - want).abs() < 1e-4, "({i},{j}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn landmark_text_roundtrip_and_schema_errors() {
        let lm = demo_landmarks();
        let text = lm.to_text();
        let back = LandmarkSet::parse(&text).unwrap();
        for (name, p) in lm.iter() {
            let q = back.get(name).unwrap();
            assert_eq!((p.x, p.y), (q.x, q.y));
        }
        // Missing names are listed.
        let partial = "L1 0 0\nS1 1 2\n";
        match LandmarkSet::parse(partial) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("missing landmarks"), "{msg}");
                assert!(msg.contains("R7") && msg.contains("S2"), "{msg}");
            }
            other => panic!("expected schema error, got {:?}", other.err()),
        }
        assert!(matches!(LandmarkSet::parse("Q9 1 2\n"), Err(Error::Format(_))));
        let dup = format!("{}L1 9 9\n", text);
        assert!(matches!(LandmarkSet::parse(&dup), Err(Error::Format(_))));
    }

    #[test]
    fn tps_identity_and_translation_are_exact_even_with_regularization() {
        let src = vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 2.0),
            Point::new(3.0, 9.0),
            Point::new(7.0, 7.0),
            Point::new(1.0, 5.0),
        ];
        let warp = fit_tps(&src, &src, 1e-3).unwrap();
        let moved: Vec<Point> = src.iter().map(|p| Point::new(p.x + 4.0, p.y - 2.5)).collect();
        let shift = fit_tps(&src, &moved, 1e-3).unwrap();
        for p in [Point::new(2.2, 3.3), Point::new(8.0, 1.0), Point::new(5.5, 6.5)] {
            let q = warp.apply(p);
            assert!(close(q.x, p.x, 1e-8) && close(q.y, p.y, 1e-8), "{q:?}");
            let t = shift.apply(p);
            assert!(close(t.x, p.x + 4.0, 1e-8) && close(t.y, p.y - 2.5, 1e-8), "{t:?}");
        }
    }

    #[test]
    fn tps_interpolates_controls_exactly_without_regularization() {
        let src = vec![
            Point::new(0.0, 0.0),
            Point::new(12.0, 1.0),
            Point::new(2.0, 11.0),
            Point::new(9.0, 8.0),
            Point::new(5.0, 4.0),
            Point::new(11.0, 12.0),
        ];
        let dst = vec![
            Point::new(0.5, -0.25),
            Point::new(11.0, 2.0),
            Point::new(2.75, 10.0),
            Point::new(9.5, 9.0),
            Point::new(4.0, 4.5),
            Point::new(12.0, 11.0),
        ];
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let q = warp.apply(*s);
            assert!(close(q.x, d.x, 1e-6) && close(q.y, d.y, 1e-6), "{q:?} vs {d:?}");
        }
    }

    #[test]
    fn tps_collinear_controls_are_singular() {
        let src: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let dst: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!(matches!(fit_tps(&src, &dst, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn grid_from_one_stride_translation_shifts_one_cell() {
        let src = vec![
            Point::new(0.0, 0.0),
            Point::new(60.0, 0.0),
            Point::new(0.0, 28.0),
            Point::new(60.0, 28.0),
        ];
        let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x + 8.0, p.y)).collect();
        let warp = fit_tps(&src, &dst, 0.0).unwrap();
        let grid = warp_to_grid(&warp, 32, 64, 4, 8).unwrap();
        // u at cell (i, j) must equal the align-corners coordinate of cell j+1.
        for i in 0..4 {
            for j in 0..8 {
                let want_u = 2.0 * (j as f64 + 1.0) / 7.0 - 1.0;
                let want_v = 2.0 * i as f64 / 3.0 - 1.0;
                let u = grid.at(0, 0, i, j) as f64;
                let v = grid.at(0, 1, i, j) as f64;
                assert!(close(u, want_u, 1e-5), "u({i},{j}) = {u} vs {want_u}");
                assert!(close(v, want_v, 1e-5), "v({i},{j}) = {v} vs {want_v}");
            }
        }
        assert!(warp_to_grid(&warp, 33, 64, 4, 8).is_err(), "non-integral stride must fail");
    }
}
