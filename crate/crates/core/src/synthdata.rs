//! Deterministic generator of bilateral "pelvis-like" phantom radiographs.
//!
//! Each phantom is built in five stages:
//!
//! 1. a canonical, exactly mirror-symmetric skeleton of smooth quadratic
//!    arcs — two rami (wing + ring) per side joined by a short symphysis
//!    pad, with 14 paired landmarks at fixed arc parameters and two
//!    midline landmarks at the symphysis; per-sample symmetric texture is
//!    drawn on top (soft-tissue streaks, fine mirror-symmetric grain, and
//!    bone "dips" that imitate a break's local appearance at the same arc
//!    position on both sides — distractors with no diagnostic asymmetry);
//! 2. a global random affine pose (rotation, shear, translation) applied
//!    to geometry and landmarks alike, so the ground-truth landmarks stay
//!    consistent with the rendered image by construction;
//! 3. smooth one-sided intensity "jitter" fields that brighten or darken
//!    each side independently — non-pathological asymmetry;
//! 4. optional thin transverse breaks cut into the ring arc of exactly one
//!    side, each annotated by its centre point (which lies on the drawn
//!    bone curve);
//! 5. soft-edged rendering plus additive Gaussian pixel noise.
//!
//! Every sample is a pure function of `(spec.seed, index)`, so generation
//! is embarrassingly parallel across indices and bitwise reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Line, Point, LANDMARK_COUNT};
use crate::losses::{read_points, write_points};
use crate::tensor::{Shape, Tensor};

// ---------------------------------------------------------------------------
// Grayscale raster
// ---------------------------------------------------------------------------

/// A single-channel float image in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize) -> Self {
        GrayImage { h, w, data: vec![0.0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.w + j] = v;
    }

    /// View as a `(1, 1, h, w)` constant tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::constant(Shape::new(1, 1, self.h, self.w), self.data.clone())
            .expect("raster buffer always matches its own shape")
    }

    /// Extract the single plane of a `(1, 1, h, w)` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<GrayImage> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::dim(
                "channel",
                format!("expected a (1,1,h,w) image tensor, got {s:?}"),
            ));
        }
        Ok(GrayImage { h: s.h, w: s.w, data: t.data().to_vec() })
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the
    /// image border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let j0 = x.floor() as usize;
        let i0 = y.floor() as usize;
        let j1 = (j0 + 1).min(self.w - 1);
        let i1 = (i0 + 1).min(self.h - 1);
        let fx = x - j0 as f64;
        let fy = y - i0 as f64;
        let v00 = self.get(i0, j0) as f64;
        let v01 = self.get(i0, j1) as f64;
        let v10 = self.get(i1, j0) as f64;
        let v11 = self.get(i1, j1) as f64;
        v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Save as an 8-bit grayscale PNG (values quantised by rounding).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> =
            self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(
            self.w as u32,
            self.h as u32,
            bytes,
        )
        .ok_or_else(|| Error::Format("raster buffer/size mismatch".into()))?;
        buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Load an 8-bit grayscale PNG back into `[0, 1]` floats.
    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(GrayImage { h: h as usize, w: w as usize, data })
    }
}

// ---------------------------------------------------------------------------
// Generator configuration
// ---------------------------------------------------------------------------

/// Configuration for the phantom generator.
///
/// `pose_magnitude` bounds the global pose: rotation within ±that many
/// radians, shear within half of it, translation within `40×` of it in
/// pixels. `nuisance_magnitude` scales the one-sided intensity fields
/// (fractional gain). `lesion_contrast` is the fraction of bone intensity
/// removed at a break's centre and `lesion_width_px` the break's full
/// width at half maximum along the bone; the symmetric texture dips reuse
/// both, with depths drawn around `lesion_contrast`, so a break is never
/// recognisable by its local appearance alone. `noise_sigma` is the
/// standard deviation of the additive pixel noise as a fraction of the
/// dynamic range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Output image size as (height, width).
    pub image_hw: (usize, usize),
    /// Number of samples in the dataset (indices `0..n_images`).
    pub n_images: usize,
    /// Probability that a sample carries at least one break.
    pub lesion_prob: f64,
    /// Upper bound on breaks per positive sample (at least 1).
    pub max_lesions: usize,
    pub pose_magnitude: f64,
    pub nuisance_magnitude: f64,
    pub lesion_contrast: f64,
    pub lesion_width_px: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 7,
            image_hw: (192, 192),
            n_images: 16,
            lesion_prob: 0.5,
            max_lesions: 3,
            pose_magnitude: 0.14,
            nuisance_magnitude: 0.06,
            lesion_contrast: 0.4,
            lesion_width_px: 6.0,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomSpec {
    /// Check ranges: probabilities in `[0, 1]`, magnitudes non-negative,
    /// sizes large enough to hold the skeleton.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("image_hw must be at least 32x32, got {h}x{w}")));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return Err(Error::Config(format!(
                "lesion_prob must lie in [0, 1], got {}",
                self.lesion_prob
            )));
        }
        if self.max_lesions == 0 {
            return Err(Error::Config("max_lesions must be at least 1".into()));
        }
        for (name, v) in [
            ("pose_magnitude", self.pose_magnitude),
            ("nuisance_magnitude", self.nuisance_magnitude),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lesion_contrast) {
            return Err(Error::Config(format!(
                "lesion_contrast must lie in [0, 1], got {}",
                self.lesion_contrast
            )));
        }
        if !self.lesion_width_px.is_finite() || self.lesion_width_px <= 0.0 {
            return Err(Error::Config(format!(
                "lesion_width_px must be positive, got {}",
                self.lesion_width_px
            )));
        }
        Ok(())
    }
}

/// One generated phantom: the rendered image, posed ground-truth
/// landmarks, break centre points (empty for a negative sample), and the
/// `(seed, index)` provenance that reproduces it bit for bit.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub lesions: Vec<Point>,
    pub seed: u64,
    pub index: u64,
}

impl PhantomSample {
    /// Image-level label: does the sample carry any break?
    pub fn label(&self) -> bool {
        !self.lesions.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Canonical skeleton
// ---------------------------------------------------------------------------

/// Quadratic Bézier arc.
#[derive(Debug, Clone, Copy)]
struct Arc {
    p0: Point,
    c: Point,
    p1: Point,
}

impl Arc {
    fn eval(&self, t: f64) -> Point {
        let u = 1.0 - t;
        Point::new(
            u * u * self.p0.x + 2.0 * u * t * self.c.x + t * t * self.p1.x,
            u * u * self.p0.y + 2.0 * u * t * self.c.y + t * t * self.p1.y,
        )
    }

    fn approx_len(&self) -> f64 {
        let mut len = 0.0;
        let mut prev = self.p0;
        for k in 1..=16 {
            let p = self.eval(k as f64 / 16.0);
            len += prev.dist(p);
            prev = p;
        }
        len
    }

    fn map(&self, f: impl Fn(Point) -> Point) -> Arc {
        Arc { p0: f(self.p0), c: f(self.c), p1: f(self.p1) }
    }

    /// Mirror about the vertical axis `x = xmax / 2`, i.e. `x -> xmax - x`.
    fn mirrored(&self, xmax: f64) -> Arc {
        self.map(|p| Point::new(xmax - p.x, p.y))
    }
}

/// Which half of the canvas a stroke belongs to (for one-sided effects).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// What a stroke renders; breaks are cut into ring arcs only, symmetric
/// texture dips into ring and wing arcs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StrokeKind {
    Wing,
    Ring,
    Pad,
    Soft,
}

/// A renderable stroke: an arc with a peak intensity and a side tag.
#[derive(Debug, Clone, Copy)]
struct Stroke {
    arc: Arc,
    peak: f64,
    side: Side,
    kind: StrokeKind,
}

/// Arc parameters of the three wing-arc landmark pairs (pairs 1–3).
const T_WING: [f64; 3] = [0.15, 0.5, 0.85];
/// Arc parameters of the four ring-arc landmark pairs (pairs 4–7),
/// evenly spaced over [0.1, 0.9].
const T_RING: [f64; 4] = [0.1, 0.1 + 0.8 / 3.0, 0.1 + 1.6 / 3.0, 0.9];

/// Breaks are confined to this parameter range of the ring arc so every
/// annotation lands inside the landmark-bounded region of interest.
const LESION_T_RANGE: (f64, f64) = (0.15, 0.90);
/// Minimum parameter separation between breaks on the same arc (and
/// between a break and a symmetric texture dip, so the two never overlap
/// and blur each other's contrast).
const LESION_T_MIN_GAP: f64 = 0.12;
/// Parameter range of the symmetric bone-texture dips.
const DIP_T_RANGE: (f64, f64) = (0.15, 0.85);
/// Dip depth relative to `lesion_contrast`: drawn uniformly from this
/// multiple range, so depth alone can never separate a dip from a break.
const DIP_DEPTH_REL: (f64, f64) = (0.6, 1.4);

/// Peak bone intensity of the rami.
const BONE_PEAK: f64 = 0.85;
/// Peak intensity of the symphysis pad edges.
const PAD_PEAK: f64 = 0.80;
/// Gaussian stroke radius of bone curves, in pixels.
const STROKE_SIGMA: f64 = 2.2;
/// Background plateau level.
const BG_BASE: f64 = 0.10;

/// Half-width of the sigmoidal blend between the two sides' intensity
/// fields, as a fraction of the smaller image dimension.
const SIDE_BLEND_FRAC: f64 = 0.03;

fn canonical_left_arcs(h: usize, w: usize) -> [Arc; 3] {
    let s = h.min(w) as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let yy = |f: f64| f * (h as f64 - 1.0);
    let wing = Arc {
        p0: Point::new(cx - 0.24 * s, yy(0.08)),
        c: Point::new(cx - 0.45 * s, yy(0.18)),
        p1: Point::new(cx - 0.38 * s, yy(0.45)),
    };
    let ring = Arc {
        p0: Point::new(cx - 0.38 * s, yy(0.45)),
        c: Point::new(cx - 0.34 * s, yy(0.86)),
        p1: Point::new(cx - 0.035 * s, yy(0.70)),
    };
    let pad = Arc {
        p0: Point::new(cx - 0.035 * s, yy(0.70)),
        c: Point::new(cx - 0.035 * s, yy(0.75)),
        p1: Point::new(cx - 0.035 * s, yy(0.80)),
    };
    [wing, ring, pad]
}

/// Ground-truth landmarks of the unposed skeleton. Pairs 1–3 are the wing
/// stabilisers, pairs 4–7 frame the ring region, and the two midline
/// points sit at the top and bottom of the symphysis gap.
pub fn canonical_landmarks(image_hw: (usize, usize)) -> LandmarkSet {
    let (h, w) = image_hw;
    let [wing, ring, _] = canonical_left_arcs(h, w);
    let xmax = w as f64 - 1.0;
    let cx = xmax / 2.0;
    let yy = |f: f64| f * (h as f64 - 1.0);
    let mirror = |p: Point| Point::new(xmax - p.x, p.y);

    let mut pts = [Point::new(0.0, 0.0); LANDMARK_COUNT];
    for (k, &t) in T_WING.iter().enumerate() {
        pts[k] = wing.eval(t);
        pts[7 + k] = mirror(wing.eval(t));
    }
    for (k, &t) in T_RING.iter().enumerate() {
        pts[3 + k] = ring.eval(t);
        pts[10 + k] = mirror(ring.eval(t));
    }
    pts[14] = Point::new(cx, yy(0.70)); // symphysis top
    pts[15] = Point::new(cx, yy(0.80)); // symphysis bottom
    LandmarkSet::new(pts)
}

// ---------------------------------------------------------------------------
// Pose and nuisance
// ---------------------------------------------------------------------------

/// Global affine pose: shear then rotation about the canvas centre, plus
/// translation.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cos: f64,
    sin: f64,
    shear: f64,
    cx: f64,
    cy: f64,
    tx: f64,
    ty: f64,
}

impl Pose {
    fn apply(&self, p: Point) -> Point {
        let x = p.x - self.cx;
        let y = p.y - self.cy;
        let xs = x + self.shear * y;
        Point::new(
            self.cos * xs - self.sin * y + self.cx + self.tx,
            self.sin * xs + self.cos * y + self.cy + self.ty,
        )
    }

    /// Exact inverse of `apply` (rotation and shear are both invertible).
    fn invert(&self, p: Point) -> Point {
        let a = p.x - self.cx - self.tx;
        let b = p.y - self.cy - self.ty;
        let xs_sheared = self.cos * a + self.sin * b;
        let y = -self.sin * a + self.cos * b;
        let x = xs_sheared - self.shear * y;
        Point::new(x + self.cx, y + self.cy)
    }
}

fn sym_draw(rng: &mut ChaCha8Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..m)
    } else {
        0.0
    }
}

fn draw_pose(rng: &mut ChaCha8Rng, magnitude: f64, h: usize, w: usize) -> Pose {
    let ang = sym_draw(rng, magnitude);
    let shear = sym_draw(rng, 0.5 * magnitude);
    let tx = sym_draw(rng, 40.0 * magnitude);
    let ty = sym_draw(rng, 40.0 * magnitude);
    Pose {
        cos: ang.cos(),
        sin: ang.sin(),
        shear,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        tx,
        ty,
    }
}

/// A smooth intensity field: product of two sinusoids. Each side gets a
/// low-frequency field (broad brightening/darkening, as from exposure or
/// soft-tissue thickness) plus a mid-frequency one (localised lumps a few
/// dozen pixels across, the kind of clutter a detector can mistake for a
/// finding if it trusts one side alone).
#[derive(Debug, Clone, Copy)]
struct JitterField {
    amp: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

impl JitterField {
    fn draw_low(rng: &mut ChaCha8Rng) -> JitterField {
        JitterField {
            amp: rng.random_range(0.4..1.0),
            fx: rng.random_range(0.4..1.2),
            fy: rng.random_range(0.4..1.2),
            px: rng.random_range(0.0..1.0),
            py: rng.random_range(0.0..1.0),
        }
    }

    fn draw_mid(rng: &mut ChaCha8Rng) -> JitterField {
        JitterField {
            amp: rng.random_range(0.2..1.1),
            fx: rng.random_range(1.8..3.6),
            fy: rng.random_range(1.8..3.6),
            px: rng.random_range(0.0..1.0),
            py: rng.random_range(0.0..1.0),
        }
    }

    fn eval(&self, xn: f64, yn: f64) -> f64 {
        let two_pi = std::f64::consts::TAU;
        self.amp
            * (two_pi * (self.fx * xn + self.px)).sin()
            * (two_pi * (self.fy * yn + self.py)).sin()
    }
}

/// One side's nuisance gain shape: sum of its low- and mid-band fields.
#[derive(Debug, Clone, Copy)]
struct SideField {
    low: JitterField,
    mid: JitterField,
}

impl SideField {
    fn draw(rng: &mut ChaCha8Rng) -> SideField {
        SideField { low: JitterField::draw_low(rng), mid: JitterField::draw_mid(rng) }
    }

    fn eval(&self, xn: f64, yn: f64) -> f64 {
        self.low.eval(xn, yn) + self.mid.eval(xn, yn)
    }
}

/// Number of plane waves in the symmetric micro-texture.
const SPECKLE_WAVES: usize = 16;
/// RMS amplitude of the micro-texture (multiplicative, so it is mostly
/// visible on bone).
const SPECKLE_AMP: f64 = 0.09;
/// Frequency range of the micro-texture waves, cycles per pixel
/// (wavelengths of roughly 3.5–17 px: fine grain, but coarser than single
/// pixels so it carries structure rather than reading as noise).
const SPECKLE_FREQ: (f64, f64) = (0.06, 0.28);

/// Mirror-symmetric multiplicative micro-texture: a sum of random plane
/// waves evaluated in the canonical (unposed) frame on the distance to
/// the midline, so the left and right halves carry exactly the same
/// grain. It adds no asymmetry of its own; it exists to make the bone
/// texture fine enough that pixel-level resampling visibly smears it.
#[derive(Debug, Clone)]
struct Speckle {
    waves: Vec<(f64, f64, f64, f64)>, // (amp, fu, fy, phase)
    norm: f64,
}

impl Speckle {
    fn draw(rng: &mut ChaCha8Rng) -> Speckle {
        let mut waves = Vec::with_capacity(SPECKLE_WAVES);
        let mut sq = 0.0;
        for _ in 0..SPECKLE_WAVES {
            let amp: f64 = rng.random_range(0.3..1.0);
            let fu = rng.random_range(SPECKLE_FREQ.0..SPECKLE_FREQ.1);
            let fy = rng.random_range(SPECKLE_FREQ.0..SPECKLE_FREQ.1)
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let phase = rng.random_range(0.0..1.0);
            sq += amp * amp / 2.0;
            waves.push((amp, fu, fy, phase));
        }
        Speckle { waves, norm: SPECKLE_AMP / sq.sqrt() }
    }

    /// `u` is the absolute distance to the canonical midline; evenness in
    /// `u` is what makes the texture exactly mirror-symmetric.
    fn eval(&self, u: f64, y: f64) -> f64 {
        let two_pi = std::f64::consts::TAU;
        let mut g = 0.0;
        for &(amp, fu, fy, phase) in &self.waves {
            g += amp * (two_pi * (fu * u + fy * y + phase)).cos();
        }
        g * self.norm
    }
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

/// SplitMix64 finaliser, used to decorrelate per-index seeds.
fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ mix64(index))
}

/// Generate sample `index` of the dataset described by `spec`. Pure in
/// `(spec, index)`: calling it twice yields bitwise-identical output.
pub fn generate_one(spec: &PhantomSpec, index: u64) -> Result<PhantomSample> {
    spec.validate()?;
    let (h, w) = spec.image_hw;
    let xmax = w as f64 - 1.0;
    let s = h.min(w) as f64;
    let mut rng = sample_rng(spec.seed, index);

    // 1. canonical skeleton and landmarks
    let left = canonical_left_arcs(h, w);
    let canon_marks = canonical_landmarks((h, w));

    // 2. global pose
    let pose = draw_pose(&mut rng, spec.pose_magnitude, h, w);
    let landmarks = canon_marks.map(|p| pose.apply(p));
    let mut strokes: Vec<Stroke> = Vec::new();
    for (k, arc) in left.iter().enumerate() {
        let peak = if k == 2 { PAD_PEAK } else { BONE_PEAK };
        let kind = match k {
            0 => StrokeKind::Wing,
            1 => StrokeKind::Ring,
            _ => StrokeKind::Pad,
        };
        let posed_l = arc.map(|p| pose.apply(p));
        let posed_r = arc.mirrored(xmax).map(|p| pose.apply(p));
        strokes.push(Stroke { arc: posed_l, peak, side: Side::Left, kind });
        strokes.push(Stroke { arc: posed_r, peak, side: Side::Right, kind });
    }

    // 3. one-sided intensity jitter fields + the blend line between them,
    //    and the sample's symmetric micro-texture
    let field_l = SideField::draw(&mut rng);
    let field_r = SideField::draw(&mut rng);
    let speckle = Speckle::draw(&mut rng);
    let midline = Line::from_points(landmarks.s1(), landmarks.s2())
        .expect("the two symphysis landmarks are always distinct");

    // Symmetric soft-tissue streaks: same canonical arc mirrored onto both
    // sides, so they add texture without adding asymmetry.
    let n_streaks = rng.random_range(0..=2usize);
    for _ in 0..n_streaks {
        let cx = xmax / 2.0;
        let yy = |f: f64| f * (h as f64 - 1.0);
        let x0 = rng.random_range(0.08..0.42) * s;
        let x1 = rng.random_range(0.08..0.42) * s;
        let xc = rng.random_range(0.05..0.45) * s;
        let y0 = yy(rng.random_range(0.10..0.90));
        let y1 = yy(rng.random_range(0.10..0.90));
        let ycm = yy(rng.random_range(0.10..0.90));
        let peak = rng.random_range(0.10..0.18);
        let arc = Arc {
            p0: Point::new(cx - x0, y0),
            c: Point::new(cx - xc, ycm),
            p1: Point::new(cx - x1, y1),
        };
        let posed_l = arc.map(|p| pose.apply(p));
        let posed_r = arc.mirrored(xmax).map(|p| pose.apply(p));
        strokes.push(Stroke { arc: posed_l, peak, side: Side::Left, kind: StrokeKind::Soft });
        strokes.push(Stroke { arc: posed_r, peak, side: Side::Right, kind: StrokeKind::Soft });
    }

    // Symmetric bone-texture dips: each dims the bone with the same radial
    // profile as a break, but at the same arc position on both sides. In a
    // single image they are indistinguishable from pathology; against the
    // mirrored view they cancel. They are the hard negatives that keep
    // absolute brightness from being a shortcut around comparison.
    let dip_depth = |rng: &mut ChaCha8Rng| -> f64 {
        (spec.lesion_contrast * rng.random_range(DIP_DEPTH_REL.0..DIP_DEPTH_REL.1)).min(0.9)
    };
    let mut ring_dips: Vec<(f64, f64)> = Vec::new();
    let n_ring_dips = rng.random_range(1..=2usize);
    for _ in 0..n_ring_dips {
        for _attempt in 0..64 {
            let t = rng.random_range(DIP_T_RANGE.0..DIP_T_RANGE.1);
            if ring_dips.iter().all(|&(u, _)| (u - t).abs() >= LESION_T_MIN_GAP) {
                let d = dip_depth(&mut rng);
                ring_dips.push((t, d));
                break;
            }
        }
    }
    let mut wing_dips: Vec<(f64, f64)> = Vec::new();
    if rng.random_bool(0.5) {
        let t = rng.random_range(DIP_T_RANGE.0..DIP_T_RANGE.1);
        let d = dip_depth(&mut rng);
        wing_dips.push((t, d));
    }

    // 4. breaks on one side's ring arc
    let mut lesions: Vec<Point> = Vec::new();
    let mut lesion_side = Side::Left;
    if spec.lesion_prob > 0.0 && rng.random_bool(spec.lesion_prob) {
        lesion_side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let count = rng.random_range(1..=spec.max_lesions);
        let mut ts: Vec<f64> = Vec::with_capacity(count);
        for _ in 0..count {
            // Rejection keeps breaks separated from each other and from
            // the texture dips; bounded so generation always terminates
            // (a crowded arc simply gets fewer breaks).
            for _attempt in 0..64 {
                let t = rng.random_range(LESION_T_RANGE.0..LESION_T_RANGE.1);
                if ts.iter().all(|&u| (u - t).abs() >= LESION_T_MIN_GAP)
                    && ring_dips.iter().all(|&(u, _)| (u - t).abs() >= LESION_T_MIN_GAP)
                {
                    ts.push(t);
                    break;
                }
            }
        }
        let ring = strokes
            .iter()
            .find(|st| st.kind == StrokeKind::Ring && st.side == lesion_side)
            .expect("both ring strokes are always present");
        for &t in &ts {
            lesions.push(ring.arc.eval(t));
        }
    }
    let lesion_sigma = spec.lesion_width_px / 2.355; // FWHM -> sigma

    // 5. render
    let mut structure = vec![0.0f64; h * w];
    for st in &strokes {
        // Dips are evaluated on each stroke's own (posed) arc, so a left
        // dip and its right twin sit at anatomically mirrored positions.
        let dip_pts: Vec<(Point, f64)> = match st.kind {
            StrokeKind::Ring => ring_dips.iter().map(|&(t, d)| (st.arc.eval(t), d)).collect(),
            StrokeKind::Wing => wing_dips.iter().map(|&(t, d)| (st.arc.eval(t), d)).collect(),
            _ => Vec::new(),
        };
        let lesions_here = st.kind == StrokeKind::Ring && st.side == lesion_side;
        let damp = |p: Point| -> f64 {
            let mut d = 1.0;
            for &(q, depth) in &dip_pts {
                let r2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
                d *= 1.0 - depth * (-r2 / (2.0 * lesion_sigma * lesion_sigma)).exp();
            }
            if lesions_here {
                for &l in &lesions {
                    let r2 = (p.x - l.x).powi(2) + (p.y - l.y).powi(2);
                    d *= 1.0
                        - spec.lesion_contrast * (-r2 / (2.0 * lesion_sigma * lesion_sigma)).exp();
                }
            }
            d
        };
        let n = ((st.arc.approx_len() * 3.0).ceil() as usize).max(2);
        let r = (3.0 * STROKE_SIGMA).ceil() as isize;
        for k in 0..=n {
            let p = st.arc.eval(k as f64 / n as f64);
            let peak = st.peak * damp(p);
            let jc = p.x.round() as isize;
            let ic = p.y.round() as isize;
            for di in -r..=r {
                let i = ic + di;
                if i < 0 || i >= h as isize {
                    continue;
                }
                for dj in -r..=r {
                    let j = jc + dj;
                    if j < 0 || j >= w as isize {
                        continue;
                    }
                    let dx = j as f64 - p.x;
                    let dy = i as f64 - p.y;
                    let v =
                        peak * (-(dx * dx + dy * dy) / (2.0 * STROKE_SIGMA * STROKE_SIGMA)).exp();
                    let cell = &mut structure[i as usize * w + j as usize];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0f64, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let blend = SIDE_BLEND_FRAC * s;
    let cx = xmax / 2.0;
    let cy_blob = 0.30 * (h as f64 - 1.0);
    let sx_blob = 0.12 * s;
    let sy_blob = 0.10 * (h as f64 - 1.0);

    let mut img = GrayImage::new(h, w);
    for i in 0..h {
        for j in 0..w {
            let x = j as f64;
            let y = i as f64;
            // symmetric background: plateau plus a midline sacral blob
            let bx = (x - cx) / sx_blob;
            let by = (y - cy_blob) / sy_blob;
            let bg = BG_BASE + 0.22 * (-(bx * bx + by * by) / 2.0).exp();
            // one-sided jitter fields, blended smoothly across the midline
            let off = midline.signed_offset(Point::new(x, y));
            let wl = 1.0 / (1.0 + (off / blend).exp());
            let g = field_l.eval(x / w as f64, y / h as f64) * wl
                + field_r.eval(x / w as f64, y / h as f64) * (1.0 - wl);
            let gain = 1.0 + spec.nuisance_magnitude * g;
            // micro-texture rides in the canonical frame so it stays
            // anatomically symmetric under any pose
            let canon = pose.invert(Point::new(x, y));
            let spk = 1.0 + speckle.eval((canon.x - cx).abs(), canon.y);
            let mut v = (bg + structure[i * w + j]) * gain * spk;
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            img.set(i, j, v.clamp(0.0, 1.0) as f32);
        }
    }

    Ok(PhantomSample { image: img, landmarks, lesions, seed: spec.seed, index })
}

/// Generate the whole dataset (`n_images` samples, indices in order).
pub fn generate(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    (0..spec.n_images as u64).map(|i| generate_one(spec, i)).collect()
}

/// Mean intensity of the `(2r+1)²` pixel window centred at `p`, sampled
/// bilinearly so the centre can sit between pixels.
pub fn window_mean(image: &GrayImage, p: Point, radius: usize) -> f64 {
    let r = radius as i64;
    let mut sum = 0.0;
    for di in -r..=r {
        for dj in -r..=r {
            sum += image.sample_bilinear(p.x + dj as f64, p.y + di as f64);
        }
    }
    let n = (2 * radius + 1) * (2 * radius + 1);
    sum / n as f64
}

/// Window radius used by the break-visibility check: small enough that a
/// single break dominates the window mean.
pub const LESION_WINDOW_RADIUS: usize = 1;

// ---------------------------------------------------------------------------
// Dataset split
// ---------------------------------------------------------------------------

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<SplitKind> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// A disjoint train/val/test partition, as sorted sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn part(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    /// Per-sample membership, aligned with the label slice the split was
    /// built from.
    pub fn assignment(&self, n: usize) -> Result<Vec<SplitKind>> {
        let mut out = vec![None; n];
        for (kind, idxs) in [
            (SplitKind::Train, &self.train),
            (SplitKind::Val, &self.val),
            (SplitKind::Test, &self.test),
        ] {
            for &i in idxs {
                if i >= n {
                    return Err(Error::Config(format!(
                        "split index {i} out of range for {n} samples"
                    )));
                }
                if out[i].is_some() {
                    return Err(Error::Config(format!("split assigns sample {i} twice")));
                }
                out[i] = Some(kind);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, k)| {
                k.ok_or_else(|| Error::Config(format!("split leaves sample {i} unassigned")))
            })
            .collect()
    }
}

/// Largest-remainder apportionment of `n` items into three fractions.
fn apportion(n: usize, f: [f64; 3]) -> [usize; 3] {
    let raw = [f[0] * n as f64, f[1] * n as f64, f[2] * n as f64];
    let mut counts = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let mut rem: Vec<(f64, usize)> =
        raw.iter().enumerate().map(|(k, &x)| (x - x.floor(), k)).collect();
    // stable tie-break: earlier partition (train, val, test) wins
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for k in 0..n.saturating_sub(assigned) {
        counts[rem[k % 3].1] += 1;
    }
    counts
}

/// Deterministic stratified split. Each class (positive/negative label) is
/// shuffled with the seed and apportioned by largest remainder; part sizes
/// are then corrected to the exact largest-remainder apportionment of the
/// total count (moving at most one sample per class between parts), so the
/// requested sizes are met exactly while the positive rate of each part
/// tracks the global rate. Fractions must sum to 1; a partition that ends
/// up empty is a configuration error.
pub fn split(labels: &[bool], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative, got {f:?}")));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {f:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    // per-part buffers, kept by class so the size correction below can
    // move a sample without disturbing the other class
    let mut part_pos: [Vec<usize>; 3] = Default::default();
    let mut part_neg: [Vec<usize>; 3] = Default::default();
    for (class, buckets) in [(&pos, &mut part_pos), (&neg, &mut part_neg)] {
        let counts = apportion(class.len(), f);
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            buckets[k].extend_from_slice(&class[start..start + c]);
            start += c;
        }
    }

    // Per-class rounding can leave part sizes one off the global
    // apportionment; shift single samples until they match, taking from
    // whichever class the donor part holds more of.
    let target = apportion(labels.len(), f);
    loop {
        let sizes: Vec<usize> = (0..3).map(|k| part_pos[k].len() + part_neg[k].len()).collect();
        let Some(over) = (0..3).find(|&k| sizes[k] > target[k]) else { break };
        let under =
            (0..3).find(|&k| sizes[k] < target[k]).expect("part size deviations sum to zero");
        if part_pos[over].len() >= part_neg[over].len() && !part_pos[over].is_empty() {
            let moved = part_pos[over].pop().unwrap();
            part_pos[under].push(moved);
        } else {
            let moved = part_neg[over].pop().unwrap();
            part_neg[under].push(moved);
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for k in 0..3 {
        parts[k].extend_from_slice(&part_pos[k]);
        parts[k].extend_from_slice(&part_neg[k]);
        parts[k].sort_unstable();
    }
    let [train, val, test] = parts;
    for (name, p) in [("train", &train), ("val", &val), ("test", &test)] {
        if p.is_empty() {
            return Err(Error::Config(format!(
                "split leaves the {name} partition empty ({} samples, fractions {f:?})",
                labels.len()
            )));
        }
    }
    Ok(Split { train, val, test })
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

/// One manifest row: sample name, image-level label, break count, and
/// split membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub label: bool,
    pub lesions: usize,
    pub split: SplitKind,
}

/// The dataset manifest: every sample with its label and split, in index
/// order. The text form is deterministic, so regenerating a dataset from
/// the same spec yields an identical file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn names_for(&self, kind: SplitKind) -> Vec<&str> {
        self.entries.iter().filter(|e| e.split == kind).map(|e| e.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# phantom dataset manifest\n# name\tlabel\tlesions\tsplit\n");
        for e in &self.entries {
            let _ =
                writeln!(s, "{}\t{}\t{}\t{}", e.name, e.label as u8, e.lesions, e.split.as_str());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let label = match fields[1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Format(format!(
                        "manifest line {}: label must be 0 or 1, got '{other}'",
                        lineno + 1
                    )))
                }
            };
            let lesions = fields[2].parse::<usize>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad lesion count", lineno + 1))
            })?;
            entries.push(ManifestEntry {
                name: fields[0].to_string(),
                label,
                lesions,
                split: SplitKind::parse(fields[3])
                    .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        Manifest::parse(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

pub fn sample_basename(index: u64) -> String {
    format!("phantom_{index:06}")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.txt")
}

pub fn image_path(root: &Path, name: &str) -> PathBuf {
    root.join("images").join(format!("{name}.png"))
}

pub fn landmarks_path(root: &Path, name: &str) -> PathBuf {
    root.join("landmarks").join(format!("{name}.txt"))
}

pub fn annotations_path(root: &Path, name: &str) -> PathBuf {
    root.join("annotations").join(format!("{name}.txt"))
}

/// Generate a dataset and write it under `root`:
/// `images/*.png` (8-bit grayscale), `landmarks/*.txt` and
/// `annotations/*.txt` sidecars, and `manifest.txt`. Returns the manifest.
pub fn write_dataset(
    root: &Path,
    spec: &PhantomSpec,
    fractions: (f64, f64, f64),
    split_seed: u64,
) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("landmarks"))?;
    std::fs::create_dir_all(root.join("annotations"))?;

    let mut labels = Vec::with_capacity(spec.n_images);
    let mut lesion_counts = Vec::with_capacity(spec.n_images);
    for index in 0..spec.n_images as u64 {
        let sample = generate_one(spec, index)?;
        let name = sample_basename(index);
        sample.image.save_png(&image_path(root, &name))?;
        sample.landmarks.write_to(&landmarks_path(root, &name))?;
        write_points(&annotations_path(root, &name), &sample.lesions)?;
        labels.push(sample.label());
        lesion_counts.push(sample.lesions.len());
    }

    let parts = split(&labels, fractions, split_seed)?;
    let assignment = parts.assignment(labels.len())?;
    let entries = (0..spec.n_images)
        .map(|i| ManifestEntry {
            name: sample_basename(i as u64),
            label: labels[i],
            lesions: lesion_counts[i],
            split: assignment[i],
        })
        .collect();
    let manifest = Manifest { entries };
    manifest.write_to(&manifest_path(root))?;
    Ok(manifest)
}

/// A sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub lesions: Vec<Point>,
}

pub fn load_sample(root: &Path, name: &str) -> Result<LoadedSample> {
    Ok(LoadedSample {
        image: GrayImage::load_png(&image_path(root, name))?,
        landmarks: LandmarkSet::read_from(&landmarks_path(root, name))?,
        lesions: read_points(&annotations_path(root, name))?,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> PhantomSpec {
        PhantomSpec {
            pose_magnitude: 0.0,
            nuisance_magnitude: 0.0,
            lesion_prob: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn canonical_landmark_pairs_mirror_within_1e6() {
        let marks = canonical_landmarks((192, 192));
        let cx = 191.0 / 2.0;
        let axis = Line::from_points(Point::new(cx, 0.0), Point::new(cx, 1.0)).unwrap();
        for k in 1..=7 {
            let l = marks.left(k);
            let r = marks.right(k);
            let reflected = axis.reflect(l);
            assert!(
                reflected.dist(r) < 1e-6,
                "pair {k}: reflected left {reflected:?} vs right {r:?}"
            );
        }
        assert!(marks.s1().x - cx < 1e-9 && marks.s2().x - cx < 1e-9);
        // the pairs that frame the region of interest must not collapse
        // onto the stabiliser pairs
        assert!(marks.left(4).y > marks.left(3).y);
    }

    #[test]
    fn quiet_phantom_is_mirror_symmetric() {
        let spec = quiet_spec();
        let sample = generate_one(&spec, 3).unwrap();
        let img = &sample.image;
        let (h, w) = (img.h(), img.w());
        let mut worst = 0.0f32;
        for i in 0..h {
            for j in 0..w {
                let d = (img.get(i, j) - img.get(i, w - 1 - j)).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        assert!(worst < 1e-4, "max asymmetry residual {worst}");
        assert!(sample.lesions.is_empty());
    }

    #[test]
    fn same_seed_and_index_reproduce_bitwise() {
        let spec = PhantomSpec { lesion_prob: 0.7, ..PhantomSpec::default() };
        for index in [0u64, 5, 11] {
            let a = generate_one(&spec, index).unwrap();
            let b = generate_one(&spec, index).unwrap();
            assert_eq!(a.image.data(), b.image.data(), "image bits differ at {index}");
            assert_eq!(a.lesions.len(), b.lesions.len());
            for (p, q) in a.lesions.iter().zip(&b.lesions) {
                assert_eq!((p.x, p.y), (q.x, q.y));
            }
            for ((_, p), (_, q)) in a.landmarks.iter().zip(b.landmarks.iter()) {
                assert_eq!((p.x, p.y), (q.x, q.y));
            }
        }
    }

    #[test]
    fn different_indices_differ() {
        let spec = PhantomSpec::default();
        let a = generate_one(&spec, 0).unwrap();
        let b = generate_one(&spec, 1).unwrap();
        assert_ne!(a.image.data(), b.image.data());
    }

    #[test]
    fn certain_lesions_are_annotated_and_visible_against_the_mirror() {
        let spec = PhantomSpec { lesion_prob: 1.0, ..PhantomSpec::default() };
        let mut total = 0usize;
        let mut visible = 0usize;
        for index in 0..64u64 {
            let sample = generate_one(&spec, index).unwrap();
            assert!(!sample.lesions.is_empty(), "sample {index} has no annotation");
            // The anatomically mirrored window comes from the sample's own
            // landmark geometry: reflect across the fitted axis, then move
            // with the landmark-guided warp (a plain reflection would miss
            // the contralateral bone once the pose shears the anatomy).
            let line = sample.landmarks.fit_symmetry_line().unwrap();
            let reflected = sample.landmarks.reflect_across(&line);
            let src: Vec<Point> = reflected.iter().map(|(_, p)| p).collect();
            let dst: Vec<Point> = sample.landmarks.iter().map(|(_, p)| p).collect();
            let warp = crate::geometry::fit_tps(&src, &dst, 1e-3).unwrap();
            for &p in &sample.lesions {
                let own = window_mean(&sample.image, p, LESION_WINDOW_RADIUS);
                let mirror_p = warp.apply(line.reflect(p));
                let mirrored = window_mean(&sample.image, mirror_p, LESION_WINDOW_RADIUS);
                total += 1;
                if (own - mirrored).abs() > spec.lesion_contrast / 2.0 {
                    visible += 1;
                }
            }
        }
        // One-sided nuisance gain occasionally erodes a window difference,
        // so the guarantee is statistical: at least 95% of breaks clear
        // half their nominal contrast against the anatomical mirror.
        assert!(
            visible * 20 >= total * 19,
            "only {visible}/{total} breaks clear the mirrored-window contrast bar"
        );
        assert!(total >= 100, "pool too small to trust the ratio: {total}");
    }

    #[test]
    fn lesions_always_on_one_side_only() {
        let spec = PhantomSpec { lesion_prob: 1.0, max_lesions: 3, ..Default::default() };
        let mut saw_multi = false;
        for index in 0..24u64 {
            let sample = generate_one(&spec, index).unwrap();
            let line = sample.landmarks.fit_symmetry_line().unwrap();
            let signs: Vec<f64> =
                sample.lesions.iter().map(|&p| line.signed_offset(p).signum()).collect();
            assert!(
                signs.windows(2).all(|w| w[0] == w[1]),
                "sample {index} has breaks on both sides"
            );
            saw_multi |= sample.lesions.len() > 1;
        }
        assert!(saw_multi, "no sample drew more than one break");
    }

    #[test]
    fn fitted_line_recovers_the_posed_axis() {
        let spec = PhantomSpec { pose_magnitude: 0.12, ..PhantomSpec::default() };
        for index in 0..16u64 {
            let sample = generate_one(&spec, index).unwrap();
            let fit = sample.landmarks.fit_symmetry_line().unwrap();
            // The posed axis passes through the midline landmarks and all
            // pair midpoints; measure RMS distance of those to the fit.
            let mut pts = vec![sample.landmarks.s1(), sample.landmarks.s2()];
            for k in 1..=7 {
                pts.push(sample.landmarks.left(k).mid(sample.landmarks.right(k)));
            }
            let rms = (pts.iter().map(|&p| fit.signed_offset(p).powi(2)).sum::<f64>()
                / pts.len() as f64)
                .sqrt();
            assert!(rms < 0.5, "sample {index}: axis recovery RMS {rms:.4} px");
        }
    }

    #[test]
    fn landmarks_follow_the_pose_not_the_canonical_frame() {
        let spec = PhantomSpec { pose_magnitude: 0.12, ..PhantomSpec::default() };
        let canon = canonical_landmarks(spec.image_hw);
        let sample = generate_one(&spec, 2).unwrap();
        let moved =
            canon.iter().zip(sample.landmarks.iter()).any(|((_, a), (_, b))| a.dist(b) > 1.0);
        assert!(moved, "pose did not move the landmarks");
    }

    #[test]
    fn spec_validation_rejects_out_of_range_values() {
        let bad_prob = PhantomSpec { lesion_prob: 1.5, ..Default::default() };
        assert!(matches!(bad_prob.validate(), Err(Error::Config(_))));
        let bad_mag = PhantomSpec { pose_magnitude: -0.1, ..Default::default() };
        assert!(matches!(bad_mag.validate(), Err(Error::Config(_))));
        let bad_width = PhantomSpec { lesion_width_px: 0.0, ..Default::default() };
        assert!(matches!(bad_width.validate(), Err(Error::Config(_))));
        let bad_count = PhantomSpec { max_lesions: 0, ..Default::default() };
        assert!(matches!(bad_count.validate(), Err(Error::Config(_))));
        assert!(PhantomSpec::default().validate().is_ok());
    }

    #[test]
    fn split_matches_the_ratio_example_exactly() {
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let s = split(&labels, (0.7, 0.1, 0.2), 9).unwrap();
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn split_partitions_disjointly_and_covers_everything() {
        let labels: Vec<bool> = (0..137).map(|i| i % 3 == 0).collect();
        let s = split(&labels, (0.6, 0.2, 0.2), 4).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..137).collect();
        assert_eq!(all, expect);
        let assign = s.assignment(137).unwrap();
        assert_eq!(assign.len(), 137);
    }

    #[test]
    fn split_sizes_are_exact_even_with_uneven_class_counts() {
        // 33 positives and 64 negatives: per-class rounding alone would let
        // global part sizes drift by one off the requested apportionment.
        let labels: Vec<bool> = (0..97).map(|i| i % 3 == 0).collect();
        for seed in 0..20 {
            let s = split(&labels, (0.7, 0.1, 0.2), seed).unwrap();
            assert_eq!(
                (s.train.len(), s.val.len(), s.test.len()),
                (68, 10, 19),
                "seed {seed} produced off-target part sizes"
            );
        }
    }

    #[test]
    fn split_is_stratified_near_the_global_rate() {
        let labels: Vec<bool> = (0..200).map(|i| i < 80).collect(); // 40% positive
        let s = split(&labels, (0.7, 0.1, 0.2), 21).unwrap();
        let rate =
            |idxs: &[usize]| idxs.iter().filter(|&&i| labels[i]).count() as f64 / idxs.len() as f64;
        for part in [&s.train, &s.val, &s.test] {
            let r = rate(part);
            assert!((r - 0.4).abs() <= 0.05, "partition positive rate {r} strays from global 0.40");
        }
    }

    #[test]
    fn split_is_deterministic_in_the_seed() {
        let labels: Vec<bool> = (0..50).map(|i| i % 4 == 0).collect();
        let a = split(&labels, (0.5, 0.25, 0.25), 3).unwrap();
        let b = split(&labels, (0.5, 0.25, 0.25), 3).unwrap();
        assert_eq!(a, b);
        let c = split(&labels, (0.5, 0.25, 0.25), 4).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn split_rejects_bad_fractions_and_empty_partitions() {
        let labels = vec![true, false, true, false];
        assert!(matches!(split(&labels, (0.5, 0.2, 0.2), 0), Err(Error::Config(_))));
        assert!(matches!(split(&labels, (0.9, 0.05, 0.05), 0), Err(Error::Config(_))));
        assert!(matches!(split(&[], (0.7, 0.1, 0.2), 0), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_text_roundtrips() {
        let m = Manifest {
            entries: vec![
                ManifestEntry {
                    name: "phantom_000000".into(),
                    label: true,
                    lesions: 2,
                    split: SplitKind::Train,
                },
                ManifestEntry {
                    name: "phantom_000001".into(),
                    label: false,
                    lesions: 0,
                    split: SplitKind::Test,
                },
            ],
        };
        let parsed = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert!(Manifest::parse("a\tb\n").is_err());
        assert!(Manifest::parse("a\t2\t0\ttrain\n").is_err());
        assert!(Manifest::parse("a\t1\t0\televation\n").is_err());
    }

    #[test]
    fn dataset_writes_and_loads_back() {
        let mut root = std::env::temp_dir();
        root.push(format!("aasn-synthdata-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);

        let spec = PhantomSpec { n_images: 10, lesion_prob: 0.6, ..Default::default() };
        let manifest = write_dataset(&root, &spec, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!(manifest.entries.len(), 10);

        // regenerating yields an identical manifest (and file bytes)
        let text_a = std::fs::read_to_string(manifest_path(&root)).unwrap();
        let manifest_b = write_dataset(&root, &spec, (0.6, 0.2, 0.2), 5).unwrap();
        let text_b = std::fs::read_to_string(manifest_path(&root)).unwrap();
        assert_eq!(text_a, text_b);
        assert_eq!(manifest, manifest_b);

        for entry in &manifest.entries {
            let loaded = load_sample(&root, &entry.name).unwrap();
            assert_eq!(loaded.lesions.is_empty(), !entry.label);
            assert_eq!(loaded.lesions.len(), entry.lesions);
            assert_eq!(loaded.image.h(), 192);
            assert_eq!(loaded.image.w(), 192);
        }

        // PNG quantisation is the only loss: loaded pixels must equal the
        // generated ones rounded to 8 bits.
        let sample = generate_one(&spec, 0).unwrap();
        let loaded = load_sample(&root, "phantom_000000").unwrap();
        for (a, b) in sample.image.data().iter().zip(loaded.image.data()) {
            let quantised = (a.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            assert!((quantised - b).abs() < 1e-7);
        }

        let _ = std::fs::remove_dir_all(&root);
    }

    #[test]
    fn images_stay_inside_the_unit_range() {
        let spec = PhantomSpec {
            nuisance_magnitude: 0.2,
            noise_sigma: 0.05,
            lesion_prob: 1.0,
            ..Default::default()
        };
        let sample = generate_one(&spec, 1).unwrap();
        for &v in sample.image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
