//! Stochastic views (crop, resize, flip, appearance jitter) and the exact
//! pixel correspondence between two views of one image.
//!
//! Geometry is restricted to an axis-aligned integer crop, a resize to a fixed
//! output size and an optional horizontal flip. Every embedding-cell centre
//! therefore has a rational source coordinate, and correspondences are decided
//! in exact integer arithmetic: two views never disagree about a match because
//! of rounding.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One sampled view of a source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub crop: CropRect,
    /// `(height, width)` of the rendered view.
    pub out_size: (usize, usize),
    pub blur_sigma: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
    pub hflip: bool,
    pub seed: u64,
}

impl ViewParams {
    /// Full-image view with no appearance change.
    pub fn identity(height: usize, width: usize) -> Self {
        ViewParams {
            crop: CropRect {
                x: 0,
                y: 0,
                w: width,
                h: height,
            },
            out_size: (height, width),
            blur_sigma: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            grayscale: false,
            hflip: false,
            seed: 0,
        }
    }

    pub fn same_geometry(&self, other: &ViewParams) -> bool {
        self.crop == other.crop && self.out_size == other.out_size && self.hflip == other.hflip
    }

    /// Maps a continuous view coordinate `(x, y)` to source coordinates.
    pub fn view_to_source(&self, x: f64, y: f64) -> (f64, f64) {
        let (oh, ow) = (self.out_size.0 as f64, self.out_size.1 as f64);
        let x = if self.hflip { ow - x } else { x };
        (
            self.crop.x as f64 + x * self.crop.w as f64 / ow,
            self.crop.y as f64 + y * self.crop.h as f64 / oh,
        )
    }

    /// Inverse of [`ViewParams::view_to_source`].
    pub fn source_to_view(&self, sx: f64, sy: f64) -> (f64, f64) {
        let (oh, ow) = (self.out_size.0 as f64, self.out_size.1 as f64);
        let x = (sx - self.crop.x as f64) * ow / self.crop.w as f64;
        let y = (sy - self.crop.y as f64) * oh / self.crop.h as f64;
        (if self.hflip { ow - x } else { x }, y)
    }

    fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        let c = self.crop;
        if c.w == 0 || c.h == 0 || c.x + c.w > width || c.y + c.h > height {
            bail!(Usage, "crop {c:?} outside {height}x{width} image");
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            bail!(Usage, "empty output size");
        }
        Ok(())
    }
}

/// Embedding-grid coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        PixelCoord { row, col }
    }
}

/// How positive pairs are formed from a view pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Independent crops, pairs from the correspondence map.
    #[default]
    DiffView,
    /// Identical geometry for both views; only appearance differs.
    SameView,
    /// Independent crops, random pixel pairing that ignores correspondence.
    Unmatch,
}

impl std::str::FromStr for PairMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff_view" => Ok(PairMode::DiffView),
            "same_view" => Ok(PairMode::SameView),
            "unmatch" => Ok(PairMode::Unmatch),
            other => bail!(Config, "unknown pair mode {other:?}"),
        }
    }
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairMode::DiffView => "diff_view",
            PairMode::SameView => "same_view",
            PairMode::Unmatch => "unmatch",
        })
    }
}

/// Distribution views are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPolicy {
    /// `[height, width]` of rendered views.
    pub out_size: [usize; 2],
    /// Crop area as a fraction of the source area.
    pub scale: [f32; 2],
    /// Crop aspect ratio `w / h`, sampled log-uniformly.
    pub ratio: [f32; 2],
    pub blur_sigma: [f32; 2],
    /// Multiplicative jitter half-widths: factors are drawn from `[1-j, 1+j]`.
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_prob: f32,
    pub hflip_prob: f32,
    pub min_matches: usize,
    pub max_attempts: usize,
    /// Embedding stride the correspondence map is computed at.
    pub stride: usize,
    pub mode: PairMode,
}

impl Default for ViewPolicy {
    fn default() -> Self {
        ViewPolicy {
            out_size: [64, 64],
            scale: [0.2, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            blur_sigma: [0.0, 1.0],
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            hflip_prob: 0.5,
            min_matches: 32,
            max_attempts: 100,
            stride: 4,
            mode: PairMode::DiffView,
        }
    }
}

impl ViewPolicy {
    /// Full-image crops and no appearance change.
    pub fn identity(size: usize, stride: usize) -> Self {
        ViewPolicy {
            out_size: [size, size],
            scale: [1.0, 1.0],
            ratio: [1.0, 1.0],
            blur_sigma: [0.0, 0.0],
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            hflip_prob: 0.0,
            min_matches: 1,
            max_attempts: 100,
            stride,
            mode: PairMode::DiffView,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            bail!(Config, "crop scale range {:?} must satisfy 0 < lo <= hi <= 1", self.scale);
        }
        let [rlo, rhi] = self.ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            bail!(Config, "aspect ratio range {:?} is empty", self.ratio);
        }
        let [blo, bhi] = self.blur_sigma;
        if !(blo >= 0.0 && blo <= bhi) {
            bail!(Config, "blur sigma range {:?} is invalid", self.blur_sigma);
        }
        for (name, j) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&j) {
                bail!(Config, "{name} jitter {j} must lie in [0, 1)");
            }
        }
        for (name, p) in [("grayscale_prob", self.grayscale_prob), ("hflip_prob", self.hflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} {p} is not a probability");
            }
        }
        if self.stride == 0 || self.out_size.iter().any(|&d| d == 0 || d % self.stride != 0) {
            bail!(
                Config,
                "view size {:?} must be a positive multiple of stride {}",
                self.out_size,
                self.stride
            );
        }
        if self.min_matches == 0 || self.max_attempts == 0 {
            bail!(Config, "min_matches and max_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.out_size[0] / self.stride, self.out_size[1] / self.stride)
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, half_width: f32) -> f32 {
    let u: f32 = rng.random();
    1.0 + half_width * (2.0 * u - 1.0)
}

fn sample_crop<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, policy: &ViewPolicy) -> Result<CropRect> {
    let area = (height * width) as f64;
    let [lo, hi] = policy.scale.map(f64::from);
    let (llo, lhi) = (f64::from(policy.ratio[0]).ln(), f64::from(policy.ratio[1]).ln());
    for _ in 0..10 {
        let target = area * (lo + (hi - lo) * rng.random::<f64>());
        let ratio = (llo + (lhi - llo) * rng.random::<f64>()).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        let frac = (w * h) as f64 / area;
        if w >= 1 && h >= 1 && w <= width && h <= height && frac >= lo && frac <= hi {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return Ok(CropRect { x, y, w, h });
        }
    }
    // Fallback: the largest centred square whose area stays in range.
    let mut side = height.min(width);
    while side > 0 && (side * side) as f64 / area > hi {
        side -= 1;
    }
    if side == 0 || ((side * side) as f64 / area) < lo {
        bail!(Config, "no crop of a {height}x{width} image fits scale range {:?}", policy.scale);
    }
    Ok(CropRect {
        x: (width - side) / 2,
        y: (height - side) / 2,
        w: side,
        h: side,
    })
}

/// Draws one view of a `height × width` source image.
pub fn sample_view<R: Rng + ?Sized>(
    rng: &mut R,
    source_size: (usize, usize),
    policy: &ViewPolicy,
) -> Result<ViewParams> {
    policy.validate()?;
    let (height, width) = source_size;
    if height == 0 || width == 0 {
        bail!(Usage, "empty source image");
    }
    let crop = sample_crop(rng, height, width, policy)?;
    let mut v = ViewParams {
        crop,
        out_size: (policy.out_size[0], policy.out_size[1]),
        ..ViewParams::identity(height, width)
    };
    v.hflip = rng.random::<f32>() < policy.hflip_prob;
    resample_appearance(rng, &mut v, policy);
    Ok(v)
}

/// Redraws only the appearance parameters of `v`.
pub fn resample_appearance<R: Rng + ?Sized>(rng: &mut R, v: &mut ViewParams, policy: &ViewPolicy) {
    let [blo, bhi] = policy.blur_sigma;
    v.blur_sigma = blo + (bhi - blo) * rng.random::<f32>();
    v.brightness = jitter(rng, policy.brightness);
    v.contrast = jitter(rng, policy.contrast);
    v.saturation = jitter(rng, policy.saturation);
    v.grayscale = rng.random::<f32>() < policy.grayscale_prob;
    v.seed = rng.random();
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f32]) {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Renders a view: crop → bilinear resize → optional flip → blur, brightness,
/// contrast, saturation, grayscale.
pub fn apply_view(image: &Tensor, params: &ViewParams) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!(Dimension, "apply_view expects [3,H,W], got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    params.validate_for(h, w)?;
    let c = params.crop;
    let (oh, ow) = params.out_size;
    let src = image.data();

    let taps = |o: usize, out: usize, len: usize, off: usize| {
        let pos = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = (pos.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let t = (pos - i0 as f64) as f32;
        (off + i0, off + i1, 1.0 - t, t)
    };
    let ty: Vec<_> = (0..oh).map(|o| taps(o, oh, c.h, c.y)).collect();
    let tx: Vec<_> = (0..ow).map(|o| taps(o, ow, c.w, c.x)).collect();

    let mut out = vec![0.0f32; 3 * oh * ow];
    for ch in 0..3 {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                    + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                let dx = if params.hflip { ow - 1 - ox } else { ox };
                out[(ch * oh + oy) * ow + dx] = v;
            }
        }
    }

    let n = oh * ow;
    if params.blur_sigma > 1e-3 {
        let k = gaussian_kernel(params.blur_sigma);
        for ch in 0..3 {
            blur_plane(&mut out[ch * n..(ch + 1) * n], oh, ow, &k);
        }
    }
    if params.brightness != 1.0 {
        for v in out.iter_mut() {
            *v = (*v * params.brightness).clamp(0.0, 1.0);
        }
    }
    if params.contrast != 1.0 {
        let mean = (0..n)
            .map(|i| luma(out[i], out[n + i], out[2 * n + i]))
            .sum::<f32>()
            / n as f32;
        for v in out.iter_mut() {
            *v = (mean + params.contrast * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if params.saturation != 1.0 || params.grayscale {
        for i in 0..n {
            let g = luma(out[i], out[n + i], out[2 * n + i]);
            for ch in 0..3 {
                let v = &mut out[ch * n + i];
                *v = if params.grayscale {
                    g
                } else {
                    (g + params.saturation * (*v - g)).clamp(0.0, 1.0)
                };
            }
        }
    }
    Tensor::new(&[3, oh, ow], out)
}

/// Matched embedding cells of two views.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    /// `(cell in view A, cell in view B)`, ordered by the A cell (row-major).
    pub pairs: Vec<(PixelCoord, PixelCoord)>,
    /// Source-image point of each pair: midpoint of the two cell centres.
    pub source_points: Vec<(f64, f64)>,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

impl CorrespondenceMap {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same map seen from view B.
    pub fn transposed(&self) -> CorrespondenceMap {
        let mut items: Vec<_> = self
            .pairs
            .iter()
            .map(|&(a, b)| (b, a))
            .zip(self.source_points.iter().copied())
            .collect();
        items.sort_by_key(|(p, _)| (p.0, p.1));
        CorrespondenceMap {
            pairs: items.iter().map(|(p, _)| *p).collect(),
            source_points: items.iter().map(|(_, s)| *s).collect(),
            grid_a: self.grid_b,
            grid_b: self.grid_a,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.grid_a == self.grid_b
            && self.pairs.len() == self.grid_a.0 * self.grid_a.1
            && self.pairs.iter().all(|(a, b)| a == b)
    }
}

/// One axis of a view's geometry.
#[derive(Clone, Copy, Debug)]
struct Axis {
    offset: i64,
    extent: i64,
    out: i64,
    flip: bool,
}

impl Axis {
    fn cells(&self, stride: usize) -> usize {
        self.out as usize / stride
    }

    /// View cell index of the `g`-th cell in increasing source order.
    fn view_index(&self, g: usize, stride: usize) -> usize {
        if self.flip {
            self.cells(stride) - 1 - g
        } else {
            g
        }
    }
}

fn axes(p: &ViewParams) -> (Axis, Axis) {
    let rows = Axis {
        offset: p.crop.y as i64,
        extent: p.crop.h as i64,
        out: p.out_size.0 as i64,
        flip: false,
    };
    let cols = Axis {
        offset: p.crop.x as i64,
        extent: p.crop.w as i64,
        out: p.out_size.1 as i64,
        flip: p.hflip,
    };
    (rows, cols)
}

/// One-dimensional matching between cell centres of two views, indexed in
/// increasing source order. Coordinates are scaled by `2·outA·outB` so every
/// centre and half-extent is an integer.
///
/// A pair matches when its centres are closer than the smaller half-extent.
/// At exactly that distance the pair is kept iff `floor(midpoint / tol)` is
/// even: the rule depends only on source geometry, so it is symmetric in the
/// two views and still yields a one-to-one matching.
fn axis_matching(a: Axis, b: Axis, stride: usize) -> Vec<Option<usize>> {
    let s = stride as i64;
    let centre_a = |g: usize| (2 * a.offset * a.out + (2 * g as i64 + 1) * s * a.extent) * b.out;
    let centre_b = |g: usize| (2 * b.offset * b.out + (2 * g as i64 + 1) * s * b.extent) * a.out;
    let tol = (s * a.extent * b.out).min(s * b.extent * a.out);
    let nb = b.cells(stride);
    (0..a.cells(stride))
        .map(|ga| {
            let xa = centre_a(ga);
            (0..nb).find(|&gb| {
                let xb = centre_b(gb);
                let d = (xa - xb).abs();
                d < tol || (d == tol && (xa + xb).div_euclid(2 * tol) % 2 == 0)
            })
        })
        .collect()
}

/// Matches the embedding cells of view A to those of view B.
pub fn compute_correspondence(pa: &ViewParams, pb: &ViewParams, stride: usize) -> Result<CorrespondenceMap> {
    if stride == 0 {
        bail!(Config, "stride must be positive");
    }
    for p in [pa, pb] {
        if p.out_size.0 % stride != 0 || p.out_size.1 % stride != 0 {
            bail!(Config, "view size {:?} not divisible by stride {stride}", p.out_size);
        }
    }
    let (ra, ca) = axes(pa);
    let (rb, cb) = axes(pb);
    let rows = axis_matching(ra, rb, stride);
    let cols = axis_matching(ca, cb, stride);
    let grid_a = (ra.cells(stride), ca.cells(stride));
    let grid_b = (rb.cells(stride), cb.cells(stride));
    let half = stride as f64 / 2.0;
    let mut pairs = Vec::new();
    let mut source_points = Vec::new();
    for row in 0..grid_a.0 {
        let Some(rb_idx) = rows[row] else { continue };
        for col in 0..grid_a.1 {
            let g_col = if ca.flip { grid_a.1 - 1 - col } else { col };
            let Some(gb_col) = cols[g_col] else { continue };
            let a = PixelCoord::new(row, col);
            let b = PixelCoord::new(rb_idx, cb.view_index(gb_col, stride));
            let (ax, ay) = pa.view_to_source(a.col as f64 * stride as f64 + half, a.row as f64 * stride as f64 + half);
            let (bx, by) = pb.view_to_source(b.col as f64 * stride as f64 + half, b.row as f64 * stride as f64 + half);
            pairs.push((a, b));
            source_points.push(((ax + bx) / 2.0, (ay + by) / 2.0));
        }
    }
    Ok(CorrespondenceMap {
        pairs,
        source_points,
        grid_a,
        grid_b,
    })
}

/// Samples view pairs until their correspondence has at least
/// `policy.min_matches` pairs.
pub fn sample_view_pair<R: Rng + ?Sized>(
    rng: &mut R,
    source_size: (usize, usize),
    policy: &ViewPolicy,
) -> Result<(ViewParams, ViewParams, CorrespondenceMap)> {
    policy.validate()?;
    let (gh, gw) = policy.grid();
    if policy.min_matches > gh * gw {
        bail!(
            Sampling,
            "{} matches requested but the grid only has {} cells",
            policy.min_matches,
            gh * gw
        );
    }
    for _ in 0..policy.max_attempts {
        let pa = sample_view(rng, source_size, policy)?;
        let pb = match policy.mode {
            PairMode::SameView => {
                let mut pb = pa.clone();
                resample_appearance(rng, &mut pb, policy);
                pb
            }
            PairMode::DiffView | PairMode::Unmatch => sample_view(rng, source_size, policy)?,
        };
        let map = compute_correspondence(&pa, &pb, policy.stride)?;
        if map.len() >= policy.min_matches {
            return Ok((pa, pb, map));
        }
    }
    bail!(
        Sampling,
        "no view pair with {} matches after {} attempts",
        policy.min_matches,
        policy.max_attempts
    )
}

/// `n` distinct pairs drawn uniformly without replacement.
pub fn select_positive_pairs<R: Rng + ?Sized>(
    map: &CorrespondenceMap,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(PixelCoord, PixelCoord)>> {
    if n > map.len() {
        bail!(Usage, "asked for {n} pairs from a map of {}", map.len());
    }
    Ok(index::sample(rng, map.len(), n).into_iter().map(|i| map.pairs[i]).collect())
}

/// `n` random cell pairs that ignore the correspondence map (the "unmatch"
/// ablation): distinct cells on each side, paired arbitrarily.
pub fn random_pairs<R: Rng + ?Sized>(
    grid_a: (usize, usize),
    grid_b: (usize, usize),
    n: usize,
    rng: &mut R,
) -> Result<Vec<(PixelCoord, PixelCoord)>> {
    let (na, nb) = (grid_a.0 * grid_a.1, grid_b.0 * grid_b.1);
    if n > na || n > nb {
        bail!(Usage, "cannot draw {n} distinct cells from grids {grid_a:?} / {grid_b:?}");
    }
    let ia = index::sample(rng, na, n);
    let ib = index::sample(rng, nb, n);
    Ok(ia
        .into_iter()
        .zip(ib)
        .map(|(a, b)| {
            (
                PixelCoord::new(a / grid_a.1, a % grid_a.1),
                PixelCoord::new(b / grid_b.1, b % grid_b.1),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i % (h * w)) % w) as f32 / w as f32)
    }

    #[test]
    fn identity_policy_gives_full_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_view(&mut rng, (32, 32), &ViewPolicy::identity(32, 4)).unwrap();
        assert_eq!(p.crop, CropRect { x: 0, y: 0, w: 32, h: 32 });
        assert!(!p.hflip && !p.grayscale);
        assert_eq!((p.brightness, p.contrast, p.saturation, p.blur_sigma), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let policy = ViewPolicy::default();
        let a = sample_view(&mut ChaCha8Rng::seed_from_u64(9), (64, 64), &policy).unwrap();
        let b = sample_view(&mut ChaCha8Rng::seed_from_u64(9), (64, 64), &policy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_policy_is_config_error() {
        let mut policy = ViewPolicy::default();
        policy.scale = [0.8, 0.2];
        let err = sample_view(&mut ChaCha8Rng::seed_from_u64(0), (64, 64), &policy).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identity_view_is_noop() {
        let img = Tensor::from_fn(&[3, 8, 12], |i| (i as f32 * 0.37).sin() * 0.5 + 0.5);
        let out = apply_view(&img, &ViewParams::identity(8, 12)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grayscale_equalises_channels() {
        let img = Tensor::from_fn(&[3, 6, 6], |i| (i as f32 * 0.71).cos() * 0.5 + 0.5);
        let mut p = ViewParams::identity(6, 6);
        p.grayscale = true;
        let out = apply_view(&img, &p).unwrap();
        let d = out.data();
        for i in 0..36 {
            assert_eq!(d[i], d[36 + i]);
            assert_eq!(d[i], d[72 + i]);
        }
    }

    #[test]
    fn downscale_of_ramp_is_closed_form() {
        // 8-wide crop resized to 4: sample position 2·o + 0.5 on a linear ramp.
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i % 64) % 8) as f32);
        let mut p = ViewParams::identity(8, 8);
        p.out_size = (4, 4);
        let out = apply_view(&img, &p).unwrap();
        for ox in 0..4 {
            assert!((out.data()[ox] - (2.0 * ox as f32 + 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_outside_image_is_usage_error() {
        let mut p = ViewParams::identity(8, 8);
        p.crop.x = 4;
        assert!(matches!(apply_view(&ramp(8, 8), &p), Err(Error::Usage(_))));
    }

    #[test]
    fn identical_views_give_identity_map() {
        let mut p = ViewParams::identity(64, 64);
        p.crop = CropRect { x: 5, y: 9, w: 37, h: 41 };
        p.hflip = true;
        let mut q = p.clone();
        q.brightness = 1.3;
        q.grayscale = true;
        let map = compute_correspondence(&p, &q, 4).unwrap();
        assert!(map.is_identity());
    }

    #[test]
    fn translation_by_one_stride_shifts_one_cell() {
        let mut pa = ViewParams::identity(64, 64);
        pa.crop = CropRect { x: 0, y: 0, w: 32, h: 32 };
        pa.out_size = (32, 32);
        let mut pb = pa.clone();
        pb.crop.x = 4;
        let map = compute_correspondence(&pa, &pb, 4).unwrap();
        assert_eq!(map.len(), 8 * 7);
        for (a, b) in &map.pairs {
            assert_eq!(a.row, b.row);
            assert_eq!(a.col, b.col + 1);
        }
    }

    #[test]
    fn min_matches_beyond_grid_fails() {
        let mut policy = ViewPolicy::identity(16, 4);
        policy.min_matches = 17;
        let err = sample_view_pair(&mut ChaCha8Rng::seed_from_u64(0), (16, 16), &policy).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn full_crops_match_everything_first_try() {
        let policy = ViewPolicy::identity(16, 4);
        let (pa, pb, map) = sample_view_pair(&mut ChaCha8Rng::seed_from_u64(0), (16, 16), &policy).unwrap();
        assert_eq!(pa.crop, pb.crop);
        assert!(map.is_identity());
    }

    #[test]
    fn same_view_mode_has_identity_maps() {
        let policy = ViewPolicy {
            mode: PairMode::SameView,
            ..ViewPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (_, _, map) = sample_view_pair(&mut rng, (64, 64), &policy).unwrap();
            assert!(map.is_identity());
        }
    }

    #[test]
    fn select_all_pairs_and_too_many() {
        let p = ViewParams::identity(8, 8);
        let map = compute_correspondence(&p, &p, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = select_positive_pairs(&map, 4, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, map.pairs);
        assert!(select_positive_pairs(&map, 5, &mut rng).is_err());
        let a = select_positive_pairs(&map, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = select_positive_pairs(&map, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }
}
