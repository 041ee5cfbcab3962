//! Synthetic labelled scenes: textured circles, rectangles and triangles
//! composited in painter's order over a textured background, with per-pixel
//! class, instance and depth ground truth, plus short rigid-motion sequences.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image_io::{self, quantize, RgbImage};
use crate::tensor::Tensor;

pub const BACKGROUND: u16 = 0;
const DEPTH_FAR: f32 = 5.0;
const DEPTH_NEAR: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle];

    pub fn class(self) -> u16 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Rect => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// One textured shape. Centres are integers so that integer translations
/// move the rasterised mask by exactly that many pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: i32,
    pub cy: i32,
    /// Radius (circle), half-extent scale (rect) or circumradius (triangle).
    pub size: f32,
    /// Rect width/height ratio.
    pub aspect: f32,
    /// Triangle rotation in radians.
    pub angle: f32,
    pub color: [f32; 3],
    /// Depth change per pixel, relative to the centre.
    pub depth_grad: (f32, f32),
}

impl Shape {
    /// Tests the pixel centre at `(dx + 0.5, dy + 0.5)` relative to the shape centre.
    fn contains_rel(&self, dx: i32, dy: i32) -> bool {
        let (x, y) = (dx as f32 + 0.5, dy as f32 + 0.5);
        match self.kind {
            ShapeKind::Circle => x * x + y * y <= self.size * self.size,
            ShapeKind::Rect => {
                let a = self.aspect.sqrt();
                x.abs() <= self.size * a && y.abs() <= self.size / a
            }
            ShapeKind::Triangle => {
                let v: Vec<(f32, f32)> = (0..3)
                    .map(|k| {
                        let t = self.angle + k as f32 * std::f32::consts::TAU / 3.0;
                        (self.size * t.cos(), self.size * t.sin())
                    })
                    .collect();
                let side = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&d| d >= 0.0) || s.iter().all(|&d| d <= 0.0)
            }
        }
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        self.contains_rel(px as i32 - self.cx, py as i32 - self.cy)
    }

    /// Half-width of a box that encloses the shape.
    fn reach(&self) -> i32 {
        let r = match self.kind {
            ShapeKind::Rect => self.size * self.aspect.sqrt().max(1.0 / self.aspect.sqrt()),
            _ => self.size,
        };
        r.ceil() as i32 + 1
    }

    /// Class-specific texture in `[0,1]`, in shape-local coordinates.
    fn pattern(&self, dx: i32, dy: i32) -> f32 {
        let (x, y) = (dx as f32 + 0.5, dy as f32 + 0.5);
        let v = match self.kind {
            ShapeKind::Circle => (1.6 * (x * x + y * y).sqrt()).sin(),
            ShapeKind::Rect => (1.2 * (x + y)).sin(),
            ShapeKind::Triangle => (1.4 * x).sin() * (1.4 * y).sin(),
        };
        0.5 + 0.5 * v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub size: usize,
    /// Background plus up to three shape classes.
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Base colour per class, background first.
    pub palette: Vec<[f32; 3]>,
    /// Per-instance colour perturbation (uniform half-width per channel).
    pub color_noise: f32,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f32,
    pub texture_contrast: f32,
    /// Shape size range as a fraction of the image side.
    pub shape_scale: [f32; 2],
    /// Minimum visible pixels per instance.
    pub min_visible: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            n_classes: 4,
            min_shapes: 3,
            max_shapes: 5,
            palette: vec![[0.45, 0.45, 0.4], [0.8, 0.3, 0.25], [0.3, 0.7, 0.35], [0.3, 0.4, 0.85]],
            color_noise: 0.2,
            pixel_noise: 0.03,
            texture_contrast: 0.5,
            shape_scale: [0.1, 0.2],
            min_visible: 24,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            bail!(Config, "scene size {} is degenerate", self.size);
        }
        if !(2..=4).contains(&self.n_classes) {
            bail!(Config, "n_classes must be in 2..=4, got {}", self.n_classes);
        }
        if self.palette.len() < self.n_classes {
            bail!(Config, "palette has {} colours for {} classes", self.palette.len(), self.n_classes);
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 16 {
            bail!(Config, "shape count range {}..={} is invalid", self.min_shapes, self.max_shapes);
        }
        let [lo, hi] = self.shape_scale;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            bail!(Config, "shape_scale {:?} must satisfy 0 < lo <= hi < 0.5", self.shape_scale);
        }
        Ok(())
    }

    fn kinds(&self) -> &'static [ShapeKind] {
        &ShapeKind::ALL[..self.n_classes - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `[3,H,W]`, values in `[0,1]` on the 8-bit grid.
    pub image: Tensor,
    pub class_map: Vec<u16>,
    pub depth_map: Vec<f32>,
    pub instance_map: Vec<u16>,
}

impl Scene {
    pub fn class_counts(&self, n_classes: usize) -> Vec<u64> {
        let mut c = vec![0; n_classes];
        for &k in &self.class_map {
            c[k as usize] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<Scene>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.sample(StandardNormal)
}

/// Background colour field: base colour modulated by two low-frequency waves.
#[derive(Clone, Debug)]
struct Background {
    color: [f32; 3],
    waves: [(f32, f32, f32); 2],
    depth_grad: (f32, f32),
}

impl Background {
    fn sample<R: Rng + ?Sized>(rng: &mut R, p: &SynthParams) -> Self {
        let mut color = p.palette[0];
        for c in color.iter_mut() {
            *c = (*c + rng.random_range(-p.color_noise..=p.color_noise) * 0.5).clamp(0.05, 0.95);
        }
        let wave = |rng: &mut R| {
            let t = rng.random_range(0.0..std::f32::consts::TAU);
            let f = rng.random_range(0.15..0.35);
            (f * t.cos(), f * t.sin(), rng.random_range(0.0..std::f32::consts::TAU))
        };
        Background {
            color,
            waves: [wave(rng), wave(rng)],
            depth_grad: (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)),
        }
    }

    fn pattern(&self, x: usize, y: usize) -> f32 {
        let v: f32 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph)| (fx * x as f32 + fy * y as f32 + ph).sin())
            .sum();
        0.5 + 0.25 * v
    }
}

fn sample_shape<R: Rng + ?Sized>(rng: &mut R, kind: ShapeKind, p: &SynthParams) -> Shape {
    let side = p.size as f32;
    let size = side * rng.random_range(p.shape_scale[0]..=p.shape_scale[1]);
    let mut color = p.palette[kind.class() as usize];
    for c in color.iter_mut() {
        *c = (*c + rng.random_range(-p.color_noise..=p.color_noise)).clamp(0.05, 0.95);
    }
    let mut s = Shape {
        kind,
        cx: 0,
        cy: 0,
        size,
        aspect: rng.random_range(0.6..1.6),
        angle: rng.random_range(0.0..std::f32::consts::TAU),
        color,
        depth_grad: (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
    };
    let r = s.reach().min(p.size as i32 / 2 - 1);
    s.cx = rng.random_range(r..=p.size as i32 - r);
    s.cy = rng.random_range(r..=p.size as i32 - r);
    s
}

/// Depth of the layer at painter's index `layer` (0 = background) out of `n` shapes.
fn layer_depth(layer: usize, n: usize) -> f32 {
    if layer == 0 || n == 0 {
        DEPTH_FAR
    } else {
        DEPTH_FAR - (DEPTH_FAR - DEPTH_NEAR) * layer as f32 / n as f32
    }
}

/// Rasterises `shapes` in painter's order (later shapes on top). Instance ids
/// are `index + 1`. `offsets` translates each shape; `gain` scales the colours.
fn render<R: Rng + ?Sized>(
    rng: &mut R,
    p: &SynthParams,
    bg: &Background,
    shapes: &[Shape],
    offsets: &[(i32, i32)],
    gain: f32,
) -> Scene {
    let n = p.size;
    let mut class_map = vec![BACKGROUND; n * n];
    let mut instance_map = vec![0u16; n * n];
    let mut depth_map = vec![0.0f32; n * n];
    let mut rgb = vec![[0.0f32; 3]; n * n];
    let c = n as f32 / 2.0;
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let t = bg.pattern(x, y);
            let shade = 1.0 - p.texture_contrast / 2.0 + p.texture_contrast * t;
            rgb[i] = bg.color.map(|v| v * shade);
            depth_map[i] = DEPTH_FAR + bg.depth_grad.0 * (x as f32 - c) + bg.depth_grad.1 * (y as f32 - c);
        }
    }
    for (k, (s, &(ox, oy))) in shapes.iter().zip(offsets).enumerate() {
        let (cx, cy) = (s.cx + ox, s.cy + oy);
        let r = s.reach();
        let depth = layer_depth(k + 1, shapes.len());
        for y in (cy - r).max(0)..(cy + r + 1).min(n as i32) {
            for x in (cx - r).max(0)..(cx + r + 1).min(n as i32) {
                let (dx, dy) = (x - cx, y - cy);
                if !s.contains_rel(dx, dy) {
                    continue;
                }
                let i = y as usize * n + x as usize;
                let shade = 1.0 - p.texture_contrast / 2.0 + p.texture_contrast * s.pattern(dx, dy);
                rgb[i] = s.color.map(|v| v * shade);
                class_map[i] = s.kind.class();
                instance_map[i] = (k + 1) as u16;
                depth_map[i] = depth + s.depth_grad.0 * (dx as f32 + 0.5) + s.depth_grad.1 * (dy as f32 + 0.5);
            }
        }
    }
    let mut data = vec![0.0f32; 3 * n * n];
    for (i, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            let v = px[ch] * gain + p.pixel_noise * normal(rng);
            data[ch * n * n + i] = quantize(v) as f32 / 255.0;
        }
    }
    Scene {
        height: n,
        width: n,
        image: Tensor::new(&[3, n, n], data).expect("consistent"),
        class_map,
        depth_map,
        instance_map,
    }
}

fn visible_counts(scene: &Scene, n_instances: usize) -> Vec<usize> {
    let mut c = vec![0; n_instances + 1];
    for &i in &scene.instance_map {
        c[i as usize] += 1;
    }
    c
}

/// Renders a scene from explicit shapes; exposed for tests and tooling.
pub fn render_scene<R: Rng + ?Sized>(rng: &mut R, p: &SynthParams, shapes: &[Shape]) -> Result<Scene> {
    p.validate()?;
    let bg = Background::sample(rng, p);
    Ok(render(rng, p, &bg, shapes, &vec![(0, 0); shapes.len()], 1.0))
}

/// Draws one scene. Every shape class appears at least once and every
/// instance keeps at least `min_visible` pixels after occlusion.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, p: &SynthParams) -> Result<Scene> {
    p.validate()?;
    let kinds = p.kinds();
    let n_shapes = rng.random_range(p.min_shapes.max(kinds.len())..=p.max_shapes.max(kinds.len()));
    for _ in 0..100 {
        let mut chosen: Vec<ShapeKind> = kinds.to_vec();
        while chosen.len() < n_shapes {
            chosen.push(kinds[rng.random_range(0..kinds.len())]);
        }
        chosen.shuffle(rng);
        let shapes: Vec<Shape> = chosen.iter().map(|&k| sample_shape(rng, k, p)).collect();
        let bg = Background::sample(rng, p);
        let scene = render(rng, p, &bg, &shapes, &vec![(0, 0); shapes.len()], 1.0);
        if visible_counts(&scene, shapes.len())[1..].iter().all(|&c| c >= p.min_visible) {
            return Ok(scene);
        }
    }
    bail!(Sampling, "could not place {n_shapes} visible shapes in a {0}x{0} scene", p.size)
}

pub fn generate_dataset<R: Rng + ?Sized>(rng: &mut R, n_scenes: usize, p: &SynthParams) -> Result<Vec<Scene>> {
    if n_scenes == 0 {
        bail!(Config, "n_scenes must be at least 1");
    }
    (0..n_scenes).map(|_| generate_scene(rng, p)).collect()
}

/// Renders `shapes` moving with integer `velocities` over `t` frames. Frames
/// differ by the translation, a small brightness jitter and pixel noise.
pub fn render_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    p: &SynthParams,
    shapes: &[Shape],
    velocities: &[(i32, i32)],
    t: usize,
) -> Result<SceneSequence> {
    p.validate()?;
    if t < 2 {
        bail!(Config, "sequences need at least 2 frames");
    }
    if velocities.len() != shapes.len() {
        bail!(Usage, "{} velocities for {} shapes", velocities.len(), shapes.len());
    }
    let bg = Background::sample(rng, p);
    let frames = (0..t)
        .map(|f| {
            let offsets: Vec<(i32, i32)> = velocities.iter().map(|&(vx, vy)| (vx * f as i32, vy * f as i32)).collect();
            let gain = 1.0 + rng.random_range(-0.03..=0.03);
            render(rng, p, &bg, shapes, &offsets, gain)
        })
        .collect();
    Ok(SceneSequence { frames })
}

fn footprint(s: &Shape, n: usize, off: (i32, i32)) -> Option<Vec<usize>> {
    let (cx, cy) = (s.cx + off.0, s.cy + off.1);
    let r = s.reach();
    let mut px = Vec::new();
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if s.contains_rel(x - cx, y - cy) {
                if x < 0 || y < 0 || x >= n as i32 || y >= n as i32 {
                    return None;
                }
                px.push(y as usize * n + x as usize);
            }
        }
    }
    Some(px)
}

/// Random rigid-motion sequence: one shape per class, integer velocities up
/// to `max_speed` px/frame, shapes kept inside the frame and disjoint in every
/// frame so visible areas stay constant.
pub fn generate_sequence<R: Rng + ?Sized>(rng: &mut R, p: &SynthParams, t: usize, max_speed: i32) -> Result<SceneSequence> {
    p.validate()?;
    if t < 2 {
        bail!(Config, "sequences need at least 2 frames");
    }
    let n = p.size;
    'attempt: for _ in 0..1000 {
        let mut shapes: Vec<Shape> = p.kinds().iter().map(|&k| sample_shape(rng, k, p)).collect();
        let vel: Vec<(i32, i32)> = shapes
            .iter()
            .map(|_| (rng.random_range(-max_speed..=max_speed), rng.random_range(-max_speed..=max_speed)))
            .collect();
        // Place each centre so the whole trajectory stays inside the frame.
        let span = t as i32 - 1;
        for (s, &(vx, vy)) in shapes.iter_mut().zip(&vel) {
            let r = s.reach();
            let range = |v: i32| (r - (v * span).min(0), n as i32 - 1 - r - (v * span).max(0));
            let ((x0, x1), (y0, y1)) = (range(vx), range(vy));
            if x0 > x1 || y0 > y1 {
                continue 'attempt;
            }
            s.cx = rng.random_range(x0..=x1);
            s.cy = rng.random_range(y0..=y1);
        }
        for f in 0..t as i32 {
            let mut taken = vec![false; n * n];
            for (s, &(vx, vy)) in shapes.iter().zip(&vel) {
                let Some(px) = footprint(s, n, (vx * f, vy * f)) else { continue 'attempt };
                for i in px {
                    if taken[i] {
                        continue 'attempt;
                    }
                    taken[i] = true;
                }
            }
        }
        return render_sequence(rng, p, &shapes, &vel, t);
    }
    bail!(Sampling, "no in-frame, non-overlapping trajectories found for {t} frames")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub image: String,
    pub classes: String,
    pub instances: String,
    pub depth: String,
}

impl SceneFiles {
    fn for_prefix(prefix: &str) -> Self {
        SceneFiles {
            image: format!("{prefix}.ppm"),
            classes: format!("{prefix}.cls.pgm"),
            instances: format!("{prefix}.inst.pgm"),
            depth: format!("{prefix}.depth.f32"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub params: SynthParams,
    pub files: Vec<SceneFiles>,
    /// Pixel count per class, summed over all scenes.
    pub class_pixel_counts: Vec<u64>,
    /// Pixel count per class for each scene.
    pub scene_class_counts: Vec<Vec<u64>>,
    /// Hash of the experiment configuration that produced the data, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn write_scene(dir: &Path, files: &SceneFiles, s: &Scene) -> Result<()> {
    RgbImage::from_tensor(&s.image)?.write_ppm(&dir.join(&files.image))?;
    image_io::write_pgm16(&dir.join(&files.classes), s.width, s.height, &s.class_map)?;
    image_io::write_pgm16(&dir.join(&files.instances), s.width, s.height, &s.instance_map)?;
    image_io::write_f32(&dir.join(&files.depth), &s.depth_map)
}

fn read_scene(dir: &Path, files: &SceneFiles) -> Result<Scene> {
    let image = RgbImage::read_ppm(&dir.join(&files.image))?;
    let (w, h) = (image.width, image.height);
    let (cw, ch, class_map) = image_io::read_pgm16(&dir.join(&files.classes))?;
    let (iw, ih, instance_map) = image_io::read_pgm16(&dir.join(&files.instances))?;
    let depth_map = image_io::read_f32(&dir.join(&files.depth))?;
    if (cw, ch) != (w, h) || (iw, ih) != (w, h) || depth_map.len() != w * h {
        bail!(Usage, "{}: label maps do not match the image size", dir.join(&files.image).display());
    }
    Ok(Scene {
        height: h,
        width: w,
        image: image.to_tensor(),
        class_map,
        depth_map,
        instance_map,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_dataset(dir: &Path, seed: u64, p: &SynthParams, scenes: &[Scene]) -> Result<Manifest> {
    create_dir(dir)?;
    let mut files = Vec::with_capacity(scenes.len());
    let mut scene_class_counts = Vec::with_capacity(scenes.len());
    let mut totals = vec![0u64; p.n_classes];
    for (i, s) in scenes.iter().enumerate() {
        let f = SceneFiles::for_prefix(&format!("scene_{i:05}"));
        write_scene(dir, &f, s)?;
        let counts = s.class_counts(p.n_classes);
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
        scene_class_counts.push(counts);
        files.push(f);
    }
    let manifest = Manifest {
        seed,
        params: p.clone(),
        files,
        class_pixel_counts: totals,
        scene_class_counts,
        config_hash: None,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let scenes = manifest.files.iter().map(|f| read_scene(dir, f)).collect::<Result<_>>()?;
    Ok((manifest, scenes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub seed: u64,
    pub params: SynthParams,
    pub frames: Vec<Vec<SceneFiles>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn write_sequences(dir: &Path, seed: u64, p: &SynthParams, seqs: &[SceneSequence]) -> Result<SequenceManifest> {
    create_dir(dir)?;
    let mut frames = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let mut list = Vec::new();
        for (fi, s) in seq.frames.iter().enumerate() {
            let f = SceneFiles::for_prefix(&format!("seq_{si:03}_frame_{fi:02}"));
            write_scene(dir, &f, s)?;
            list.push(f);
        }
        frames.push(list);
    }
    let m = SequenceManifest {
        seed,
        params: p.clone(),
        frames,
        config_hash: None,
    };
    write_json(&dir.join("sequences.json"), &m)?;
    Ok(m)
}

pub fn load_sequences(dir: &Path) -> Result<Vec<SceneSequence>> {
    let m: SequenceManifest = read_json(&dir.join("sequences.json"))?;
    m.frames
        .iter()
        .map(|fs| {
            Ok(SceneSequence {
                frames: fs.iter().map(|f| read_scene(dir, f)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Path of the sequences directory inside a dataset directory.
pub fn sequences_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("sequences")
}
