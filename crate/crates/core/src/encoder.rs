//! FPN-style encoder-decoder producing a dense embedding map.
//!
//! Encoder: `stage_channels.len()` stages, each a stride-2 3×3 conv followed by
//! `stage_depth` stride-1 3×3 convs, every conv followed by group norm and ReLU.
//! Stage `i` therefore has stride `2^(i+1)`.
//!
//! Decoder: stages whose stride is at least `out_stride` become pyramid levels.
//! Each level gets a 1×1 lateral conv to `fpn_dim` and the usual top-down
//! pathway (coarser level upsampled 2× and added). A level at stride `S` then
//! runs `log2(S / out_stride)` upsampling blocks (3×3 conv, group norm, ReLU,
//! 2× bilinear upsample); the level already at `out_stride` runs one block
//! without the upsample. The first block of every chain maps `fpn_dim` to
//! `decoder_dim`. Chain outputs are summed and a final 1×1 conv produces
//! `emb_dim` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Bound, Graph, Padding, ParamSet, Real, Tensor, Var};
use crate::views::PixelCoord;

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDecoderConfig {
    pub stage_channels: Vec<usize>,
    /// Extra stride-1 conv blocks per encoder stage.
    pub stage_depth: usize,
    pub fpn_dim: usize,
    pub decoder_dim: usize,
    pub emb_dim: usize,
    pub out_stride: usize,
    pub groups: usize,
    /// Border handling of the 3×3 convolutions.
    #[serde(default)]
    pub padding: Padding,
}

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        EncoderDecoderConfig {
            stage_channels: vec![16, 32, 64, 64],
            stage_depth: 0,
            fpn_dim: 32,
            decoder_dim: 32,
            emb_dim: 16,
            out_stride: 4,
            groups: 4,
            padding: Padding::Zeros,
        }
    }
}

impl EncoderDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            bail!(Config, "stage_channels must be a non-empty list of positive widths");
        }
        if !self.out_stride.is_power_of_two() || self.out_stride < 2 || self.out_stride > self.deepest_stride() {
            bail!(
                Config,
                "out_stride {} must be a power of two in [2, {}]",
                self.out_stride,
                self.deepest_stride()
            );
        }
        if self.emb_dim < 2 {
            bail!(Config, "emb_dim must be at least 2");
        }
        if self.fpn_dim == 0 || self.decoder_dim == 0 {
            bail!(Config, "fpn_dim and decoder_dim must be positive");
        }
        if self.groups == 0 {
            bail!(Config, "groups must be positive");
        }
        for &c in self.stage_channels.iter().chain([&self.decoder_dim]) {
            if c % self.groups != 0 {
                bail!(Config, "width {c} is not divisible into {} groups", self.groups);
            }
        }
        Ok(())
    }

    pub fn deepest_stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    /// Indices of encoder stages used as pyramid levels, finest first.
    pub fn pyramid_stages(&self) -> Vec<usize> {
        (0..self.stage_channels.len())
            .filter(|&i| (2usize << i) >= self.out_stride)
            .collect()
    }

    /// Number of upsampling blocks on the chain of stage `i`.
    fn chain_upsamples(&self, stage: usize) -> usize {
        ((2usize << stage) / self.out_stride).trailing_zeros() as usize
    }
}

/// `[emb_dim, H/s, W/s]` for an `H×W` input.
pub fn output_shape(cfg: &EncoderDecoderConfig, height: usize, width: usize) -> Result<[usize; 3]> {
    cfg.validate()?;
    let d = cfg.deepest_stride();
    if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
        bail!(Usage, "input {height}x{width} is not divisible by the encoder stride {d}");
    }
    Ok([cfg.emb_dim, height / cfg.out_stride, width / cfg.out_stride])
}

/// Closed-form parameter count.
pub fn param_count(cfg: &EncoderDecoderConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let gn = |c: usize| 2 * c;
    let mut n = 0;
    let mut cin = 3;
    for &c in &cfg.stage_channels {
        n += conv(cin, c, 3) + gn(c);
        n += cfg.stage_depth * (conv(c, c, 3) + gn(c));
        cin = c;
    }
    for s in cfg.pyramid_stages() {
        n += conv(cfg.stage_channels[s], cfg.fpn_dim, 1);
        let blocks = cfg.chain_upsamples(s).max(1);
        n += conv(cfg.fpn_dim, cfg.decoder_dim, 3) + gn(cfg.decoder_dim);
        n += (blocks - 1) * (conv(cfg.decoder_dim, cfg.decoder_dim, 3) + gn(cfg.decoder_dim));
    }
    n + conv(cfg.decoder_dim, cfg.emb_dim, 1)
}

fn kaiming<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn bias<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::from_fn(&[n], |_| rng.random_range(-bound..bound))
}

fn add_conv<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    p.insert(format!("{name}.weight"), kaiming(rng, &[cout, cin, k, k]))?;
    p.insert(format!("{name}.bias"), bias(rng, cout, cin * k * k))
}

fn add_gn(p: &mut ParamSet, name: &str, c: usize) -> Result<()> {
    p.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
    p.insert(format!("{name}.beta"), Tensor::zeros(&[c]))
}

fn stage_name(stage: usize, block: usize) -> String {
    format!("encoder.stage{stage}.block{block}")
}

fn chain_name(stage: usize, block: usize) -> String {
    format!("decoder.level{stage}.block{block}")
}

/// Randomly initialised parameters. Names start with `encoder.` or
/// `decoder.`, which is how the trainer assigns learning-rate groups.
pub fn build<R: Rng + ?Sized>(cfg: &EncoderDecoderConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let mut cin = 3;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        for b in 0..=cfg.stage_depth {
            let name = stage_name(i, b);
            add_conv(&mut p, rng, &format!("{name}.conv"), if b == 0 { cin } else { c }, c, 3)?;
            add_gn(&mut p, &format!("{name}.gn"), c)?;
        }
        cin = c;
    }
    for s in cfg.pyramid_stages() {
        add_conv(&mut p, rng, &format!("decoder.lateral{s}"), cfg.stage_channels[s], cfg.fpn_dim, 1)?;
        for b in 0..cfg.chain_upsamples(s).max(1) {
            let name = chain_name(s, b);
            let cin = if b == 0 { cfg.fpn_dim } else { cfg.decoder_dim };
            add_conv(&mut p, rng, &format!("{name}.conv"), cin, cfg.decoder_dim, 3)?;
            add_gn(&mut p, &format!("{name}.gn"), cfg.decoder_dim)?;
        }
    }
    p.insert("decoder.head.weight", kaiming(rng, &[cfg.emb_dim, cfg.decoder_dim, 1, 1]))?;
    p.insert("decoder.head.bias", Tensor::zeros(&[cfg.emb_dim]))?;
    debug_assert_eq!(p.numel(), param_count(cfg));
    p.set_requires_grad(true);
    Ok(p)
}

fn conv_gn_relu<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &EncoderDecoderConfig,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let groups = cfg.groups;
    let w = b.var(&format!("{name}.conv.weight"))?;
    let bias = b.var(&format!("{name}.conv.bias"))?;
    let y = g.conv2d_padded(x, w, bias, stride, 1, cfg.padding)?;
    let gamma = b.var(&format!("{name}.gn.gamma"))?;
    let beta = b.var(&format!("{name}.gn.beta"))?;
    let y = g.group_norm(y, groups, gamma, beta, T::of(GN_EPS))?;
    g.relu(y)
}

fn conv1x1<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    g.conv2d(x, w, bias, 1, 0)
}

/// Records the network on `g` and returns the `[emb_dim, H/s, W/s]` output.
pub fn forward<T: Real>(g: &mut Graph<T>, params: &Bound, cfg: &EncoderDecoderConfig, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        bail!(Dimension, "encoder expects a [3,H,W] image, got {s:?}");
    }
    output_shape(cfg, s[1], s[2])?;

    let mut feats = Vec::with_capacity(cfg.stage_channels.len());
    let mut x = image;
    for i in 0..cfg.stage_channels.len() {
        for blk in 0..=cfg.stage_depth {
            let stride = if blk == 0 { 2 } else { 1 };
            x = conv_gn_relu(g, params, cfg, &stage_name(i, blk), x, stride)?;
        }
        feats.push(x);
    }

    let levels = cfg.pyramid_stages();
    let mut pyramid = vec![None; cfg.stage_channels.len()];
    let mut above: Option<Var> = None;
    for &i in levels.iter().rev() {
        let mut p = conv1x1(g, params, &format!("decoder.lateral{i}"), feats[i])?;
        if let Some(a) = above {
            let up = g.upsample2x(a)?;
            p = g.add(p, up)?;
        }
        pyramid[i] = Some(p);
        above = Some(p);
    }

    let mut merged: Option<Var> = None;
    for &i in &levels {
        let mut y = pyramid[i].expect("every level was filled");
        let ups = cfg.chain_upsamples(i);
        for blk in 0..ups.max(1) {
            y = conv_gn_relu(g, params, cfg, &chain_name(i, blk), y, 1)?;
            if ups > 0 {
                y = g.upsample2x(y)?;
            }
        }
        merged = Some(match merged {
            Some(m) => g.add(m, y)?,
            None => y,
        });
    }
    conv1x1(g, params, "decoder.head", merged.expect("at least one level"))
}

/// Dense per-pixel embeddings `[D, H/s, W/s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    pub data: Tensor,
}

impl EmbeddingMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            bail!(Dimension, "embedding map must be [D,H,W], got {:?}", data.shape());
        }
        Ok(EmbeddingMap { data })
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn n_pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// The embedding column at `u`.
    pub fn embed_at(&self, u: PixelCoord) -> Result<Vec<f32>> {
        let (h, w) = (self.height(), self.width());
        if u.row >= h || u.col >= w {
            bail!(Usage, "pixel ({}, {}) outside {h}x{w} map", u.row, u.col);
        }
        let d = self.data.data();
        Ok((0..self.dim()).map(|c| d[(c * h + u.row) * w + u.col]).collect())
    }

    /// All pixels as rows of a `[H·W, D]` matrix, row-major over the grid.
    pub fn pixel_rows(&self) -> Vec<f32> {
        let (d, n) = (self.dim(), self.n_pixels());
        let src = self.data.data();
        let mut out = vec![0.0; n * d];
        for c in 0..d {
            for p in 0..n {
                out[p * d + c] = src[c * n + p];
            }
        }
        out
    }

    /// Unit-normalised pixel rows (zero rows stay zero).
    pub fn unit_rows(&self) -> Vec<f32> {
        let d = self.dim();
        let mut rows = self.pixel_rows();
        for r in rows.chunks_mut(d) {
            let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 1e-12 {
                r.iter_mut().for_each(|v| *v /= n);
            }
        }
        rows
    }
}

/// Gradient-free forward pass.
pub fn embed(params: &ParamSet, cfg: &EncoderDecoderConfig, image: &Tensor) -> Result<EmbeddingMap> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let x = g.constant(image.clone());
    let y = forward(&mut g, &b, cfg, x)?;
    EmbeddingMap::new(g.tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderDecoderConfig {
        EncoderDecoderConfig {
            stage_channels: vec![4, 8, 8],
            stage_depth: 1,
            fpn_dim: 8,
            decoder_dim: 4,
            emb_dim: 3,
            out_stride: 2,
            groups: 2,
            padding: Padding::Zeros,
        }
    }

    /// Layer-by-layer count, written out independently of `param_count`.
    fn hand_count(c: &EncoderDecoderConfig) -> usize {
        let mut n = 0;
        let widths: Vec<usize> = std::iter::once(3).chain(c.stage_channels.iter().copied()).collect();
        for i in 0..c.stage_channels.len() {
            let (a, b) = (widths[i], widths[i + 1]);
            n += a * b * 9 + b + b + b;
            for _ in 0..c.stage_depth {
                n += b * b * 9 + 3 * b;
            }
        }
        let mut stride = 2;
        for &ch in &c.stage_channels {
            if stride >= c.out_stride {
                n += ch * c.fpn_dim + c.fpn_dim;
                let mut blocks = 0;
                let mut s = stride;
                while s > c.out_stride {
                    s /= 2;
                    blocks += 1;
                }
                let blocks = blocks.max(1);
                n += c.fpn_dim * c.decoder_dim * 9 + 3 * c.decoder_dim;
                n += (blocks - 1) * (c.decoder_dim * c.decoder_dim * 9 + 3 * c.decoder_dim);
            }
            stride *= 2;
        }
        n + c.decoder_dim * c.emb_dim + c.emb_dim
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        for cfg in [tiny(), EncoderDecoderConfig::default()] {
            let p = build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(p.numel(), hand_count(&cfg));
            assert_eq!(param_count(&cfg), hand_count(&cfg));
        }
    }

    #[test]
    fn full_scale_output_shape() {
        let cfg = EncoderDecoderConfig {
            stage_channels: vec![256, 512, 1024, 2048, 2048],
            stage_depth: 0,
            fpn_dim: 256,
            decoder_dim: 128,
            emb_dim: 128,
            out_stride: 4,
            groups: 32,
            padding: Padding::Zeros,
        };
        assert_eq!(output_shape(&cfg, 224, 224).unwrap(), [128, 56, 56]);
    }

    #[test]
    fn desk_output_shape() {
        let cfg = EncoderDecoderConfig::default();
        assert_eq!(output_shape(&cfg, 32, 32).unwrap(), [16, 8, 8]);
        let p = build(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i as f32 * 0.1).sin());
        let m = embed(&p, &cfg, &img).unwrap();
        assert_eq!(m.data.shape(), &[16, 8, 8]);
    }

    #[test]
    fn indivisible_input_is_usage_error() {
        let cfg = tiny();
        let p = build(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Tensor::zeros(&[3, 12, 10]);
        assert!(matches!(embed(&p, &cfg, &img), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.out_stride = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.out_stride = 16;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.emb_dim = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.decoder_dim = 3;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_constant_embeddings() {
        let cfg = tiny();
        let mut p = build(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        p.get_mut("decoder.head.weight").unwrap().data_mut().fill(0.0);
        let m = embed(&p, &cfg, &Tensor::zeros(&[3, 16, 16])).unwrap();
        let d = m.data.data();
        let n = m.n_pixels();
        for c in 0..m.dim() {
            assert!(d[c * n..(c + 1) * n].iter().all(|&v| v == d[c * n]));
        }
    }

    #[test]
    fn forward_is_bit_identical() {
        let cfg = tiny();
        let p = build(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f32 * 0.37).cos());
        assert_eq!(embed(&p, &cfg, &img).unwrap(), embed(&p, &cfg, &img).unwrap());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = build(&cfg, &mut rng).unwrap();
        let mut g: Graph = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-1.0..1.0)));
        let y = forward(&mut g, &b, &cfg, x).unwrap();
        let r = g.constant(Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0)));
        let prod = g.mul(y, r).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in p.names() {
            let gv = grads.get(b.var(name).unwrap()).unwrap();
            assert!(gv.iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn embed_at_reads_columns() {
        let t = Tensor::from_fn(&[3, 2, 4], |i| i as f32);
        let m = EmbeddingMap::new(t).unwrap();
        assert_eq!(m.embed_at(PixelCoord::new(0, 0)).unwrap(), vec![0.0, 8.0, 16.0]);
        let mut touched = vec![0; 24];
        for r in 0..2 {
            for c in 0..4 {
                for v in m.embed_at(PixelCoord::new(r, c)).unwrap() {
                    touched[v as usize] += 1;
                }
            }
        }
        assert!(touched.iter().all(|&n| n == 1));
        assert!(m.embed_at(PixelCoord::new(2, 0)).is_err());
    }
}
