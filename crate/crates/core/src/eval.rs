//! Frozen-feature evaluation: linear probes, mIoU / RMSE, k-NN mask
//! propagation with region similarity J, pixel retrieval and the
//! view-pairing ablation.

use std::cmp::Ordering;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DepthLoss, ExperimentConfig, VoteWeighting};
use crate::encoder::EmbeddingMap;
use crate::error::{bail, Error, Result};
use crate::synth::{write_json, Scene, SceneSequence};
use crate::tensor::kernels::upsample2x_forward;
use crate::tensor::{Graph, ParamSet, Sgd, Tensor};
use crate::trainer::{self, embed_all};
use crate::views::{PairMode, PixelCoord};

/// A named scalar metric with an optional per-class (or per-instance) breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// `None` marks classes excluded from the aggregate.
    pub per_class: Vec<Option<f64>>,
    pub n_samples: usize,
    pub config_hash: Option<String>,
}

impl MetricReport {
    fn new(name: &str, value: f64, per_class: Vec<Option<f64>>, n_samples: usize) -> Self {
        MetricReport {
            name: name.into(),
            value,
            per_class,
            n_samples,
            config_hash: None,
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = Some(hash.into());
        self
    }
}

/// Mean IoU over classes present in `gt` or `pred`.
pub fn miou(pred: &[u16], gt: &[u16], n_classes: usize) -> Result<MetricReport> {
    miou_excluding(pred, gt, n_classes, &[])
}

/// As [`miou`], with `excluded` classes left out of the mean.
pub fn miou_excluding(pred: &[u16], gt: &[u16], n_classes: usize, excluded: &[u16]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        bail!(Dimension, "miou: {} predictions for {} labels", pred.len(), gt.len());
    }
    let mut conf = vec![0u64; n_classes * n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= n_classes || g as usize >= n_classes {
            bail!(Usage, "label {} outside {n_classes} classes", p.max(g));
        }
        conf[g as usize * n_classes + p as usize] += 1;
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let tp = conf[c * n_classes + c];
            let row: u64 = (0..n_classes).map(|j| conf[c * n_classes + j]).sum();
            let col: u64 = (0..n_classes).map(|i| conf[i * n_classes + c]).sum();
            let union = row + col - tp;
            (union > 0 && !excluded.contains(&(c as u16))).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let value = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MetricReport::new("miou", value, per_class, pred.len()))
}

pub fn rmse(pred: &[f32], gt: &[f32]) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        bail!(Dimension, "rmse: {} predictions for {} targets", pred.len(), gt.len());
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(MetricReport::new("rmse", mse.sqrt(), Vec::new(), pred.len()))
}

/// Nearest-neighbour downsampling of an `h×w` map to the embedding grid:
/// cell `(r,c)` takes the pixel at `(r·s + s/2, c·s + s/2)`.
pub fn downsample_nearest<T: Copy>(map: &[T], h: usize, w: usize, stride: usize) -> Result<Vec<T>> {
    if map.len() != h * w || stride == 0 || h % stride != 0 || w % stride != 0 {
        bail!(Dimension, "cannot downsample {h}x{w} map ({} values) by {stride}", map.len());
    }
    let (gh, gw) = (h / stride, w / stride);
    let half = stride / 2;
    Ok((0..gh * gw)
        .map(|i| map[((i / gw) * stride + half) * w + (i % gw) * stride + half])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Classification,
    Regression,
}

/// Per-pixel affine predictor on frozen features (a 1×1 convolution).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[n_out, D]`
    pub weight: Tensor,
    /// `[n_out]`
    pub bias: Tensor,
    pub task: ProbeTask,
}

impl LinearProbe {
    pub fn n_out(&self) -> usize {
        self.bias.numel()
    }

    /// Raw outputs as a `[n_out, H, W]` tensor.
    pub fn apply(&self, map: &EmbeddingMap) -> Result<Tensor> {
        let (d, n, k) = (map.dim(), map.n_pixels(), self.n_out());
        if self.weight.shape() != [k, d] {
            bail!(Dimension, "probe expects {}-d features, map has {d}", self.weight.shape()[1]);
        }
        let (w, b, x) = (self.weight.data(), self.bias.data(), map.data.data());
        let mut out = vec![0.0f32; k * n];
        for o in 0..k {
            let dst = &mut out[o * n..(o + 1) * n];
            dst.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..d {
                let wc = w[o * d + c];
                for (v, &xv) in dst.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                    *v += wc * xv;
                }
            }
        }
        Tensor::new(&[k, map.height(), map.width()], out)
    }
}

/// Argmax over channels; ties go to the lower class.
pub fn argmax_channels(t: &Tensor) -> Vec<u16> {
    let (k, n) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let d = t.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

/// Bilinear ×2^`times` upsampling of a `[C,H,W]` tensor.
pub fn upsample_pow2(t: &Tensor, times: usize) -> Tensor {
    let mut cur = t.clone();
    for _ in 0..times {
        let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let data = upsample2x_forward(cur.data(), c, h, w);
        cur = Tensor::new(&[c, 2 * h, 2 * w], data).expect("upsampled shape");
    }
    cur
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub depth_loss: DepthLoss,
    pub huber_delta: f32,
}

impl ProbeHyper {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let e = &cfg.eval;
        ProbeHyper {
            epochs: e.probe_epochs,
            lr: e.probe_lr,
            batch: e.probe_batch,
            momentum: e.probe_momentum,
            weight_decay: e.probe_weight_decay,
            depth_loss: e.depth_loss,
            huber_delta: e.huber_delta,
        }
    }
}

/// Per-pixel targets at the embedding stride, one vector per map.
pub enum ProbeTargets<'a> {
    Classes { labels: &'a [Vec<u16>], n_classes: usize },
    Depth(&'a [Vec<f32>]),
}

/// Fits a linear probe by minibatch SGD. Features are standardised per
/// dimension during fitting and the transform is folded into the returned
/// weights. Encoder parameters are never touched: only embeddings are read.
pub fn probe_train<R: Rng + ?Sized>(
    features: &[EmbeddingMap],
    targets: ProbeTargets<'_>,
    hyper: &ProbeHyper,
    rng: &mut R,
) -> Result<LinearProbe> {
    let Some(first) = features.first() else {
        bail!(Usage, "probe_train needs at least one feature map");
    };
    let d = first.dim();
    let n_targets = match &targets {
        ProbeTargets::Classes { labels, .. } => labels.len(),
        ProbeTargets::Depth(t) => t.len(),
    };
    if n_targets != features.len() {
        bail!(Dimension, "{} feature maps but {n_targets} target maps", features.len());
    }
    if hyper.batch == 0 {
        bail!(Config, "probe batch must be at least 1");
    }
    let mut x = Vec::new();
    for (i, m) in features.iter().enumerate() {
        if m.dim() != d {
            bail!(Dimension, "feature map {i} has dimension {} (expected {d})", m.dim());
        }
        x.extend(m.pixel_rows());
    }
    let n = x.len() / d;
    let (task, n_out, cls, reg) = match targets {
        ProbeTargets::Classes { labels, n_classes } => {
            let flat: Vec<usize> = labels.iter().flatten().map(|&c| c as usize).collect();
            if flat.len() != n {
                bail!(Dimension, "{} labels for {n} feature pixels", flat.len());
            }
            if let Some(&bad) = flat.iter().find(|&&c| c >= n_classes) {
                bail!(Usage, "label {bad} outside {n_classes} classes");
            }
            (ProbeTask::Classification, n_classes, flat, Vec::new())
        }
        ProbeTargets::Depth(t) => {
            let flat: Vec<f32> = t.iter().flatten().copied().collect();
            if flat.len() != n {
                bail!(Dimension, "{} depth values for {n} feature pixels", flat.len());
            }
            (ProbeTask::Regression, 1, Vec::new(), flat)
        }
    };

    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.chunks(d) {
        for c in 0..d {
            mean[c] += row[c] as f64;
            sq[c] += (row[c] as f64).powi(2);
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / n as f64) as f32).collect();
    let sd: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, &m)| ((s / n as f64 - (m as f64).powi(2)).max(0.0).sqrt() as f32).max(1e-6))
        .collect();
    for row in x.chunks_mut(d) {
        for c in 0..d {
            row[c] = (row[c] - mean[c]) / sd[c];
        }
    }

    let mut params = ParamSet::new();
    params.insert("probe.weight", Tensor::zeros(&[d, n_out]).with_grad(true))?;
    let init_bias = if task == ProbeTask::Regression {
        reg.iter().map(|&v| v as f64).sum::<f64>() / n as f64
    } else {
        0.0
    };
    params.insert("probe.bias", Tensor::full(&[n_out], init_bias as f32).with_grad(true))?;
    let mut opt = Sgd::new(hyper.momentum, hyper.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch) {
            let mut g: Graph = Graph::new();
            let b = params.bind(&mut g);
            let rows: Vec<f32> = chunk.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
            let xb = g.constant(Tensor::new(&[chunk.len(), d], rows)?);
            let z = g.matmul(xb, b.var("probe.weight")?)?;
            let z = g.add_row_bias(z, b.var("probe.bias")?)?;
            let loss = match task {
                ProbeTask::Classification => {
                    let lp = g.log_softmax(z, 1)?;
                    let idx: Vec<usize> = chunk.iter().map(|&i| cls[i]).collect();
                    let picked = g.pick(lp, &idx)?;
                    let m = g.mean(picked)?;
                    g.scalar_mul(m, -1.0)?
                }
                ProbeTask::Regression => {
                    let t: Vec<f32> = chunk.iter().map(|&i| reg[i]).collect();
                    match hyper.depth_loss {
                        DepthLoss::Huber => g.huber_loss(z, &t, hyper.huber_delta)?,
                        DepthLoss::L1 => g.l1_loss(z, &t)?,
                    }
                }
            };
            let grads = g.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&b, &grads, 1.0);
            opt.step(&mut params, |_| hyper.lr)?;
        }
    }
    let w = params.get("probe.weight").expect("inserted").data();
    let bias = params.get("probe.bias").expect("inserted").data();
    if !w.iter().chain(bias).all(|v| v.is_finite()) {
        bail!(Numerical, "probe diverged; lower eval.probe_lr");
    }
    // Fold the standardisation: w'ₒc = wₒc/sd_c, b'ₒ = bₒ − Σ_c w'ₒc·mean_c.
    let mut weight = vec![0.0f32; n_out * d];
    let mut b_out = bias.to_vec();
    for o in 0..n_out {
        for c in 0..d {
            let wf = w[c * n_out + o] / sd[c];
            weight[o * d + c] = wf;
            b_out[o] -= wf * mean[c];
        }
    }
    Ok(LinearProbe {
        weight: Tensor::new(&[n_out, d], weight)?,
        bias: Tensor::new(&[n_out], b_out)?,
        task,
    })
}

/// Train/test split: the last `n_test` scenes are held out.
pub fn split_scenes(scenes: &[Scene], n_test: usize) -> Result<(&[Scene], &[Scene])> {
    if n_test == 0 || n_test >= scenes.len() {
        bail!(Config, "n_test {n_test} must lie in 1..{}", scenes.len());
    }
    Ok(scenes.split_at(scenes.len() - n_test))
}

fn class_targets(scenes: &[Scene], stride: usize) -> Result<Vec<Vec<u16>>> {
    scenes
        .iter()
        .map(|s| downsample_nearest(&s.class_map, s.height, s.width, stride))
        .collect()
}

fn depth_targets(scenes: &[Scene], stride: usize) -> Result<Vec<Vec<f32>>> {
    scenes
        .iter()
        .map(|s| downsample_nearest(&s.depth_map, s.height, s.width, stride))
        .collect()
}

fn upsample_steps(stride: usize) -> usize {
    stride.trailing_zeros() as usize
}

/// Trains a segmentation probe on `train` and reports test mIoU.
pub fn segmentation_probe(
    params: &ParamSet,
    cfg: &ExperimentConfig,
    train: &[Scene],
    test: &[Scene],
    seed: u64,
) -> Result<MetricReport> {
    let s = cfg.model.out_stride;
    let n_classes = cfg.data.synth.n_classes;
    let feats = embed_all(params, cfg, &images(train))?;
    let labels = class_targets(train, s)?;
    let mut seen = vec![false; n_classes];
    labels.iter().flatten().for_each(|&c| seen[c as usize] = true);
    let excluded: Vec<u16> = (0..n_classes as u16).filter(|&c| !seen[c as usize]).collect();
    for c in &excluded {
        warn!("class {c} absent from probe training labels; excluded from mIoU");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = probe_train(
        &feats,
        ProbeTargets::Classes {
            labels: &labels,
            n_classes,
        },
        &ProbeHyper::from_config(cfg),
        &mut rng,
    )?;
    let test_feats = embed_all(params, cfg, &images(test))?;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (m, sc) in test_feats.iter().zip(test) {
        let logits = probe.apply(m)?;
        if cfg.eval.upsample_eval {
            pred.extend(argmax_channels(&upsample_pow2(&logits, upsample_steps(s))));
            gt.extend_from_slice(&sc.class_map);
        } else {
            pred.extend(argmax_channels(&logits));
            gt.extend(downsample_nearest(&sc.class_map, sc.height, sc.width, s)?);
        }
    }
    Ok(miou_excluding(&pred, &gt, n_classes, &excluded)?.with_hash(&cfg.hash()))
}

/// Trains a depth probe on `train` and reports test RMSE.
pub fn depth_probe(
    params: &ParamSet,
    cfg: &ExperimentConfig,
    train: &[Scene],
    test: &[Scene],
    seed: u64,
) -> Result<MetricReport> {
    let s = cfg.model.out_stride;
    let feats = embed_all(params, cfg, &images(train))?;
    let targets = depth_targets(train, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = probe_train(&feats, ProbeTargets::Depth(&targets), &ProbeHyper::from_config(cfg), &mut rng)?;
    let test_feats = embed_all(params, cfg, &images(test))?;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (m, sc) in test_feats.iter().zip(test) {
        let out = probe.apply(m)?;
        if cfg.eval.upsample_eval {
            pred.extend_from_slice(upsample_pow2(&out, upsample_steps(s)).data());
            gt.extend_from_slice(&sc.depth_map);
        } else {
            pred.extend_from_slice(out.data());
            gt.extend(downsample_nearest(&sc.depth_map, sc.height, sc.width, s)?);
        }
    }
    Ok(rmse(&pred, &gt)?.with_hash(&cfg.hash()))
}

fn images(scenes: &[Scene]) -> Vec<Tensor> {
    scenes.iter().map(|s| s.image.clone()).collect()
}

/// k-NN label propagation. `features[t]` embeds frame `t`; `initial` is the
/// frame-0 instance mask on the same grid. Returns masks for frames `1..T`.
///
/// Each target pixel takes its `k` most similar pixels (cosine) among frame 0
/// and the `window` preceding frames, whose labels are the already-propagated
/// predictions. Votes are summed per instance and the largest wins, lower id
/// on ties.
pub fn propagate_masks(
    features: &[EmbeddingMap],
    initial: &[u16],
    k: usize,
    window: usize,
    weighting: VoteWeighting,
) -> Result<Vec<Vec<u16>>> {
    if k == 0 || window == 0 {
        bail!(Usage, "propagation needs k >= 1 and window >= 1");
    }
    let Some(f0) = features.first() else {
        bail!(Usage, "propagation with no reference frame");
    };
    let (d, n) = (f0.dim(), f0.n_pixels());
    if initial.len() != n {
        bail!(Dimension, "initial mask has {} pixels, frame has {n}", initial.len());
    }
    if features.iter().any(|f| f.dim() != d || f.n_pixels() != n) {
        bail!(Dimension, "all frames must share one embedding grid");
    }
    let n_inst = *initial.iter().max().unwrap_or(&0) as usize + 1;
    let rows: Vec<Vec<f32>> = features.iter().map(EmbeddingMap::unit_rows).collect();
    let mut masks: Vec<Vec<u16>> = vec![initial.to_vec()];
    for t in 1..features.len() {
        let mut refs = vec![0];
        refs.extend(t.saturating_sub(window).max(1)..t);
        let pred: Vec<u16> = (0..n)
            .into_par_iter()
            .map(|p| {
                let q = &rows[t][p * d..(p + 1) * d];
                // (similarity, reference frame, pixel)
                let mut best: Vec<(f32, usize, usize)> = Vec::with_capacity(k + 1);
                for &r in &refs {
                    for (j, row) in rows[r].chunks(d).enumerate() {
                        let s: f32 = q.iter().zip(row).map(|(a, b)| a * b).sum();
                        if best.len() == k && s <= best[k - 1].0 {
                            continue;
                        }
                        let pos = best.partition_point(|b| b.0 >= s);
                        best.insert(pos, (s, r, j));
                        best.truncate(k);
                    }
                }
                let mut votes = vec![0.0f64; n_inst];
                for &(s, r, j) in &best {
                    let w = match weighting {
                        VoteWeighting::Uniform => 1.0,
                        VoteWeighting::Similarity => (1.0 + s as f64) / 2.0,
                    };
                    votes[masks[r][j] as usize] += w;
                }
                let mut arg = 0;
                for (i, &v) in votes.iter().enumerate() {
                    if v > votes[arg] {
                        arg = i;
                    }
                }
                arg as u16
            })
            .collect();
        masks.push(pred);
    }
    masks.remove(0);
    Ok(masks)
}

/// Mean per-instance IoU over frames. Instance 0 is background and is not
/// scored; (instance, frame) pairs absent from the ground truth are skipped.
/// The breakdown holds each instance's mean over its frames.
pub fn region_similarity_j(pred: &[Vec<u16>], gt: &[Vec<u16>]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        bail!(Dimension, "{} predicted frames for {} ground-truth frames", pred.len(), gt.len());
    }
    let n_inst = gt
        .iter()
        .chain(pred)
        .flat_map(|f| f.iter().copied())
        .max()
        .unwrap_or(0) as usize
        + 1;
    let mut per_inst: Vec<Vec<f64>> = vec![Vec::new(); n_inst];
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            bail!(Dimension, "frame sizes differ: {} vs {}", p.len(), g.len());
        }
        let mut inter = vec![0u64; n_inst];
        let mut pc = vec![0u64; n_inst];
        let mut gc = vec![0u64; n_inst];
        for (&a, &b) in p.iter().zip(g) {
            pc[a as usize] += 1;
            gc[b as usize] += 1;
            if a == b {
                inter[a as usize] += 1;
            }
        }
        for i in 1..n_inst {
            if gc[i] > 0 {
                per_inst[i].push(inter[i] as f64 / (pc[i] + gc[i] - inter[i]) as f64);
            }
        }
    }
    let all: Vec<f64> = per_inst.iter().flatten().copied().collect();
    if all.is_empty() {
        bail!(Usage, "no foreground instance in the ground truth");
    }
    let per_class = per_inst
        .iter()
        .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(MetricReport::new(
        "region_similarity_j",
        all.iter().sum::<f64>() / all.len() as f64,
        per_class,
        all.len(),
    ))
}

/// Features of a sequence frame, either from an encoder or a colour oracle.
pub enum FrameFeatures<'a> {
    Encoder(&'a ParamSet),
    /// RGB at each cell's label pixel.
    Color,
}

/// RGB sampled at each cell's label pixel (the same pixel
/// [`downsample_nearest`] takes), as 3-d embeddings.
pub fn color_features(image: &Tensor, stride: usize) -> Result<EmbeddingMap> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut data = Vec::new();
    for c in image.data().chunks(h * w) {
        data.extend(downsample_nearest(c, h, w, stride)?);
    }
    EmbeddingMap::new(Tensor::new(&[3, h / stride, w / stride], data)?)
}

/// Propagates frame-0 instance masks through every sequence and returns J.
pub fn propagation_j(
    features: FrameFeatures<'_>,
    cfg: &ExperimentConfig,
    sequences: &[SceneSequence],
    k: usize,
    window: usize,
) -> Result<MetricReport> {
    let s = cfg.model.out_stride;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for seq in sequences {
        let maps: Vec<EmbeddingMap> = match features {
            FrameFeatures::Encoder(p) => embed_all(p, cfg, &images(&seq.frames))?,
            FrameFeatures::Color => seq
                .frames
                .iter()
                .map(|f| color_features(&f.image, s))
                .collect::<Result<_>>()?,
        };
        let masks: Vec<Vec<u16>> = seq
            .frames
            .iter()
            .map(|f| downsample_nearest(&f.instance_map, f.height, f.width, s))
            .collect::<Result<_>>()?;
        let pred = propagate_masks(&maps, &masks[0], k, window, cfg.eval.weighting)?;
        preds.extend(pred);
        gts.extend(masks.into_iter().skip(1));
    }
    Ok(region_similarity_j(&preds, &gts)?.with_hash(&cfg.hash()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub image: usize,
    pub coord: PixelCoord,
    pub similarity: f32,
}

/// Global top-k gallery pixels by cosine similarity to the query pixel; ties
/// ordered by (image, row, col).
pub fn pixel_retrieval(
    query: (&EmbeddingMap, PixelCoord),
    gallery: &[EmbeddingMap],
    top_k: usize,
) -> Result<Vec<RetrievalHit>> {
    if gallery.is_empty() {
        bail!(Usage, "retrieval gallery is empty");
    }
    let d = query.0.dim();
    let mut q = query.0.embed_at(query.1)?;
    let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt();
    if qn > 1e-12 {
        q.iter_mut().for_each(|v| *v /= qn);
    }
    let mut hits = Vec::new();
    for (i, m) in gallery.iter().enumerate() {
        if m.dim() != d {
            bail!(Dimension, "gallery map {i} has dimension {} (query {d})", m.dim());
        }
        let w = m.width();
        for (p, row) in m.unit_rows().chunks(d).enumerate() {
            hits.push(RetrievalHit {
                image: i,
                coord: PixelCoord::new(p / w, p % w),
                similarity: q.iter().zip(row).map(|(a, b)| a * b).sum(),
            });
        }
    }
    hits.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then((a.image, a.coord.row, a.coord.col).cmp(&(b.image, b.coord.row, b.coord.col)))
    });
    hits.truncate(top_k);
    Ok(hits)
}

/// Probe and propagation metrics for one set of frozen weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderScores {
    pub miou: f64,
    pub rmse: f64,
    pub j: f64,
}

pub fn score_encoder(
    params: &ParamSet,
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    sequences: &[SceneSequence],
    seed: u64,
) -> Result<EncoderScores> {
    let (train, test) = split_scenes(scenes, cfg.eval.n_test)?;
    Ok(EncoderScores {
        miou: segmentation_probe(params, cfg, train, test, seed)?.value,
        rmse: depth_probe(params, cfg, train, test, seed)?.value,
        j: propagation_j(FrameFeatures::Encoder(params), cfg, sequences, cfg.eval.knn_k, cfg.eval.window)?.value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    /// `random` for the untrained baseline, otherwise the pairing mode.
    pub mode: String,
    pub seed: u64,
    pub scores: EncoderScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub runs: Vec<AblationRun>,
    /// Seed-averaged scores per mode, in run order.
    pub means: Vec<(String, EncoderScores)>,
    pub complete: bool,
    /// diff_view ≥ same_view > unmatch on probe mIoU.
    pub ordering_holds: Option<bool>,
}

impl AblationReport {
    pub fn mean(&self, mode: &str) -> Option<&EncoderScores> {
        self.means.iter().find(|(m, _)| m == mode).map(|(_, s)| s)
    }

    fn refresh(&mut self) {
        let mut modes: Vec<String> = Vec::new();
        for r in &self.runs {
            if !modes.contains(&r.mode) {
                modes.push(r.mode.clone());
            }
        }
        self.means = modes
            .into_iter()
            .map(|m| {
                let rs: Vec<&EncoderScores> = self.runs.iter().filter(|r| r.mode == m).map(|r| &r.scores).collect();
                let k = rs.len() as f64;
                let s = EncoderScores {
                    miou: rs.iter().map(|s| s.miou).sum::<f64>() / k,
                    rmse: rs.iter().map(|s| s.rmse).sum::<f64>() / k,
                    j: rs.iter().map(|s| s.j).sum::<f64>() / k,
                };
                (m, s)
            })
            .collect();
        self.ordering_holds = match (self.mean("diff_view"), self.mean("same_view"), self.mean("unmatch")) {
            (Some(d), Some(s), Some(u)) => Some(d.miou >= s.miou && s.miou > u.miou),
            _ => None,
        };
    }
}

/// Trains one encoder per (mode, seed) under identical budgets and scores
/// each, together with a random-init baseline per seed. The report is
/// rewritten to `out_dir/ablation.json` after every sub-run, so a failure
/// leaves the finished runs on disk.
pub fn ablation_views(
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    sequences: &[SceneSequence],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        bail!(Usage, "ablation needs at least one seed");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_scenes, _) = split_scenes(scenes, cfg.eval.n_test)?;
    let train_images = images(train_scenes);
    let mut report = AblationReport {
        config_hash: cfg.hash(),
        runs: Vec::new(),
        means: Vec::new(),
        complete: false,
        ordering_holds: None,
    };
    let report_path = out_dir.join("ablation.json");
    let modes = [None, Some(PairMode::DiffView), Some(PairMode::SameView), Some(PairMode::Unmatch)];
    for &seed in seeds {
        for mode in modes {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = seed;
            let name = mode.map_or("random".to_string(), |m| m.to_string());
            let params = match mode {
                None => trainer::init_state(&run_cfg, None)?.f,
                Some(m) => {
                    run_cfg.views.mode = m;
                    let dir = out_dir.join(format!("{name}_seed{seed}"));
                    trainer::train(&run_cfg, &train_images, &dir, None)?.f
                }
            };
            let scores = score_encoder(&params, &run_cfg, scenes, sequences, seed)?;
            info!("ablation {name} seed {seed}: {scores:?}");
            report.runs.push(AblationRun { mode: name, seed, scores });
            report.refresh();
            write_json(&report_path, &report)?;
        }
    }
    report.complete = true;
    write_json(&report_path, &report)?;
    Ok(report)
}
