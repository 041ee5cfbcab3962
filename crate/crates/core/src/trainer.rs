//! Training loop: view pairs → online/momentum encoders → pixel NCE → SGD on
//! the online encoder, moving average on the momentum encoder, queue update.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::contrast::{momentum_update, nce_loss_graph, MomentumEncoder, NegativeQueue};
use crate::encoder::{self, EmbeddingMap};
use crate::error::{bail, Error, Result};
use crate::synth::{read_json, write_json};
use crate::tensor::{checkpoint, Graph, ParamSet, Sgd, Tensor};
use crate::views::{
    apply_view, random_pairs, sample_view_pair, select_positive_pairs, CorrespondenceMap, PairMode, PixelCoord,
};

pub struct TrainState {
    pub f: ParamSet,
    pub g: MomentumEncoder,
    pub queue: NegativeQueue,
    pub opt: Sgd,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub losses: Vec<f32>,
    /// Per-step fraction of positives ranked above every queue entry.
    pub satisfaction: Vec<f32>,
}

/// Fresh state: `f` random (or `warm_start`), `g` an exact copy, queue full of
/// random unit vectors.
pub fn init_state(cfg: &ExperimentConfig, warm_start: Option<&ParamSet>) -> Result<TrainState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut f = encoder::build(&cfg.model, &mut rng)?;
    if let Some(w) = warm_start {
        f.check_compatible(w).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for ((_, dst), (_, src)) in f.iter_mut().zip(w.iter()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    let g = MomentumEncoder::from_online(&f, cfg.loss.momentum);
    let queue = NegativeQueue::random(cfg.loss.queue_capacity, cfg.model.emb_dim, &mut rng)?;
    Ok(TrainState {
        f,
        g,
        queue,
        opt: Sgd::new(cfg.train.sgd_momentum, cfg.train.weight_decay),
        rng,
        iteration: 0,
        losses: Vec::new(),
        satisfaction: Vec::new(),
    })
}

fn learning_rate(cfg: &ExperimentConfig, name: &str) -> f32 {
    if name.starts_with("encoder.") {
        cfg.train.lr_encoder
    } else {
        cfg.train.lr_decoder
    }
}

struct ImageOutcome {
    loss: f32,
    grads: Vec<Vec<f32>>,
    keys: Vec<f32>,
    satisfaction: f32,
}

/// Positive pairs for one view pair according to the pairing mode.
pub fn positive_pairs<R: Rng + ?Sized>(
    mode: PairMode,
    map: &CorrespondenceMap,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(PixelCoord, PixelCoord)>> {
    match mode {
        PairMode::DiffView | PairMode::SameView => select_positive_pairs(map, n, rng),
        PairMode::Unmatch => random_pairs(map.grid_a, map.grid_b, n, rng),
    }
}

fn image_step(
    cfg: &ExperimentConfig,
    f: &ParamSet,
    g: &ParamSet,
    queue: &[f32],
    image: &Tensor,
    seed: u64,
) -> Result<Option<ImageOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = (image.shape()[1], image.shape()[2]);
    let (va, vb, map) = match sample_view_pair(&mut rng, size, &cfg.views) {
        Ok(v) => v,
        Err(Error::Sampling(msg)) => {
            warn!("skipping image: {msg}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let pairs = positive_pairs(cfg.views.mode, &map, cfg.loss.n_positive, &mut rng)?;
    let xa = apply_view(image, &va)?;
    let xb = apply_view(image, &vb)?;

    let g_map = encoder::embed(g, &cfg.model, &xb)?;
    let d = g_map.dim();
    let keys: Vec<f32> = pairs
        .iter()
        .map(|&(_, b)| g_map.embed_at(b))
        .collect::<Result<Vec<_>>>()?
        .concat();

    let mut graph: Graph = Graph::new();
    let bound = f.bind(&mut graph);
    let x = graph.constant(xa);
    let out = encoder::forward(&mut graph, &bound, &cfg.model, x)?;
    let coords: Vec<(usize, usize)> = pairs.iter().map(|(a, _)| (a.row, a.col)).collect();
    let anchors = graph.gather_pixels(out, &coords)?;
    let loss = nce_loss_graph(&mut graph, anchors, &keys, queue, cfg.loss.tau, cfg.loss.loss_scale)?;

    let satisfaction = {
        let a = graph.value(anchors);
        let mut hits = 0;
        for (i, (ar, kr)) in a.chunks(d).zip(keys.chunks(d)).enumerate() {
            let _ = i;
            let an = ar.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let kn = kr.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let pos = ar.iter().zip(kr).map(|(x, y)| x * y).sum::<f32>() / (an * kn);
            let beaten = queue
                .chunks(d)
                .all(|q| ar.iter().zip(q).map(|(x, y)| x * y).sum::<f32>() / an < pos);
            hits += beaten as usize;
        }
        hits as f32 / pairs.len() as f32
    };

    let grads = graph.backward(loss)?;
    let per_param = f
        .names()
        .map(|n| {
            let v = bound.var(n)?;
            Ok(grads.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; f.get(n).expect("bound").numel()]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(ImageOutcome {
        loss: graph.value(loss)[0],
        grads: per_param,
        keys,
        satisfaction,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub satisfaction: f32,
    pub used_images: usize,
}

/// One optimisation step over `images` (one view pair per image).
pub fn train_step(state: &mut TrainState, cfg: &ExperimentConfig, images: &[&Tensor]) -> Result<StepStats> {
    if images.is_empty() {
        bail!(Usage, "train_step needs at least one image");
    }
    let seeds: Vec<u64> = images.iter().map(|_| state.rng.random()).collect();
    let queue = state.queue.rows().to_vec();
    let (f, g) = (&state.f, &state.g.params);
    let outcomes: Vec<Option<ImageOutcome>> = images
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(img, &seed)| image_step(cfg, f, g, &queue, img, seed))
        .collect::<Result<_>>()?;
    let used: Vec<ImageOutcome> = outcomes.into_iter().flatten().collect();
    if used.is_empty() {
        bail!(Sampling, "every image in the batch failed view sampling");
    }
    let scale = 1.0 / used.len() as f32;
    state.f.zero_grads();
    for (pi, (_, p)) in state.f.iter_mut().enumerate() {
        let mut acc = vec![0.0f32; p.numel()];
        for o in &used {
            for (a, &x) in acc.iter_mut().zip(&o.grads[pi]) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a *= scale);
        p.grad = Some(acc);
    }
    state.opt.momentum = cfg.train.sgd_momentum;
    state.opt.weight_decay = cfg.train.weight_decay;
    state.opt.step(&mut state.f, |name| learning_rate(cfg, name))?;
    momentum_update(&state.f, &mut state.g)?;
    let d = cfg.model.emb_dim;
    for o in &used {
        state.queue.enqueue_all(o.keys.chunks(d))?;
    }
    let loss = used.iter().map(|o| o.loss).sum::<f32>() * scale;
    let satisfaction = used.iter().map(|o| o.satisfaction).sum::<f32>() * scale;
    if !loss.is_finite() {
        bail!(Numerical, "loss became non-finite at iteration {}", state.iteration + 1);
    }
    state.iteration += 1;
    state.losses.push(loss);
    state.satisfaction.push(satisfaction);
    Ok(StepStats {
        loss,
        satisfaction,
        used_images: used.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// ChaCha8 key as hex.
    pub seed: String,
    /// Word position, decimal (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// JSON written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub iteration: u64,
    pub rng: RngState,
    pub config: ExperimentConfig,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.dclb"))
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn prefixed(out: &mut ParamSet, prefix: &str, p: &ParamSet) -> Result<()> {
    for (n, t) in p.iter() {
        let mut t = t.clone();
        t.grad = None;
        t.requires_grad = false;
        out.insert(format!("{prefix}{n}"), t)?;
    }
    Ok(())
}

fn history_tensor(v: &[f32]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("1-d")
}

/// Writes the full training state and its sidecar.
pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut all = ParamSet::new();
    prefixed(&mut all, "f.", &state.f)?;
    prefixed(&mut all, "g.", &state.g.params)?;
    prefixed(&mut all, "opt.", &state.opt.state(&state.f))?;
    let (slots, meta) = state.queue.to_tensors();
    all.insert("queue.slots", slots)?;
    all.insert("queue.meta", meta)?;
    all.insert("history.loss", history_tensor(&state.losses))?;
    all.insert("history.satisfaction", history_tensor(&state.satisfaction))?;
    let path = checkpoint_path(dir, state.iteration);
    checkpoint::save(&path, &all)?;
    let sidecar = Sidecar {
        config_hash: cfg.hash(),
        iteration: state.iteration,
        rng: RngState::capture(&state.rng),
        config: cfg.clone(),
    };
    write_json(&sidecar_path(&path), &sidecar)?;
    Ok(path)
}

fn take_prefix(all: &ParamSet, prefix: &str) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (n, t) in all.iter() {
        if let Some(rest) = n.strip_prefix(prefix) {
            out.insert(rest, t.clone())?;
        }
    }
    if out.is_empty() {
        bail!(Checkpoint, "checkpoint has no {prefix}* tensors");
    }
    Ok(out)
}

/// Online-encoder weights from a training checkpoint (or a bare parameter file).
pub fn load_encoder(path: &Path) -> Result<ParamSet> {
    let all = checkpoint::load(path)?;
    if all.names().any(|n| n.starts_with("f.")) {
        take_prefix(&all, "f.")
    } else {
        Ok(all)
    }
}

/// Restores a state saved by [`save_checkpoint`]. The sidecar's config hash
/// must match `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<TrainState> {
    let sidecar: Sidecar = read_json(&sidecar_path(path))?;
    if sidecar.config_hash != cfg.hash() {
        bail!(
            Checkpoint,
            "{} was written with config {} but the current config hashes to {}",
            path.display(),
            sidecar.config_hash,
            cfg.hash()
        );
    }
    let all = checkpoint::load(path)?;
    let mut f = take_prefix(&all, "f.")?;
    f.set_requires_grad(true);
    let g_params = take_prefix(&all, "g.")?;
    f.check_compatible(&g_params)?;
    let mut opt = Sgd::new(cfg.train.sgd_momentum, cfg.train.weight_decay);
    opt.load_state(&take_prefix(&all, "opt.")?);
    let get = |n: &str| all.get(n).ok_or_else(|| Error::Checkpoint(format!("missing {n}")));
    let queue = NegativeQueue::from_tensors(get("queue.slots")?, get("queue.meta")?)?;
    let losses = get("history.loss")?.data().to_vec();
    let satisfaction = get("history.satisfaction")?.data().to_vec();
    if losses.len() as u64 != sidecar.iteration {
        bail!(Checkpoint, "loss history length disagrees with iteration count");
    }
    Ok(TrainState {
        f,
        g: MomentumEncoder {
            params: g_params,
            momentum: cfg.loss.momentum,
        },
        queue,
        opt,
        rng: sidecar.rng.restore()?,
        iteration: sidecar.iteration,
        losses,
        satisfaction,
    })
}

pub fn loss_csv(state: &TrainState) -> String {
    let mut s = String::from("iteration,loss,constraint_satisfaction\n");
    for (i, (l, c)) in state.losses.iter().zip(&state.satisfaction).enumerate() {
        let _ = writeln!(s, "{},{l},{c}", i + 1);
    }
    s
}

/// Runs training to `cfg.train.iterations`, writing checkpoints every
/// `checkpoint_every` steps and at the end, plus `loss.csv`.
pub fn train(cfg: &ExperimentConfig, images: &[Tensor], out_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    if images.is_empty() {
        bail!(Usage, "training set is empty");
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match resume {
        Some(p) => load_checkpoint(p, cfg)?,
        None => init_state(cfg, None)?,
    };
    let batch = cfg.train.batch_size.min(images.len());
    let mut last_saved = None;
    while state.iteration < cfg.train.iterations {
        let picks = index::sample(&mut state.rng, images.len(), batch);
        let chosen: Vec<&Tensor> = picks.iter().map(|i| &images[i]).collect();
        let stats = train_step(&mut state, cfg, &chosen)?;
        debug!(
            "iteration {} loss {:.4} satisfaction {:.3}",
            state.iteration, stats.loss, stats.satisfaction
        );
        if state.iteration % 100 == 0 {
            info!("iteration {} loss {:.4}", state.iteration, stats.loss);
        }
        if state.iteration % cfg.train.checkpoint_every == 0 {
            last_saved = Some(save_checkpoint(out_dir, &state, cfg)?);
        }
    }
    if last_saved.as_deref() != Some(checkpoint_path(out_dir, state.iteration).as_path()) {
        save_checkpoint(out_dir, &state, cfg)?;
    }
    let csv = out_dir.join("loss.csv");
    fs::write(&csv, loss_csv(&state)).map_err(|e| Error::io(&csv, e))?;
    Ok(state)
}

/// Frozen-encoder embeddings of whole images.
pub fn embed_all(params: &ParamSet, cfg: &ExperimentConfig, images: &[Tensor]) -> Result<Vec<EmbeddingMap>> {
    images.par_iter().map(|im| encoder::embed(params, &cfg.model, im)).collect()
}
