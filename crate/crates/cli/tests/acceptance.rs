//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Expect roughly half an hour on one core.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use densecl::contrast::{momentum_update, nce_loss, LossConfig, MomentumEncoder, NegativeQueue};
use densecl::eval::{miou, region_similarity_j, rmse, AblationReport};
use densecl::tensor::{ParamSet, Tensor};
use densecl::views::{compute_correspondence, sample_view, PixelCoord, ViewParams, ViewPolicy};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Training budget of every ablation sub-run (identical across modes).
const ABLATION_ITERATIONS: u64 = 800;

const TINY: &str = r#"{
  "data": {"n_scenes": 12, "n_sequences": 2, "sequence_length": 4, "synth": {"size": 32}},
  "views": {"out_size": [32, 32], "min_matches": 8},
  "model": {"stage_channels": [8, 8, 8], "fpn_dim": 8, "decoder_dim": 8, "emb_dim": 8},
  "loss": {"n_positive": 8, "queue_capacity": 64},
  "train": {"iterations": 4, "batch_size": 2, "checkpoint_every": 2},
  "eval": {"n_test": 4, "probe_epochs": 2}
}"#;

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(id: u32, pass: bool, detail: String) -> Self {
        eprintln!("[done] criterion {id}");
        Verdict { id, pass, detail }
    }
}

fn densecl(args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_densecl"))
        .args(args)
        .env("DENSECL_LOG", "warn")
        .output()
        .expect("spawn densecl");
    if !o.status.success() {
        eprintln!("densecl {args:?} exited {:?}:\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    }
    o
}

fn ok(args: &[&str]) -> Output {
    let o = densecl(args);
    assert!(o.status.success(), "densecl {args:?} failed");
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).expect("JSON output")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn mins(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- 1

fn gradients(work: &Path) -> Verdict {
    let t = Instant::now();
    let out = work.join("gradcheck.json");
    let o = densecl(&["--seed", "7", "--out", s(&out), "grad-check", "--coords", "100"]);
    let elapsed = t.elapsed();
    let r = json(&fs::read(&out).unwrap_or_default());
    let max = r["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    let ops = r["ops"].as_array().cloned().unwrap_or_default();
    let min_coords = ops.iter().filter_map(|o| o["coordinates"].as_u64()).min().unwrap_or(0);
    let pass = o.status.code() == Some(0) && max < 1e-3 && min_coords >= 100 && elapsed.as_secs() < 120;
    Verdict::new(
        1,
        pass,
        format!(
            "{} ops, max rel err {max:.2e} (< 1e-3), min coords/op {min_coords}, {:.1}s",
            ops.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

type Q = Ratio<i64>;

fn centre(p: &ViewParams, c: PixelCoord, stride: i64) -> (Q, Q) {
    let (oh, ow) = (p.out_size.0 as i64, p.out_size.1 as i64);
    let mut u = Q::from_integer(c.col as i64 * stride) + Q::new(stride, 2);
    let v = Q::from_integer(c.row as i64 * stride) + Q::new(stride, 2);
    if p.hflip {
        u = Q::from_integer(ow) - u;
    }
    (
        Q::from_integer(p.crop.x as i64) + u * Q::new(p.crop.w as i64, ow),
        Q::from_integer(p.crop.y as i64) + v * Q::new(p.crop.h as i64, oh),
    )
}

fn axis_match(a: Q, b: Q, tol: Q) -> bool {
    let d = if a > b { a - b } else { b - a };
    d < tol || (d == tol && ((a + b) / (tol * 2)).floor().to_integer().rem_euclid(2) == 0)
}

fn oracle(pa: &ViewParams, pb: &ViewParams, stride: usize) -> HashSet<(PixelCoord, PixelCoord)> {
    let st = stride as i64;
    let cells = |p: &ViewParams| -> Vec<PixelCoord> {
        (0..p.out_size.0 / stride)
            .flat_map(|r| (0..p.out_size.1 / stride).map(move |c| PixelCoord::new(r, c)))
            .collect()
    };
    let half = |p: &ViewParams| {
        (
            Q::new(st * p.crop.w as i64, 2 * p.out_size.1 as i64),
            Q::new(st * p.crop.h as i64, 2 * p.out_size.0 as i64),
        )
    };
    let ((ax, ay), (bx, by)) = (half(pa), half(pb));
    let (tx, ty) = (ax.min(bx), ay.min(by));
    let cb: Vec<_> = cells(pb).into_iter().map(|c| (c, centre(pb, c, st))).collect();
    let mut out = HashSet::new();
    for a in cells(pa) {
        let (xa, ya) = centre(pa, a, st);
        for &(b, (xb, yb)) in &cb {
            if axis_match(xa, xb, tx) && axis_match(ya, yb, ty) {
                out.insert((a, b));
            }
        }
    }
    out
}

fn correspondence() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = ViewPolicy::default();
    let (mut agree, mut symmetric, mut round_trip) = (0, 0, 0);
    let n = 1000;
    for _ in 0..n {
        let pa = sample_view(&mut rng, (64, 64), &policy).unwrap();
        let pb = sample_view(&mut rng, (64, 64), &policy).unwrap();
        let ab = compute_correspondence(&pa, &pb, 4).unwrap();
        let ba = compute_correspondence(&pb, &pa, 4).unwrap();
        let fast: HashSet<_> = ab.pairs.iter().copied().collect();
        agree += (fast.len() == ab.len() && fast == oracle(&pa, &pb, 4)) as usize;
        let t = ab.transposed();
        symmetric += (ba.pairs == t.pairs && ba.source_points == t.source_points) as usize;
        let trips = ab.pairs.iter().all(|&(a, _)| {
            let (u, v) = (a.col as f64 * 4.0 + 2.0, a.row as f64 * 4.0 + 2.0);
            let (sx, sy) = pa.view_to_source(u, v);
            let (bx, by) = pb.source_to_view(sx, sy);
            let (sx2, sy2) = pb.view_to_source(bx, by);
            (sx - sx2).abs() < 1e-4 && (sy - sy2).abs() < 1e-4
        });
        round_trip += trips as usize;
    }
    let elapsed = t.elapsed();
    let pass = agree == n && symmetric == n && round_trip == n && elapsed.as_secs() < 120;
    Verdict::new(
        2,
        pass,
        format!(
            "oracle agreement {agree}/{n}, symmetry {symmetric}/{n}, round trip {round_trip}/{n}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn loss_cfg(tau: f32, scale: f32, k: usize) -> LossConfig {
    LossConfig {
        tau,
        loss_scale: scale,
        n_positive: 1,
        queue_capacity: k,
        momentum: 0.99,
    }
}

fn closed_forms() -> Verdict {
    let (k, tau, scale) = (64usize, 0.07f32, 10.0f32);
    let d = k + 1;
    let unit = |i: usize| -> Vec<f32> { (0..d).map(|j| (j == i) as u8 as f32).collect() };
    let mut q = NegativeQueue::new(k, d).unwrap();
    for i in 1..=k {
        q.enqueue(&unit(i)).unwrap();
    }
    let anchor = vec![unit(0)];
    let got = nce_loss(&anchor, &anchor, &q, &loss_cfg(tau, scale, k)).unwrap() as f64;
    let e = (1.0 / tau as f64).exp();
    let want = scale as f64 * -(e / (e + k as f64)).ln();
    let closed_err = (got - want).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = loss_cfg(1.0, 1.0, 256);
    let mut total = 0.0;
    for _ in 0..1000 {
        let negs = NegativeQueue::random(256, 128, &mut rng).unwrap();
        let pair = NegativeQueue::random(2, 128, &mut rng).unwrap();
        let rows: Vec<Vec<f32>> = pair.iter().map(<[f32]>::to_vec).collect();
        total += nce_loss(&rows[..1], &rows[1..], &negs, &cfg).unwrap() as f64;
    }
    let mean = total / 1000.0;
    let rel = (mean - 257f64.ln()).abs() / 257f64.ln();
    Verdict::new(
        3,
        closed_err < 1e-5 && rel < 0.05,
        format!("closed-form |err| {closed_err:.2e} (< 1e-5); random loss {mean:.4} vs ln 257 {:.4}, rel {rel:.4} (< 0.05)", 257f64.ln()),
    )
}

// ---------------------------------------------------------------- 4

fn mechanics(work: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = || {
        let mut p = ParamSet::new();
        p.insert("encoder.w", Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0))).unwrap();
        p.insert("decoder.b", Tensor::from_fn(&[7], |_| rng.random_range(-1.0..1.0))).unwrap();
        p
    };
    let mut momentum_ok = true;
    for m in [0.0f32, 0.5, 0.999] {
        let f = params();
        let g0 = params();
        let mut g = MomentumEncoder { params: g0.clone(), momentum: m };
        momentum_update(&f, &mut g).unwrap();
        for (((_, a), (_, b)), (_, c)) in g.params.iter().zip(g0.iter()).zip(f.iter()) {
            for i in 0..a.numel() {
                momentum_ok &= a.data()[i].to_bits() == (m * b.data()[i] + (1.0 - m) * c.data()[i]).to_bits();
            }
        }
    }

    let mut queue_ok = 0;
    for _ in 0..10_000 {
        let (cap, dim) = (rng.random_range(1..10), rng.random_range(1..4));
        let mut q = NegativeQueue::new(cap, dim).unwrap();
        let mut oracle = VecDeque::new();
        for _ in 0..rng.random_range(0..30) {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            q.enqueue(&v).unwrap();
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt().max(1e-12);
            if oracle.len() == cap {
                oracle.pop_front();
            }
            oracle.push_back(v.iter().map(|&x| (x as f64 / n) as f32).collect::<Vec<f32>>());
        }
        let got: Vec<Vec<f32>> = q.iter().map(<[f32]>::to_vec).collect();
        queue_ok += (got == Vec::from(oracle)) as usize;
    }

    let cfg = work.join("tiny.json");
    let data = work.join("mech_data");
    let (full, resumed) = (work.join("mech_full"), work.join("mech_resumed"));
    ok(&["--config", s(&cfg), "--out", s(&data), "gen-data"]);
    ok(&["--config", s(&cfg), "--out", s(&full), "train", "--data", s(&data)]);
    let ckpt2 = full.join("ckpt_000002.dclb");
    ok(&["--config", s(&cfg), "--out", s(&resumed), "train", "--data", s(&data), "--resume", s(&ckpt2)]);
    let keep = |dir: &Path| -> Vec<_> {
        files(dir)
            .into_iter()
            .filter(|(p, _)| !p.to_string_lossy().contains("000002"))
            .collect()
    };
    let resume_ok = keep(&full) == keep(&resumed) && !keep(&full).is_empty();
    Verdict::new(
        4,
        momentum_ok && queue_ok == 10_000 && resume_ok,
        format!("momentum exact for m in {{0, 0.5, 0.999}}: {momentum_ok}; queue oracle {queue_ok}/10000; resume bit-exact: {resume_ok}"),
    )
}

// ---------------------------------------------------------------- 5

fn csv_columns(path: &Path) -> (Vec<f64>, Vec<f64>) {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut loss = Vec::new();
    let mut sat = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        loss.push(f[1]);
        sat.push(f[2]);
    }
    (loss, sat)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn training_signal(data: &Path, run: &Path) -> Verdict {
    let t = Instant::now();
    let o = densecl(&["--preset", "desk", "--out", s(run), "train", "--data", s(data)]);
    let elapsed = t.elapsed();
    let (loss, sat) = csv_columns(&run.join("loss.csv"));
    let n = loss.len();
    if !o.status.success() || n < 200 {
        return Verdict::new(5, false, format!("training failed after {:.1} min", mins(elapsed)));
    }
    let (l0, l1) = (mean(&loss[..100]), mean(&loss[n - 100..]));
    let (s0, s1) = (mean(&sat[..100]), mean(&sat[n - 100..]));
    let k = 4096.0;
    let pass = n >= 2000 && l1 < l0 && s1 >= 0.5 && s1 > s0 && elapsed.as_secs() < 20 * 60;
    Verdict::new(
        5,
        pass,
        format!(
            "{n} iterations in {:.1} min; loss {l0:.2} -> {l1:.2}; satisfaction {s0:.3} -> {s1:.3} (>= 0.5; chance 1/(K+1) = {:.5})",
            mins(elapsed),
            1.0 / (k + 1.0)
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

fn ablation(work: &Path, data: &Path) -> Option<AblationReport> {
    let cfg = work.join("ablation.json");
    fs::write(&cfg, format!(r#"{{"train": {{"iterations": {ABLATION_ITERATIONS}}}}}"#)).unwrap();
    let out = work.join("ablation");
    let o = densecl(&["--config", s(&cfg), "--out", s(&out), "ablate", "--data", s(data), "--seeds", "0,1,2"]);
    o.status.success().then(|| serde_json::from_slice(&o.stdout).expect("ablation report"))
}

fn probe_superiority(report: Option<&AblationReport>) -> Verdict {
    let Some((t, r)) = report.and_then(|a| Some((a.mean("diff_view")?, a.mean("random")?))) else {
        return Verdict::new(6, false, "ablation did not complete".into());
    };
    let gain = 100.0 * (t.miou - r.miou);
    Verdict::new(
        6,
        gain >= 10.0 && t.rmse < r.rmse,
        format!(
            "mIoU trained {:.1} vs random {:.1} (+{gain:.1} pts, need >= 10); depth RMSE {:.3} vs {:.3}",
            100.0 * t.miou,
            100.0 * r.miou,
            t.rmse,
            r.rmse
        ),
    )
}

fn ablation_ordering(report: Option<&AblationReport>) -> Verdict {
    let means = report.and_then(|a| Some((a.mean("diff_view")?, a.mean("same_view")?, a.mean("unmatch")?, a.mean("random")?)));
    let Some((d, sv, u, r)) = means else {
        return Verdict::new(7, false, "ablation did not complete".into());
    };
    let pct = |x: f64| 100.0 * x;
    let pass = d.miou >= sv.miou
        && pct(d.miou) >= pct(u.miou) + 5.0
        && pct(sv.miou) >= pct(u.miou) + 5.0
        && pct(u.miou) <= pct(r.miou) + 2.0;
    Verdict::new(
        7,
        pass,
        format!(
            "mIoU diff_view {:.1}, same_view {:.1}, unmatch {:.1}, random {:.1}",
            pct(d.miou),
            pct(sv.miou),
            pct(u.miou),
            pct(r.miou)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn propagation(data: &Path, ckpt: &Path) -> Verdict {
    let j = |args: &[&str]| -> Option<f64> {
        let o = densecl(args);
        o.status.success().then(|| json(&o.stdout)["value"].as_f64()).flatten()
    };
    let base = ["--preset", "desk", "--seed", "0", "propagate", "--data", s(data), "--k", "5", "--window", "7"];
    let colour = j(&[&base[..], &["--features", "color"]].concat());
    let trained = j(&[&base[..], &["--ckpt", s(ckpt)]].concat());
    let random = j(&base);
    let (Some(c), Some(t), Some(r)) = (colour, trained, random) else {
        return Verdict::new(8, false, "propagation run failed".into());
    };
    Verdict::new(
        8,
        c >= 0.9 && t > r,
        format!("J colour {c:.3} (>= 0.9), trained {t:.3} vs random {r:.3}"),
    )
}

// ---------------------------------------------------------------- 9

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let at = |v: &[u16], x: u16| -> HashSet<usize> { (0..v.len()).filter(|&i| v[i] == x).collect() };
    let iou = |a: &HashSet<usize>, b: &HashSet<usize>| a.intersection(b).count() as f64 / a.union(b).count() as f64;
    let (mut m_ok, mut r_ok, mut j_ok) = (0, 0, 0);
    for _ in 0..100 {
        let (n, c) = (rng.random_range(1..150), rng.random_range(2..6u16));
        let gt: Vec<u16> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let ious: Vec<f64> = (0..c)
            .filter_map(|k| {
                let (p, g) = (at(&pred, k), at(&gt, k));
                (!(p.is_empty() && g.is_empty())).then(|| iou(&p, &g))
            })
            .collect();
        m_ok += (miou(&pred, &gt, c as usize).unwrap().value == ious.iter().sum::<f64>() / ious.len() as f64) as usize;

        let p: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sq: f64 = p.iter().zip(&g).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        r_ok += (rmse(&p, &g).unwrap().value == (sq / n as f64).sqrt()) as usize;

        let frames = rng.random_range(1..5);
        let pm: Vec<Vec<u16>> = (0..frames).map(|_| (0..n).map(|_| rng.random_range(0..4)).collect()).collect();
        let mut gm: Vec<Vec<u16>> = (0..frames).map(|_| (0..n).map(|_| rng.random_range(0..4)).collect()).collect();
        gm[0][0] = 1;
        let mut scores = Vec::new();
        for inst in 1..4 {
            for t in 0..frames {
                let g = at(&gm[t], inst);
                if !g.is_empty() {
                    scores.push(iou(&at(&pm[t], inst), &g));
                }
            }
        }
        j_ok += (region_similarity_j(&pm, &gm).unwrap().value == scores.iter().sum::<f64>() / scores.len() as f64) as usize;
    }
    Verdict::new(
        9,
        m_ok == 100 && r_ok == 100 && j_ok == 100,
        format!("exact agreement: mIoU {m_ok}/100, RMSE {r_ok}/100, J {j_ok}/100"),
    )
}

// ---------------------------------------------------------------- 10

fn determinism(work: &Path) -> Verdict {
    let cfg = work.join("tiny.json");
    let c = s(&cfg);
    let run = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let root = work.join(format!("det_{tag}"));
        let data = root.join("data");
        let p = |name: &str| root.join(name);
        let mut outputs = Vec::new();
        let mut record = |name: &str, o: Output| outputs.push((name.to_string(), o.stdout));
        record("gen-data", ok(&["--config", c, "--seed", "3", "--out", s(&data), "gen-data"]));
        record("train", ok(&["--config", c, "--seed", "3", "--out", s(&p("train")), "train", "--data", s(&data)]));
        let ckpt = p("train").join("ckpt_000004.dclb");
        let k = s(&ckpt);
        for task in ["seg", "depth"] {
            let out = p(&format!("probe_{task}.json"));
            record(task, ok(&["--out", s(&out), "probe", "--ckpt", k, "--data", s(&data), "--task", task]));
        }
        record("propagate", ok(&["--out", s(&p("prop.json")), "propagate", "--ckpt", k, "--data", s(&data)]));
        record(
            "propagate-color",
            ok(&["--config", c, "propagate", "--data", s(&data), "--features", "color"]),
        );
        record("retrieve", ok(&["--out", s(&p("ret.json")), "retrieve", "--ckpt", k, "--data", s(&data), "--query", "1:2:3"]));
        record("viz-pca", ok(&["--out", s(&p("pca")), "viz", "pca", "--ckpt", k, "--data", s(&data)]));
        record(
            "viz-simmap",
            ok(&["--out", s(&p("sim.ppm")), "viz", "simmap", "--ckpt", k, "--data", s(&data), "--query", "0:1:1", "--target", "2"]),
        );
        record("ablate", ok(&["--config", c, "--out", s(&p("ablate")), "ablate", "--data", s(&data), "--seeds", "0"]));
        record("grad-check", ok(&["--seed", "3", "--out", s(&p("gc.json")), "grad-check", "--coords", "10"]));
        for (path, bytes) in files(&root) {
            outputs.push((path.to_string_lossy().into_owned(), bytes));
        }
        outputs
    };
    let (a, b) = (run("a"), run("b"));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = a.len() == b.len() && differing.is_empty();
    Verdict::new(
        10,
        pass,
        format!("{} artifacts compared across two runs; differing: {differing:?}", a.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path();
    fs::write(work.join("tiny.json"), TINY).unwrap();
    let data = work.join("desk_data");
    ok(&["--preset", "desk", "--seed", "0", "--out", s(&data), "gen-data"]);
    let run = work.join("desk_run");

    let mut verdicts = vec![gradients(work), correspondence(), closed_forms(), mechanics(work)];
    verdicts.push(training_signal(&data, &run));
    let report = ablation(work, &data);
    verdicts.push(probe_superiority(report.as_ref()));
    verdicts.push(ablation_ordering(report.as_ref()));
    let last = fs::read_dir(&run)
        .map(|d| {
            d.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "dclb"))
                .max()
        })
        .ok()
        .flatten()
        .unwrap_or_default();
    verdicts.push(propagation(&data, &last));
    verdicts.push(metric_oracles());
    verdicts.push(determinism(work));

    println!();
    for v in &verdicts {
        println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
