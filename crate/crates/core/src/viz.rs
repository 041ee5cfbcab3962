//! PCA-to-RGB renderings of dense features and cosine-similarity heatmaps.

use log::warn;

use crate::encoder::EmbeddingMap;
use crate::error::{bail, Result};
use crate::image_io::{quantize, RgbImage};
use crate::views::PixelCoord;

/// Eigenvalues at or below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-9;
/// Dimension above which the top components come from power iteration.
const EXACT_EIG_MAX_DIM: usize = 256;

pub struct PcaRgb {
    pub images: Vec<RgbImage>,
    /// Rows are the (up to three) principal directions, `D` entries each;
    /// missing components are all-zero rows.
    pub projection: [Vec<f64>; 3],
    /// Number of non-degenerate components used (0..=3).
    pub rank: usize,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching unit eigenvectors.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        let scale: f64 = (0..n).map(|i| m[i * n + i].powi(2)).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

/// Top-`k` eigenpairs by power iteration with deflation.
fn power_top(a: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut vals = Vec::new();
    let mut vecs = Vec::new();
    for c in 0..k {
        // Deterministic, generic start vector.
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 / 11.0).collect();
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let mut y = vec![0.0; n];
            for i in 0..n {
                y[i] = (0..n).map(|j| m[i * n + j] * x[j]).sum();
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                lambda = 0.0;
                break;
            }
            y.iter_mut().for_each(|v| *v /= norm);
            let diff: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            x = y;
            lambda = norm;
            if diff < 1e-12 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] -= lambda * x[i] * x[j];
            }
        }
        vals.push(lambda);
        vecs.push(x);
    }
    (vals, vecs)
}

/// Projects the pooled pixel embeddings of `maps` onto their top three
/// principal components and min-max scales each component over the pool.
pub fn pca_rgb(maps: &[EmbeddingMap]) -> Result<PcaRgb> {
    let Some(first) = maps.first() else {
        bail!(Usage, "pca_rgb needs at least one map");
    };
    let d = first.dim();
    if maps.iter().any(|m| m.dim() != d) {
        bail!(Dimension, "maps differ in embedding dimension");
    }
    let rows: Vec<Vec<f32>> = maps.iter().map(EmbeddingMap::pixel_rows).collect();
    let n: usize = maps.iter().map(EmbeddingMap::n_pixels).sum();
    if n < 3 {
        bail!(Usage, "pca_rgb needs at least 3 pixels, got {n}");
    }
    let mut mean = vec![0.0f64; d];
    for r in rows.iter().flat_map(|r| r.chunks(d)) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0f64; d * d];
    for r in rows.iter().flat_map(|r| r.chunks(d)) {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = if d > EXACT_EIG_MAX_DIM {
        power_top(&cov, d, 3.min(d))
    } else {
        symmetric_eigen(&cov, d)
    };
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let mut projection = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut rank = 0;
    for (k, (&lam, v)) in vals.iter().zip(&vecs).take(3).enumerate() {
        if top <= 0.0 || lam <= RANK_TOL * top {
            break;
        }
        // Orient so the pixel with the largest |projection| lands positive;
        // unlike a rule on the loadings this survives rotations of the input.
        let mut v = v.clone();
        let mut extreme = 0.0f64;
        for r in rows.iter().flat_map(|r| r.chunks(d)) {
            let p: f64 = r.iter().zip(&mean).zip(&v).map(|((&x, m), w)| (x as f64 - m) * w).sum();
            if p.abs() > extreme.abs() {
                extreme = p;
            }
        }
        if extreme < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        projection[k] = v;
        rank = k + 1;
    }
    if rank < 3 {
        warn!("pooled feature covariance has rank {rank} < 3; missing channels rendered gray");
    }

    let project = |r: &[f32], k: usize| -> f64 {
        r.iter()
            .zip(&mean)
            .zip(&projection[k])
            .map(|((&v, m), p)| (v as f64 - m) * p)
            .sum()
    };
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in rows.iter().flat_map(|r| r.chunks(d)) {
        for k in 0..rank {
            let p = project(r, k);
            lo[k] = lo[k].min(p);
            hi[k] = hi[k].max(p);
        }
    }
    let images = maps
        .iter()
        .zip(&rows)
        .map(|(m, r)| {
            let mut img = RgbImage::new(m.width(), m.height());
            for (p, row) in r.chunks(d).enumerate() {
                let mut rgb = [quantize(0.5); 3];
                for k in 0..rank {
                    let span = hi[k] - lo[k];
                    let v = if span > 0.0 { (project(row, k) - lo[k]) / span } else { 0.5 };
                    rgb[k] = quantize(v as f32);
                }
                img.set(p / m.width(), p % m.width(), rgb);
            }
            img
        })
        .collect();
    Ok(PcaRgb {
        images,
        projection,
        rank,
    })
}

/// Cosine similarity of the query pixel to every target pixel, row-major.
pub fn similarity_values(query: (&EmbeddingMap, PixelCoord), target: &EmbeddingMap) -> Result<Vec<f32>> {
    if query.0.dim() != target.dim() {
        bail!(Dimension, "query has dimension {}, target {}", query.0.dim(), target.dim());
    }
    let q = query.0.embed_at(query.1)?;
    let qn = q.iter().map(|v| v * v).sum::<f32>().sqrt();
    let d = target.dim();
    Ok(target
        .pixel_rows()
        .chunks(d)
        .map(|r| {
            let rn = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            if qn < 1e-12 || rn < 1e-12 {
                return 0.0;
            }
            (q.iter().zip(r).map(|(a, b)| a * b).sum::<f32>() / (qn * rn)).clamp(-1.0, 1.0)
        })
        .collect())
}

/// Diverging colormap on `[-1, 1]`: blue at −1, white at 0, red at +1.
pub fn heat_color(s: f32) -> [u8; 3] {
    let s = s.clamp(-1.0, 1.0);
    if s >= 0.0 {
        [255, quantize(1.0 - s), quantize(1.0 - s)]
    } else {
        [quantize(1.0 + s), quantize(1.0 + s), 255]
    }
}

pub fn similarity_heatmap(query: (&EmbeddingMap, PixelCoord), target: &EmbeddingMap) -> Result<RgbImage> {
    let sims = similarity_values(query, target)?;
    let mut img = RgbImage::new(target.width(), target.height());
    for (p, &s) in sims.iter().enumerate() {
        img.set(p / target.width(), p % target.width(), heat_color(s));
    }
    Ok(img)
}
