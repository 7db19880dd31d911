//! AUC, the DeLong paired test, exact t-SNE and embedding reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

impl ScoredExample {
    pub fn new(id: impl Into<String>, label: u8, score: f64) -> Self {
        Self {
            id: id.into(),
            label,
            score,
        }
    }
}

fn split_scores(scores: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Unpaired(scores.len(), labels.len()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::validation("score", "scores must be finite"));
        }
        match l {
            0 => neg.push(s),
            1 => pos.push(s),
            _ => return Err(Error::validation("label", "labels must be 0 or 1")),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Twice the Mann-Whitney count: 2 per won pair, 1 per tie.
fn doubled_wins(pos: &[f64], neg: &[f64]) -> u64 {
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    pos.iter()
        .map(|&p| {
            let below = sorted.partition_point(|&n| n < p) as u64;
            let not_above = sorted.partition_point(|&n| n <= p) as u64;
            2 * below + (not_above - below)
        })
        .sum()
}

/// Area under the ROC curve from scores and binary labels.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = split_scores(scores, labels)?;
    Ok(doubled_wins(&pos, &neg) as f64 / (2 * pos.len() * neg.len()) as f64)
}

pub fn compute_auc(examples: &[ScoredExample]) -> Result<f64> {
    let scores: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Estimated variance of `auc_a - auc_b`.
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Structural components: per-positive and per-negative placement values.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}

/// Two-sided DeLong test for two classifiers scored on the same examples.
pub fn delong_p_value(a: &[f64], b: &[f64], labels: &[u8]) -> Result<DeLong> {
    if a.len() != b.len() {
        return Err(Error::Unpaired(a.len(), b.len()));
    }
    let (pa, na) = split_scores(a, labels)?;
    let (pb, nb) = split_scores(b, labels)?;
    let (v10a, v01a) = placements(&pa, &na);
    let (v10b, v01b) = placements(&pb, &nb);
    let auc_a = v10a.iter().sum::<f64>() / v10a.len() as f64;
    let auc_b = v10b.iter().sum::<f64>() / v10b.len() as f64;
    let (m, n) = (pa.len() as f64, na.len() as f64);
    let var_a = covariance(&v10a, &v10a) / m + covariance(&v01a, &v01a) / n;
    let var_b = covariance(&v10b, &v10b) / m + covariance(&v01b, &v01b) / n;
    let cov = covariance(&v10a, &v10b) / m + covariance(&v01a, &v01b) / n;
    let variance = (var_a + var_b - 2.0 * cov).max(0.0);
    let diff = auc_a - auc_b;
    if variance <= 1e-15 {
        if diff.abs() <= 1e-15 {
            return Ok(DeLong {
                auc_a,
                auc_b,
                variance,
                z: 0.0,
                p_value: 1.0,
            });
        }
        return Err(Error::DegenerateVariance { auc_a, auc_b });
    }
    let z = diff / variance.sqrt();
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(DeLong {
        auc_a,
        auc_b,
        variance,
        z,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// 0 picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 0.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// Entropy (nats) of each point's conditional distribution.
    pub entropies: Vec<f64>,
    pub kl_initial: f64,
    pub kl_final: f64,
}

pub fn squared_distances(x: &[Vec<f64>]) -> Array2<f64> {
    let n = x.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Row `i` of the conditional affinities for precision `beta`, and its entropy.
fn row_affinities(d: &Array2<f64>, i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = d.nrows();
    let dmin = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = (0..n)
        .map(|j| if j == i { 0.0 } else { (-beta * (d[[i, j]] - dmin)).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Conditional affinities `p_{j|i}` whose entropy matches `ln(perplexity)`.
pub fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = d.nrows();
    if n < 5 || !(perplexity > 1.0) || perplexity >= n as f64 / 3.0 {
        return Err(Error::Perplexity { perplexity, n });
    }
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        // bisection on log(beta); entropy decreases in beta
        let (mut lo, mut hi) = (-60.0f64, 60.0f64);
        let mut best = row_affinities(d, i, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            best = row_affinities(d, i, mid.exp());
            if (best.1 - target).abs() < 1e-7 {
                break;
            }
            if best.1 > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (best.1 - target).abs() > 1e-5 {
            return Err(Error::Perplexity { perplexity, n });
        }
        for (j, v) in best.0.into_iter().enumerate() {
            p[[i, j]] = v;
        }
        entropies.push(best.1);
    }
    Ok((p, entropies))
}

fn joint(p_cond: &Array2<f64>) -> Array2<f64> {
    let n = p_cond.nrows() as f64;
    let p = (p_cond + &p_cond.t()) / (2.0 * n);
    p.mapv(|v| v.max(1e-12))
}

fn student_q(y: &[[f64; 2]]) -> (Array2<f64>, f64) {
    let n = y.len();
    let mut num = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

pub fn kl_divergence(p: &Array2<f64>, y: &[[f64; 2]]) -> f64 {
    let (num, sum) = student_q(y);
    let n = y.len();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[[i, j]] / sum).max(1e-12);
                kl += p[[i, j]] * (p[[i, j]] / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE with momentum, per-coordinate gains and early exaggeration.
pub fn tsne_embed(features: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    let d = squared_distances(features);
    let (p_cond, entropies) = conditional_affinities(&d, cfg.perplexity)?;
    let p = joint(&p_cond);

    // start positions seeded by the feature values
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = features
        .iter()
        .map(|f| {
            let h = f.iter().fold(seed::tag("tsne"), |acc, v| seed::splitmix64(acc ^ v.to_bits()));
            let mut rng = seed::derived_rng(cfg.seed, &[h]);
            [init.sample(&mut rng), init.sample(&mut rng)]
        })
        .collect();
    let kl_initial = kl_divergence(&p, &y);
    let learning_rate = if cfg.learning_rate > 0.0 {
        cfg.learning_rate
    } else {
        (n as f64 / cfg.early_exaggeration / 4.0).max(50.0)
    };
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, sum) = student_q(&y);
        let mut grad = vec![[0.0; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[[i, j]] - num[[i, j]] / sum) * num[[i, j]];
                grad[i][0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[i][1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                velocity[i][k] = momentum * velocity[i][k] - learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    let kl_final = kl_divergence(&p, &y);
    Ok(TsneResult {
        coords: y,
        entropies,
        kl_initial,
        kl_final,
    })
}

/// Mean silhouette coefficient of a labelled 2D point set.
pub fn silhouette_score(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let dist = |i: usize, j: usize| ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut mean_to = BTreeMap::new();
        for &c in &classes {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            if !members.is_empty() {
                mean_to.insert(c, members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
            }
        }
        let Some(&a) = mean_to.get(&labels[i]) else { continue };
        let b = mean_to
            .iter()
            .filter(|(&c, _)| c != labels[i])
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: String,
    /// Class with provenance, e.g. `synthetic-malignant-mass`.
    pub class_tag: String,
    pub feature: Vec<f32>,
    pub coords: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReportRow<'a> {
    id: &'a str,
    class: &'a str,
    x: f64,
    y: f64,
    baseline_score: f64,
    augmented_score: f64,
    delta: f64,
    flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub points: usize,
    pub flagged: usize,
    /// NaN when nothing is flagged.
    pub mean_flagged_delta: f64,
}

pub const REPORT_CSV: &str = "embedding.csv";
pub const REPORT_PNG: &str = "embedding.png";

const PALETTE: [[u8; 3]; 6] = [
    [90, 90, 90],
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
];

/// Writes the embedding CSV and a scatter plot; flagged points are ringed.
pub fn embedding_report(
    points: &[EmbeddingPoint],
    baseline: &BTreeMap<String, f64>,
    augmented: &BTreeMap<String, f64>,
    flagged: &BTreeSet<String>,
    out_dir: impl AsRef<Path>,
) -> Result<ReportSummary> {
    let out_dir = out_dir.as_ref();
    let missing: Vec<String> = points
        .iter()
        .map(|p| &p.id)
        .chain(flagged.iter())
        .filter(|id| !baseline.contains_key(*id) || !augmented.contains_key(*id))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    if let Some(p) = points.iter().find(|p| p.coords.is_none()) {
        return Err(Error::validation("coords", format!("point {} has no coordinates", p.id)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = csv::Writer::from_path(out_dir.join(REPORT_CSV))?;
    for p in points {
        let [x, y] = p.coords.unwrap();
        w.serialize(ReportRow {
            id: &p.id,
            class: &p.class_tag,
            x,
            y,
            baseline_score: baseline[&p.id],
            augmented_score: augmented[&p.id],
            delta: augmented[&p.id] - baseline[&p.id],
            flagged: flagged.contains(&p.id),
        })?;
    }
    w.flush().map_err(|e| Error::io(out_dir.join(REPORT_CSV), e))?;

    let deltas: Vec<f64> = flagged.iter().map(|id| augmented[id] - baseline[id]).collect();
    let mean_flagged_delta = if deltas.is_empty() {
        f64::NAN
    } else {
        deltas.iter().sum::<f64>() / deltas.len() as f64
    };
    render_scatter(points, flagged, &out_dir.join(REPORT_PNG))?;
    Ok(ReportSummary {
        points: points.len(),
        flagged: flagged.len(),
        mean_flagged_delta,
    })
}

fn render_scatter(points: &[EmbeddingPoint], flagged: &BTreeSet<String>, path: &Path) -> Result<()> {
    let size = 600u32;
    let margin = 20.0;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    if points.is_empty() {
        img.save(path)?;
        return Ok(());
    }
    let xs = points.iter().map(|p| p.coords.unwrap()[0]);
    let ys = points.iter().map(|p| p.coords.unwrap()[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (size as f64 - 2.0 * margin) / span;
    let tags: BTreeSet<&str> = points.iter().map(|p| p.class_tag.as_str()).collect();
    let color_of: BTreeMap<&str, [u8; 3]> = tags.iter().enumerate().map(|(i, t)| (*t, PALETTE[i % PALETTE.len()])).collect();
    let mut dot = |cx: f64, cy: f64, r: f64, c: [u8; 3], ring: bool| {
        let ri = r.ceil() as i64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                let inside = if ring { (d - r).abs() < 0.8 } else { d <= r };
                let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                if inside && px >= 0 && py >= 0 && px < size as i64 && py < size as i64 {
                    img.put_pixel(px as u32, py as u32, image::Rgb(c));
                }
            }
        }
    };
    for p in points {
        let [x, y] = p.coords.unwrap();
        let cx = margin + (x - x0) * scale;
        let cy = size as f64 - margin - (y - y0) * scale;
        dot(cx, cy, 2.5, color_of[p.class_tag.as_str()], false);
        if flagged.contains(&p.id) {
            dot(cx, cy, 6.0, [0, 0, 0], true);
        }
    }
    img.save(path)?;
    Ok(())
}
