//! Error-analysis projection: `[CLS]` vectors → PCA → exact t-SNE → SVG
//! scatter colored by class, with misclassified points in black.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::corpus::{SentimentLabel, TweetRecord};
use crate::evaluate::argmax;
use crate::model::Checkpoint;
use crate::rng;
use crate::tokenizer::{encode, Vocab};
use crate::{Error, Result};

pub const TSNE_DIMS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub pca_dims: usize,
    /// Target effective neighbour count, clamped to `(n − 1) / 3`.
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            pca_dims: 50,
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity > 0.0) {
            return Err(Error::Config(format!("tsne perplexity ({}) must be positive", self.perplexity)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("tsne learning rate ({}) must be positive", self.learning_rate)));
        }
        if !(self.exaggeration >= 1.0) {
            return Err(Error::Config(format!("exaggeration ({}) must be at least 1", self.exaggeration)));
        }
        Ok(())
    }
}

/// Row `i` is the final hidden vector at position 0 for record `i`.
pub fn extract_cls_vectors(ckpt: &Checkpoint, records: &[TweetRecord], vocab: &Vocab, max_len: usize) -> Result<DMatrix<f64>> {
    let h = ckpt.config().hidden_size;
    let mut out = DMatrix::zeros(records.len(), h);
    for (i, r) in records.iter().enumerate() {
        let ids = encode(&r.text, vocab, max_len).real_ids();
        let hidden = ckpt.model.encode_sequence(&ids, &vec![1; ids.len()])?;
        for j in 0..h {
            out[(i, j)] = hidden[j] as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `n × k` projections of the centered data.
    pub coordinates: DMatrix<f64>,
    /// `d × k`, orthonormal columns.
    pub components: DMatrix<f64>,
    /// Sample variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Top-`k` principal components from the SVD of the mean-centered data. Each
/// component's largest-magnitude entry is made positive.
pub fn pca_project(data: &DMatrix<f64>, k: usize) -> Result<Pca> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    let limit = (n - 1).min(d);
    if k > limit {
        return Err(Error::Invalid(format!(
            "cannot keep {k} components from {n} × {d} data (at most {limit})"
        )));
    }
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let denom = (n - 1) as f64;
    let total: f64 = svd.singular_values.iter().map(|s| s * s / denom).sum();
    let mut components = DMatrix::zeros(d, k);
    let mut explained_variance = Vec::with_capacity(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let row = v_t.row(i);
        let pivot = (0..d).fold(0, |best, j| if row[j].abs() > row[best].abs() { j } else { best });
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[(j, c)] = sign * row[j];
        }
        let s = svd.singular_values[i];
        explained_variance.push(s * s / denom);
    }
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(Pca {
        coordinates: &centered * &components,
        components,
        explained_variance,
        explained_variance_ratio,
    })
}

/// Result of one per-point bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth {
    /// Precision `1 / (2σ²)` of the Gaussian kernel.
    pub beta: f64,
    /// Entropy (nats) of the conditional distribution at `beta`.
    pub entropy: f64,
    pub converged: bool,
    /// Conditional probabilities over the other points.
    pub probs: Vec<f64>,
}

pub const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;

fn conditional(sq_dists: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let min = sq_dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = sq_dists.iter().map(|&d| (-beta * (d - min)).exp()).collect();
    let z: f64 = probs.iter().sum();
    let mut weighted = 0.0;
    for (p, &d) in probs.iter_mut().zip(sq_dists) {
        *p /= z;
        weighted += *p * (d - min);
    }
    (probs, z.ln() + beta * weighted)
}

/// Bisection on `beta` until the entropy is within [`ENTROPY_TOLERANCE`] of
/// `ln(perplexity)`. Rows where every distance is equal cannot move the
/// entropy and fall back to the uniform distribution.
pub fn fit_bandwidth(sq_dists: &[f64], perplexity: f64) -> Bandwidth {
    let target = perplexity.ln();
    let m = sq_dists.len();
    let min = sq_dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread: f64 = sq_dists.iter().map(|&d| d - min).sum::<f64>() / m.max(1) as f64;
    if m == 0 || spread <= 0.0 || !spread.is_finite() {
        let probs = vec![1.0 / m.max(1) as f64; m];
        let entropy = (m as f64).ln();
        return Bandwidth {
            beta: 0.0,
            entropy,
            converged: (entropy - target).abs() <= ENTROPY_TOLERANCE,
            probs,
        };
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0 / spread;
    let (mut probs, mut entropy) = conditional(sq_dists, beta);
    let mut converged = false;
    for _ in 0..MAX_BISECTIONS {
        let gap = entropy - target;
        if gap.abs() <= ENTROPY_TOLERANCE {
            converged = true;
            break;
        }
        if gap > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        (probs, entropy) = conditional(sq_dists, beta);
    }
    converged |= (entropy - target).abs() <= ENTROPY_TOLERANCE;
    Bandwidth {
        beta,
        entropy,
        converged,
        probs,
    }
}

fn squared_distances(data: &DMatrix<f64>) -> Vec<f64> {
    let n = data.nrows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = data.row(i).iter().zip(data.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}

/// Perplexity actually used for `n` points.
pub fn effective_perplexity(requested: f64, n: usize) -> f64 {
    let cap = (n as f64 - 1.0) / 3.0;
    if cap > 0.0 {
        requested.min(cap)
    } else {
        requested
    }
}

/// Symmetrized joint probabilities `(p_j|i + p_i|j) / 2n` (row-major
/// `n × n`) and the per-point bandwidth fits.
pub fn joint_probabilities(data: &DMatrix<f64>, perplexity: f64) -> (Vec<f64>, Vec<Bandwidth>) {
    let n = data.nrows();
    let dist = squared_distances(data);
    let mut cond = vec![0.0; n * n];
    let mut fits = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
        let fit = fit_bandwidth(&row, perplexity);
        for (p, j) in fit.probs.iter().zip((0..n).filter(|&j| j != i)) {
            cond[i * n + j] = *p;
        }
        fits.push(fit);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    (joint, fits)
}

fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = q;
            num[j * n + i] = q;
            z += 2.0 * q;
        }
    }
    (num, z)
}

/// `KL(P ‖ Q)` for the embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_t(y);
    p.iter()
        .zip(&num)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / (q / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tsne {
    pub coordinates: Vec<[f64; 2]>,
    /// Unexaggerated KL at the initial embedding.
    pub initial_kl: f64,
    pub final_kl: f64,
    pub perplexity: f64,
    pub bandwidths: Vec<Bandwidth>,
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
pub fn tsne_project(data: &DMatrix<f64>, config: &AnalysisConfig) -> Result<Tsne> {
    config.validate()?;
    let n = data.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("t-SNE needs at least 2 points, got {n}")));
    }
    let perplexity = effective_perplexity(config.perplexity, n);
    let (p, bandwidths) = joint_probabilities(data, perplexity);
    let mut r = rng::seeded(rng::derive(config.seed, rng::stream::TSNE, 0));
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng::normal(&mut r, 1e-4), rng::normal(&mut r, 1e-4)])
        .collect();
    let initial_kl = kl_divergence(&p, &y);
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for iter in 0..config.iterations {
        let exaggerate = if iter < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if iter < config.exaggeration_iters {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (num, z) = student_t(&y);
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let coeff = 4.0 * (exaggerate * p[i * n + j] - q / z) * q;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..TSNE_DIMS {
                let g = &mut gains[i][d];
                *g = if (grad[d] > 0.0) != (update[i][d] > 0.0) { *g + 0.2 } else { *g * 0.8 };
                *g = f64::max(*g, 0.01);
                update[i][d] = momentum * update[i][d] - config.learning_rate * *g * grad[d];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        for yi in &mut y {
            yi[0] -= mx / n as f64;
            yi[1] -= my / n as f64;
        }
    }
    Ok(Tsne {
        final_kl: kl_divergence(&p, &y),
        coordinates: y,
        initial_kl,
        perplexity,
        bandwidths,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub truth: SentimentLabel,
    pub predicted: SentimentLabel,
    pub correct: bool,
}

impl ProjectionPoint {
    pub fn new(id: impl Into<String>, x: f64, y: f64, truth: SentimentLabel, predicted: SentimentLabel) -> Self {
        ProjectionPoint {
            id: id.into(),
            x,
            y,
            truth,
            predicted,
            correct: truth == predicted,
        }
    }

    pub fn color(&self) -> &'static str {
        match (self.correct, self.truth) {
            (false, _) => "black",
            (true, SentimentLabel::Positive) => "green",
            (true, SentimentLabel::Negative) => "red",
            (true, SentimentLabel::Neutral) => "blue",
        }
    }
}

const VIEWPORT: f64 = 1000.0;
const MARGIN: f64 = 0.05 * VIEWPORT;

fn scale_axis(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    move |v| {
        if span > 0.0 {
            MARGIN + (v - lo) / span * (VIEWPORT - 2.0 * MARGIN)
        } else {
            VIEWPORT / 2.0
        }
    }
}

/// One circle per point; misclassified points carry a `true→pred` label.
pub fn scatter_svg(points: &[ProjectionPoint]) -> String {
    let sx = scale_axis(points.iter().map(|p| p.x));
    let sy = scale_axis(points.iter().map(|p| p.y));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{VIEWPORT}\" height=\"{VIEWPORT}\" viewBox=\"0 0 {VIEWPORT} {VIEWPORT}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for p in points {
        let (x, y) = (sx(p.x), VIEWPORT - sy(p.y));
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{}\"/>", p.color());
        if !p.correct {
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"black\">{}→{}</text>",
                x + 6.0,
                y - 6.0,
                p.truth,
                p.predicted
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_scatter(points: &[ProjectionPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scatter_svg(points)).map_err(|e| Error::io(path, e))
}

pub fn coords_tsv(points: &[ProjectionPoint]) -> String {
    let mut out = String::from("id\tx\ty\ttrue\tpred\n");
    for p in points {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}\t{}", p.id, p.x, p.y, p.truth, p.predicted);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub points: Vec<ProjectionPoint>,
    pub pca_dims: usize,
    pub tsne: Tsne,
}

/// Projects labeled records through PCA and t-SNE and attaches predictions.
/// The PCA width is clamped to what the data supports.
pub fn analyze_model(
    ckpt: &Checkpoint,
    records: &[TweetRecord],
    vocab: &Vocab,
    max_len: usize,
    config: &AnalysisConfig,
) -> Result<Analysis> {
    let labels: Vec<SentimentLabel> = records.iter().map(|r| r.require_label()).collect::<Result<_>>()?;
    let vectors = extract_cls_vectors(ckpt, records, vocab, max_len)?;
    let (n, d) = vectors.shape();
    let pca_dims = config.pca_dims.min(n.saturating_sub(1)).min(d);
    let pca = pca_project(&vectors, pca_dims)?;
    let tsne = tsne_project(&pca.coordinates, config)?;
    let points = records
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (r, truth))| {
            let hidden: Vec<f32> = vectors.row(i).iter().map(|&v| v as f32).collect();
            let probs = ckpt.model.classify_cls(&hidden, false, 0);
            let pred = SentimentLabel::from_index(argmax(&probs)).expect("three classes");
            let [x, y] = tsne.coordinates[i];
            ProjectionPoint::new(r.id.clone(), x, y, truth, pred)
        })
        .collect();
    Ok(Analysis { points, pca_dims, tsne })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SentimentLabel::*;

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut r = rng::seeded(3);
        let rows: Vec<f64> = (0..10)
            .flat_map(|_| {
                let (a, b) = (rng::normal(&mut r, 1.0), rng::normal(&mut r, 1.0));
                [a + b, a - b, 2.0 * a + 0.5 * b]
            })
            .collect();
        let data = DMatrix::from_row_slice(10, 3, &rows);
        let pca = pca_project(&data, 2).unwrap();
        let recon = &pca.coordinates * pca.components.transpose();
        let mean = data.row_mean();
        for i in 0..10 {
            for j in 0..3 {
                assert!((recon[(i, j)] + mean[j] - data[(i, j)]).abs() < 1e-10);
            }
        }
        assert!((pca.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pca_limits() {
        let data = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, 4.0, 4.0]);
        assert!(pca_project(&data, 3).is_err());
        assert_eq!(pca_project(&data, 0).unwrap().coordinates.ncols(), 0);
        assert!(pca_project(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), 1).is_err());
    }

    #[test]
    fn duplicate_points_fall_back_to_uniform() {
        let fit = fit_bandwidth(&[0.0; 5], 2.0);
        assert_eq!(fit.probs, vec![0.2; 5]);
        assert!(!fit.converged);
    }

    #[test]
    fn bandwidth_hits_entropy_target() {
        let dists: Vec<f64> = (1..40).map(|i| (i as f64).powf(1.3)).collect();
        for perp in [2.0, 5.0, 12.0] {
            let fit = fit_bandwidth(&dists, perp);
            assert!(fit.converged);
            assert!((fit.entropy - perp.ln()).abs() <= ENTROPY_TOLERANCE);
        }
    }

    #[test]
    fn joint_probabilities_are_symmetric() {
        let mut r = rng::seeded(1);
        let data = DMatrix::from_fn(15, 4, |_, _| rng::normal(&mut r, 1.0));
        let (p, _) = joint_probabilities(&data, 4.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        for i in 0..15 {
            assert_eq!(p[i * 15 + i], 0.0);
            for j in 0..15 {
                assert!(p[i * 15 + j] >= 0.0);
                assert!((p[i * 15 + j] - p[j * 15 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perplexity_is_clamped() {
        assert_eq!(effective_perplexity(30.0, 40), 13.0);
        assert_eq!(effective_perplexity(5.0, 400), 5.0);
    }

    #[test]
    fn svg_color_rules() {
        let points = vec![
            ProjectionPoint::new("a", 0.0, 0.0, Positive, Positive),
            ProjectionPoint::new("b", 1.0, 0.0, Negative, Negative),
            ProjectionPoint::new("c", 0.0, 1.0, Neutral, Neutral),
        ];
        let svg = scatter_svg(&points);
        for color in ["green", "red", "blue"] {
            assert_eq!(svg.matches(&format!("fill=\"{color}\"")).count(), 1);
        }
        assert_eq!(svg.matches("<text").count(), 0);
        let wrong = scatter_svg(&[ProjectionPoint::new("d", 0.0, 0.0, Negative, Neutral)]);
        assert_eq!(wrong.matches("fill=\"black\"/>").count(), 1);
        assert!(wrong.contains(">negative→neutral</text>"));
        let empty = scatter_svg(&[]);
        assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
        assert_eq!(empty.matches("<circle").count(), 0);
    }

    #[test]
    fn coordinates_stay_inside_margins() {
        let points: Vec<_> = (0..5)
            .map(|i| ProjectionPoint::new(i.to_string(), i as f64 * 3.0, -(i as f64), Positive, Positive))
            .collect();
        let svg = scatter_svg(&points);
        assert!(svg.contains("cx=\"50.00\""));
        assert!(svg.contains("cx=\"950.00\""));
    }
}
