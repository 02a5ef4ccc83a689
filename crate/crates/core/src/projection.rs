//! Exact t-SNE to two dimensions and the annotated scatter plot.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::{Algorithm, ClusterAssignment, NOISE};
use crate::linalg::symmetric_eigen;
use crate::error::{Error, Result};
use crate::ingestion::DiseaseLabel;
use crate::matrix::Matrix;
use crate::reporting::cluster_composition;
use crate::scalar::{sq_euclidean, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated P; momentum switches at the same point.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Larger inputs are subsampled, stratified by disease.
    pub max_points: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            max_points: 2000,
        }
    }
}

impl TsneOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity > 0.0) || !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) {
            return Err(Error::Config(
                "t-SNE perplexity and learning_rate must be positive, early_exaggeration >= 1".into(),
            ));
        }
        if self.iterations == 0 || self.max_points < 4 {
            return Err(Error::Config("t-SNE needs iterations > 0 and max_points >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D<T> {
    pub coords: Matrix<T>,
    /// Perplexity actually used after capping at `(n - 1) / 3`.
    pub perplexity: f64,
    pub seed: u64,
    pub iterations: usize,
    /// `(iteration, KL divergence)` every 50 iterations and for each of the last 100.
    pub kl_trace: Vec<(usize, T)>,
}

const BISECTION_TOL: f64 = 1e-5;
const BISECTION_STEPS: usize = 50;
const P_FLOOR: f64 = 1e-12;

/// Fixed-point accumulator (2^-64 resolution) held as two wrapping i64 limbs.
/// Each term is truncated on its own and integer addition is associative, so
/// the total does not depend on summation order: duplicated rows get
/// bit-identical gradients and permuted inputs give permuted outputs exactly.
/// Terms must stay below 2^31 in magnitude.
#[derive(Clone, Copy, Default)]
struct OrderFree {
    hi: i64,
    lo: i64,
}

impl OrderFree {
    const HALF: f64 = 4_294_967_296.0;

    fn term(x: f64) -> Self {
        let a = x * Self::HALF;
        // `as` truncates toward zero and a - hi is exact, so term(-x) == -term(x).
        let hi = a as i64;
        Self {
            hi,
            lo: ((a - hi as f64) * Self::HALF) as i64,
        }
    }

    fn add_term(&mut self, t: Self) {
        self.hi = self.hi.wrapping_add(t.hi);
        self.lo = self.lo.wrapping_add(t.lo);
    }

    fn add(&mut self, x: f64) {
        self.add_term(Self::term(x));
    }

    fn value(self) -> f64 {
        let lo_carry = self.lo.div_euclid(1 << 32);
        let lo_rem = self.lo.rem_euclid(1 << 32);
        let hi = self.hi.wrapping_add(lo_carry);
        hi as f64 / Self::HALF + lo_rem as f64 / (Self::HALF * Self::HALF)
    }

    fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
        let mut acc = Self::default();
        xs.into_iter().for_each(|x| acc.add(x));
        acc.value()
    }
}

/// Single-limb fixed point for sums with a known magnitude bound: `term`
/// truncates x * 2^shift and the caller keeps the exact total below 2^63.
#[derive(Clone, Copy)]
struct Fixed {
    scale: f64,
}

impl Fixed {
    fn with_bound(bound: f64) -> Self {
        let shift = 62 - bound.max(1.0).log2().ceil() as i32;
        Self { scale: 2f64.powi(shift.min(62)) }
    }

    fn term(self, x: f64) -> i64 {
        (x * self.scale) as i64
    }

    fn value(self, acc: i64) -> f64 {
        acc as f64 / self.scale
    }
}

fn sq_distances<T: Scalar>(points: &Matrix<T>) -> Vec<f64> {
    let n = points.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = sq_euclidean(points.row(i), points.row(j)).as_f64();
        }
    }
    d
}

fn conditional_rows(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let di = &d[i * n..(i + 1) * n];
        let dmin = (0..n).filter(|&j| j != i).map(|j| di[j]).fold(f64::INFINITY, f64::min);
        let row = &mut p[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..BISECTION_STEPS {
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * (di[j] - dmin)).exp() };
            }
            let sum = OrderFree::sum(row.iter().copied());
            let weighted = OrderFree::sum((0..n).map(|j| (di[j] - dmin) * row[j]));
            let entropy = sum.ln() + beta * weighted / sum;
            row.iter_mut().for_each(|v| *v /= sum);
            let diff = entropy - target;
            if diff.abs() < BISECTION_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_infinite() { beta / 2.0 } else { (beta + lo) / 2.0 };
            }
        }
    }
    p
}

fn joint_from_conditional(c: &[f64], n: usize) -> Vec<f64> {
    let denom = (2 * n) as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / denom;
        }
    }
    p
}

/// Row-conditional affinities `p_{j|i}` at the given perplexity; each row sums to 1.
pub fn conditional_probabilities<T: Scalar>(points: &Matrix<T>, perplexity: f64) -> Matrix<T> {
    let n = points.nrows();
    let c = conditional_rows(&sq_distances(points), n, perplexity);
    Matrix::from_vec(n, n, c.into_iter().map(T::of).collect())
}

/// Symmetrized joint affinities `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_probabilities<T: Scalar>(points: &Matrix<T>, perplexity: f64) -> Matrix<T> {
    let n = points.nrows();
    let c = conditional_rows(&sq_distances(points), n, perplexity);
    Matrix::from_vec(n, n, joint_from_conditional(&c, n).into_iter().map(T::of).collect())
}

/// First two principal axes of the input, scaled so the first has standard
/// deviation 1e-4. A degenerate axis gets seeded jitter instead.
fn initial_layout<T: Scalar>(points: &Matrix<T>, seed: u64) -> Vec<f64> {
    let n = points.nrows();
    let p = points.ncols();
    let x: Vec<f64> = points.as_slice().iter().map(|v| v.as_f64()).collect();
    let mean: Vec<f64> = (0..p).map(|j| OrderFree::sum((0..n).map(|i| x[i * p + j])) / n as f64).collect();
    let mut cov = vec![0.0; p * p];
    for a in 0..p {
        for b in a..p {
            let v = OrderFree::sum((0..n).map(|i| (x[i * p + a] - mean[a]) * (x[i * p + b] - mean[b])));
            cov[a * p + b] = v;
            cov[b * p + a] = v;
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));

    let mut cols: Vec<Vec<f64>> = (0..2)
        .map(|axis| {
            let Some(&k) = order.get(axis) else { return vec![0.0; n] };
            let mut w: Vec<f64> = (0..p).map(|j| vecs[j * p + k]).collect();
            let lead = (0..p).fold(0, |best, j| if w[j].abs() > w[best].abs() { j } else { best });
            if w[lead] < 0.0 {
                w.iter_mut().for_each(|v| *v = -*v);
            }
            (0..n)
                .map(|i| (0..p).map(|j| (x[i * p + j] - mean[j]) * w[j]).sum())
                .collect()
        })
        .collect();
    let sd = |c: &[f64]| {
        let m = OrderFree::sum(c.iter().copied()) / n as f64;
        (OrderFree::sum(c.iter().map(|v| (v - m).powi(2))) / n as f64).sqrt()
    };
    let scale = sd(&cols[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for col in &mut cols {
        if scale > 1e-12 && sd(col) > 1e-12 * scale {
            col.iter_mut().for_each(|v| *v /= scale);
        } else {
            col.iter_mut().for_each(|v| *v = noise.sample(&mut rng));
        }
    }
    let mut y = vec![0.0; 2 * n];
    for (axis, col) in cols.iter().enumerate() {
        for i in 0..n {
            y[2 * i + axis] = col[i] * 1e-4;
        }
    }
    y
}

/// Exact t-SNE. `seed` only matters when an initial PCA axis is degenerate.
pub fn tsne_embed<T: Scalar>(points: &Matrix<T>, options: &TsneOptions, seed: u64) -> Result<Embedding2D<T>> {
    options.validate()?;
    let n = points.nrows();
    if n < 4 {
        return Err(Error::InvalidParameter(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let perplexity = options.perplexity.min((n - 1) as f64 / 3.0);
    let p = joint_from_conditional(&conditional_rows(&sq_distances(points), n, perplexity), n);
    // P and Q are symmetric, so sums over i != j are twice the upper triangle.
    let upper = || (0..n).flat_map(move |i| (i + 1..n).map(move |j| i * n + j));
    let p_log_p = 2.0
        * OrderFree::sum(upper().map(|idx| {
            let v = p[idx].max(P_FLOOR);
            v * v.ln()
        }));

    let mut y = initial_layout(points, seed);
    let mut update = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut kl_trace = Vec::new();
    // q <= 1 gives Z <= n^2 / 2. Each gradient term is bounded by
    // (exag * p_ij + q / Z) * q * |d| with q * |d| <= 1/2 and the p_ij summing to 1.
    let z_fixed = Fixed::with_bound((n * n) as f64 / 2.0);
    let g_fixed = Fixed::with_bound(options.early_exaggeration.max(1.0) + 1.0);

    for it in 0..options.iterations {
        let exaggerated = it < options.exaggeration_iters;
        let exag = if exaggerated { options.early_exaggeration } else { 1.0 };
        let momentum = if exaggerated { options.initial_momentum } else { options.final_momentum };

        let mut z = 0i64;
        for i in 0..n {
            let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
            let row = &mut num[i * n + i + 1..(i + 1) * n];
            for (q, yj) in row.iter_mut().zip(y[2 * i + 2..].chunks_exact(2)) {
                let dx = yi0 - yj[0];
                let dy = yi1 - yj[1];
                *q = 1.0 / (1.0 + dx * dx + dy * dy);
                z = z.wrapping_add(z_fixed.term(*q));
            }
        }
        let inv_z = 1.0 / (2.0 * z_fixed.value(z));
        let mut grad = vec![0i64; 2 * n];
        for i in 0..n {
            let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
            let range = i * n + i + 1..(i + 1) * n;
            let (mut gxi, mut gyi) = (0i64, 0i64);
            let (head, tail) = grad.split_at_mut(2 * i + 2);
            for ((&q, &pij), (yj, gj)) in num[range.clone()]
                .iter()
                .zip(&p[range])
                .zip(y[2 * i + 2..].chunks_exact(2).zip(tail.chunks_exact_mut(2)))
            {
                let m = (exag * pij - q * inv_z) * q;
                let gx = g_fixed.term(m * (yi0 - yj[0]));
                let gy = g_fixed.term(m * (yi1 - yj[1]));
                gxi = gxi.wrapping_add(gx);
                gyi = gyi.wrapping_add(gy);
                gj[0] = gj[0].wrapping_sub(gx);
                gj[1] = gj[1].wrapping_sub(gy);
            }
            head[2 * i] = head[2 * i].wrapping_add(gxi);
            head[2 * i + 1] = head[2 * i + 1].wrapping_add(gyi);
        }
        if it % 50 == 0 || it + 100 >= options.iterations {
            let p_log_q = 2.0
                * OrderFree::sum(
                    upper().map(|idx| p[idx].max(P_FLOOR) * (num[idx] * inv_z).max(P_FLOOR).ln()),
                );
            kl_trace.push((it, T::of(p_log_p - p_log_q)));
        }

        for c in 0..2 * n {
            let g = 4.0 * g_fixed.value(grad[c]);
            update[c] = momentum * update[c] - options.learning_rate * g;
            y[c] += update[c];
        }
        for axis in 0..2 {
            let mean = OrderFree::sum((0..n).map(|i| y[2 * i + axis])) / n as f64;
            (0..n).for_each(|i| y[2 * i + axis] -= mean);
        }
    }
    Ok(Embedding2D {
        coords: Matrix::from_vec(n, 2, y.into_iter().map(T::of).collect()),
        perplexity,
        seed,
        iterations: options.iterations,
        kl_trace,
    })
}

/// At most `max` row indices, ascending, keeping each disease's share
/// (largest-remainder quotas; remainder ties by disease order).
pub fn stratified_subsample(diseases: &[DiseaseLabel], max: usize, seed: u64) -> Vec<usize> {
    let n = diseases.len();
    if n <= max {
        return (0..n).collect();
    }
    let groups: Vec<Vec<usize>> = DiseaseLabel::ALL
        .iter()
        .map(|&d| (0..n).filter(|&i| diseases[i] == d).collect())
        .collect();
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * max as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).partial_cmp(&(exact[a] - exact[a].floor())).unwrap().then(a.cmp(&b)));
    let mut left = max - quota.iter().sum::<usize>();
    for g in order {
        if left == 0 {
            break;
        }
        if quota[g] < groups[g].len() {
            quota[g] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(max);
    for (g, q) in groups.into_iter().zip(quota) {
        let mut g = g;
        g.shuffle(&mut rng);
        out.extend(g.into_iter().take(q));
    }
    out.sort_unstable();
    out
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#393b79",
    "#637939", "#843c39",
];
const NOISE_COLOR: &str = "#b0b0b0";
const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

fn check_lengths(n: usize, labels: &[i32], diseases: &[DiseaseLabel]) -> Result<()> {
    for len in [labels.len(), diseases.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, found: len });
        }
    }
    Ok(())
}

/// Scatter plot colored by cluster, one annotation per non-noise cluster at
/// its centroid: dominant disease, share and cluster size.
pub fn render_svg<T: Scalar>(coords: &Matrix<T>, labels: &[i32], diseases: &[DiseaseLabel], title: &str) -> Result<String> {
    let n = coords.nrows();
    check_lengths(n, labels, diseases)?;
    let xs: Vec<f64> = (0..n).map(|i| coords.get(i, 0).as_f64()).collect();
    let ys: Vec<f64> = (0..n).map(|i| coords.get(i, 1).as_f64()).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let range = (x1 - x0).max(y1 - y0);
    let scale = if range > 0.0 { (SIZE - 2.0 * MARGIN) / range } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - y0) * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        xml_escape(title)
    );
    for i in 0..n {
        let color = if labels[i] == NOISE { NOISE_COLOR } else { PALETTE[labels[i] as usize % PALETTE.len()] };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.8"/>"#,
            px(xs[i]),
            py(ys[i])
        );
    }
    let assignment = ClusterAssignment {
        labels: labels.to_vec(),
        n_clusters: 0,
        algorithm: Algorithm::Kmeans,
    };
    for c in cluster_composition(&assignment, diseases)?.iter().filter(|c| !c.is_noise()) {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c.cluster).collect();
        let cx = members.iter().map(|&i| px(xs[i])).sum::<f64>() / members.len() as f64;
        let cy = members.iter().map(|&i| py(ys[i])).sum::<f64>() / members.len() as f64;
        let _ = writeln!(
            svg,
            r##"<text x="{cx:.2}" y="{cy:.2}" font-family="sans-serif" font-size="12" font-weight="bold" text-anchor="middle" stroke="white" stroke-width="3" paint-order="stroke" fill="#202020">{}</text>"##,
            xml_escape(&c.annotation())
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// CSV with header `x,y,cluster,disease`.
pub fn render_scatter_csv<T: Scalar>(coords: &Matrix<T>, labels: &[i32], diseases: &[DiseaseLabel]) -> Result<String> {
    check_lengths(coords.nrows(), labels, diseases)?;
    let mut out = String::from("x,y,cluster,disease\n");
    for i in 0..coords.nrows() {
        let _ = writeln!(out, "{},{},{},{}", coords.get(i, 0), coords.get(i, 1), labels[i], diseases[i]);
    }
    Ok(out)
}

/// Writes the SVG scatter and its companion CSV.
pub fn emit_scatter<T: Scalar>(
    coords: &Matrix<T>,
    labels: &[i32],
    diseases: &[DiseaseLabel],
    title: &str,
    svg_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    std::fs::write(svg_path, render_svg(coords, labels, diseases, title)?)?;
    std::fs::write(csv_path, render_scatter_csv(coords, labels, diseases)?)?;
    Ok(())
}
