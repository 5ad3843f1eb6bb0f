//! Non-learnable prototype clustering on the unit hypersphere.
//!
//! Pixels are softly assigned to prototypes by an entropy-regularized optimal
//! transport plan with equipartition marginals, hardened by argmax, and each
//! prototype is then re-estimated as the normalized mean of its members.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::EmbeddingMap;

/// Default separation threshold reported by [`PrototypeBank::separation_report`].
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    k: usize,
    dim: usize,
    data: Vec<f64>,
    pub tau: f64,
}

impl PrototypeBank {
    pub fn from_rows(k: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {k} prototypes of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self {
            k,
            dim,
            data,
            tau: DEFAULT_TAU,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| dot(self.prototype(j), self.prototype(j)).sqrt())
            .collect()
    }

    /// Fraction of prototype pairs with `|<P_i, P_j>| > tau`.
    pub fn separation_report(&self) -> f64 {
        let mut close = 0usize;
        let mut pairs = 0usize;
        for i in 0..self.k {
            for j in i + 1..self.k {
                pairs += 1;
                if dot(self.prototype(i), self.prototype(j)).abs() > self.tau {
                    close += 1;
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            close as f64 / pairs as f64
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    Zeros,
    Ones,
    Orthogonal,
    Uniform01,
    Normal,
    TruncatedNormal,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "ones" => Ok(Self::Ones),
            "orthogonal" => Ok(Self::Orthogonal),
            "uniform01" => Ok(Self::Uniform01),
            "normal" => Ok(Self::Normal),
            "truncated_normal" => Ok(Self::TruncatedNormal),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zeros => "zeros",
            Self::Ones => "ones",
            Self::Orthogonal => "orthogonal",
            Self::Uniform01 => "uniform01",
            Self::Normal => "normal",
            Self::TruncatedNormal => "truncated_normal",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InitDiagnostics {
    /// Orthogonal init with `k > p` fell back to a low-coherence frame.
    pub orthogonal_fallback: bool,
    pub max_coherence: f64,
}

pub fn init_prototypes(
    strategy: InitStrategy,
    k: usize,
    p: usize,
    seed: u64,
) -> Result<(PrototypeBank, InitDiagnostics)> {
    if k < 2 || p < 2 {
        return Err(Error::InvalidDims { k, p });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut data = vec![0.0; k * p];
    let mut fallback = false;
    match strategy {
        InitStrategy::Zeros => {}
        InitStrategy::Ones => data.fill(1.0),
        InitStrategy::Uniform01 => data.iter_mut().for_each(|x| *x = rng.random::<f64>()),
        InitStrategy::Normal => data.iter_mut().for_each(|x| *x = normal(&mut rng)),
        InitStrategy::TruncatedNormal => data.iter_mut().for_each(|x| *x = normal(&mut rng).clamp(-2.0, 2.0)),
        InitStrategy::Orthogonal => {
            data.iter_mut().for_each(|x| *x = normal(&mut rng));
            if k <= p {
                gram_schmidt(&mut data, k, p);
            } else {
                fallback = true;
                spread_frame(&mut data, k, p);
            }
        }
    }
    if strategy != InitStrategy::Zeros {
        data.chunks_exact_mut(p).for_each(normalize_in_place);
    }
    let bank = PrototypeBank::from_rows(k, p, data)?;
    let mut max_coherence: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            max_coherence = max_coherence.max(dot(bank.prototype(i), bank.prototype(j)).abs());
        }
    }
    Ok((
        bank,
        InitDiagnostics {
            orthogonal_fallback: fallback,
            max_coherence,
        },
    ))
}

/// Orthonormalizes the `k` rows (modified Gram-Schmidt, two passes).
fn gram_schmidt(data: &mut [f64], k: usize, p: usize) {
    for _ in 0..2 {
        for i in 0..k {
            let (done, rest) = data.split_at_mut(i * p);
            let row = &mut rest[..p];
            for prev in done.chunks_exact(p) {
                let d = dot(row, prev);
                row.iter_mut().zip(prev).for_each(|(r, q)| *r -= d * q);
            }
            normalize_in_place(row);
        }
    }
}

/// Pushes `k > p` unit vectors apart by descending the frame potential.
fn spread_frame(data: &mut [f64], k: usize, p: usize) {
    data.chunks_exact_mut(p).for_each(normalize_in_place);
    let step = 0.5 / k as f64;
    for _ in 0..500 {
        let snapshot = data.to_vec();
        for i in 0..k {
            let row_i = &snapshot[i * p..(i + 1) * p];
            let mut grad = vec![0.0; p];
            for j in (0..k).filter(|&j| j != i) {
                let row_j = &snapshot[j * p..(j + 1) * p];
                let c = dot(row_i, row_j);
                grad.iter_mut().zip(row_j).for_each(|(g, q)| *g += c * q);
            }
            let row = &mut data[i * p..(i + 1) * p];
            row.iter_mut().zip(&grad).for_each(|(r, g)| *r -= step * g);
            normalize_in_place(row);
        }
    }
}

/// Dot products between every embedding vector and every prototype, `rows x cols` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} affinity",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.cols..(s + 1) * self.cols]
    }
}

pub fn affinity(embedding: &EmbeddingMap, bank: &PrototypeBank) -> Result<AffinityMatrix> {
    if embedding.dim != bank.dim {
        return Err(Error::DimMismatch(format!(
            "embedding dimension {} vs prototype dimension {}",
            embedding.dim, bank.dim
        )));
    }
    if !embedding.normalized {
        return Err(Error::InvalidParameter("affinity needs a normalized embedding".into()));
    }
    let rows = embedding.pixels();
    let mut values = Vec::with_capacity(rows * bank.k);
    for s in 0..rows {
        let z = embedding.vector(s);
        values.extend((0..bank.k).map(|j| dot(z, bank.prototype(j))));
    }
    Ok(AffinityMatrix {
        rows,
        cols: bank.k,
        values,
    })
}

/// Nonnegative `rows x cols` soft assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// `max(max |row sum - 1|, max |col sum - rows/cols| / rows)` of the returned plan.
    pub violation: f64,
    /// Column log-potentials `g` of the final scaling, usable as a warm start.
    pub col_potentials: Vec<f64>,
}

impl TransportPlan {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.cols..(s + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.values.chunks_exact(self.cols) {
            sums.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        sums
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Stop once the normalized marginal violation is at most this.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Violation above this after `max_iters` is an error.
    pub failure_tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iters: 200,
            failure_tolerance: 1e-3,
        }
    }
}

pub fn sinkhorn_assign(aff: &AffinityMatrix, kappa: f64) -> Result<TransportPlan> {
    sinkhorn_assign_with(aff, kappa, &SinkhornConfig::default())
}

/// [`sinkhorn_solve`] from a cold start, failing with `NotConverged` when the
/// violation after `max_iters` still exceeds `failure_tolerance`.
pub fn sinkhorn_assign_with(aff: &AffinityMatrix, kappa: f64, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let plan = sinkhorn_solve(aff, kappa, cfg, None)?;
    if plan.violation > cfg.failure_tolerance {
        return Err(Error::NotConverged {
            violation: plan.violation,
            iterations: plan.iterations,
        });
    }
    Ok(plan)
}

/// Log-stabilized Sinkhorn-Knopp for `max <T, A> + kappa * H(T)` with row sums 1 and
/// column sums `rows / cols`. Returns the last iterate whatever its violation.
///
/// The plan is kept as `u_s * K_sj * v_j` with `K_sj = exp(A_sj / kappa + f_s + g_j)`;
/// whenever a scaling drifts past `e^±ABSORB` it is folded into the log potentials `f`,
/// `g` and the kernel is rebuilt, so no intermediate ever overflows. `warm_start`
/// seeds the column potentials `g` (see [`TransportPlan::col_potentials`]).
pub fn sinkhorn_solve(
    aff: &AffinityMatrix,
    kappa: f64,
    cfg: &SinkhornConfig,
    warm_start: Option<&[f64]>,
) -> Result<TransportPlan> {
    const ABSORB: f64 = 50.0;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
    }
    let (rows, cols) = (aff.rows, aff.cols);
    if rows == 0 || cols == 0 {
        return Err(Error::DimMismatch("empty affinity matrix".into()));
    }
    if !aff.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("affinity matrix".into()));
    }
    let col_target = rows as f64 / cols as f64;
    let scaled: Vec<f64> = aff.values.iter().map(|a| a / kappa).collect();
    let mut g = match warm_start {
        Some(w) if w.len() == cols && w.iter().all(|x| x.is_finite()) => w.to_vec(),
        _ => vec![0.0; cols],
    };
    let mut f: Vec<f64> = scaled
        .chunks_exact(cols)
        .map(|r| -r.iter().zip(&g).map(|(a, gj)| a + gj).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let build = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut k = Vec::with_capacity(rows * cols);
        for (s, r) in scaled.chunks_exact(cols).enumerate() {
            k.extend(r.iter().zip(g).map(|(a, gj)| (a + f[s] + gj).exp()));
        }
        k
    };
    let mut kernel = build(&f, &g);
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut col_mass = vec![0.0; cols];
    let mut iterations = 0;

    let column_mass = |kernel: &[f64], u: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for (r, &us) in kernel.chunks_exact(cols).zip(u) {
            out.iter_mut().zip(r).for_each(|(o, k)| *o += k * us);
        }
    };

    while iterations < cfg.max_iters {
        iterations += 1;
        column_mass(&kernel, &u, &mut col_mass);
        if col_mass.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            // kernel underflow: take this half-step exactly in the log domain
            absorb(&mut f, &mut g, &mut u, &mut v);
            for j in 0..cols {
                let lse = log_sum_exp((0..rows).map(|s| scaled[s * cols + j] + f[s]));
                g[j] = col_target.ln() - lse;
            }
            kernel = build(&f, &g);
            column_mass(&kernel, &u, &mut col_mass);
        }
        v.iter_mut().zip(&col_mass).for_each(|(vj, m)| *vj = col_target / m);

        let mut row_ok = true;
        for (s, r) in kernel.chunks_exact(cols).enumerate() {
            let m: f64 = r.iter().zip(&v).map(|(k, vj)| k * vj).sum();
            u[s] = 1.0 / m;
            row_ok &= m > 0.0 && u[s].is_finite();
        }
        if !row_ok {
            absorb_cols(&mut g, &mut v);
            for s in 0..rows {
                let lse = log_sum_exp((0..cols).map(|j| scaled[s * cols + j] + g[j]));
                f[s] = -lse;
                u[s] = 1.0;
            }
            kernel = build(&f, &g);
        }

        column_mass(&kernel, &u, &mut col_mass);
        let violation = col_mass
            .iter()
            .zip(&v)
            .map(|(m, vj)| (m * vj - col_target).abs())
            .fold(0.0, f64::max)
            / rows as f64;
        if violation <= cfg.tolerance {
            break;
        }
        let drift = u.iter().chain(&v).map(|x| x.ln().abs()).fold(0.0, f64::max);
        if drift > ABSORB {
            absorb(&mut f, &mut g, &mut u, &mut v);
            kernel = build(&f, &g);
            // re-establish exact rows on the rebuilt kernel
            for (s, r) in kernel.chunks_exact(cols).enumerate() {
                u[s] = 1.0 / r.iter().sum::<f64>();
            }
        }
    }

    let mut values = Vec::with_capacity(rows * cols);
    for (r, &us) in kernel.chunks_exact(cols).zip(&u) {
        values.extend(r.iter().zip(&v).map(|(k, vj)| us * k * vj));
    }
    if !values.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("transport plan".into()));
    }
    let col_potentials = g.iter().zip(&v).map(|(gj, vj)| gj + vj.ln()).collect();
    let mut plan = TransportPlan {
        rows,
        cols,
        values,
        iterations,
        violation: 0.0,
        col_potentials,
    };
    let row_err = plan.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let col_err = plan
        .col_sums()
        .iter()
        .map(|s| (s - col_target).abs())
        .fold(0.0, f64::max)
        / rows as f64;
    plan.violation = row_err.max(col_err);
    Ok(plan)
}

fn absorb(f: &mut [f64], g: &mut [f64], u: &mut [f64], v: &mut [f64]) {
    for (fs, us) in f.iter_mut().zip(u.iter_mut()) {
        if us.is_finite() && *us > 0.0 {
            *fs += us.ln();
        }
        *us = 1.0;
    }
    absorb_cols(g, v);
}

fn absorb_cols(g: &mut [f64], v: &mut [f64]) {
    for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
        if vj.is_finite() && *vj > 0.0 {
            *gj += vj.ln();
        }
        *vj = 1.0;
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry of `row`, ties going to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-pixel argmax of the plan, ties to the lowest cluster index.
pub fn harden(plan: &TransportPlan) -> Vec<usize> {
    plan.values.chunks_exact(plan.cols).map(argmax).collect()
}

/// Per-pixel winning prototype by affinity (the final labeling rule).
pub fn nearest_prototype(aff: &AffinityMatrix) -> Vec<usize> {
    aff.values.chunks_exact(aff.cols).map(argmax).collect()
}

pub fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

/// Replaces each prototype by the normalized mean of its members; empty clusters keep
/// their previous prototype.
pub fn update_prototypes(embedding: &EmbeddingMap, labels: &[usize], bank: &PrototypeBank) -> Result<PrototypeBank> {
    if labels.len() != embedding.pixels() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} pixels",
            labels.len(),
            embedding.pixels()
        )));
    }
    if embedding.dim != bank.dim {
        return Err(Error::DimMismatch(format!(
            "embedding dimension {} vs prototype dimension {}",
            embedding.dim, bank.dim
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bank.k) {
        return Err(Error::DimMismatch(format!(
            "label {bad} with only {} prototypes",
            bank.k
        )));
    }
    let dim = bank.dim;
    let mut sums = vec![0.0; bank.k * dim];
    let mut counts = vec![0usize; bank.k];
    for (s, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        sums[l * dim..(l + 1) * dim]
            .iter_mut()
            .zip(embedding.vector(s))
            .for_each(|(a, b)| *a += b);
    }
    let mut next = bank.clone();
    for j in 0..bank.k {
        if counts[j] == 0 {
            continue;
        }
        let row = &mut next.data[j * dim..(j + 1) * dim];
        row.iter_mut()
            .zip(&sums[j * dim..(j + 1) * dim])
            .for_each(|(p, s)| *p = s / counts[j] as f64);
        normalize_in_place(row);
    }
    Ok(next)
}

/// Row-wise softmax of the affinities (temperature 1).
pub fn assignment_distribution(aff: &AffinityMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(aff.values.len());
    for row in aff.values.chunks_exact(aff.cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|a| (a - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= z);
    }
    out
}
