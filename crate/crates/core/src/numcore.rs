//! Deterministic dense linear algebra, softmax/top-k primitives, seeded
//! randomness, and the central-difference oracle used by gradient checks.
//!
//! Everything here is 64-bit floats and plain loops: at desk scale, exact
//! reproducibility and tight test tolerances matter more than speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Entries are validated to be finite on construction, and operations that
/// could overflow re-check their output, so a `Matrix` obtained from the
/// public API never carries NaN or infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                detail: format!(
                    "{}x{} needs {} entries, got {}",
                    rows,
                    cols,
                    rows * cols,
                    data.len()
                ),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Matrix::new entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Fills a matrix from a generator on (row, col).
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Raw mutable access, used by the optimizer and finite-difference probes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                detail: format!(
                    "{}x{} by vector of length {}",
                    self.rows,
                    self.cols,
                    x.len()
                ),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Transposed matrix-vector product `self^T * y`.
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "tr_matvec",
                detail: format!(
                    "{}x{} transposed by vector of length {}",
                    self.rows,
                    self.cols,
                    y.len()
                ),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += yr * a;
            }
        }
        Ok(out)
    }

    /// Accumulates `scale * u * v^T` into `self` (rank-one update).
    pub fn add_scaled_outer(&mut self, u: &[f64], v: &[f64], scale: f64) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "add_scaled_outer",
                detail: format!(
                    "{}x{} target, outer product {}x{}",
                    self.rows,
                    self.cols,
                    u.len(),
                    v.len()
                ),
            });
        }
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let s = scale * ur;
            for (o, &vc) in row.iter_mut().zip(v) {
                *o += s * vc;
            }
        }
        Ok(())
    }

    /// Accumulates `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.check_same_shape("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of squared entrywise differences; building block for round deltas.
    pub fn squared_distance(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape("squared_distance", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Uniform elementwise mean of matrices of identical shape.
    ///
    /// Anchored at the first input (`m0 + mean(mi - m0)`) so that averaging
    /// identical inputs returns them bit-for-bit, which the round protocol's
    /// idempotence guarantees rely on.
    pub fn average(items: &[&Matrix]) -> Result<Matrix> {
        let first = items.first().ok_or(Error::EmptyInput("Matrix::average"))?;
        let inv = 1.0 / items.len() as f64;
        let mut out = (*first).clone();
        for (i, o) in out.data.iter_mut().enumerate() {
            let base = *o;
            let mut acc = 0.0;
            for m in items {
                if m.rows != first.rows || m.cols != first.cols {
                    return Err(Error::DimensionMismatch {
                        op: "Matrix::average",
                        detail: format!("{}x{} vs {}x{}", first.rows, first.cols, m.rows, m.cols),
                    });
                }
                acc += m.data[i] - base;
            }
            *o = base + acc * inv;
        }
        Ok(out)
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op,
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        Ok(())
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            detail: format!("{}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    if let Some(bad) = out.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matmul output entry {bad}")));
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtraction), summing to 1 within 1e-12.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {bad}")));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Indices of the `k` largest entries, ties broken toward the lowest index.
/// The result is ordered by descending value, then ascending index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::OutOfRange {
            op: "top_k_indices",
            detail: format!("k={} with {} entries", k, v.len()),
        });
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| {
        v[j].partial_cmp(&v[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

/// Cosine dissimilarity `1 - u.v / (|u||v|)`, in [0, 2] up to rounding.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "cosine_distance",
            detail: format!("lengths {} vs {}", u.len(), v.len()),
        });
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine_distance"));
    }
    Ok(1.0 - dot / (nu.sqrt() * nv.sqrt()))
}

/// Cross-entropy of a logit vector against an integer class label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::OutOfRange {
            op: "cross_entropy",
            detail: format!("label {} with {} classes", label, logits.len()),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

/// Gradient of [`cross_entropy`] with respect to the logits: softmax minus one-hot.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    let mut g = softmax(logits)?;
    if label >= g.len() {
        return Err(Error::OutOfRange {
            op: "cross_entropy_grad",
            detail: format!("label {} with {} classes", label, g.len()),
        });
    }
    g[label] -= 1.0;
    Ok(g)
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::EmptyInput("argmax"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::OutOfRange {
            op: "finite_diff_grad",
            detail: format!("h={h}"),
        });
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad f at coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic splittable generator (SplitMix64).
///
/// Pinned so that identical seeds give identical draw sequences across runs
/// and platforms; [`SeededRng::derive`] produces statistically independent
/// child streams from a salt, which the harness uses to key per-client and
/// per-round randomness off a single experiment seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `salt`; independent of draws made so far.
    pub fn derive(&self, salt: u64) -> SeededRng {
        SeededRng::new(mix64(self.seed ^ mix64(salt.wrapping_mul(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound), by rejection (no modulo bias).
    pub fn next_usize(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_usize bound must be positive");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal draw via the Marsaglia polar method (sqrt/ln only).
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// Matrix with i.i.d. Gaussian entries of the given standard deviation.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = std * self.next_gaussian();
        }
        m
    }

    /// Vector with i.i.d. standard normal entries.
    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next_gaussian()).collect()
    }
}
