//! Low-rank adapter pairs: initialization, forward contribution, flattening
//! for similarity analysis, and uniform averaging for aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, SeededRng};

/// One expert's low-rank pair for a single layer: `a` is rank x in_dim,
/// `b` is out_dim x rank. The adapter's contribution to a layer output is
/// `b * (a * x)`, with no extra scaling factor: the effective update to the
/// frozen weights is exactly `B A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::DimensionMismatch {
                op: "LoraAdapter::new",
                detail: format!(
                    "a is {}x{}, b is {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                ),
            });
        }
        let rank = a.rows();
        if rank == 0 || rank > a.cols().min(b.rows()) {
            return Err(Error::OutOfRange {
                op: "LoraAdapter::new",
                detail: format!(
                    "rank {} with in_dim {}, out_dim {}",
                    rank,
                    a.cols(),
                    b.rows()
                ),
            });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }
}

/// Fresh adapter: `a` has i.i.d. Gaussian entries with std `1/sqrt(in_dim)`,
/// `b` is all zeros so the adapter contributes nothing until trained.
pub fn init_adapter(
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    rng: &mut SeededRng,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > in_dim.min(out_dim) {
        return Err(Error::OutOfRange {
            op: "init_adapter",
            detail: format!("rank {} with in_dim {}, out_dim {}", rank, in_dim, out_dim),
        });
    }
    let std = 1.0 / (in_dim as f64).sqrt();
    let a = rng.gaussian_matrix(rank, in_dim, std);
    let b = Matrix::zeros(out_dim, rank);
    LoraAdapter::new(a, b)
}

/// The adapter's residual contribution `b * (a * x)`.
pub fn adapter_forward(adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    let ax = adapter.a.matvec(x)?;
    adapter.b.matvec(&ax)
}

/// Ordered list of adapters, one per adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    layers: Vec<LoraAdapter>,
}

impl AdapterStack {
    pub fn new(layers: Vec<LoraAdapter>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("AdapterStack::new"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LoraAdapter] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Row-major flattening of each layer's B matrix, the similarity signal used
/// for client clustering.
pub fn flatten_b(stack: &AdapterStack) -> Vec<Vec<f64>> {
    stack.layers.iter().map(|ad| ad.b.data().to_vec()).collect()
}

/// Elementwise uniform mean of adapters of identical shape, averaging the A
/// and B matrices separately. Summation is anchored at the first input, so
/// averaging identical adapters is exact; callers fix the input order (the
/// round protocol sorts by client id).
pub fn average_adapters(adapters: &[&LoraAdapter]) -> Result<LoraAdapter> {
    if adapters.is_empty() {
        return Err(Error::EmptyInput("average_adapters"));
    }
    let a: Vec<&Matrix> = adapters.iter().map(|ad| &ad.a).collect();
    let b: Vec<&Matrix> = adapters.iter().map(|ad| &ad.b).collect();
    LoraAdapter::new(Matrix::average(&a)?, Matrix::average(&b)?)
}

/// Per-layer uniform mean over adapter stacks of identical shape.
pub fn average_stacks(stacks: &[&AdapterStack]) -> Result<AdapterStack> {
    let first = stacks.first().ok_or(Error::EmptyInput("average_stacks"))?;
    let mut layers = Vec::with_capacity(first.num_layers());
    for l in 0..first.num_layers() {
        let per_layer: Result<Vec<&LoraAdapter>> = stacks
            .iter()
            .map(|s| {
                s.layers.get(l).ok_or_else(|| Error::DimensionMismatch {
                    op: "average_stacks",
                    detail: format!(
                        "stack has {} layers, expected {}",
                        s.num_layers(),
                        first.num_layers()
                    ),
                })
            })
            .collect();
        layers.push(average_adapters(&per_layer?)?);
    }
    AdapterStack::new(layers)
}
