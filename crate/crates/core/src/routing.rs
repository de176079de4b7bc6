//! Mixture-of-experts routing: the vanilla fixed top-k gate and the adaptive
//! top-M gate over an expanded `2M-1` output space.
//!
//! The adaptive router dedicates its first `M` outputs to the client's
//! assigned expert and the remaining `M-1` outputs to the other experts, one
//! each in ascending expert order. Selecting the top `M` of `2M-1` slots then
//! pins the assigned expert by pigeonhole (only `M-1` slots map elsewhere)
//! while letting between 1 and `M` unique experts participate per input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{adapter_forward, LoraAdapter};
use crate::numcore::{softmax, top_k_indices, Matrix};

/// Per-layer adaptive router: gate matrix of shape `(2M-1) x d`, the expert
/// index this client is allowed to train, and the expert count `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRouter {
    g: Matrix,
    assigned_expert: usize,
    num_experts: usize,
}

impl AdaptiveRouter {
    pub fn new(g: Matrix, assigned_expert: usize, num_experts: usize) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::OutOfRange {
                op: "AdaptiveRouter::new",
                detail: "zero experts".into(),
            });
        }
        if g.rows() != 2 * num_experts - 1 {
            return Err(Error::DimensionMismatch {
                op: "AdaptiveRouter::new",
                detail: format!(
                    "gate has {} rows, expected {}",
                    g.rows(),
                    2 * num_experts - 1
                ),
            });
        }
        if assigned_expert >= num_experts {
            return Err(Error::OutOfRange {
                op: "AdaptiveRouter::new",
                detail: format!("assigned expert {assigned_expert} of {num_experts}"),
            });
        }
        Ok(Self {
            g,
            assigned_expert,
            num_experts,
        })
    }

    /// Zero gate: initial routing is uniform over all slots.
    pub fn zeros(input_dim: usize, assigned_expert: usize, num_experts: usize) -> Result<Self> {
        Self::new(
            Matrix::zeros(2 * num_experts - 1, input_dim),
            assigned_expert,
            num_experts,
        )
    }

    pub fn gate(&self) -> &Matrix {
        &self.g
    }

    pub fn gate_mut(&mut self) -> &mut Matrix {
        &mut self.g
    }

    pub fn assigned_expert(&self) -> usize {
        self.assigned_expert
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    /// Expert fed by a given slot: slots below `M` all map to the assigned
    /// expert; the trailing `M-1` slots enumerate the other experts in
    /// ascending index order.
    pub fn slot_expert(&self, slot: usize) -> usize {
        slot_to_expert(self.assigned_expert, self.num_experts, slot)
    }
}

/// Canonical slot layout of the expanded router output space.
pub fn slot_to_expert(assigned_expert: usize, num_experts: usize, slot: usize) -> usize {
    debug_assert!(slot < 2 * num_experts - 1);
    if slot < num_experts {
        assigned_expert
    } else {
        let nth = slot - num_experts;
        if nth < assigned_expert {
            nth
        } else {
            nth + 1
        }
    }
}

/// Outcome of routing one input: softmax slot scores, the selected slots
/// (ordered by descending score, then ascending index), the resulting
/// per-expert weights, and the distinct experts that participate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub effective_weight: Vec<f64>,
    pub unique_experts: Vec<usize>,
}

impl RoutingDecision {
    /// Trivial decision for the plain single-adapter path: one expert,
    /// weight one.
    pub fn single() -> Self {
        Self {
            scores: vec![1.0],
            selected: vec![0],
            effective_weight: vec![1.0],
            unique_experts: vec![0],
        }
    }

    fn from_selection(
        scores: Vec<f64>,
        selected: Vec<usize>,
        num_experts: usize,
        expert_of: impl Fn(usize) -> usize,
    ) -> Self {
        let mut effective_weight = vec![0.0; num_experts];
        for &slot in &selected {
            effective_weight[expert_of(slot)] += scores[slot];
        }
        let unique_experts: Vec<usize> = (0..num_experts)
            .filter(|e| effective_weight[*e] > 0.0)
            .collect();
        Self {
            scores,
            selected,
            effective_weight,
            unique_experts,
        }
    }
}

/// Adaptive top-M routing over the `2M-1` slot space.
pub fn route_adaptive(router: &AdaptiveRouter, x: &[f64]) -> Result<RoutingDecision> {
    let logits = router.g.matvec(x)?;
    let scores = softmax(&logits)?;
    let selected = top_k_indices(&scores, router.num_experts)?;
    Ok(RoutingDecision::from_selection(
        scores,
        selected,
        router.num_experts,
        |s| router.slot_expert(s),
    ))
}

/// Vanilla fixed top-k routing over `M` experts; slot i is expert i, and
/// nothing guarantees that any particular expert is selected.
pub fn route_vanilla(gate: &Matrix, x: &[f64], k: usize) -> Result<RoutingDecision> {
    let num_experts = gate.rows();
    if k == 0 || k > num_experts {
        return Err(Error::OutOfRange {
            op: "route_vanilla",
            detail: format!("k={k} with {num_experts} experts"),
        });
    }
    let logits = gate.matvec(x)?;
    let scores = softmax(&logits)?;
    let selected = top_k_indices(&scores, k)?;
    Ok(RoutingDecision::from_selection(
        scores,
        selected,
        num_experts,
        |s| s,
    ))
}

/// One adapted layer: `y = W0 x + sum_e w_e * B_e A_e x`, with the selected
/// weights applied raw (no renormalization).
pub fn moe_layer_forward(
    w0: &Matrix,
    experts: &[LoraAdapter],
    decision: &RoutingDecision,
    x: &[f64],
) -> Result<Vec<f64>> {
    if decision.effective_weight.len() != experts.len() {
        return Err(Error::DimensionMismatch {
            op: "moe_layer_forward",
            detail: format!(
                "decision covers {} experts, layer has {}",
                decision.effective_weight.len(),
                experts.len()
            ),
        });
    }
    let mut y = w0.matvec(x)?;
    for (expert, &w) in experts.iter().zip(&decision.effective_weight) {
        if w == 0.0 {
            continue;
        }
        let contrib = adapter_forward(expert, x)?;
        for (o, c) in y.iter_mut().zip(&contrib) {
            *o += w * c;
        }
    }
    Ok(y)
}

/// Per-expert participation counts and the mean number of unique experts per
/// decision, for expert-usage reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub expert_counts: Vec<usize>,
    pub mean_unique: f64,
}

/// Tallies unique-expert membership over a batch of routing decisions.
pub fn selection_histogram(decisions: &[RoutingDecision]) -> Result<SelectionHistogram> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput("selection_histogram"));
    }
    let num_experts = decisions
        .iter()
        .map(|d| d.effective_weight.len())
        .max()
        .unwrap_or(0);
    let mut expert_counts = vec![0usize; num_experts];
    let mut unique_total = 0usize;
    for d in decisions {
        unique_total += d.unique_experts.len();
        for &e in &d.unique_experts {
            expert_counts[e] += 1;
        }
    }
    Ok(SelectionHistogram {
        expert_counts,
        mean_unique: unique_total as f64 / decisions.len() as f64,
    })
}
