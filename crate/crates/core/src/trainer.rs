//! Forward and analytic backward pass through the LoRA-MoE model, restricted
//! trainability (assigned expert plus router only), AdamW, and the local
//! mini-batch loop.
//!
//! The top-M selection mask is treated as a constant during backpropagation
//! (straight-through): gradient reaches the gate only via the softmax scores
//! of the selected slots, while unselected slots pick up gradient solely
//! through the softmax normalization term. Finite-difference checks are
//! therefore only valid at margin-safe inputs, where the selection boundary
//! is not within perturbation reach.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::numcore::{cross_entropy, cross_entropy_grad, Matrix, SeededRng};
use crate::routing::{route_adaptive, route_vanilla, AdaptiveRouter, RoutingDecision};
use crate::synthtasks::Dataset;

/// Per-layer routing mode: the plain single-adapter path used during the
/// initialization phase, a vanilla fixed top-k gate, or the adaptive top-M
/// gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerRouter {
    Single,
    Vanilla { gate: Matrix, k: usize },
    Adaptive(AdaptiveRouter),
}

impl LayerRouter {
    fn route(&self, x: &[f64]) -> Result<RoutingDecision> {
        match self {
            LayerRouter::Single => Ok(RoutingDecision::single()),
            LayerRouter::Vanilla { gate, k } => route_vanilla(gate, x, *k),
            LayerRouter::Adaptive(router) => route_adaptive(router, x),
        }
    }

    fn gate(&self) -> Option<&Matrix> {
        match self {
            LayerRouter::Single => None,
            LayerRouter::Vanilla { gate, .. } => Some(gate),
            LayerRouter::Adaptive(router) => Some(router.gate()),
        }
    }

    fn gate_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            LayerRouter::Single => None,
            LayerRouter::Vanilla { gate, .. } => Some(gate),
            LayerRouter::Adaptive(router) => Some(router.gate_mut()),
        }
    }
}

/// Frozen base weights, per-layer experts and router, and the single expert
/// index this model instance is allowed to train. Layers are chained with
/// tanh between them; the last layer's output is the logit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    base: Vec<Matrix>,
    experts: Vec<Vec<LoraAdapter>>,
    routers: Vec<LayerRouter>,
    owned_expert: usize,
    revision: u64,
}

impl ModelState {
    pub fn new(
        base: Vec<Matrix>,
        experts: Vec<Vec<LoraAdapter>>,
        routers: Vec<LayerRouter>,
        owned_expert: usize,
    ) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::EmptyInput("ModelState::new"));
        }
        if experts.len() != base.len() || routers.len() != base.len() {
            return Err(Error::DimensionMismatch {
                op: "ModelState::new",
                detail: format!(
                    "{} base layers, {} expert layers, {} routers",
                    base.len(),
                    experts.len(),
                    routers.len()
                ),
            });
        }
        for l in 0..base.len() {
            if l + 1 < base.len() && base[l + 1].cols() != base[l].rows() {
                return Err(Error::DimensionMismatch {
                    op: "ModelState::new",
                    detail: format!(
                        "layer {l} outputs {} but layer {} takes {}",
                        base[l].rows(),
                        l + 1,
                        base[l + 1].cols()
                    ),
                });
            }
            let m = experts[l].len();
            if m == 0 || owned_expert >= m {
                return Err(Error::OutOfRange {
                    op: "ModelState::new",
                    detail: format!("owned expert {owned_expert} of {m} at layer {l}"),
                });
            }
            for ad in &experts[l] {
                if ad.in_dim() != base[l].cols() || ad.out_dim() != base[l].rows() {
                    return Err(Error::DimensionMismatch {
                        op: "ModelState::new",
                        detail: format!(
                            "layer {l} adapter is {}x{}, base is {}x{}",
                            ad.out_dim(),
                            ad.in_dim(),
                            base[l].rows(),
                            base[l].cols()
                        ),
                    });
                }
            }
            let router_ok = match &routers[l] {
                LayerRouter::Single => m == 1,
                LayerRouter::Vanilla { gate, k } => {
                    gate.rows() == m && gate.cols() == base[l].cols() && *k >= 1 && *k <= m
                }
                LayerRouter::Adaptive(r) => {
                    r.num_experts() == m
                        && r.assigned_expert() == owned_expert
                        && r.gate().cols() == base[l].cols()
                }
            };
            if !router_ok {
                return Err(Error::InvalidConfig(format!(
                    "router at layer {l} inconsistent with {m} experts"
                )));
            }
        }
        Ok(Self {
            base,
            experts,
            routers,
            owned_expert,
            revision: 0,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.base.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base[0].cols()
    }

    pub fn owned_expert(&self) -> usize {
        self.owned_expert
    }

    pub fn base(&self) -> &[Matrix] {
        &self.base
    }

    pub fn experts(&self) -> &[Vec<LoraAdapter>] {
        &self.experts
    }

    pub fn routers(&self) -> &[LayerRouter] {
        &self.routers
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// The client's upload: its owned adapter per layer plus router params.
    pub fn owned_adapters(&self) -> Vec<LoraAdapter> {
        self.experts
            .iter()
            .map(|layer| layer[self.owned_expert].clone())
            .collect()
    }

    pub fn router_params(&self) -> Vec<LayerRouter> {
        self.routers.clone()
    }

    /// Logits plus everything backward needs. The cache is tied to the current
    /// parameter revision and goes stale after any optimizer step.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "ModelState::forward",
                detail: format!(
                    "input length {} vs model input dim {}",
                    x.len(),
                    self.input_dim()
                ),
            });
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut activations = Vec::with_capacity(last);
        let mut decisions = Vec::with_capacity(self.num_layers());
        let mut v = x.to_vec();
        let mut logits = Vec::new();
        for l in 0..self.num_layers() {
            let decision = self.routers[l].route(&v)?;
            let y =
                crate::routing::moe_layer_forward(&self.base[l], &self.experts[l], &decision, &v)?;
            inputs.push(std::mem::take(&mut v));
            decisions.push(decision);
            if l < last {
                let h: Vec<f64> = y.iter().map(|t| t.tanh()).collect();
                activations.push(h.clone());
                v = h;
            } else {
                logits = y;
            }
        }
        let cache = ForwardCache {
            revision: self.revision,
            inputs,
            activations,
            decisions,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Exact chain rule back to the owned expert's A and B and the router
    /// gate, holding the top-M selection fixed. Other experts' parameters get
    /// no gradient by construction.
    pub fn backward(&self, cache: &ForwardCache, dloss_dlogits: &[f64]) -> Result<Gradients> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache {
                model: self.revision,
                cache: cache.revision,
            });
        }
        let last = self.num_layers() - 1;
        if dloss_dlogits.len() != self.base[last].rows() {
            return Err(Error::DimensionMismatch {
                op: "ModelState::backward",
                detail: format!(
                    "{} logit grads for {} outputs",
                    dloss_dlogits.len(),
                    self.base[last].rows()
                ),
            });
        }
        let mut grads = Gradients::zeros_like(self)?;
        let mut upstream = dloss_dlogits.to_vec();
        for l in (0..self.num_layers()).rev() {
            let gy: Vec<f64> = if l < last {
                // Through tanh: dL/dy = dL/dh * (1 - h^2).
                cache.activations[l]
                    .iter()
                    .zip(&upstream)
                    .map(|(h, g)| g * (1.0 - h * h))
                    .collect()
            } else {
                upstream.clone()
            };
            let v = &cache.inputs[l];
            let decision = &cache.decisions[l];
            let layer_grads = &mut grads.layers[l];

            let own = &self.experts[l][self.owned_expert];
            let w_own = decision.effective_weight[self.owned_expert];
            if w_own != 0.0 {
                let ax = own.a().matvec(v)?;
                layer_grads.b.add_scaled_outer(&gy, &ax, w_own)?;
                let btg = own.b().tr_matvec(&gy)?;
                layer_grads.a.add_scaled_outer(&btg, v, w_own)?;
            }

            // Router gradient via the selected softmax entries.
            let mut dz: Option<Vec<f64>> = None;
            if self.routers[l].gate().is_some() {
                let expert_of = |slot: usize| match &self.routers[l] {
                    LayerRouter::Adaptive(r) => r.slot_expert(slot),
                    _ => slot,
                };
                let mut contrib: Vec<Option<Vec<f64>>> = vec![None; self.experts[l].len()];
                let mut u = vec![0.0; decision.scores.len()];
                for &slot in &decision.selected {
                    let e = expert_of(slot);
                    if contrib[e].is_none() {
                        contrib[e] = Some(crate::lora::adapter_forward(&self.experts[l][e], v)?);
                    }
                    u[slot] = contrib[e]
                        .as_ref()
                        .expect("just filled")
                        .iter()
                        .zip(&gy)
                        .map(|(c, g)| c * g)
                        .sum();
                }
                let weighted: f64 = u.iter().zip(&decision.scores).map(|(ui, wi)| ui * wi).sum();
                let d: Vec<f64> = u
                    .iter()
                    .zip(&decision.scores)
                    .map(|(ui, wi)| wi * (ui - weighted))
                    .collect();
                let g_grad = layer_grads
                    .router
                    .as_mut()
                    .expect("router grad slot exists");
                g_grad.add_scaled_outer(&d, v, 1.0)?;
                dz = Some(d);
            }

            if l > 0 {
                let mut dv = self.base[l].tr_matvec(&gy)?;
                for (e, ad) in self.experts[l].iter().enumerate() {
                    let w = decision.effective_weight[e];
                    if w == 0.0 {
                        continue;
                    }
                    let btg = ad.b().tr_matvec(&gy)?;
                    let atbtg = ad.a().tr_matvec(&btg)?;
                    for (o, t) in dv.iter_mut().zip(&atbtg) {
                        *o += w * t;
                    }
                }
                if let (Some(d), Some(gate)) = (&dz, self.routers[l].gate()) {
                    let gtd = gate.tr_matvec(d)?;
                    for (o, t) in dv.iter_mut().zip(&gtd) {
                        *o += t;
                    }
                }
                upstream = dv;
            }
        }
        Ok(grads)
    }

    /// Applies gradient matrices to the trainable tensors (owned expert A/B
    /// and router gate per layer) and invalidates outstanding caches.
    fn apply_gradients(&mut self, grads: &Gradients, opt: &mut OptState) -> Result<()> {
        if grads.layers.len() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                op: "apply_gradients",
                detail: format!(
                    "{} grad layers for {} model layers",
                    grads.layers.len(),
                    self.num_layers()
                ),
            });
        }
        opt.step += 1;
        let hp = opt.hyper.clone();
        for (l, lg) in grads.layers.iter().enumerate() {
            let slot = &mut opt.slots[l];
            let own = &mut self.experts[l][self.owned_expert];
            optimizer_step(
                &format!("layer{l}.a"),
                own.a_mut(),
                &lg.a,
                &mut slot.a,
                opt.step,
                &hp,
                hp.weight_decay,
            )?;
            optimizer_step(
                &format!("layer{l}.b"),
                own.b_mut(),
                &lg.b,
                &mut slot.b,
                opt.step,
                &hp,
                hp.weight_decay,
            )?;
            if let Some(rg) = &lg.router {
                let gate = self.routers[l].gate_mut().ok_or_else(|| {
                    Error::InvalidConfig(format!("router grad for ungated layer {l}"))
                })?;
                let moments = slot.router.as_mut().expect("router moments exist");
                optimizer_step(
                    &format!("layer{l}.g"),
                    gate,
                    rg,
                    moments,
                    opt.step,
                    &hp,
                    hp.router_weight_decay,
                )?;
            }
        }
        self.revision += 1;
        Ok(())
    }
}

/// Activations, routing decisions, and softmax scores captured by a forward
/// pass for use in backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    inputs: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
    decisions: Vec<RoutingDecision>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn decisions(&self) -> &[RoutingDecision] {
        &self.decisions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Gradient matrices for the trainable tensors, one entry per layer. Only the
/// owned expert is represented.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub a: Matrix,
    pub b: Matrix,
    pub router: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Result<Self> {
        let layers = (0..model.num_layers())
            .map(|l| {
                let own = &model.experts[l][model.owned_expert];
                LayerGrads {
                    a: Matrix::zeros(own.rank(), own.in_dim()),
                    b: Matrix::zeros(own.out_dim(), own.rank()),
                    router: model.routers[l]
                        .gate()
                        .map(|g| Matrix::zeros(g.rows(), g.cols())),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.a.add_scaled(&theirs.a, scale)?;
            mine.b.add_scaled(&theirs.b, scale)?;
            if let (Some(m), Some(t)) = (&mut mine.router, &theirs.router) {
                m.add_scaled(t, scale)?;
            }
        }
        Ok(())
    }
}

/// AdamW hyperparameters. Weight decay is decoupled (applied to parameters,
/// not folded into gradients); the router can be decayed independently of the
/// adapter matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub router_weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            router_weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators for one tensor.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    m: Matrix,
    v: Matrix,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn optimizer_step(
    name: &str,
    param: &mut Matrix,
    grad: &Matrix,
    moments: &mut AdamMoments,
    step: u64,
    hp: &AdamHyper,
    decay: f64,
) -> Result<()> {
    if grad.rows() != param.rows() || grad.cols() != param.cols() {
        return Err(Error::DimensionMismatch {
            op: "optimizer_step",
            detail: format!(
                "{name}: grad {}x{} for param {}x{}",
                grad.rows(),
                grad.cols(),
                param.rows(),
                param.cols()
            ),
        });
    }
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient for {name}")));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let lr = hp.learning_rate;
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let old = p[i];
        p[i] = old - lr * m_hat / (v_hat.sqrt() + hp.epsilon) - lr * decay * old;
    }
    Ok(())
}

/// Optimizer state for one model's trainable tensors.
#[derive(Debug, Clone)]
pub struct OptState {
    hyper: AdamHyper,
    step: u64,
    slots: Vec<LayerSlots>,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    a: AdamMoments,
    b: AdamMoments,
    router: Option<AdamMoments>,
}

impl OptState {
    pub fn new(model: &ModelState, hyper: AdamHyper) -> Self {
        let slots = (0..model.num_layers())
            .map(|l| {
                let own = &model.experts[l][model.owned_expert];
                LayerSlots {
                    a: AdamMoments::zeros(own.rank(), own.in_dim()),
                    b: AdamMoments::zeros(own.out_dim(), own.rank()),
                    router: model.routers[l]
                        .gate()
                        .map(|g| AdamMoments::zeros(g.rows(), g.cols())),
                }
            })
            .collect();
        Self {
            hyper,
            step: 0,
            slots,
        }
    }
}

/// Per-epoch mean training losses from one local training call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Mini-batch training over the dataset's train split with seeded shuffling.
/// Only the owned expert and router change; zero epochs is a no-op.
pub fn local_train(
    model: &mut ModelState,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    opt: &mut OptState,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let inputs = data.train_inputs();
    let labels = data.train_labels();
    if inputs.is_empty() {
        return Err(Error::EmptyInput("local_train"));
    }
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_grads = Gradients::zeros_like(model)?;
            for &i in chunk {
                let (logits, cache) = model.forward(&inputs[i])?;
                loss_sum += cross_entropy(&logits, labels[i])?;
                let dl = cross_entropy_grad(&logits, labels[i])?;
                let g = model.backward(&cache, &dl)?;
                batch_grads.add_scaled(&g, inv)?;
            }
            model.apply_gradients(&batch_grads, opt)?;
        }
        epoch_losses.push(loss_sum / inputs.len() as f64);
    }
    Ok(TrainReport { epoch_losses })
}

/// Relative disagreement used by the gradient checker; the floor keeps
/// float noise on exactly-zero gradients from registering as error.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// True when every routing decision along the forward pass has a selection
/// gap exceeding 1e-3 of the score range, so the discrete selection cannot
/// flip under finite-difference perturbations.
pub fn margin_safe(model: &ModelState, x: &[f64]) -> Result<bool> {
    let (_, cache) = model.forward(x)?;
    for d in cache.decisions() {
        let k = d.selected.len();
        if k == d.scores.len() {
            continue;
        }
        let mut sorted = d.scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let gap = sorted[k - 1] - sorted[k];
        let range = sorted[0] - sorted[sorted.len() - 1];
        if range <= 0.0 || gap <= 1e-3 * range {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of the cross-entropy loss at `(x, label)`
/// against central differences over every trainable coordinate. With
/// `corrupt` set, one analytic entry is deliberately shifted so callers can
/// verify the check actually fails on wrong gradients.
pub fn gradient_check(
    model: &ModelState,
    x: &[f64],
    label: usize,
    h: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let (logits, cache) = model.forward(x)?;
    let dl = cross_entropy_grad(&logits, label)?;
    let mut analytic = model.backward(&cache, &dl)?;
    if corrupt {
        let a = analytic.layers[0].a.data_mut();
        a[0] += 0.05 + a[0].abs();
    }

    let loss_with = |m: &ModelState| -> Result<f64> {
        let (lg, _) = m.forward(x)?;
        cross_entropy(&lg, label)
    };

    fn tensor_mut(m: &mut ModelState, l: usize, which: usize) -> &mut [f64] {
        let own = m.owned_expert;
        match which {
            0 => m.experts[l][own].a_mut().data_mut(),
            1 => m.experts[l][own].b_mut().data_mut(),
            _ => m.routers[l].gate_mut().expect("gated layer").data_mut(),
        }
    }

    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    let mut probe = model.clone();
    for l in 0..model.num_layers() {
        for which in 0..3 {
            let count = match which {
                0 => analytic.layers[l].a.data().len(),
                1 => analytic.layers[l].b.data().len(),
                _ => analytic.layers[l]
                    .router
                    .as_ref()
                    .map_or(0, |g| g.data().len()),
            };
            for i in 0..count {
                let orig = tensor_mut(&mut probe, l, which)[i];
                tensor_mut(&mut probe, l, which)[i] = orig + h;
                let plus = loss_with(&probe)?;
                tensor_mut(&mut probe, l, which)[i] = orig - h;
                let minus = loss_with(&probe)?;
                tensor_mut(&mut probe, l, which)[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = match which {
                    0 => analytic.layers[l].a.data()[i],
                    1 => analytic.layers[l].b.data()[i],
                    _ => analytic.layers[l]
                        .router
                        .as_ref()
                        .expect("router grad")
                        .data()[i],
                };
                max_rel = max_rel.max(rel_err(an, fd));
                coords += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adapter;

    fn random_model(
        rng: &mut SeededRng,
        dims: &[usize],
        m: usize,
        owned: usize,
        router: &str,
    ) -> ModelState {
        let layers = dims.len() - 1;
        let mut base = Vec::new();
        let mut experts = Vec::new();
        let mut routers = Vec::new();
        for l in 0..layers {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            base.push(rng.gaussian_matrix(d_out, d_in, 1.0 / (d_in as f64).sqrt()));
            let rank = 2.min(d_in).min(d_out);
            experts.push(
                (0..m)
                    .map(|_| {
                        let mut ad = init_adapter(d_in, d_out, rank, rng).unwrap();
                        *ad.b_mut() = rng.gaussian_matrix(d_out, rank, 0.5);
                        ad
                    })
                    .collect(),
            );
            routers.push(match router {
                "single" => LayerRouter::Single,
                "vanilla" => LayerRouter::Vanilla {
                    gate: rng.gaussian_matrix(m, d_in, 1.0),
                    k: 2.min(m),
                },
                _ => LayerRouter::Adaptive(
                    AdaptiveRouter::new(rng.gaussian_matrix(2 * m - 1, d_in, 1.0), owned, m)
                        .unwrap(),
                ),
            });
        }
        ModelState::new(base, experts, routers, owned).unwrap()
    }

    #[test]
    fn zero_experts_zero_router_reduce_to_base() {
        let mut rng = SeededRng::new(1);
        let dims = [5, 4, 3];
        let mut base = Vec::new();
        let mut experts: Vec<Vec<LoraAdapter>> = Vec::new();
        let mut routers = Vec::new();
        for l in 0..2 {
            base.push(rng.gaussian_matrix(dims[l + 1], dims[l], 1.0));
            experts.push(
                (0..3)
                    .map(|_| init_adapter(dims[l], dims[l + 1], 2, &mut rng).unwrap())
                    .collect(),
            );
            routers.push(LayerRouter::Adaptive(
                AdaptiveRouter::zeros(dims[l], 1, 3).unwrap(),
            ));
        }
        let model = ModelState::new(base.clone(), experts, routers, 1).unwrap();
        let x = rng.gaussian_vec(5);
        let (logits, _) = model.forward(&x).unwrap();
        let mut h = base[0].matvec(&x).unwrap();
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let expect = base[1].matvec(&h).unwrap();
        for (a, b) in logits.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_single_expert_moe_equals_plain_lora() {
        let mut rng = SeededRng::new(2);
        let adaptive = random_model(&mut rng, &[4, 3], 1, 0, "adaptive");
        let plain = ModelState::new(
            adaptive.base().to_vec(),
            adaptive.experts().to_vec(),
            vec![LayerRouter::Single],
            0,
        )
        .unwrap();
        let x = rng.gaussian_vec(4);
        let (a, _) = adaptive.forward(&x).unwrap();
        let (b, _) = plain.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_forward_matches_manual_composition() {
        let mut rng = SeededRng::new(3);
        let model = random_model(&mut rng, &[4, 5, 3], 3, 1, "adaptive");
        let x = rng.gaussian_vec(4);
        let (logits, cache) = model.forward(&x).unwrap();

        let d0 = model.routers()[0].route(&x).unwrap();
        let y0 = crate::routing::moe_layer_forward(&model.base()[0], &model.experts()[0], &d0, &x)
            .unwrap();
        let h: Vec<f64> = y0.iter().map(|v| v.tanh()).collect();
        let d1 = model.routers()[1].route(&h).unwrap();
        let y1 = crate::routing::moe_layer_forward(&model.base()[1], &model.experts()[1], &d1, &h)
            .unwrap();
        for (a, b) in logits.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cache.decisions()[0], d0);
        assert_eq!(cache.decisions()[1], d1);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let mut rng = SeededRng::new(4);
        let model = random_model(&mut rng, &[4, 4, 3], 2, 0, "adaptive");
        let x = rng.gaussian_vec(4);
        let (_, cache) = model.forward(&x).unwrap();
        let g = model.backward(&cache, &[0.0, 0.0, 0.0]).unwrap();
        for lg in &g.layers {
            assert!(lg.a.data().iter().all(|v| *v == 0.0));
            assert!(lg.b.data().iter().all(|v| *v == 0.0));
            assert!(lg.router.as_ref().unwrap().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unselected_owned_expert_gets_zero_adapter_grads() {
        // Vanilla top-1 routing with the owned expert's gate row pushed far
        // down: the owned expert is never selected, so its adapter gradient is
        // exactly zero while the router still learns.
        let mut rng = SeededRng::new(5);
        let d_in = 4;
        let base = vec![rng.gaussian_matrix(3, d_in, 1.0)];
        let experts: Vec<LoraAdapter> = (0..2)
            .map(|_| {
                let mut ad = init_adapter(d_in, 3, 2, &mut rng).unwrap();
                *ad.b_mut() = rng.gaussian_matrix(3, 2, 0.5);
                ad
            })
            .collect();
        let mut gate = Matrix::zeros(2, d_in);
        for c in 0..d_in {
            gate.set(0, c, -5.0);
            gate.set(1, c, 5.0);
        }
        let model = ModelState::new(
            base,
            vec![experts],
            vec![LayerRouter::Vanilla { gate, k: 1 }],
            0,
        )
        .unwrap();
        let x = vec![1.0, 0.5, -0.25, 0.75];
        let (logits, cache) = model.forward(&x).unwrap();
        assert_eq!(cache.decisions()[0].unique_experts, vec![1]);
        let dl = cross_entropy_grad(&logits, 0).unwrap();
        let g = model.backward(&cache, &dl).unwrap();
        assert!(g.layers[0].a.data().iter().all(|v| *v == 0.0));
        assert!(g.layers[0].b.data().iter().all(|v| *v == 0.0));
        assert!(g.layers[0]
            .router
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .any(|v| *v != 0.0));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(6);
        let mut checked = 0;
        for kind in ["adaptive", "vanilla", "single"] {
            let m = if kind == "single" { 1 } else { 3 };
            while checked % 10 != 9 {
                let owned = rng.next_usize(m);
                let model = random_model(&mut rng, &[5, 4, 3], m, owned, kind);
                let x = rng.gaussian_vec(5);
                if !margin_safe(&model, &x).unwrap() {
                    continue;
                }
                let label = rng.next_usize(3);
                let report = gradient_check(&model, &x, label, 1e-5, false).unwrap();
                assert!(
                    report.max_rel_err < 1e-5,
                    "{kind}: rel err {} over {} coords",
                    report.max_rel_err,
                    report.coords_checked
                );
                checked += 1;
            }
            checked += 1;
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = SeededRng::new(7);
        let model = random_model(&mut rng, &[4, 4, 3], 2, 0, "adaptive");
        let mut x = rng.gaussian_vec(4);
        while !margin_safe(&model, &x).unwrap() {
            x = rng.gaussian_vec(4);
        }
        let report = gradient_check(&model, &x, 1, 1e-5, true).unwrap();
        assert!(
            report.max_rel_err > 1e-4,
            "corruption went unnoticed: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = SeededRng::new(8);
        let mut model = random_model(&mut rng, &[4, 3], 2, 0, "adaptive");
        let x = rng.gaussian_vec(4);
        let (logits, cache) = model.forward(&x).unwrap();
        let dl = cross_entropy_grad(&logits, 0).unwrap();
        let grads = model.backward(&cache, &dl).unwrap();
        let mut opt = OptState::new(&model, AdamHyper::default());
        model.apply_gradients(&grads, &mut opt).unwrap();
        assert!(matches!(
            model.backward(&cache, &dl),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn adam_zero_grad_is_identity_without_decay() {
        let mut p = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let orig = p.clone();
        let g = Matrix::zeros(2, 2);
        let mut mom = AdamMoments::zeros(2, 2);
        let hp = AdamHyper::default();
        for step in 1..=5 {
            optimizer_step("t", &mut p, &g, &mut mom, step, &hp, 0.0).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_decay_shrinks_by_expected_factor() {
        let mut p = Matrix::new(1, 1, vec![2.0]).unwrap();
        let g = Matrix::zeros(1, 1);
        let mut mom = AdamMoments::zeros(1, 1);
        let hp = AdamHyper::default();
        let lambda = 0.1;
        optimizer_step("t", &mut p, &g, &mut mom, 1, &hp, lambda).unwrap();
        let expect = 2.0 * (1.0 - hp.learning_rate * lambda);
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_size_tends_to_lr() {
        let mut p = Matrix::new(1, 1, vec![0.0]).unwrap();
        let g = Matrix::new(1, 1, vec![0.37]).unwrap();
        let mut mom = AdamMoments::zeros(1, 1);
        let hp = AdamHyper::default();
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for step in 1..=2000 {
            optimizer_step("t", &mut p, &g, &mut mom, step, &hp, 0.0).unwrap();
            last_step = (p.data()[0] - prev).abs();
            prev = p.data()[0];
        }
        assert!(
            (last_step - hp.learning_rate).abs() < 0.01 * hp.learning_rate,
            "step {last_step}"
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Matrix::zeros(1, 1);
        let mut g = Matrix::zeros(1, 1);
        g.data_mut()[0] = f64::NAN;
        let mut mom = AdamMoments::zeros(1, 1);
        let err = optimizer_step(
            "layer0.b",
            &mut p,
            &g,
            &mut mom,
            1,
            &AdamHyper::default(),
            0.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer0.b"));
    }

    fn training_setup(seed: u64) -> (ModelState, Dataset) {
        let spec = crate::synthtasks::TaskGroupSpec {
            num_groups: 1,
            clients_per_group: vec![1],
            input_dim: 8,
            hidden_dim: 8,
            num_classes: 4,
            teacher_rank: 2,
            residual_scale: 1.0,
            noise_flip_prob: 0.0,
            train_per_client: 120,
            test_per_client: 40,
        };
        let pop = crate::synthtasks::generate_population(&spec, &SeededRng::new(seed)).unwrap();
        let mut rng = SeededRng::new(seed).derive(99);
        let experts: Vec<Vec<LoraAdapter>> = pop
            .base
            .iter()
            .map(|w| vec![init_adapter(w.cols(), w.rows(), 2, &mut rng).unwrap()])
            .collect();
        let routers = vec![LayerRouter::Single; 2];
        let model = ModelState::new(pop.base.clone(), experts, routers, 0).unwrap();
        (model, pop.datasets[0].clone())
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (mut model, data) = training_setup(30);
        let before = model.clone();
        let mut opt = OptState::new(&model, AdamHyper::default());
        let report =
            local_train(&mut model, &data, 0, 32, &mut opt, &mut SeededRng::new(1)).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = |seed: u64| {
            let (mut model, data) = training_setup(31);
            let mut opt = OptState::new(&model, AdamHyper::default());
            local_train(
                &mut model,
                &data,
                2,
                32,
                &mut opt,
                &mut SeededRng::new(seed),
            )
            .unwrap();
            model
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn loss_drops_after_two_epochs_on_planted_data() {
        let mut wins = 0;
        let total = 20;
        for seed in 0..total {
            let (mut model, data) = training_setup(100 + seed);
            let initial: f64 = data
                .train_inputs()
                .iter()
                .zip(data.train_labels())
                .map(|(x, &y)| cross_entropy(&model.forward(x).unwrap().0, y).unwrap())
                .sum::<f64>()
                / data.train_count as f64;
            let mut opt = OptState::new(&model, AdamHyper::default());
            let report = local_train(
                &mut model,
                &data,
                2,
                32,
                &mut opt,
                &mut SeededRng::new(seed),
            )
            .unwrap();
            if report.final_loss().unwrap() < initial {
                wins += 1;
            }
        }
        assert!(wins >= 19, "loss decreased in only {wins}/{total} seeds");
    }

    #[test]
    fn mean_epoch_losses_nonincreasing_early() {
        let seeds = 10;
        let mut sums = [0.0; 3];
        for seed in 0..seeds {
            let (mut model, data) = training_setup(200 + seed);
            let mut opt = OptState::new(&model, AdamHyper::default());
            let report = local_train(
                &mut model,
                &data,
                3,
                32,
                &mut opt,
                &mut SeededRng::new(seed),
            )
            .unwrap();
            for (s, l) in sums.iter_mut().zip(&report.epoch_losses) {
                *s += l;
            }
        }
        assert!(
            sums[0] >= sums[1] && sums[1] >= sums[2],
            "mean epoch losses {sums:?}"
        );
    }

    #[test]
    fn base_and_other_experts_untouched_by_training() {
        let mut rng = SeededRng::new(40);
        let model_src = random_model(&mut rng, &[6, 5, 4], 3, 1, "adaptive");
        let spec = crate::synthtasks::TaskGroupSpec {
            num_groups: 1,
            clients_per_group: vec![1],
            input_dim: 6,
            hidden_dim: 5,
            num_classes: 4,
            teacher_rank: 2,
            residual_scale: 1.0,
            noise_flip_prob: 0.0,
            train_per_client: 60,
            test_per_client: 10,
        };
        let pop = crate::synthtasks::generate_population(&spec, &SeededRng::new(41)).unwrap();
        let mut model = ModelState::new(
            pop.base.clone(),
            model_src.experts().to_vec(),
            model_src.routers().to_vec(),
            1,
        )
        .unwrap();
        let base_before = model.base().to_vec();
        let others_before: Vec<Vec<LoraAdapter>> = model
            .experts()
            .iter()
            .map(|layer| vec![layer[0].clone(), layer[2].clone()])
            .collect();
        let mut opt = OptState::new(&model, AdamHyper::default());
        local_train(
            &mut model,
            &pop.datasets[0],
            2,
            16,
            &mut opt,
            &mut SeededRng::new(42),
        )
        .unwrap();
        assert_eq!(model.base(), &base_before[..]);
        for (layer, before) in model.experts().iter().zip(&others_before) {
            assert_eq!(layer[0], before[0]);
            assert_eq!(layer[2], before[1]);
        }
        // The owned expert did move.
        assert_ne!(model.experts()[0][1], model_src.experts()[0][1]);
    }
}
