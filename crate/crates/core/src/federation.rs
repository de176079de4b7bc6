//! The two-phase round protocol: initialization (local pretrain, clustering,
//! expert allocation) followed by iterative rounds of local training and
//! within-group aggregation of both experts and routers. Also hosts the
//! baseline strategies and the round-to-round contraction monitor.
//!
//! Every mode runs through the same engine, differing only in how clients are
//! grouped and routed:
//! - `fedlease`: clustering picks the groups; adaptive top-M routers.
//! - `single_lora`: one group holding every client, no router.
//! - `individual_lora`: singleton groups (so "aggregation" keeps each
//!   client's own expert and router verbatim); vanilla routers over all N.
//! - `fixed_topk(k)`: clustering as in `fedlease`, vanilla top-k routers.

use once_cell::sync::Lazy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{pairwise_distance, select_num_experts, ClusterAssignment};
use crate::error::{Error, Result};
use crate::lora::{average_stacks, flatten_b, init_adapter, AdapterStack, LoraAdapter};
use crate::numcore::{Matrix, SeededRng};
use crate::routing::{selection_histogram, AdaptiveRouter, RoutingDecision, SelectionHistogram};
use crate::synthtasks::{generate_population, Dataset, TaskGroupSpec};
use crate::trainer::{local_train, AdamHyper, LayerRouter, ModelState, OptState};

const SALT_POPULATION: u64 = 1;
const SALT_SERVER_INIT: u64 = 2;
const SALT_INIT_TRAIN: u64 = 3;
const SALT_ROUND: u64 = 4;

/// Worker pool for client-parallel sections, sized by `FEDLEASE_THREADS`
/// (read once per process) or the machine's core count.
static CLIENT_POOL: Lazy<rayon::ThreadPool> = Lazy::new(|| {
    let threads = std::env::var("FEDLEASE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("client thread pool")
});

/// Training strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    FedLease,
    SingleLora,
    IndividualLora,
    FixedTopK(usize),
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::FedLease => "fedlease".into(),
            Mode::SingleLora => "single_lora".into(),
            Mode::IndividualLora => "individual_lora".into(),
            Mode::FixedTopK(k) => format!("fixed_topk({k})"),
        }
    }

    pub fn has_router(&self) -> bool {
        !matches!(self, Mode::SingleLora)
    }
}

/// Everything a full run needs; pure data, so a run is a deterministic
/// function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskGroupSpec,
    pub rank: usize,
    pub m_max: usize,
    pub init_epochs: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optim: AdamHyper,
    pub mode: Mode,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be positive".into()));
        }
        if self.m_max < 2 {
            return Err(Error::InvalidConfig("m_max must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if let Mode::FixedTopK(k) = self.mode {
            if k == 0 {
                return Err(Error::InvalidConfig("fixed_topk requires k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Server-side view of one aggregation group's routers, one per layer.
pub type GroupRouters = Vec<LayerRouter>;

/// Aggregated server state after a round: the experts per layer, one router
/// set per group, group membership, and the round counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub groups: Vec<Vec<usize>>,
    pub experts: Vec<Vec<LoraAdapter>>,
    pub routers: Vec<GroupRouters>,
    pub allocation: Option<ClusterAssignment>,
}

impl ServerState {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, client: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&client))
    }
}

/// What one client sends back after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub adapters: Vec<LoraAdapter>,
    pub routers: GroupRouters,
    pub sample_count: usize,
    pub train_loss: f64,
}

/// Per-round metrics: post-aggregation test accuracy and loss per client,
/// per-client per-epoch training losses, the per-group parameter movement,
/// its maximum (the contraction monitor's series), and expert-usage
/// statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub client_accuracy: Vec<f64>,
    pub client_loss: Vec<f64>,
    pub client_train_losses: Vec<Vec<f64>>,
    pub mean_accuracy: f64,
    pub mean_train_loss: f64,
    pub group_deltas: Vec<f64>,
    pub max_delta: f64,
    pub selection: Option<SelectionHistogram>,
}

/// Full run artifact: the per-round reports, the state after allocation, and
/// a snapshot after every round for checkpointing and delta audits.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub initial: ServerState,
    pub snapshots: Vec<ServerState>,
    pub final_client_accuracy: Vec<f64>,
    pub final_mean_accuracy: f64,
}

struct Runtime {
    cfg: RunConfig,
    base: Vec<Matrix>,
    datasets: Vec<Dataset>,
    planted: Vec<usize>,
    root: SeededRng,
}

impl Runtime {
    fn build(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(cfg.seed);
        let pop = generate_population(&cfg.task, &root.derive(SALT_POPULATION))?;
        Ok(Self {
            cfg,
            base: pop.base,
            datasets: pop.datasets,
            planted: pop.planted,
            root,
        })
    }

    fn num_clients(&self) -> usize {
        self.datasets.len()
    }

    /// The shared starting stack broadcast to all clients: Gaussian A, zero B
    /// at every layer.
    fn server_init_stack(&self) -> Result<AdapterStack> {
        let mut rng = self.root.derive(SALT_SERVER_INIT);
        let layers: Result<Vec<LoraAdapter>> = self
            .base
            .iter()
            .map(|w| init_adapter(w.cols(), w.rows(), self.cfg.rank, &mut rng))
            .collect();
        AdapterStack::new(layers?)
    }

    /// Initialization phase: every client trains a private plain-adapter
    /// stack from the common start for `epochs` epochs. Requires at least one
    /// epoch, otherwise every B matrix stays zero and the dissimilarity is
    /// undefined.
    fn init_phase(&self, epochs: usize) -> Result<Vec<AdapterStack>> {
        if epochs == 0 {
            return Err(Error::InvalidConfig(
                "init phase needs at least one epoch so B matrices leave zero".into(),
            ));
        }
        let start = self.server_init_stack()?;
        let results: Vec<Result<AdapterStack>> = CLIENT_POOL.install(|| {
            (0..self.num_clients())
                .into_par_iter()
                .map(|client| {
                    let experts: Vec<Vec<LoraAdapter>> =
                        start.layers().iter().map(|ad| vec![ad.clone()]).collect();
                    let routers = vec![LayerRouter::Single; self.base.len()];
                    let mut model = ModelState::new(self.base.clone(), experts, routers, 0)?;
                    let mut opt = OptState::new(&model, self.cfg.optim.clone());
                    let mut rng = self.root.derive(SALT_INIT_TRAIN).derive(client as u64);
                    local_train(
                        &mut model,
                        &self.datasets[client],
                        epochs,
                        self.cfg.batch_size,
                        &mut opt,
                        &mut rng,
                    )?;
                    AdapterStack::new(model.owned_adapters())
                })
                .collect()
        });
        results.into_iter().collect()
    }

    /// Distance matrix, silhouette-selected expert count, per-group expert
    /// averaging, and zero-initialized adaptive routers.
    fn allocate_experts(&self, stacks: &[AdapterStack]) -> Result<ServerState> {
        if stacks.len() < 2 {
            return Err(Error::InvalidConfig(
                "allocation needs at least 2 clients".into(),
            ));
        }
        let flat: Vec<Vec<Vec<f64>>> = stacks.iter().map(flatten_b).collect();
        let dist = pairwise_distance(&flat)?;
        let assignment = select_num_experts(&dist, self.cfg.m_max.min(stacks.len()))?;
        let groups = assignment.groups();
        self.state_from_groups(groups, stacks, Some(assignment))
    }

    /// Builds the initial server state for a given grouping: group j's expert
    /// is the mean of its members' stacks, and its routers start at zero.
    fn state_from_groups(
        &self,
        groups: Vec<Vec<usize>>,
        member_stacks: &[AdapterStack],
        allocation: Option<ClusterAssignment>,
    ) -> Result<ServerState> {
        let m = groups.len();
        let mut per_group_stacks = Vec::with_capacity(m);
        for members in &groups {
            let refs: Vec<&AdapterStack> = members.iter().map(|&c| &member_stacks[c]).collect();
            per_group_stacks.push(average_stacks(&refs)?);
        }
        let experts: Vec<Vec<LoraAdapter>> = (0..self.base.len())
            .map(|l| {
                per_group_stacks
                    .iter()
                    .map(|s| s.layers()[l].clone())
                    .collect()
            })
            .collect();
        let routers = (0..m)
            .map(|j| self.fresh_routers(j, m))
            .collect::<Result<Vec<GroupRouters>>>()?;
        Ok(ServerState {
            round: 0,
            groups,
            experts,
            routers,
            allocation,
        })
    }

    fn fresh_routers(&self, group: usize, num_groups: usize) -> Result<GroupRouters> {
        self.base
            .iter()
            .map(|w| {
                Ok(match self.cfg.mode {
                    Mode::SingleLora => LayerRouter::Single,
                    Mode::IndividualLora => LayerRouter::Vanilla {
                        gate: Matrix::zeros(num_groups, w.cols()),
                        k: num_groups,
                    },
                    Mode::FixedTopK(k) => {
                        if k > num_groups {
                            return Err(Error::InvalidConfig(format!(
                                "fixed_topk k={k} exceeds the {num_groups} allocated experts"
                            )));
                        }
                        LayerRouter::Vanilla {
                            gate: Matrix::zeros(num_groups, w.cols()),
                            k,
                        }
                    }
                    Mode::FedLease => {
                        LayerRouter::Adaptive(AdaptiveRouter::zeros(w.cols(), group, num_groups)?)
                    }
                })
            })
            .collect()
    }

    fn client_model(&self, server: &ServerState, client: usize) -> Result<(usize, ModelState)> {
        let group = server
            .group_of(client)
            .ok_or_else(|| Error::InvalidConfig(format!("client {client} not in any group")))?;
        let model = ModelState::new(
            self.base.clone(),
            server.experts.clone(),
            server.routers[group].clone(),
            group,
        )?;
        Ok((group, model))
    }

    /// One communication round: broadcast, parallel local training, sorted
    /// within-group aggregation of experts and routers, and the report.
    fn run_round(&self, server: &ServerState, round: usize) -> Result<(ServerState, RoundReport)> {
        let updates: Vec<Result<(ClientUpdate, Vec<f64>)>> = CLIENT_POOL.install(|| {
            (0..self.num_clients())
                .into_par_iter()
                .map(|client| {
                    let (_, mut model) = self.client_model(server, client)?;
                    let mut opt = OptState::new(&model, self.cfg.optim.clone());
                    let mut rng = self
                        .root
                        .derive(SALT_ROUND)
                        .derive(round as u64)
                        .derive(client as u64);
                    let report = local_train(
                        &mut model,
                        &self.datasets[client],
                        self.cfg.local_epochs,
                        self.cfg.batch_size,
                        &mut opt,
                        &mut rng,
                    )?;
                    let update = ClientUpdate {
                        client_id: client,
                        adapters: model.owned_adapters(),
                        routers: model.router_params(),
                        sample_count: self.datasets[client].train_count,
                        train_loss: report.final_loss().unwrap_or(0.0),
                    };
                    Ok((update, report.epoch_losses))
                })
                .collect()
        });
        let mut client_train_losses = Vec::with_capacity(self.num_clients());
        let mut updates_only = Vec::with_capacity(self.num_clients());
        for item in updates {
            let (update, losses) = item?;
            client_train_losses.push(losses);
            updates_only.push(update);
        }
        let updates = updates_only;
        let next = self.aggregate(server, &updates, round)?;

        let mut deltas = Vec::with_capacity(next.num_groups());
        for j in 0..next.num_groups() {
            deltas.push(group_delta(server, &next, j)?);
        }
        let max_delta = deltas.iter().cloned().fold(0.0, f64::max);

        let evals: Vec<Result<(f64, f64, Vec<RoutingDecision>)>> = CLIENT_POOL.install(|| {
            (0..self.num_clients())
                .into_par_iter()
                .map(|client| self.evaluate_client(&next, client))
                .collect()
        });
        let mut client_accuracy = Vec::with_capacity(self.num_clients());
        let mut client_loss = Vec::with_capacity(self.num_clients());
        let mut decisions = Vec::new();
        for e in evals {
            let (acc, loss, mut dec) = e?;
            client_accuracy.push(acc);
            client_loss.push(loss);
            decisions.append(&mut dec);
        }
        let mean_accuracy = client_accuracy.iter().sum::<f64>() / client_accuracy.len() as f64;
        let mean_train_loss =
            updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        let selection = if self.cfg.mode.has_router() {
            Some(selection_histogram(&decisions)?)
        } else {
            None
        };

        let report = RoundReport {
            round,
            client_accuracy,
            client_loss,
            client_train_losses,
            mean_accuracy,
            mean_train_loss,
            group_deltas: deltas,
            max_delta,
            selection,
        };
        Ok((next, report))
    }

    /// Uniform within-group mean of the members' uploads, iterated in client
    /// id order so aggregation is invariant to completion order.
    fn aggregate(
        &self,
        server: &ServerState,
        updates: &[ClientUpdate],
        round: usize,
    ) -> Result<ServerState> {
        let find = |client: usize| -> Result<&ClientUpdate> {
            updates
                .iter()
                .find(|u| u.client_id == client)
                .ok_or(Error::MissingUpdate(client))
        };
        let mut experts = server.experts.clone();
        let mut routers = server.routers.clone();
        for (j, members) in server.groups.iter().enumerate() {
            let mut sorted = members.clone();
            sorted.sort_unstable();
            let uploads: Vec<&ClientUpdate> = sorted
                .iter()
                .map(|&c| find(c))
                .collect::<Result<Vec<_>>>()?;
            for l in 0..self.base.len() {
                let adapters: Vec<&LoraAdapter> = uploads.iter().map(|u| &u.adapters[l]).collect();
                experts[l][j] = crate::lora::average_adapters(&adapters)?;
                routers[j][l] = average_routers(uploads.iter().map(|u| &u.routers[l]))?;
            }
        }
        Ok(ServerState {
            round,
            groups: server.groups.clone(),
            experts,
            routers,
            allocation: server.allocation.clone(),
        })
    }

    fn evaluate_client(
        &self,
        server: &ServerState,
        client: usize,
    ) -> Result<(f64, f64, Vec<RoutingDecision>)> {
        let (_, model) = self.client_model(server, client)?;
        let data = &self.datasets[client];
        let mut decisions = Vec::new();
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (x, &y) in data.test_inputs().iter().zip(data.test_labels()) {
            let (logits, cache) = model.forward(x)?;
            if crate::numcore::argmax(&logits)? == y {
                correct += 1;
            }
            loss += crate::numcore::cross_entropy(&logits, y)?;
            decisions.extend_from_slice(cache.decisions());
        }
        let n = data.test_count as f64;
        Ok((correct as f64 / n, loss / n, decisions))
    }

    fn initial_state(&self) -> Result<ServerState> {
        match self.cfg.mode {
            Mode::FedLease | Mode::FixedTopK(_) => {
                let stacks = self.init_phase(self.cfg.init_epochs)?;
                self.allocate_experts(&stacks)
            }
            Mode::SingleLora => {
                let stack = self.server_init_stack()?;
                let members: Vec<usize> = (0..self.num_clients()).collect();
                let stacks = vec![stack; self.num_clients()];
                self.state_from_groups(vec![members], &stacks, None)
            }
            Mode::IndividualLora => {
                let stack = self.server_init_stack()?;
                let groups: Vec<Vec<usize>> = (0..self.num_clients()).map(|c| vec![c]).collect();
                let stacks = vec![stack; self.num_clients()];
                self.state_from_groups(groups, &stacks, None)
            }
        }
    }

    fn run(&self) -> Result<RunOutput> {
        let initial = self.initial_state()?;
        let mut reports = Vec::with_capacity(self.cfg.rounds);
        let mut snapshots = Vec::with_capacity(self.cfg.rounds);
        let mut state = initial.clone();
        for t in 1..=self.cfg.rounds {
            let (next, report) = self.run_round(&state, t)?;
            snapshots.push(next.clone());
            reports.push(report);
            state = next;
        }
        let (final_client_accuracy, final_mean_accuracy) = match reports.last() {
            Some(r) => (r.client_accuracy.clone(), r.mean_accuracy),
            None => {
                let mut accs = Vec::with_capacity(self.num_clients());
                for c in 0..self.num_clients() {
                    accs.push(self.evaluate_client(&state, c)?.0);
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                (accs, mean)
            }
        };
        Ok(RunOutput {
            reports,
            initial,
            snapshots,
            final_client_accuracy,
            final_mean_accuracy,
        })
    }
}

fn average_routers<'a>(routers: impl Iterator<Item = &'a LayerRouter>) -> Result<LayerRouter> {
    let items: Vec<&LayerRouter> = routers.collect();
    let first = items.first().ok_or(Error::EmptyInput("average_routers"))?;
    match first {
        LayerRouter::Single => Ok(LayerRouter::Single),
        LayerRouter::Vanilla { k, .. } => {
            let gates: Vec<&Matrix> = items
                .iter()
                .map(|r| match r {
                    LayerRouter::Vanilla { gate, .. } => Ok(gate),
                    _ => Err(Error::InvalidConfig(
                        "mixed router kinds in one group".into(),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerRouter::Vanilla {
                gate: Matrix::average(&gates)?,
                k: *k,
            })
        }
        LayerRouter::Adaptive(proto) => {
            let gates: Vec<&Matrix> = items
                .iter()
                .map(|r| match r {
                    LayerRouter::Adaptive(a) => Ok(a.gate()),
                    _ => Err(Error::InvalidConfig(
                        "mixed router kinds in one group".into(),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerRouter::Adaptive(AdaptiveRouter::new(
                Matrix::average(&gates)?,
                proto.assigned_expert(),
                proto.num_experts(),
            )?))
        }
    }
}

/// Frobenius norm over the concatenated difference of one group's expert
/// matrices (A and B per layer) and its router gates.
fn group_delta(prev: &ServerState, next: &ServerState, group: usize) -> Result<f64> {
    let mut acc = 0.0;
    for l in 0..prev.experts.len() {
        acc += prev.experts[l][group]
            .a()
            .squared_distance(next.experts[l][group].a())?;
        acc += prev.experts[l][group]
            .b()
            .squared_distance(next.experts[l][group].b())?;
        match (&prev.routers[group][l], &next.routers[group][l]) {
            (LayerRouter::Single, LayerRouter::Single) => {}
            (LayerRouter::Vanilla { gate: p, .. }, LayerRouter::Vanilla { gate: n, .. }) => {
                acc += p.squared_distance(n)?;
            }
            (LayerRouter::Adaptive(p), LayerRouter::Adaptive(n)) => {
                acc += p.gate().squared_distance(n.gate())?;
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "router kind changed between rounds for group {group}"
                )))
            }
        }
    }
    Ok(acc.sqrt())
}

/// Runs the clustering-allocated adaptive strategy end to end.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::FedLease;
    Runtime::build(cfg)?.run()
}

/// Runs one of the reference strategies (or the main one, if so asked).
pub fn run_baseline(cfg: &RunConfig, mode: Mode) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    Runtime::build(cfg)?.run()
}

/// Runs whatever mode the config names.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    Runtime::build(cfg.clone())?.run()
}

/// Initialization-phase adapters only: per-client stacks after `epochs` of
/// plain local training from the common start. Used by the cluster demo.
pub fn init_phase_stacks(cfg: &RunConfig, epochs: usize) -> Result<Vec<AdapterStack>> {
    Runtime::build(cfg.clone())?.init_phase(epochs)
}

/// Planted group labels for the config's population, for partition audits.
pub fn planted_labels(cfg: &RunConfig) -> Result<Vec<usize>> {
    Ok(Runtime::build(cfg.clone())?.planted)
}

/// The per-client datasets the config's population generates, for inspection
/// dumps. Regeneration is cheap and bit-identical to what a run sees.
pub fn population_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    Ok(Runtime::build(cfg.clone())?.datasets)
}

/// Recomputes one round's group deltas directly from two checkpointed states;
/// lets reports be audited independently of the engine's bookkeeping.
pub fn recompute_deltas(prev: &ServerState, next: &ServerState) -> Result<Vec<f64>> {
    (0..prev.num_groups())
        .map(|j| group_delta(prev, next, j))
        .collect()
}

/// The max-over-groups movement series and its tail behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub deltas: Vec<f64>,
    pub tail_ratio: f64,
}

/// Extracts the per-round max delta series and the geometric mean ratio of
/// successive deltas over the last third of the series. A ratio below one is
/// the empirical signature of the contraction bound; an all-zero tail (as
/// with a zero learning rate) reports a ratio of zero.
pub fn convergence_trace(reports: &[RoundReport]) -> Result<ConvergenceTrace> {
    if reports.len() < 3 {
        return Err(Error::OutOfRange {
            op: "convergence_trace",
            detail: format!("need at least 3 rounds, have {}", reports.len()),
        });
    }
    let deltas: Vec<f64> = reports.iter().map(|r| r.max_delta).collect();
    let tail_start = deltas.len() - (deltas.len() / 3).max(2);
    let tail = &deltas[tail_start..];
    let mut log_sum = 0.0;
    let mut count = 0usize;
    let mut zeros = false;
    for pair in tail.windows(2) {
        if pair[0] == 0.0 || pair[1] == 0.0 {
            zeros = true;
            continue;
        }
        log_sum += (pair[1] / pair[0]).ln();
        count += 1;
    }
    let tail_ratio = if count == 0 {
        if zeros {
            0.0
        } else {
            1.0
        }
    } else {
        (log_sum / count as f64).exp()
    };
    Ok(ConvergenceTrace { deltas, tail_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn tiny_config(seed: u64, mode: Mode) -> RunConfig {
        RunConfig {
            seed,
            task: TaskGroupSpec {
                num_groups: 2,
                clients_per_group: vec![2, 2],
                input_dim: 8,
                hidden_dim: 8,
                num_classes: 3,
                teacher_rank: 2,
                residual_scale: 1.0,
                noise_flip_prob: 0.0,
                train_per_client: 60,
                test_per_client: 30,
            },
            rank: 2,
            m_max: 4,
            init_epochs: 2,
            rounds: 3,
            local_epochs: 1,
            batch_size: 16,
            optim: AdamHyper::default(),
            mode,
        }
    }

    #[test]
    fn init_phase_rejects_zero_epochs() {
        let cfg = tiny_config(1, Mode::FedLease);
        assert!(init_phase_stacks(&cfg, 0).is_err());
    }

    #[test]
    fn same_group_clients_end_up_close() {
        let cfg = tiny_config(2, Mode::FedLease);
        let stacks = init_phase_stacks(&cfg, 2).unwrap();
        let flat: Vec<Vec<Vec<f64>>> = stacks.iter().map(flatten_b).collect();
        let dist = pairwise_distance(&flat).unwrap();
        // Clients 0,1 share a group; 2,3 share the other.
        let intra = (dist.get(0, 1) + dist.get(2, 3)) / 2.0;
        let inter = (dist.get(0, 2) + dist.get(0, 3) + dist.get(1, 2) + dist.get(1, 3)) / 4.0;
        assert!(intra < inter, "intra {intra} vs inter {inter}");
    }

    #[test]
    fn cross_group_distance_dominates_within_group_distance() {
        // The block pattern in the dissimilarity matrix should appear in at
        // least 9 of 10 seeds after the brief initialization phase.
        let mut hits = 0;
        for seed in 0..10u64 {
            let cfg = tiny_config(seed, Mode::FedLease);
            let stacks = init_phase_stacks(&cfg, cfg.init_epochs).unwrap();
            let flat: Vec<Vec<Vec<f64>>> = stacks.iter().map(flatten_b).collect();
            let dist = pairwise_distance(&flat).unwrap();
            let intra = (dist.get(0, 1) + dist.get(2, 3)) / 2.0;
            let inter = (dist.get(0, 2) + dist.get(0, 3) + dist.get(1, 2) + dist.get(1, 3)) / 4.0;
            hits += (inter > intra) as u32;
        }
        assert!(hits >= 9, "block structure in only {hits}/10 seeds");
    }

    #[test]
    fn router_shapes_stay_fixed_for_the_whole_run() {
        let cfg = tiny_config(20, Mode::FedLease);
        let out = run_experiment(&cfg).unwrap();
        let m = out.initial.num_groups();
        for state in std::iter::once(&out.initial).chain(&out.snapshots) {
            for routers in &state.routers {
                for r in routers {
                    match r {
                        LayerRouter::Adaptive(a) => {
                            assert_eq!(a.num_experts(), m);
                            assert_eq!(a.gate().rows(), 2 * m - 1);
                        }
                        _ => panic!("expected adaptive routers"),
                    }
                }
            }
        }
    }

    #[test]
    fn init_epoch_count_changes_distances_not_structure() {
        let cfg = tiny_config(3, Mode::FedLease);
        let one = init_phase_stacks(&cfg, 1).unwrap();
        let two = init_phase_stacks(&cfg, 2).unwrap();
        assert_ne!(one, two);
        for stacks in [&one, &two] {
            let flat: Vec<Vec<Vec<f64>>> = stacks.iter().map(flatten_b).collect();
            let dist = pairwise_distance(&flat).unwrap();
            let labels = crate::clustering::agglomerative_cluster(&dist, 2).unwrap();
            assert_eq!(labels, vec![0, 0, 1, 1]);
        }
    }

    #[test]
    fn allocation_averages_member_stacks() {
        let cfg = tiny_config(4, Mode::FedLease);
        let rt = Runtime::build(cfg).unwrap();
        let stacks = rt.init_phase(2).unwrap();
        let server = rt.allocate_experts(&stacks).unwrap();
        assert_eq!(server.num_groups(), server.experts[0].len());
        for (j, members) in server.groups.iter().enumerate() {
            let refs: Vec<&AdapterStack> = members.iter().map(|&c| &stacks[c]).collect();
            let expect = average_stacks(&refs).unwrap();
            for l in 0..2 {
                assert_eq!(server.experts[l][j], expect.layers()[l]);
            }
        }
        // Adaptive routers start at zero with the group's own expert assigned.
        for (j, routers) in server.routers.iter().enumerate() {
            for r in routers {
                match r {
                    LayerRouter::Adaptive(a) => {
                        assert_eq!(a.assigned_expert(), j);
                        assert!(a.gate().data().iter().all(|v| *v == 0.0));
                    }
                    _ => panic!("expected adaptive routers"),
                }
            }
        }
    }

    #[test]
    fn singleton_cluster_expert_is_member_stack_verbatim() {
        let cfg = tiny_config(5, Mode::IndividualLora);
        let rt = Runtime::build(cfg).unwrap();
        let stack = rt.server_init_stack().unwrap();
        let stacks = vec![stack.clone(); rt.num_clients()];
        let groups: Vec<Vec<usize>> = (0..rt.num_clients()).map(|c| vec![c]).collect();
        let server = rt.state_from_groups(groups, &stacks, None).unwrap();
        for l in 0..2 {
            for j in 0..rt.num_clients() {
                assert_eq!(server.experts[l][j], stack.layers()[l]);
            }
        }
    }

    #[test]
    fn zero_local_epochs_round_is_identity() {
        let mut cfg = tiny_config(6, Mode::FedLease);
        cfg.local_epochs = 0;
        let rt = Runtime::build(cfg).unwrap();
        let initial = rt.initial_state().unwrap();
        let (next, report) = rt.run_round(&initial, 1).unwrap();
        assert_eq!(next.experts, initial.experts);
        assert_eq!(next.routers, initial.routers);
        assert_eq!(report.max_delta, 0.0);
        assert!(report.group_deltas.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn zero_learning_rate_gives_zero_deltas() {
        // With zero learning rate the B matrices never leave zero, so the
        // similarity-based allocation is undefined by contract; the identity
        // property is exercised on the modes with fixed groupings.
        for mode in [Mode::SingleLora, Mode::IndividualLora] {
            let mut cfg = tiny_config(7, mode);
            cfg.optim.learning_rate = 0.0;
            let out = run_experiment(&cfg).unwrap();
            for r in &out.reports {
                assert_eq!(r.max_delta, 0.0);
            }
            let trace = convergence_trace(&out.reports).unwrap();
            assert_eq!(trace.tail_ratio, 0.0);
        }
        let mut cfg = tiny_config(7, Mode::FedLease);
        cfg.optim.learning_rate = 0.0;
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::DegenerateClient { .. })
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny_config(8, Mode::FedLease);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.snapshots.last(), b.snapshots.last());
    }

    #[test]
    fn zero_rounds_returns_allocation_state() {
        let mut cfg = tiny_config(9, Mode::FedLease);
        cfg.rounds = 0;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.reports.is_empty());
        assert!(out.snapshots.is_empty());
        assert_eq!(out.final_client_accuracy.len(), 4);
    }

    #[test]
    fn two_member_aggregation_is_pairwise_mean() {
        let cfg = tiny_config(10, Mode::FedLease);
        let rt = Runtime::build(cfg).unwrap();
        let initial = rt.initial_state().unwrap();
        let (next, _) = rt.run_round(&initial, 1).unwrap();
        // Recompute the aggregation by hand from fresh client training.
        for (j, members) in initial.groups.iter().enumerate() {
            if members.len() != 2 {
                continue;
            }
            let mut uploads = Vec::new();
            for &c in members {
                let (_, mut model) = rt.client_model(&initial, c).unwrap();
                let mut opt = OptState::new(&model, rt.cfg.optim.clone());
                let mut rng = rt.root.derive(SALT_ROUND).derive(1).derive(c as u64);
                local_train(
                    &mut model,
                    &rt.datasets[c],
                    1,
                    rt.cfg.batch_size,
                    &mut opt,
                    &mut rng,
                )
                .unwrap();
                uploads.push(model.owned_adapters());
            }
            for l in 0..2 {
                let expect =
                    crate::lora::average_adapters(&[&uploads[0][l], &uploads[1][l]]).unwrap();
                assert_eq!(next.experts[l][j], expect);
            }
        }
    }

    #[test]
    fn frozen_base_is_conserved_over_a_run() {
        let cfg = tiny_config(11, Mode::FedLease);
        let rt = Runtime::build(cfg.clone()).unwrap();
        let base_before = rt.base.clone();
        let _ = rt.run().unwrap();
        assert_eq!(rt.base, base_before);
        // And the population is a pure function of the config.
        let rt2 = Runtime::build(cfg).unwrap();
        assert_eq!(rt2.base, base_before);
    }

    #[test]
    fn reported_deltas_match_recomputation_from_snapshots() {
        let cfg = tiny_config(12, Mode::FedLease);
        let out = run_experiment(&cfg).unwrap();
        let mut prev = &out.initial;
        for (snap, report) in out.snapshots.iter().zip(&out.reports) {
            let deltas = recompute_deltas(prev, snap).unwrap();
            for (a, b) in deltas.iter().zip(&report.group_deltas) {
                assert!((a - b).abs() < 1e-12);
            }
            prev = snap;
        }
    }

    #[test]
    fn doubling_learning_rate_increases_first_delta() {
        let cfg = tiny_config(13, Mode::FedLease);
        let slow = run_experiment(&cfg).unwrap();
        let mut fast_cfg = cfg;
        fast_cfg.optim.learning_rate *= 2.0;
        let fast = run_experiment(&fast_cfg).unwrap();
        assert!(fast.reports[0].max_delta > slow.reports[0].max_delta);
    }

    #[test]
    fn convergence_trace_needs_three_rounds() {
        let cfg = tiny_config(14, Mode::FedLease);
        let out = run_experiment(&cfg).unwrap();
        assert!(convergence_trace(&out.reports[..2]).is_err());
        assert!(convergence_trace(&out.reports).is_ok());
    }

    #[test]
    fn single_lora_has_no_selection_stats() {
        let cfg = tiny_config(15, Mode::SingleLora);
        let out = run_experiment(&cfg).unwrap();
        assert!(out.reports.iter().all(|r| r.selection.is_none()));
        assert_eq!(out.initial.num_groups(), 1);
    }

    #[test]
    fn individual_lora_keeps_per_client_experts_and_routers() {
        let cfg = tiny_config(16, Mode::IndividualLora);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.initial.num_groups(), 4);
        // Distinct clients' experts diverge with training.
        let last = out.snapshots.last().unwrap();
        assert_ne!(last.experts[0][0], last.experts[0][1]);
        for r in &out.reports {
            assert!(r.selection.is_some());
        }
    }

    #[test]
    fn fixed_topk_rejects_oversized_k() {
        let cfg = tiny_config(17, Mode::FixedTopK(64));
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn client_order_does_not_change_aggregation() {
        // Aggregation walks members in sorted id order, so feeding the same
        // updates permuted produces identical experts bit for bit.
        let cfg = tiny_config(18, Mode::FedLease);
        let rt = Runtime::build(cfg).unwrap();
        let initial = rt.initial_state().unwrap();
        let mut updates = Vec::new();
        for c in 0..rt.num_clients() {
            let (_, mut model) = rt.client_model(&initial, c).unwrap();
            let mut opt = OptState::new(&model, rt.cfg.optim.clone());
            let mut rng = rt.root.derive(SALT_ROUND).derive(1).derive(c as u64);
            local_train(
                &mut model,
                &rt.datasets[c],
                1,
                rt.cfg.batch_size,
                &mut opt,
                &mut rng,
            )
            .unwrap();
            updates.push(ClientUpdate {
                client_id: c,
                adapters: model.owned_adapters(),
                routers: model.router_params(),
                sample_count: rt.datasets[c].train_count,
                train_loss: 0.0,
            });
        }
        let forward = rt.aggregate(&initial, &updates, 1).unwrap();
        updates.reverse();
        let reversed = rt.aggregate(&initial, &updates, 1).unwrap();
        assert_eq!(forward.experts, reversed.experts);
        assert_eq!(forward.routers, reversed.routers);
    }

    #[test]
    fn missing_update_is_an_error() {
        let cfg = tiny_config(19, Mode::FedLease);
        let rt = Runtime::build(cfg).unwrap();
        let initial = rt.initial_state().unwrap();
        let err = rt.aggregate(&initial, &[], 1).unwrap_err();
        assert!(matches!(err, Error::MissingUpdate(_)));
    }
}
