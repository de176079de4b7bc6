//! Synthetic heterogeneous clients: planted task groups built from a shared
//! frozen two-layer teacher plus group-specific low-rank residuals on both
//! layers. Labels come from the group teacher's argmax, optionally resampled
//! uniformly with a small flip probability, so the Bayes-optimal accuracy is
//! known by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax, cross_entropy, Matrix, SeededRng};

/// Layout and scale of the planted population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroupSpec {
    pub num_groups: usize,
    pub clients_per_group: Vec<usize>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub teacher_rank: usize,
    pub residual_scale: f64,
    pub noise_flip_prob: f64,
    pub train_per_client: usize,
    pub test_per_client: usize,
}

impl TaskGroupSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_groups == 0 || self.clients_per_group.len() != self.num_groups {
            return bad(format!(
                "clients_per_group has {} entries for {} groups",
                self.clients_per_group.len(),
                self.num_groups
            ));
        }
        if self.clients_per_group.contains(&0) {
            return bad("every group needs at least one client".into());
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
            return bad(format!(
                "dims d={}, h={}, classes={} too small",
                self.input_dim, self.hidden_dim, self.num_classes
            ));
        }
        let min_dim = self.input_dim.min(self.hidden_dim).min(self.num_classes);
        if self.teacher_rank == 0 || self.teacher_rank > min_dim {
            return bad(format!(
                "teacher_rank {} exceeds min dim {min_dim}",
                self.teacher_rank
            ));
        }
        if !(0.0..1.0).contains(&self.noise_flip_prob) {
            return bad(format!(
                "noise_flip_prob {} outside [0, 1)",
                self.noise_flip_prob
            ));
        }
        if !self.residual_scale.is_finite() || self.residual_scale < 0.0 {
            return bad(format!("residual_scale {} invalid", self.residual_scale));
        }
        if self.train_per_client == 0 || self.test_per_client == 0 {
            return bad("train and test sizes must be positive".into());
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.clients_per_group.iter().sum()
    }
}

/// One client's samples: the first `train_count` rows are the training split,
/// the remaining `test_count` rows the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
}

impl Dataset {
    pub fn train_inputs(&self) -> &[Vec<f64>] {
        &self.inputs[..self.train_count]
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.labels[..self.train_count]
    }

    pub fn test_inputs(&self) -> &[Vec<f64>] {
        &self.inputs[self.train_count..]
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.labels[self.train_count..]
    }
}

/// Frozen base, per-group effective teachers, and the per-client data.
#[derive(Debug, Clone)]
pub struct Population {
    pub base: Vec<Matrix>,
    pub group_teachers: Vec<Vec<Matrix>>,
    pub datasets: Vec<Dataset>,
    pub planted: Vec<usize>,
}

impl Population {
    /// Logits of the group teacher: `W2' tanh(W1' x)`.
    pub fn teacher_logits(&self, group: usize, x: &[f64]) -> Result<Vec<f64>> {
        let teacher = self
            .group_teachers
            .get(group)
            .ok_or_else(|| Error::OutOfRange {
                op: "teacher_logits",
                detail: format!("group {group} of {}", self.group_teachers.len()),
            })?;
        let mut h = teacher[0].matvec(x)?;
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        teacher[1].matvec(&h)
    }
}

fn low_rank_residual(rows: usize, cols: usize, rank: usize, rng: &mut SeededRng) -> Result<Matrix> {
    let u = rng.gaussian_matrix(rows, rank, 1.0 / (rank as f64).sqrt());
    let v = rng.gaussian_matrix(rank, cols, 1.0 / (cols as f64).sqrt());
    crate::numcore::matmul(&u, &v)
}

/// Builds the full population from the spec and a seed stream. Pure function
/// of `(spec, rng seed)`: per-client data comes from seeds derived by client
/// index, so generation order does not matter.
pub fn generate_population(spec: &TaskGroupSpec, rng: &SeededRng) -> Result<Population> {
    spec.validate()?;
    let d = spec.input_dim;
    let h = spec.hidden_dim;
    let c = spec.num_classes;

    let mut base_rng = rng.derive(1);
    let base = vec![
        base_rng.gaussian_matrix(h, d, 1.0 / (d as f64).sqrt()),
        base_rng.gaussian_matrix(c, h, 1.0 / (h as f64).sqrt()),
    ];

    let mut group_teachers = Vec::with_capacity(spec.num_groups);
    for g in 0..spec.num_groups {
        let mut g_rng = rng.derive(0x10 + g as u64);
        let r1 = low_rank_residual(h, d, spec.teacher_rank, &mut g_rng)?;
        let r2 = low_rank_residual(c, h, spec.teacher_rank, &mut g_rng)?;
        let mut w1 = base[0].clone();
        w1.add_scaled(&r1, spec.residual_scale)?;
        let mut w2 = base[1].clone();
        w2.add_scaled(&r2, spec.residual_scale)?;
        group_teachers.push(vec![w1, w2]);
    }

    let mut planted = Vec::with_capacity(spec.num_clients());
    for (g, &count) in spec.clients_per_group.iter().enumerate() {
        planted.extend(std::iter::repeat_n(g, count));
    }

    let pop = Population {
        base,
        group_teachers,
        datasets: Vec::new(),
        planted,
    };
    let mut datasets = Vec::with_capacity(pop.planted.len());
    for (client, &group) in pop.planted.iter().enumerate() {
        let mut c_rng = rng.derive(0x1000 + client as u64);
        let total = spec.train_per_client + spec.test_per_client;
        let mut inputs = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        for _ in 0..total {
            let x = c_rng.gaussian_vec(d);
            let logits = pop.teacher_logits(group, &x)?;
            let mut label = argmax(&logits)?;
            if spec.noise_flip_prob > 0.0 && c_rng.next_f64() < spec.noise_flip_prob {
                label = c_rng.next_usize(c);
            }
            inputs.push(x);
            labels.push(label);
        }
        datasets.push(Dataset {
            inputs,
            labels,
            train_count: spec.train_per_client,
            test_count: spec.test_per_client,
        });
    }

    Ok(Population { datasets, ..pop })
}

/// CSV dump of one client's samples for inspection: a `split,label,x0..` header
/// followed by one row per sample.
pub fn dataset_to_csv(dataset: &Dataset) -> String {
    use std::fmt::Write as _;
    let dim = dataset.inputs.first().map_or(0, Vec::len);
    let mut text = String::from("split,label");
    for i in 0..dim {
        let _ = write!(text, ",x{i}");
    }
    text.push('\n');
    for (i, (x, label)) in dataset.inputs.iter().zip(&dataset.labels).enumerate() {
        let split = if i < dataset.train_count {
            "train"
        } else {
            "test"
        };
        let _ = write!(text, "{split},{label}");
        for v in x {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    text
}

/// Test-split accuracy and mean cross-entropy of an arbitrary logit function.
pub fn evaluate<F>(mut forward: F, dataset: &Dataset) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let inputs = dataset.test_inputs();
    let labels = dataset.test_labels();
    if inputs.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let logits = forward(x);
        if argmax(&logits)? == y {
            correct += 1;
        }
        loss += cross_entropy(&logits, y)?;
    }
    let n = inputs.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskGroupSpec {
        TaskGroupSpec {
            num_groups: 2,
            clients_per_group: vec![2, 2],
            input_dim: 8,
            hidden_dim: 8,
            num_classes: 4,
            teacher_rank: 2,
            residual_scale: 1.0,
            noise_flip_prob: 0.0,
            train_per_client: 50,
            test_per_client: 200,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_population(&spec, &SeededRng::new(10)).unwrap();
        let b = generate_population(&spec, &SeededRng::new(10)).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.base, b.base);
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn zero_residual_scale_makes_groups_identical() {
        let spec = TaskGroupSpec {
            residual_scale: 0.0,
            ..small_spec()
        };
        let pop = generate_population(&spec, &SeededRng::new(3)).unwrap();
        assert_eq!(pop.group_teachers[0], pop.group_teachers[1]);
        assert_eq!(pop.group_teachers[0][0], pop.base[0]);
    }

    #[test]
    fn distinct_groups_have_distinct_teachers() {
        let pop = generate_population(&small_spec(), &SeededRng::new(3)).unwrap();
        assert_ne!(pop.group_teachers[0], pop.group_teachers[1]);
    }

    #[test]
    fn same_group_clients_share_teacher_not_data() {
        let pop = generate_population(&small_spec(), &SeededRng::new(4)).unwrap();
        assert_eq!(pop.planted[0], pop.planted[1]);
        assert_ne!(pop.datasets[0].inputs, pop.datasets[1].inputs);
    }

    #[test]
    fn own_teacher_is_bayes_optimal_cross_teacher_is_not() {
        // Noiseless labels: the generating teacher scores 1.0 on its own
        // group's held-out samples and strictly lower on the other group's.
        let pop = generate_population(&small_spec(), &SeededRng::new(5)).unwrap();
        let own = |x: &[f64]| pop.teacher_logits(0, x).unwrap();
        let (acc_own, _) = evaluate(own, &pop.datasets[0]).unwrap();
        assert_eq!(acc_own, 1.0);
        let (acc_cross, _) = evaluate(own, &pop.datasets[3]).unwrap();
        assert!(acc_cross < 1.0, "cross-group accuracy {acc_cross}");
    }

    #[test]
    fn uniform_logits_score_chance_and_ln_c_loss() {
        let spec = small_spec();
        let pop = generate_population(&spec, &SeededRng::new(6)).unwrap();
        // Argmax of a constant vector is class 0, so accuracy is the fraction
        // of zero labels; pooled over all clients that stays near 1/C.
        let mut correct = 0usize;
        let mut total = 0usize;
        for ds in &pop.datasets {
            let (acc, loss) = evaluate(|_| vec![0.0; spec.num_classes], ds).unwrap();
            assert!((loss - (spec.num_classes as f64).ln()).abs() < 1e-12);
            correct += (acc * ds.test_count as f64).round() as usize;
            total += ds.test_count;
        }
        let pooled = correct as f64 / total as f64;
        // 3-sigma binomial band around 0.25 at the pooled sample size.
        let band = 3.0 * (0.25 * 0.75 / total as f64).sqrt();
        assert!(
            (pooled - 0.25).abs() < band + 0.05,
            "pooled chance accuracy {pooled}"
        );
    }

    #[test]
    fn label_noise_is_applied() {
        let noisy = TaskGroupSpec {
            noise_flip_prob: 0.3,
            ..small_spec()
        };
        let pop = generate_population(&noisy, &SeededRng::new(7)).unwrap();
        let own = |x: &[f64]| pop.teacher_logits(0, x).unwrap();
        let (acc, _) = evaluate(own, &pop.datasets[0]).unwrap();
        // Flips resample uniformly, so the teacher's ceiling is
        // (1 - p) + p / C = 0.775 here.
        assert!(acc < 0.95 && acc > 0.6, "noisy accuracy {acc}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TaskGroupSpec {
            clients_per_group: vec![2],
            ..small_spec()
        }
        .validate()
        .is_err());
        assert!(TaskGroupSpec {
            teacher_rank: 9,
            ..small_spec()
        }
        .validate()
        .is_err());
        assert!(TaskGroupSpec {
            noise_flip_prob: 1.0,
            ..small_spec()
        }
        .validate()
        .is_err());
        assert!(TaskGroupSpec {
            test_per_client: 0,
            ..small_spec()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_dump_covers_every_sample() {
        let spec = small_spec();
        let pop = generate_population(&spec, &SeededRng::new(12)).unwrap();
        let csv = dataset_to_csv(&pop.datasets[0]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines.len(),
            1 + spec.train_per_client + spec.test_per_client
        );
        assert_eq!(lines[0], "split,label,x0,x1,x2,x3,x4,x5,x6,x7");
        assert!(lines[1].starts_with("train,"));
        assert!(lines[spec.train_per_client + 1].starts_with("test,"));
    }

    #[test]
    fn split_sizes_follow_spec() {
        let spec = small_spec();
        let pop = generate_population(&spec, &SeededRng::new(9)).unwrap();
        for ds in &pop.datasets {
            assert_eq!(ds.train_inputs().len(), spec.train_per_client);
            assert_eq!(ds.test_inputs().len(), spec.test_per_client);
            assert!(ds.labels.iter().all(|l| *l < spec.num_classes));
        }
    }
}
