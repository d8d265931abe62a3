//! Supervised imitation of the expert: Adam on softmax cross-entropy plus a
//! weight-norm penalty, with batches assembled from whole (map, goal) tasks
//! so the shared trunk runs once per task.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Task};
use crate::error::{Error, Result};
use crate::eval::{argmax, step_accuracy, success_rate, StartMode};
use crate::models::{input_tensor, Arch, ModelSpec, Network, ACTIONS};
use crate::tensor::{add_penalty_grad, one_hot, softmax_ce_l2_loss, Adam, Grads, L2Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub l2_mode: L2Mode,
    pub seed: u64,
    pub deterministic: bool,
    pub vin_iterations: usize,
    pub workers: usize,
    /// Roll out the best parameters on both splits after training.
    pub success_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(Arch::DbNet)
    }
}

impl TrainConfig {
    pub fn new(arch: Arch) -> Self {
        TrainConfig {
            arch,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            lambda: 1e-4,
            l2_mode: L2Mode::Norm,
            seed: 0,
            deterministic: false,
            vin_iterations: 40,
            workers: 1,
            success_eval: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative and finite");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }

    pub fn model_spec(&self, input_size: usize) -> ModelSpec {
        ModelSpec::new(self.arch, input_size).with_vin_iterations(self.vin_iterations)
    }

    fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean of batch losses (cross-entropy plus penalty).
    pub loss: f64,
    /// Accuracy on the training batches as they were seen during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
    /// Wall-clock seconds of the optimisation pass; null in deterministic runs.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub arch: Arch,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub train_succ: Option<f64>,
    pub test_succ: Option<f64>,
}

/// Wall-clock record kept apart from the metrics so deterministic runs stay
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub arch: Arch,
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
    pub total_seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the highest test accuracy.
    pub best: Network<f32>,
    pub best_step: u64,
    pub metrics: MetricsRecord,
    pub timing: TimingRecord,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub correct: usize,
    pub samples: usize,
}

struct TaskGrad {
    grads: Grads<f32>,
    ce_sum: f64,
    correct: usize,
}

fn task_gradient(net: &Network<f32>, input: &Tensor<f32>, task: &Task, total: usize) -> Result<TaskGrad> {
    let (logits, trace) = net.forward(input, &task.positions())?;
    let labels = task.labels();
    let y = one_hot::<f32>(&labels, ACTIONS)?;
    let out = softmax_ce_l2_loss(&logits, &y, net.params(), 0.0, L2Mode::Norm)?;
    let rows = labels.len();
    let mut dlogits = out.dlogits;
    let scale = rows as f32 / total as f32;
    dlogits.data_mut().iter_mut().for_each(|v| *v *= scale);
    let mut grads = net.params().grads_like();
    net.backward(&trace, &dlogits, &mut grads)?;
    let correct = logits
        .data()
        .chunks_exact(ACTIONS)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(TaskGrad {
        grads,
        ce_sum: out.cross_entropy * rows as f64,
        correct,
    })
}

/// One Adam update on the union of the given tasks' samples. Gradients are
/// summed in task order whatever the thread count.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &Adam,
    batch: &[(&Task, &Tensor<f32>)],
    lambda: f64,
    mode: L2Mode,
    t: u64,
) -> Result<BatchStats> {
    let total: usize = batch.iter().map(|(task, _)| task.samples.len()).sum();
    if total == 0 {
        return Err(Error::EmptySplit);
    }
    let shared: &Network<f32> = net;
    let parts: Vec<TaskGrad> = batch
        .par_iter()
        .map(|(task, input)| task_gradient(shared, input, task, total))
        .collect::<Result<_>>()?;
    let penalty = mode.penalty(net.params().l2_norm(), lambda);
    let params = net.params_mut();
    params.zero_grads();
    let mut ce = 0.0;
    let mut correct = 0;
    for p in &parts {
        params.accumulate(&p.grads, 1.0);
        ce += p.ce_sum;
        correct += p.correct;
    }
    add_penalty_grad(params, lambda, mode);
    adam.step(params, t)?;
    let cross_entropy = ce / total as f64;
    Ok(BatchStats {
        loss: cross_entropy + penalty,
        cross_entropy,
        penalty,
        correct,
        samples: total,
    })
}

/// Groups shuffled task indices into batches of at least `batch_size` samples.
pub fn task_batches(tasks: &[Task], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &i in order {
        cur.push(i);
        n += tasks[i].samples.len();
        if n >= batch_size {
            batches.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn check_inputs(spec: &ModelSpec, tasks: &[Task]) -> Result<()> {
    for t in tasks {
        if t.input.size() != spec.input_size {
            return Err(Error::InvalidParams(format!(
                "dataset input size {} does not match model input size {}",
                t.input.size(),
                spec.input_size
            )));
        }
    }
    Ok(())
}

fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains from scratch and keeps the parameters with the best test accuracy.
pub fn train(config: &TrainConfig, train_tasks: &[Task], test_tasks: &[Task]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_tasks.is_empty() || test_tasks.is_empty() {
        return Err(Error::EmptySplit);
    }
    let spec = config.model_spec(train_tasks[0].input.size());
    check_inputs(&spec, train_tasks)?;
    check_inputs(&spec, test_tasks)?;
    with_pool(config.effective_workers(), || run(config, spec, train_tasks, test_tasks))?
}

fn run(config: &TrainConfig, spec: ModelSpec, train_tasks: &[Task], test_tasks: &[Task]) -> Result<TrainOutcome> {
    let mut net = Network::<f32>::new(spec, config.seed)?;
    let adam = Adam {
        lr: config.lr,
        ..Adam::default()
    };
    let inputs: Vec<Tensor<f32>> = train_tasks.iter().map(|t| input_tensor(&t.input)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5348_5546));
    let mut order: Vec<usize> = (0..train_tasks.len()).collect();
    let mut t = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut best = (net.clone(), 0u64, 0usize, f64::NEG_INFINITY);
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let clock = Instant::now();
        let (mut loss, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in task_batches(train_tasks, &order, config.batch_size) {
            let items: Vec<(&Task, &Tensor<f32>)> = batch.iter().map(|&i| (&train_tasks[i], &inputs[i])).collect();
            t += 1;
            let s = train_step(&mut net, &adam, &items, config.lambda, config.l2_mode, t)?;
            if !s.loss.is_finite() {
                return Err(Error::InvalidParams(format!("loss diverged at step {t}")));
            }
            loss += s.loss * s.samples as f64;
            correct += s.correct;
            seen += s.samples;
        }
        let secs = clock.elapsed().as_secs_f64();
        epoch_seconds.push(secs);
        let test_acc = step_accuracy(&net, test_tasks)?;
        let m = EpochMetrics {
            epoch,
            loss: loss / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            seconds: (!config.deterministic).then_some(secs),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train {:.4} test {:.4} ({secs:.1}s)",
            config.arch,
            m.loss,
            m.train_acc,
            m.test_acc
        );
        if test_acc > best.3 {
            best = (net.clone(), t, epoch, test_acc);
        }
        epochs.push(m);
    }
    let (best_net, best_step, best_epoch, best_test_acc) = best;
    let (train_succ, test_succ) = if config.success_eval {
        (
            Some(success_rate(&best_net, train_tasks, StartMode::Stored)?),
            Some(success_rate(&best_net, test_tasks, StartMode::Stored)?),
        )
    } else {
        (None, None)
    };
    let mean = epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64;
    Ok(TrainOutcome {
        best: best_net,
        best_step,
        metrics: MetricsRecord {
            arch: config.arch,
            epochs,
            best_epoch,
            best_test_acc,
            train_succ,
            test_succ,
        },
        timing: TimingRecord {
            arch: config.arch,
            epoch_seconds,
            mean_epoch_seconds: mean,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig, Split};
    use crate::terrain::TerrainParams;

    fn small() -> (Vec<Task>, Vec<Task>) {
        let d = build_dataset(&DatasetConfig::new(TerrainParams::for_size(32), 14, 3, 5)).unwrap();
        (d.tasks(Split::Train).unwrap(), d.tasks(Split::Test).unwrap())
    }

    #[test]
    fn batches_cover_every_task_once() {
        let (train, _) = small();
        let order: Vec<usize> = (0..train.len()).rev().collect();
        let batches = task_batches(&train, &order, 20);
        let flat: Vec<usize> = batches.concat();
        assert_eq!(flat, order);
        for b in &batches[..batches.len() - 1] {
            assert!(b.iter().map(|&i| train[i].samples.len()).sum::<usize>() >= 20);
        }
    }

    #[test]
    fn first_step_loss_is_chance_plus_penalty() {
        let (train, _) = small();
        let mut net = Network::<f32>::new(ModelSpec::new(Arch::DbNet, 32), 3).unwrap();
        let norm = net.params().l2_norm();
        let input = input_tensor(&train[0].input);
        let s = train_step(&mut net, &Adam::default(), &[(&train[0], &input)], 1e-4, L2Mode::Norm, 1).unwrap();
        assert!((s.cross_entropy - 8f64.ln()).abs() < 0.2, "{}", s.cross_entropy);
        assert!((s.penalty - 1e-4 * norm).abs() < 1e-9);
    }

    #[test]
    fn rejects_input_size_mismatch() {
        let (train, test) = small();
        let mut bad = test.clone();
        bad[0].input = crate::terrain::InputEncoding::from_vec(16, vec![0.0; 3 * 256]).unwrap();
        let mut c = TrainConfig::new(Arch::B1Net);
        c.epochs = 1;
        assert!(matches!(super::train(&c, &train, &bad), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn deterministic_runs_match() {
        let (train, test) = small();
        let mut c = TrainConfig::new(Arch::B1Net);
        c.epochs = 2;
        c.batch_size = 32;
        c.deterministic = true;
        c.seed = 11;
        let a = super::train(&c, &train, &test).unwrap();
        let b = super::train(&c, &train, &test).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.epochs.iter().all(|e| e.seconds.is_none()));
        let values = |n: &Network<f32>| n.params().iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(values(&a.best), values(&b.best));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = TrainConfig::new(Arch::DbNet);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig::new(Arch::DbNet);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
