use marsnav_core::dataset::{build_dataset, DatasetConfig, Split};
use marsnav_core::models::input_tensor;
use marsnav_core::tensor::{add_penalty_grad, one_hot, softmax_ce_l2_loss, Adam, L2Mode, Tensor};
use marsnav_core::train::{train, train_step};
use marsnav_core::{Arch, ModelSpec, Network, Task, TerrainParams, TrainConfig};

fn corpus(size: usize, maps: usize, seed: u64) -> (Vec<Task>, Vec<Task>) {
    let d = build_dataset(&DatasetConfig::new(TerrainParams::for_size(size), maps, 7, seed)).unwrap();
    (d.tasks(Split::Train).unwrap(), d.tasks(Split::Test).unwrap())
}

#[test]
fn uniform_logits_give_log_eight() {
    let logits = Tensor::<f64>::zeros(&[5, 8]);
    let y = one_hot::<f64>(&[0, 3, 7, 2, 2], 8).unwrap();
    let params = Network::<f64>::new(ModelSpec::new(Arch::B1Net, 16), 0).unwrap();
    let out = softmax_ce_l2_loss(&logits, &y, params.params(), 0.0, L2Mode::Norm).unwrap();
    assert!((out.cross_entropy - 8f64.ln()).abs() < 1e-9);
    assert_eq!(out.loss, out.cross_entropy);
}

#[test]
fn penalty_term_is_lambda_times_norm() {
    let net = Network::<f64>::new(ModelSpec::new(Arch::DbNet, 16), 1).unwrap();
    let norm = net
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter())
        .map(|w| w * w)
        .sum::<f64>()
        .sqrt();
    let logits = Tensor::<f64>::zeros(&[2, 8]);
    let y = one_hot::<f64>(&[1, 4], 8).unwrap();
    for lambda in [1e-4, 0.5, 3.0] {
        let out = softmax_ce_l2_loss(&logits, &y, net.params(), lambda, L2Mode::Norm).unwrap();
        assert!((out.loss - out.cross_entropy - lambda * norm).abs() < 1e-9);
    }
}

#[test]
fn penalty_gradient_is_lambda_theta_over_norm() {
    let mut net = Network::<f64>::new(ModelSpec::new(Arch::B1Net, 16), 2).unwrap();
    let norm = net.params().l2_norm();
    net.params_mut().zero_grads();
    add_penalty_grad(net.params_mut(), 0.3, L2Mode::Norm);
    for p in net.params().iter() {
        for (g, w) in p.grad.data().iter().zip(p.value.data()) {
            assert!((g - 0.3 * w / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn first_update_starts_near_chance() {
    let (train_tasks, _) = corpus(32, 14, 8);
    let mut net = Network::<f32>::new(ModelSpec::new(Arch::DbNet, 32), 0).unwrap();
    let norm = net.params().l2_norm();
    let inputs: Vec<_> = train_tasks.iter().map(|t| input_tensor(&t.input)).collect();
    let batch: Vec<_> = train_tasks.iter().zip(&inputs).collect();
    let s = train_step(&mut net, &Adam::default(), &batch, 1e-4, L2Mode::Norm, 1).unwrap();
    assert!((s.loss - (8f64.ln() + 1e-4 * norm)).abs() < 0.15, "loss {}", s.loss);
}

#[test]
fn dbnet_overfits_ten_samples() {
    let (train_tasks, _) = corpus(32, 7, 3);
    let mut task = train_tasks.into_iter().find(|t| t.samples.len() >= 10).unwrap();
    task.samples.truncate(10);
    let mut net = Network::<f32>::new(ModelSpec::new(Arch::DbNet, 32), 0).unwrap();
    let input = input_tensor(&task.input);
    let adam = Adam::default();
    let mut last = f64::INFINITY;
    for t in 1..=500 {
        last = train_step(&mut net, &adam, &[(&task, &input)], 1e-4, L2Mode::Norm, t).unwrap().loss;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.05, "loss after 500 steps: {last}");
}

#[test]
fn deterministic_training_is_repeatable() {
    let (tr, te) = corpus(32, 14, 4);
    let mut c = TrainConfig::new(Arch::DbNet);
    c.epochs = 2;
    c.deterministic = true;
    c.seed = 7;
    let a = train(&c, &tr, &te).unwrap();
    let b = train(&c, &tr, &te).unwrap();
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
    assert_eq!(a.best_step, b.best_step);
    for (p, q) in a.best.params().iter().zip(b.best.params().iter()) {
        assert_eq!(p.value.data(), q.value.data());
    }
}

#[test]
fn training_improves_on_chance() {
    let (tr, te) = corpus(32, 140, 12);
    let mut c = TrainConfig::new(Arch::DbNet);
    c.epochs = 8;
    c.batch_size = 32;
    let out = train(&c, &tr, &te).unwrap();
    let e = &out.metrics.epochs;
    assert_eq!(e.len(), 8);
    assert!(e[7].loss < e[0].loss);
    assert!(out.metrics.best_test_acc > 0.4, "{:?}", e);
    assert!(e.iter().all(|m| m.seconds.is_some()));
}
