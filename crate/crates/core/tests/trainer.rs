mod common;

use beta_core::autodiff::Tape;
use beta_core::config::BetaConfig;
use beta_core::division::{per_sample_losses, NetRole};
use beta_core::losses::{adversarial_graph, cross_entropy_graph, kd_kl_graph, mixmatch_loss, reg_uniform_graph, MixedOutputs};
use beta_core::nn::{MlpClassifier, SgdState};
use beta_core::tensor::{one_hot, DenseArray};
use beta_core::trainer::{
    distill_step, divide_by_losses, ema_update, epoch_step1, epoch_step2, run_prepared,
    warmup, Method, Step2Seeds, TwinNets,
};
use common::twins::{refined_for_a, train_a, warmed};
use common::{arr, on_simplex, params_bits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_warmup_epochs_leave_nets_untouched() {
    let task = common::moons();
    let prep = task.prepared();
    let cfg = BetaConfig {
        warmup_epochs: 0,
        ..BetaConfig::default()
    };
    let fresh = TwinNets::new(&cfg, 2, 2, &prep.black_box_labels).unwrap();
    let mut twins = fresh.clone();
    warmup(&mut twins, &prep.x, &prep.black_box_labels, &cfg).unwrap();
    assert_eq!(twins, fresh);
}

#[test]
fn warmup_fits_agreeing_labels_better() {
    let task = common::moons();
    let s = warmed(&task, BetaConfig::default());
    let truth = s.prep.truth().unwrap();
    let bb = &s.prep.black_box_labels;
    let losses = per_sample_losses(&s.twins.net_a, &s.prep.x, bb).unwrap();
    let mean = |clean: bool| {
        let v: Vec<f64> = (0..losses.len()).filter(|&i| (bb[i] == truth[i]) == clean).map(|i| losses[i]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) < mean(false), "clean {} noisy {}", mean(true), mean(false));
    assert!(s.twins.net_a.parameter_distance(&s.twins.net_b) > 0.0);
}

#[test]
fn zero_gamma_adversarial_branch_is_bitwise_inert() {
    let task = common::blobs();
    let mut s = warmed(&task, BetaConfig::default());
    s.cfg.gamma = 0.0;
    let refined = refined_for_a(&s, 5);
    let (with, disc_with) = train_a(&s, &refined, &s.cfg, true);
    let (without, disc_without) = train_a(&s, &refined, &s.cfg, false);
    assert_eq!(params_bits(&with), params_bits(&without));
    assert_ne!(params_bits(&disc_with), params_bits(&disc_without), "discriminator should still learn");

    let on = BetaConfig { gamma: 0.5, ..s.cfg.clone() };
    let (moved, _) = train_a(&s, &refined, &on, true);
    assert_ne!(params_bits(&moved), params_bits(&without));
}

#[test]
fn zero_mse_weight_matches_loss_without_the_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = arr(6, 3, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect());
    let targets = arr(6, 3, (0..6).flat_map(|i| one_hot(i % 3, 3)).collect());
    let (et, ht) = (targets.select_rows(&[0, 1, 2, 3]), targets.select_rows(&[4, 5]));

    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let e = tape.slice_rows(zv, 0, 4).unwrap();
    let h = tape.slice_rows(zv, 4, 2).unwrap();
    let (l, _) = mixmatch_loss(
        &mut tape,
        MixedOutputs { logits: e, targets: &et },
        Some(MixedOutputs { logits: h, targets: &ht }),
        0.0,
    )
    .unwrap();
    let g_with = tape.backward(l.var().unwrap()).unwrap().wrt(&tape, zv);

    let mut plain = Tape::new();
    let zv2 = plain.param(z);
    let e2 = plain.slice_rows(zv2, 0, 4).unwrap();
    let ce = cross_entropy_graph(&mut plain, e2, &et).unwrap();
    let p = plain.softmax(zv2);
    let reg = reg_uniform_graph(&mut plain, p).unwrap();
    let total = plain.add(ce.var().unwrap(), reg.var().unwrap()).unwrap();
    let g_plain = plain.backward(total).unwrap().wrt(&plain, zv2);

    assert!((l.value - (ce.value + reg.value)).abs() < 1e-12, "{} vs {}", l.value, ce.value + reg.value);
    for (a, b) in g_with.values().iter().zip(g_plain.values()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn identical_twins_on_identical_splits_stay_identical() {
    let task = common::blobs();
    let mut s = warmed(&task, BetaConfig::default());
    s.twins.net_b = s.twins.net_a.clone();
    s.twins.disc_b = s.twins.disc_a.clone();
    s.twins.opt_b = s.twins.opt_a.clone();
    s.twins.opt_disc_b = s.twins.opt_disc_a.clone();
    let labels = s.twins.pseudo_labels(NetRole::A);
    let split_a = divide_by_losses(&s.twins.net_a, &s.prep.x, &labels, NetRole::A, &s.cfg).unwrap().split;
    let mut split_b = split_a.clone();
    split_b.produced_by = NetRole::B;
    let seeds = Step2Seeds { a: 11, b: 11 };
    epoch_step2(&mut s.twins, &split_a, &split_b, &s.prep.x, &s.cfg, &s.policy, seeds, true).unwrap();
    assert_eq!(params_bits(&s.twins.net_a), params_bits(&s.twins.net_b));
}

#[test]
fn each_net_learns_only_from_the_other_nets_split() {
    let task = common::blobs();
    let s = warmed(&task, BetaConfig::default());
    let x = &s.prep.x;
    let div = |role: NetRole| {
        divide_by_losses(s.twins.net(role), x, &s.twins.pseudo_labels(role), role, &s.cfg)
            .unwrap()
            .split
    };
    let (split_a, split_b) = (div(NetRole::A), div(NetRole::B));
    let looser = BetaConfig { tau: 0.3, ..s.cfg.clone() };
    let alt_a = divide_by_losses(&s.twins.net_a, x, &s.twins.pseudo_labels(NetRole::A), NetRole::A, &looser)
        .unwrap()
        .split;
    assert_ne!(alt_a.easy, split_a.easy);

    let seeds = Step2Seeds { a: 1, b: 2 };
    let mut one = s.twins.clone();
    let out = epoch_step2(&mut one, &split_a, &split_b, x, &s.cfg, &s.policy, seeds, true).unwrap();
    assert_eq!(out.refined_from_a.split.produced_by, NetRole::A);
    assert_eq!(out.refined_from_b.split.produced_by, NetRole::B);
    let mut two = s.twins.clone();
    epoch_step2(&mut two, &alt_a, &split_b, x, &s.cfg, &s.policy, seeds, true).unwrap();
    assert_eq!(params_bits(&one.net_a), params_bits(&two.net_a));
    assert_ne!(params_bits(&one.net_b), params_bits(&two.net_b));

    let mut swapped = s.twins.clone();
    assert!(epoch_step2(&mut swapped, &split_b, &split_a, x, &s.cfg, &s.policy, seeds, true).is_err());
}

fn objective(net: &MlpClassifier, xb: &DenseArray, pseudo: &DenseArray, mi_weight: f64) -> f64 {
    let mut opt = SgdState::for_mlp(net, 0.0, 0.0, 0.0, 0.0).unwrap();
    let s = distill_step(&mut net.clone(), &mut opt, xb, pseudo, mi_weight).unwrap();
    s.kd - mi_weight * s.mi
}

#[test]
fn single_distillation_step_lowers_its_objective() {
    let task = common::blobs();
    let s = warmed(&task, BetaConfig::default());
    let idx: Vec<usize> = (0..64).collect();
    let xb = s.prep.x.select_rows(&idx);
    let pseudo = arr(64, 4, idx.iter().flat_map(|&i| one_hot(s.prep.black_box_labels[i], 4)).collect());
    let mut net = s.twins.net_a.clone();
    let before = objective(&net, &xb, &pseudo, 1.0);
    let mut opt = SgdState::for_mlp(&net, 1e-3, 1e-3, 0.0, 0.0).unwrap();
    distill_step(&mut net, &mut opt, &xb, &pseudo, 1.0).unwrap();
    assert!(objective(&net, &xb, &pseudo, 1.0) < before);
}

#[test]
fn distillation_objective_decreases_over_restarts() {
    let task = common::moons();
    let s = warmed(&task, BetaConfig::default());
    let idx: Vec<usize> = (100..164).collect();
    let xb = s.prep.x.select_rows(&idx);
    let pseudo = arr(64, 2, idx.iter().flat_map(|&i| one_hot(s.prep.black_box_labels[i], 2)).collect());
    let mut net = s.twins.net_b.clone();
    let mut values = vec![objective(&net, &xb, &pseudo, 1.0)];
    for _ in 0..5 {
        let mut opt = SgdState::for_mlp(&net, 1e-3, 1e-3, 0.9, 1e-3).unwrap();
        distill_step(&mut net, &mut opt, &xb, &pseudo, 1.0).unwrap();
        values.push(objective(&net, &xb, &pseudo, 1.0));
    }
    let non_increasing = values.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(non_increasing >= 4, "{values:?}");
}

#[test]
fn zero_mi_weight_is_pure_distillation() {
    let task = common::moons();
    let s = warmed(&task, BetaConfig::default());
    let idx: Vec<usize> = (0..32).collect();
    let xb = s.prep.x.select_rows(&idx);
    let pseudo = arr(32, 2, idx.iter().flat_map(|&i| one_hot(s.prep.black_box_labels[i], 2)).collect());

    let mut a = s.twins.net_a.clone();
    let mut opt_a = s.twins.opt_a.clone();
    distill_step(&mut a, &mut opt_a, &xb, &pseudo, 0.0).unwrap();

    let mut b = s.twins.net_a.clone();
    let mut opt_b = s.twins.opt_a.clone();
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape);
    let xv = tape.constant(xb.clone());
    let z = bound.logits(&mut tape, xv).unwrap();
    let kd = kd_kl_graph(&mut tape, z, &pseudo).unwrap();
    let grads = tape.backward(kd.var().unwrap()).unwrap();
    let g: Vec<DenseArray> = bound.params().iter().map(|&v| grads.wrt(&tape, v)).collect();
    opt_b.step(&mut b, &g).unwrap();

    for (x, y) in params_bits(&a).iter().zip(params_bits(&b)) {
        assert_eq!(f64::from_bits(*x), f64::from_bits(y));
    }
}

fn mean_entropy(net: &MlpClassifier, x: &DenseArray) -> f64 {
    let p = net.forward(x).unwrap();
    let k = p.cols();
    let mean: Vec<f64> = (0..k).map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>() / p.rows() as f64).collect();
    -mean.iter().filter(|&&m| m > 0.0).map(|m| m * m.ln()).sum::<f64>()
}

#[test]
fn mutual_information_spreads_the_batch_marginal() {
    let task = common::blobs();
    let prep = task.prepared();
    let mut net = MlpClassifier::new(&[4, 16, 4], 8).unwrap();
    let last = net.layers_mut().last_mut().unwrap();
    last.bias.values_mut()[0] += 3.0;
    let truth = prep.truth().unwrap();
    let pseudo = arr(truth.len(), 4, truth.iter().flat_map(|&l| one_hot(l, 4)).collect());
    let before = mean_entropy(&net, &prep.x);
    let mut opt = SgdState::for_mlp(&net, 0.01, 0.01, 0.9, 0.0).unwrap();
    for _ in 0..20 {
        distill_step(&mut net, &mut opt, &prep.x, &pseudo, 1.0).unwrap();
    }
    let after = mean_entropy(&net, &prep.x);
    assert!(after > before, "H(mean) {before} -> {after}");
}

#[test]
fn pseudo_label_tables_stay_on_the_simplex() {
    let task = common::moons();
    let mut s = warmed(&task, BetaConfig::default());
    for epoch in 0..4 {
        for role in [NetRole::A, NetRole::B] {
            let fresh = s.twins.net(role).forward(&s.prep.x).unwrap();
            let next = ema_update(s.twins.ema(role), &fresh, s.cfg.ema_momentum).unwrap();
            assert!(on_simplex(&next, 1e-9));
            match role {
                NetRole::A => s.twins.ema_a = next,
                NetRole::B => s.twins.ema_b = next,
            }
        }
        epoch_step1(&mut s.twins, &s.prep.x, &s.cfg, epoch).unwrap();
    }
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let task = common::moons();
    let prep = task.prepared();
    let cfg = BetaConfig {
        epochs: 6,
        ..BetaConfig::default()
    };
    let (a1, b1, r1) = run_prepared(Method::Beta, &cfg, &prep).unwrap();
    let (a2, b2, r2) = run_prepared(Method::Beta, &cfg, &prep).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(params_bits(&a1), params_bits(&a2));
    assert_eq!(params_bits(&b1), params_bits(&b2));
    let other = BetaConfig { seed: 1, ..cfg };
    let (_, _, r3) = run_prepared(Method::Beta, &other, &prep).unwrap();
    assert_ne!(r1.rows, r3.rows);
}

#[test]
fn warmup_only_budget_reports_no_adaptation() {
    let task = common::moons();
    let prep = task.prepared();
    let cfg = BetaConfig {
        epochs: 3,
        warmup_epochs: 3,
        ..BetaConfig::default()
    };
    let (_, _, report) = run_prepared(Method::Beta, &cfg, &prep).unwrap();
    assert_eq!(report.adaptation_epochs, 0);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].epoch, 3);
    assert!(report.acc_a.is_some());
}

#[test]
fn kd_only_baseline_has_no_division_columns() {
    let task = common::moons();
    let prep = task.prepared();
    let cfg = BetaConfig {
        epochs: 5,
        ..BetaConfig::default()
    };
    let (_, _, report) = run_prepared(Method::KdOnly, &cfg, &prep).unwrap();
    assert_eq!(report.method, "kd-only");
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows[1..].iter().all(|r| r.l_dd.is_none() && r.l_kd.is_some()));
}

/// Generator maps two input clouds to class probabilities; the discriminator
/// tells the clouds apart from those probabilities. The discriminator is
/// trained first, then held while the generator steps through the reversal.
#[test]
fn gradient_reversal_confuses_the_discriminator() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cloud = |n: usize, c: f64| {
        arr(n, 2, (0..2 * n).map(|_| c + rng.random_range(-0.5..0.5)).collect())
    };
    let (train_e, train_h, test_e, test_h) = (cloud(64, -1.0), cloud(64, 1.0), cloud(200, -1.0), cloud(200, 1.0));
    let stack = |a: &DenseArray, b: &DenseArray| arr(a.rows() + b.rows(), 2, [a.values(), b.values()].concat());
    let train = stack(&train_e, &train_h);
    let mut gen = MlpClassifier::new(&[2, 8, 2], 1).unwrap();
    let mut disc = MlpClassifier::new(&[2, 8, 2], 2).unwrap();
    let mut gen_opt = SgdState::for_mlp(&gen, 0.05, 0.05, 0.9, 0.0).unwrap();
    let mut disc_opt = SgdState::for_mlp(&disc, 0.05, 0.05, 0.9, 0.0).unwrap();

    let disc_accuracy = |gen: &MlpClassifier, disc: &MlpClassifier| {
        let hits = |x: &DenseArray, class: usize| {
            let pred = disc.predict(&gen.forward(x).unwrap()).unwrap();
            pred.iter().filter(|&&p| p == class).count()
        };
        (hits(&test_e, 0) + hits(&test_h, 1)) as f64 / 400.0
    };
    let mut step = |gen: &mut MlpClassifier, disc: &mut MlpClassifier, reversal: Option<f64>| {
        let mut tape = Tape::new();
        let g = gen.bind(&mut tape);
        let d = disc.bind(&mut tape);
        let xv = tape.constant(train.clone());
        let p = g.probs(&mut tape, xv).unwrap();
        let input = match reversal {
            Some(scale) => tape.reverse_gradient(p, scale),
            None => tape.constant(tape.value(p).clone()),
        };
        let dz = d.logits(&mut tape, input).unwrap();
        let adv = adversarial_graph(&mut tape, dz, 64).unwrap().var().unwrap();
        let loss = tape.scale(adv, -1.0);
        let grads = tape.backward(loss).unwrap();
        let dg: Vec<DenseArray> = d.params().iter().map(|&v| grads.wrt(&tape, v)).collect();
        if reversal.is_none() {
            disc_opt.step(disc, &dg).unwrap();
        } else {
            let gg: Vec<DenseArray> = g.params().iter().map(|&v| grads.wrt(&tape, v)).collect();
            gen_opt.step(gen, &gg).unwrap();
        }
    };
    for _ in 0..200 {
        step(&mut gen, &mut disc, None);
    }
    let before = disc_accuracy(&gen, &disc);
    for _ in 0..50 {
        step(&mut gen, &mut disc, Some(1.0));
    }
    let after = disc_accuracy(&gen, &disc);
    assert!(after <= before, "discriminator accuracy {before} -> {after}");
}
