use beta_core::blackbox::{train_source_model, SourceConfig};
use beta_core::data::two_moons_task;
use beta_core::diagnostics::{ideal_probe_predictions, BoundEstimate};
use beta_core::division::{divide, fit_gmm2, per_sample_losses, NetRole, SubdomainSplit};
use beta_core::tensor::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub noise: f64,
    pub shift: f64,
    pub h: Vec<usize>,
    pub h_star: Vec<usize>,
    pub x: DenseArray,
    pub split: SubdomainSplit,
    pub truth: Vec<usize>,
}

/// A source classifier evaluated on a rotated target whose pseudo labels
/// are the truth with a planted fraction flipped.
pub fn instance(i: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let noise = rng.random_range(0.0..0.4);
    let shift = rng.random_range(0.0..60.0);
    let (source, target) = two_moons_task(300, 0.1, shift, 500 + i).unwrap();
    let cfg = SourceConfig {
        hidden: vec![16],
        epochs: 20,
        seed: i,
        ..SourceConfig::default()
    };
    let h_net = train_source_model(&source, 2, &cfg).unwrap();
    let x = target.features().clone();
    let truth = target.ground_truth_for_diagnostics().unwrap().to_vec();
    let pseudo: Vec<usize> = truth
        .iter()
        .map(|&t| if rng.random_bool(noise) { 1 - t } else { t })
        .collect();
    let losses = per_sample_losses(&h_net, &x, &pseudo).unwrap();
    let post = fit_gmm2(&losses, 100, 1e-8).unwrap().posteriors(&losses);
    let top = post.iter().cloned().fold(0.0, f64::max);
    let split = divide(&post, &pseudo, 2, 0.5f64.min(top), NetRole::A).unwrap();
    let h_star = ideal_probe_predictions(&x, &truth, 2, &[16], i).unwrap().unwrap();
    Instance {
        noise,
        shift,
        h: h_net.predict(&x).unwrap(),
        h_star,
        x,
        split,
        truth,
    }
}

fn rate(idx: &[usize], a: impl Fn(usize) -> usize, b: impl Fn(usize) -> usize) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().filter(|&&i| a(i) != b(i)).count() as f64 / idx.len() as f64
}

/// Recounts every term from the raw per-sample arrays.
pub fn recount(inst: &Instance, est: &BoundEstimate) {
    let n = inst.truth.len();
    let mut pseudo = vec![usize::MAX; n];
    for (j, &i) in inst.split.easy.iter().enumerate() {
        pseudo[i] = inst.split.easy_labels[j];
    }
    let hard_pseudo = inst.split.hard_soft_labels.argmax_rows();
    for (j, &i) in inst.split.hard.iter().enumerate() {
        pseudo[i] = hard_pseudo[j];
    }
    let (e, h) = (&inst.split.easy, &inst.split.hard);
    let (hy, hs, ty, py) = (&inst.h, &inst.h_star, &inst.truth, &pseudo);
    let a = est.alpha;
    let eps_alpha = a * rate(e, |i| hy[i], |i| py[i]) + (1.0 - a) * rate(h, |i| hy[i], |i| py[i]);
    let eps_t = a * rate(e, |i| hy[i], |i| ty[i]) + (1.0 - a) * rate(h, |i| hy[i], |i| ty[i]);
    let lambda = rate(e, |i| hs[i], |i| ty[i]) + rate(h, |i| hs[i], |i| ty[i]);
    let lambda_hat = rate(e, |i| hs[i], |i| py[i]) + rate(h, |i| hs[i], |i| py[i]);
    let rho_e = rate(e, |i| py[i], |i| ty[i]);
    let rho_h = rate(h, |i| py[i], |i| ty[i]);
    let witness = 2.0 * (rate(e, |i| hy[i], |i| hs[i]) - rate(h, |i| hy[i], |i| hs[i])).abs();
    let d = est.d_proxy.max(witness);
    let lhs = (eps_alpha - eps_t).abs();
    let rhs = a * (d + lambda + lambda_hat) + rho_h;

    for (name, mine, theirs) in [
        ("eps_alpha", eps_alpha, est.eps_alpha),
        ("eps_t", eps_t, est.eps_t),
        ("lambda", lambda, est.lambda),
        ("lambda_hat", lambda_hat, est.lambda_hat),
        ("rho_e", rho_e, est.rho_e),
        ("rho_h", rho_h, est.rho_h),
        ("d_witness", witness, est.d_witness),
        ("lhs", lhs, est.lhs),
        ("rhs", rhs, est.rhs),
    ] {
        assert!((mine - theirs).abs() < 1e-12, "{name}: counted {mine}, reported {theirs}");
    }
    assert!(lhs <= rhs + 1e-9, "alpha {a}: {lhs} > {rhs}");
    assert!(lambda_hat <= lambda + rho_e + rho_h + 1e-12);
}
