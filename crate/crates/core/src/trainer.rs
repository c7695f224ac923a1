//! The adaptation loop.
//!
//! Warm-up on black-box labels, then per epoch: refresh the pseudo-label
//! tables, distill (step 1), divide each network's samples by its own loss
//! statistics, and train each network semi-supervised on its twin's
//! division (step 2). A short mutual-information fine-tune closes the run.
//!
//! Networks work on target features standardized with target statistics;
//! the returned networks have that map folded in and take raw features.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::blackbox::{accuracy, fold_standardizer, BlackBoxHandle};
use crate::config::BetaConfig;
use crate::data::{LabeledVectorSet, Standardizer};
use crate::diagnostics::{self, noise_ratio, AdaptationReport, EpochMetrics};
use crate::division::{divide, fit_gmm2, per_sample_losses, NetRole, SubdomainSplit};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_graph, cross_entropy_graph, kd_kl_graph, mixmatch_loss, mutual_info_graph, negative_entropy_graph,
    total_objective, DistillTerms, DivisionTerms, LossValue, MixedOutputs,
};
use crate::nn::{MlpClassifier, SgdState};
use crate::refine::{co_guess_hard, mean_view_predictions, mixup, refine_easy, sharpen_rows, AugmentKind, AugmentationPolicy};
use crate::tensor::{one_hot, DenseArray};

/// Which training procedure a run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The full procedure.
    Beta,
    /// Warm-up, then the distillation step only; same epoch budget.
    KdOnly,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Beta => "beta",
            Method::KdOnly => "kd-only",
        }
    }
}

// RNG stream layout: one stream per (epoch, phase, role).
const PHASE_WARMUP: u64 = 0;
const PHASE_STEP1: u64 = 1;
const PHASE_STEP2: u64 = 2;
const PHASE_FINETUNE: u64 = 3;
const PHASE_DIAGNOSTICS: u64 = 4;

fn stream_rng(seed: u64, epoch: usize, phase: u64, role: NetRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = match role {
        NetRole::A => 0,
        NetRole::B => 1,
    };
    rng.set_stream((epoch as u64) << 8 | phase << 1 | r);
    rng
}

/// Two independently initialized classifiers, one subdomain discriminator
/// per classifier, their optimizers, and the per-network pseudo-label tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinNets {
    pub net_a: MlpClassifier,
    pub net_b: MlpClassifier,
    pub disc_a: MlpClassifier,
    pub disc_b: MlpClassifier,
    pub opt_a: SgdState,
    pub opt_b: SgdState,
    pub opt_disc_a: SgdState,
    pub opt_disc_b: SgdState,
    pub ema_a: DenseArray,
    pub ema_b: DenseArray,
}

impl TwinNets {
    /// Fresh networks for `dim` inputs and `k` classes; pseudo-label tables
    /// start at the one-hot black-box labels.
    pub fn new(config: &BetaConfig, dim: usize, k: usize, black_box_labels: &[usize]) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend(&config.hidden);
        widths.push(k);
        let mut disc_widths = vec![k];
        disc_widths.extend(&config.discriminator_hidden);
        disc_widths.push(2);
        let seed = config.seed.wrapping_mul(4);
        let net_a = MlpClassifier::new(&widths, seed)?;
        let net_b = MlpClassifier::new(&widths, seed.wrapping_add(1))?;
        let disc_a = MlpClassifier::new(&disc_widths, seed.wrapping_add(2))?;
        let disc_b = MlpClassifier::new(&disc_widths, seed.wrapping_add(3))?;
        let opt = |n: &MlpClassifier| SgdState::for_mlp(n, config.body_lr, config.head_lr, config.momentum, config.weight_decay);
        let table = one_hot_table(black_box_labels, k)?;
        Ok(Self {
            opt_a: opt(&net_a)?,
            opt_b: opt(&net_b)?,
            opt_disc_a: opt(&disc_a)?,
            opt_disc_b: opt(&disc_b)?,
            net_a,
            net_b,
            disc_a,
            disc_b,
            ema_a: table.clone(),
            ema_b: table,
        })
    }

    pub fn net(&self, role: NetRole) -> &MlpClassifier {
        match role {
            NetRole::A => &self.net_a,
            NetRole::B => &self.net_b,
        }
    }

    pub fn ema(&self, role: NetRole) -> &DenseArray {
        match role {
            NetRole::A => &self.ema_a,
            NetRole::B => &self.ema_b,
        }
    }

    fn parts_mut(&mut self, role: NetRole) -> (&mut MlpClassifier, &mut SgdState, &mut MlpClassifier, &mut SgdState) {
        match role {
            NetRole::A => (&mut self.net_a, &mut self.opt_a, &mut self.disc_a, &mut self.opt_disc_a),
            NetRole::B => (&mut self.net_b, &mut self.opt_b, &mut self.disc_b, &mut self.opt_disc_b),
        }
    }

    /// Hard pseudo labels: argmax of the network's table.
    pub fn pseudo_labels(&self, role: NetRole) -> Vec<usize> {
        self.ema(role).argmax_rows()
    }
}

fn one_hot_table(labels: &[usize], k: usize) -> Result<DenseArray> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dimension(format!("label {bad} outside 0..{k}")));
    }
    Ok(DenseArray::from_raw(labels.len(), k, labels.iter().flat_map(|&l| one_hot(l, k)).collect()))
}

/// `row <- m * row + (1 - m) * fresh`, renormalized.
pub fn ema_update(table: &DenseArray, fresh: &DenseArray, momentum: f64) -> Result<DenseArray> {
    if table.dims() != fresh.dims() {
        return Err(Error::Dimension(format!("table {:?} vs predictions {:?}", table.dims(), fresh.dims())));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1)")));
    }
    let (n, k) = table.dims();
    let mut out = Vec::with_capacity(n * k);
    for (row, new) in table.row_iter().zip(fresh.row_iter()) {
        let mixed: Vec<f64> = row.iter().zip(new).map(|(a, b)| momentum * a + (1.0 - momentum) * b).collect();
        let total: f64 = mixed.iter().sum();
        out.extend(mixed.into_iter().map(|v| v / total));
    }
    Ok(DenseArray::from_raw(n, k, out))
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn step_model(
    tape: &Tape,
    loss: crate::autodiff::Var,
    updates: &mut [(&mut MlpClassifier, &mut SgdState, &[crate::autodiff::Var])],
) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (model, opt, params) in updates.iter_mut() {
        let g: Vec<DenseArray> = params.iter().map(|&v| grads.wrt(tape, v)).collect();
        opt.step(&mut **model, &g)?;
    }
    Ok(())
}

/// Trains both networks on the one-hot black-box labels with
/// `CE - entropy_weight * H(p)` for `config.warmup_epochs` epochs.
pub fn warmup(twins: &mut TwinNets, x: &DenseArray, black_box_labels: &[usize], config: &BetaConfig) -> Result<()> {
    let k = twins.net_a.num_classes();
    let targets = one_hot_table(black_box_labels, k)?;
    for epoch in 0..config.warmup_epochs {
        for role in [NetRole::A, NetRole::B] {
            let mut rng = stream_rng(config.seed, epoch, PHASE_WARMUP, role);
            let (net, opt, _, _) = twins.parts_mut(role);
            for batch in shuffled_batches(x.rows(), config.batch_size, &mut rng) {
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let xb = tape.constant(x.select_rows(&batch));
                let z = bound.logits(&mut tape, xb)?;
                let ce = cross_entropy_graph(&mut tape, z, &targets.select_rows(&batch))?;
                let ne = negative_entropy_graph(&mut tape, z)?;
                let reg = tape.scale(ne.var()?, config.entropy_weight);
                let loss = tape.add(ce.var()?, reg)?;
                step_model(&tape, loss, &mut [(net, opt, bound.params())])?;
            }
        }
    }
    Ok(())
}

/// Mean step-1 terms over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistillStats {
    pub kd: f64,
    pub mi: f64,
}

/// One step-1 update of `net` on a batch: minimize
/// `kd_kl(pseudo) - mi_weight * MI`. Returns the objective before the step.
pub fn distill_step(
    net: &mut MlpClassifier,
    opt: &mut SgdState,
    xb: &DenseArray,
    pseudo: &DenseArray,
    mi_weight: f64,
) -> Result<DistillStats> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xv = tape.constant(xb.clone());
    let z = bound.logits(&mut tape, xv)?;
    let kd = kd_kl_graph(&mut tape, z, pseudo)?;
    let mi = mutual_info_graph(&mut tape, z)?;
    let weighted = tape.scale(mi.var()?, mi_weight);
    let mi_w = LossValue {
        value: mi_weight * mi.value,
        var: Some(weighted),
        clamped: mi.clamped,
    };
    let total = total_objective(Some(&mut tape), Some(DistillTerms { kd, mi: mi_w }), None, 0.0)?;
    step_model(&tape, total.var()?, &mut [(net, opt, bound.params())])?;
    Ok(DistillStats {
        kd: kd.value,
        mi: mi.value,
    })
}

/// Step 1 for both networks: distillation against each network's own
/// hard pseudo labels.
pub fn epoch_step1(twins: &mut TwinNets, x: &DenseArray, config: &BetaConfig, epoch: usize) -> Result<[DistillStats; 2]> {
    let mut out = [DistillStats::default(); 2];
    let k = twins.net_a.num_classes();
    for (slot, role) in [NetRole::A, NetRole::B].into_iter().enumerate() {
        let pseudo = one_hot_table(&twins.pseudo_labels(role), k)?;
        let mut rng = stream_rng(config.seed, epoch, PHASE_STEP1, role);
        let (net, opt, _, _) = twins.parts_mut(role);
        let mut sum = DistillStats::default();
        for batch in shuffled_batches(x.rows(), config.batch_size, &mut rng) {
            let s = distill_step(net, opt, &x.select_rows(&batch), &pseudo.select_rows(&batch), config.mi_weight)?;
            let w = batch.len() as f64;
            sum.kd += s.kd * w;
            sum.mi += s.mi * w;
        }
        out[slot] = DistillStats {
            kd: sum.kd / x.rows() as f64,
            mi: sum.mi / x.rows() as f64,
        };
    }
    Ok(out)
}

/// Per-sample losses, clean posteriors and the easy/hard split of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Division {
    pub losses: Vec<f64>,
    pub clean_prob: Vec<f64>,
    pub split: SubdomainSplit,
}

/// Divides the samples by `net`'s losses against `labels`.
pub fn divide_by_losses(
    net: &MlpClassifier,
    x: &DenseArray,
    labels: &[usize],
    role: NetRole,
    config: &BetaConfig,
) -> Result<Division> {
    let losses = per_sample_losses(net, x, labels)?;
    let gmm = fit_gmm2(&losses, config.gmm_max_iter, config.gmm_tol)?;
    if gmm.degenerate {
        log::warn!("net {role:?}: loss distribution has no spread, every sample treated as easy");
    }
    let clean_prob = gmm.posteriors(&losses);
    let split = divide(&clean_prob, labels, net.num_classes(), config.tau, role)?;
    split.validate(x.rows())?;
    Ok(Division {
        losses,
        clean_prob,
        split,
    })
}

/// A twin's split with refined targets, ready for semi-supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedSplit {
    pub split: SubdomainSplit,
    /// Soft targets of easy samples.
    pub easy_targets: DenseArray,
    /// Sharpened co-guessed targets of hard samples.
    pub hard_targets: DenseArray,
}

/// Refines `split` for `trainee`: easy labels are blended with the
/// trainee's predictions over alternating weak/strong views, hard labels
/// are co-guessed by both networks on weak views and sharpened.
pub fn refine_split<R: rand::Rng + ?Sized>(
    split: &SubdomainSplit,
    trainee: &MlpClassifier,
    other: &MlpClassifier,
    x: &DenseArray,
    policy: &AugmentationPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<RefinedSplit> {
    let k = trainee.num_classes();
    let easy_x = x.select_rows(&split.easy);
    let labels = one_hot_table(&split.easy_labels, k)?;
    let views = mean_view_predictions(trainee, &easy_x, policy, AugmentationPolicy::easy_view_kind, rng)?;
    let easy_targets = refine_easy(&labels, &split.easy_clean_prob, &views)?;
    let hard_targets = if split.hard.is_empty() {
        DenseArray::zeros(0, k)
    } else {
        let guessed = co_guess_hard(&x.select_rows(&split.hard), trainee, other, policy, rng)?;
        sharpen_rows(&guessed, temperature)?
    };
    Ok(RefinedSplit {
        split: split.clone(),
        easy_targets,
        hard_targets,
    })
}

fn concat(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let mut v = a.values().to_vec();
    v.extend_from_slice(b.values());
    DenseArray::from_raw(a.rows() + b.rows(), a.cols().max(b.cols()), v)
}

/// Mean step-2 terms over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DivisionStats {
    pub dd: f64,
    pub adv: f64,
}

/// Walks a shuffled index list cyclically, reshuffling on wrap-around.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One epoch of semi-supervised training of `net` on a refined split.
///
/// Each iteration draws easy and hard samples in proportion to the
/// subdomain sizes, augments easy samples weakly and hard samples strongly,
/// mixes both against their union, and minimizes `L_dd - gamma * L_adv`
/// with the discriminator behind a gradient-reversal boundary. With
/// `adversarial` false the discriminator branch is not built at all.
#[allow(clippy::too_many_arguments)]
pub fn train_on_split(
    net: &mut MlpClassifier,
    opt: &mut SgdState,
    disc: &mut MlpClassifier,
    disc_opt: &mut SgdState,
    x: &DenseArray,
    refined: &RefinedSplit,
    config: &BetaConfig,
    policy: &AugmentationPolicy,
    adversarial: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DivisionStats> {
    let split = &refined.split;
    let (ne, nh) = (split.easy.len(), split.hard.len());
    let n = ne + nh;
    if ne == 0 {
        return Err(Error::Threshold("easy subdomain is empty".into()));
    }
    let b = config.batch_size.min(n);
    let iterations = n.div_ceil(config.batch_size);
    let be = if nh == 0 {
        b
    } else {
        ((b * ne) as f64 / n as f64).round().clamp(1.0, (b - 1).max(1) as f64) as usize
    };
    let bh = if nh == 0 { 0 } else { (b - be).max(1) };
    let easy_x = x.select_rows(&split.easy);
    let hard_x = x.select_rows(&split.hard);
    let mut easy_cycle = Cycler::new(ne, rng);
    let mut hard_cycle = Cycler::new(nh, rng);

    let mut stats = DivisionStats::default();
    for _ in 0..iterations {
        let ei = easy_cycle.take(be, rng);
        let hi = if nh > 0 { hard_cycle.take(bh, rng) } else { Vec::new() };
        let xe = policy.augment(&easy_x.select_rows(&ei), AugmentKind::Weak, rng);
        let ye = refined.easy_targets.select_rows(&ei);
        let xh = policy.augment(&hard_x.select_rows(&hi), AugmentKind::Strong, rng);
        let yh = refined.hard_targets.select_rows(&hi);
        let pool_x = concat(&xe, &xh);
        let pool_y = concat(&ye, &yh);
        let me = mixup(&xe, &ye, &pool_x, &pool_y, config.mixup_alpha, rng)?;
        let mh = if nh > 0 {
            Some(mixup(&xh, &yh, &pool_x, &pool_y, config.mixup_alpha, rng)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xe_v = tape.constant(me.features.clone());
        let ze = bound.logits(&mut tape, xe_v)?;
        let zh = match &mh {
            Some(m) => {
                let v = tape.constant(m.features.clone());
                Some(bound.logits(&mut tape, v)?)
            }
            None => None,
        };
        let (dd, union) = mixmatch_loss(
            &mut tape,
            MixedOutputs {
                logits: ze,
                targets: &me.targets,
            },
            zh.zip(mh.as_ref()).map(|(z, m)| MixedOutputs {
                logits: z,
                targets: &m.targets,
            }),
            config.lambda_mse,
        )?;
        let disc_bound = disc.bind(&mut tape);
        let (adv, adv_train) = if adversarial && nh > 0 {
            let reversed = tape.reverse_gradient(union, config.gamma);
            let dz = disc_bound.logits(&mut tape, reversed)?;
            let adv = adversarial_graph(&mut tape, dz, be)?;
            (adv, Some(adv.var()?))
        } else {
            (
                LossValue {
                    value: 0.0,
                    var: None,
                    clamped: 0,
                },
                None,
            )
        };
        let total = total_objective(Some(&mut tape), None, Some(DivisionTerms { dd, adv, adv_train }), config.gamma)?;
        if adv_train.is_some() {
            step_model(
                &tape,
                total.var()?,
                &mut [(net, opt, bound.params()), (disc, disc_opt, disc_bound.params())],
            )?;
        } else {
            step_model(&tape, total.var()?, &mut [(net, opt, bound.params())])?;
        }
        stats.dd += dd.value;
        stats.adv += adv.value;
    }
    stats.dd /= iterations as f64;
    stats.adv /= iterations as f64;
    Ok(stats)
}

/// Seeds and switches for one step-2 epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step2Seeds {
    pub a: u64,
    pub b: u64,
}

/// The outcome of step 2: the refined splits each network trained on and
/// the per-network loss means.
#[derive(Debug, Clone, PartialEq)]
pub struct Step2Outcome {
    /// Refined from net A's division; net B trained on it.
    pub refined_from_a: RefinedSplit,
    /// Refined from net B's division; net A trained on it.
    pub refined_from_b: RefinedSplit,
    pub stats: [DivisionStats; 2],
}

/// Step 2 with cross supervision. Net A trains on `split_b` and net B on
/// `split_a`. Refinement reads a snapshot of both networks taken before
/// either is updated.
#[allow(clippy::too_many_arguments)]
pub fn epoch_step2(
    twins: &mut TwinNets,
    split_a: &SubdomainSplit,
    split_b: &SubdomainSplit,
    x: &DenseArray,
    config: &BetaConfig,
    policy: &AugmentationPolicy,
    seeds: Step2Seeds,
    adversarial: bool,
) -> Result<Step2Outcome> {
    if split_a.produced_by != NetRole::A || split_b.produced_by != NetRole::B {
        return Err(Error::Usage(format!(
            "splits produced by {:?} and {:?}, expected A and B",
            split_a.produced_by, split_b.produced_by
        )));
    }
    let snap_a = twins.net_a.clone();
    let snap_b = twins.net_b.clone();
    let mut rng_a = ChaCha8Rng::seed_from_u64(seeds.a);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seeds.b);

    let refined_from_b = refine_split(split_b, &snap_a, &snap_b, x, policy, config.temperature, &mut rng_a)?;
    let refined_from_a = refine_split(split_a, &snap_b, &snap_a, x, policy, config.temperature, &mut rng_b)?;

    let mut stats = [DivisionStats::default(); 2];
    for (slot, role) in [NetRole::A, NetRole::B].into_iter().enumerate() {
        let (refined, rng) = match role {
            NetRole::A => (&refined_from_b, &mut rng_a),
            NetRole::B => (&refined_from_a, &mut rng_b),
        };
        debug_assert_eq!(refined.split.produced_by, role.other());
        let (net, opt, disc, disc_opt) = twins.parts_mut(role);
        stats[slot] = train_on_split(net, opt, disc, disc_opt, x, refined, config, policy, adversarial, rng)?;
    }
    Ok(Step2Outcome {
        refined_from_a,
        refined_from_b,
        stats,
    })
}

/// Maximizes the mutual information alone at a reduced learning rate.
pub fn finetune(twins: &mut TwinNets, x: &DenseArray, config: &BetaConfig) -> Result<()> {
    for role in [NetRole::A, NetRole::B] {
        let (net, opt, _, _) = twins.parts_mut(role);
        let mut ft = opt.clone();
        ft.scale_learning_rates(config.finetune_lr_scale);
        for epoch in 0..config.finetune_epochs {
            let mut rng = stream_rng(config.seed, epoch, PHASE_FINETUNE, role);
            for batch in shuffled_batches(x.rows(), config.batch_size, &mut rng) {
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let xb = tape.constant(x.select_rows(&batch));
                let z = bound.logits(&mut tape, xb)?;
                let mi = mutual_info_graph(&mut tape, z)?;
                let loss = tape.scale(mi.var()?, -1.0);
                step_model(&tape, loss, &mut [(net, &mut ft, bound.params())])?;
            }
        }
    }
    Ok(())
}

/// Standardized target features plus the black-box answers.
#[derive(Debug, Clone)]
pub struct PreparedTarget {
    pub raw: DenseArray,
    pub x: DenseArray,
    pub standardizer: Standardizer,
    pub black_box_labels: Vec<usize>,
    pub num_classes: usize,
    truth: Option<Vec<usize>>,
}

impl PreparedTarget {
    /// Queries the black box once for every target sample.
    pub fn new(black_box: &mut BlackBoxHandle, target: &LabeledVectorSet) -> Result<Self> {
        let black_box_labels = black_box.predict_hard(target.features())?;
        let standardizer = Standardizer::fit(target.features());
        Ok(Self {
            raw: target.features().clone(),
            x: standardizer.apply(target.features()),
            standardizer,
            black_box_labels,
            num_classes: black_box.num_classes(),
            truth: target.ground_truth_for_diagnostics().map(<[usize]>::to_vec),
        })
    }

    pub fn truth(&self) -> Option<&[usize]> {
        self.truth.as_deref()
    }

    pub fn source_only_accuracy(&self) -> Option<f64> {
        self.truth().map(|t| accuracy(&self.black_box_labels, t))
    }
}

struct Diagnostics<'a> {
    truth: Option<&'a [usize]>,
    h_star: Option<Vec<usize>>,
}

impl Diagnostics<'_> {
    /// Noise ratios, accuracies and the bound at `bound_alpha` for one row.
    fn fill(
        &self,
        row: &mut EpochMetrics,
        twins: &TwinNets,
        x: &DenseArray,
        split: &SubdomainSplit,
        config: &BetaConfig,
        epoch: usize,
    ) -> Result<()> {
        let Some(truth) = self.truth else { return Ok(()) };
        let pick = |idx: &[usize]| idx.iter().map(|&i| truth[i]).collect::<Vec<_>>();
        row.rho_e = Some(noise_ratio(&split.easy_labels, &pick(&split.easy))?);
        row.rho_h = Some(noise_ratio(&split.hard_soft_labels.argmax_rows(), &pick(&split.hard))?);
        let pred_a = twins.net_a.predict(x)?;
        row.acc_a = Some(accuracy(&pred_a, truth));
        row.acc_b = Some(accuracy(&twins.net_b.predict(x)?, truth));
        let seed = stream_rng(config.seed, epoch, PHASE_DIAGNOSTICS, NetRole::A).next_u64();
        let est = diagnostics::check_bound(
            &pred_a,
            self.h_star.as_deref(),
            x,
            split,
            truth,
            &[config.bound_alpha],
            seed,
        )?;
        row.bound_lhs = Some(est[0].lhs);
        row.bound_rhs = Some(est[0].rhs);
        Ok(())
    }
}

fn at_epoch<T>(epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Epoch {
        epoch,
        source: Box::new(e),
    })
}

/// Runs `method` end to end and returns both networks (taking raw target
/// features) and the report.
pub fn run_method(
    method: Method,
    config: &BetaConfig,
    black_box: &mut BlackBoxHandle,
    target: &LabeledVectorSet,
) -> Result<(MlpClassifier, MlpClassifier, AdaptationReport)> {
    config.validate()?;
    if target.dim() != black_box.input_dim() {
        return Err(Error::Dimension(format!(
            "target has {} features, black box expects {}",
            target.dim(),
            black_box.input_dim()
        )));
    }
    let prepared = PreparedTarget::new(black_box, target)?;
    let (a, b, mut report) = run_prepared(method, config, &prepared)?;
    report.black_box_queries = black_box.query_count();
    Ok((a, b, report))
}

/// The full procedure.
pub fn run_beta(
    config: &BetaConfig,
    black_box: &mut BlackBoxHandle,
    target: &LabeledVectorSet,
) -> Result<(MlpClassifier, MlpClassifier, AdaptationReport)> {
    run_method(Method::Beta, config, black_box, target)
}

/// Runs on an already-queried target; no black-box access happens here.
pub fn run_prepared(
    method: Method,
    config: &BetaConfig,
    prepared: &PreparedTarget,
) -> Result<(MlpClassifier, MlpClassifier, AdaptationReport)> {
    config.validate()?;
    let x = &prepared.x;
    let k = prepared.num_classes;
    let bb = &prepared.black_box_labels;
    let policy = config.augmentation.fitted_to(x)?;
    let mut twins = TwinNets::new(config, x.cols(), k, bb)?;

    let diag = Diagnostics {
        truth: prepared.truth(),
        h_star: match prepared.truth() {
            Some(t) => diagnostics::ideal_probe_predictions(x, t, k, &config.hidden, config.seed ^ 0x4a5f)?,
            None => None,
        },
    };

    let w = config.warmup_epochs;
    at_epoch(0, warmup(&mut twins, x, bb, config))?;

    let mut rows = Vec::new();
    let mut row = EpochMetrics {
        epoch: w,
        ..Default::default()
    };
    match divide_by_losses(&twins.net_a, x, bb, NetRole::A, config) {
        Ok(div) => at_epoch(w, diag.fill(&mut row, &twins, x, &div.split, config, w))?,
        Err(e) => log::warn!("no division after warm-up: {e}"),
    }
    rows.push(row);

    for epoch in w + 1..=config.epochs {
        let row = at_epoch(epoch, adaptation_epoch(method, &mut twins, x, config, &policy, &diag, epoch))?;
        log::info!(
            "epoch {epoch}: kd {:?} mi {:?} dd {:?} adv {:?} acc_a {:?}",
            row.l_kd,
            row.l_mi,
            row.l_dd,
            row.l_adv,
            row.acc_a
        );
        rows.push(row);
    }

    let adaptation_epochs = config.adaptation_epochs();
    if adaptation_epochs > 0 {
        at_epoch(config.epochs, finetune(&mut twins, x, config))?;
    }

    let (mut net_a, mut net_b) = (twins.net_a, twins.net_b);
    fold_standardizer(&mut net_a, &prepared.standardizer);
    fold_standardizer(&mut net_b, &prepared.standardizer);
    let (acc_a, acc_b) = match prepared.truth() {
        Some(t) => {
            (
                Some(accuracy(&net_a.predict(&prepared.raw)?, t)),
                Some(accuracy(&net_b.predict(&prepared.raw)?, t)),
            )
        }
        None => (None, None),
    };
    let report = AdaptationReport {
        method: method.name().into(),
        warmup_epochs: w,
        adaptation_epochs,
        rows,
        acc_a,
        acc_b,
        source_only_acc: prepared.source_only_accuracy(),
        black_box_queries: 0,
        config: config.clone(),
    };
    Ok((net_a, net_b, report))
}

fn adaptation_epoch(
    method: Method,
    twins: &mut TwinNets,
    x: &DenseArray,
    config: &BetaConfig,
    policy: &AugmentationPolicy,
    diag: &Diagnostics<'_>,
    epoch: usize,
) -> Result<EpochMetrics> {
    if !config.freeze_pseudo_labels {
        twins.ema_a = ema_update(&twins.ema_a, &twins.net_a.forward(x)?, config.ema_momentum)?;
        twins.ema_b = ema_update(&twins.ema_b, &twins.net_b.forward(x)?, config.ema_momentum)?;
    }
    let s1 = epoch_step1(twins, x, config, epoch)?;
    let mut row = EpochMetrics {
        epoch,
        l_kd: Some(s1[0].kd),
        l_mi: Some(s1[0].mi),
        ..Default::default()
    };

    let labels_a = twins.pseudo_labels(NetRole::A);
    let div_a = divide_by_losses(&twins.net_a, x, &labels_a, NetRole::A, config)?;
    let mut reported = div_a.split.clone();
    if method == Method::Beta {
        let labels_b = twins.pseudo_labels(NetRole::B);
        let div_b = divide_by_losses(&twins.net_b, x, &labels_b, NetRole::B, config)?;
        let seeds = Step2Seeds {
            a: stream_rng(config.seed, epoch, PHASE_STEP2, NetRole::A).next_u64(),
            b: stream_rng(config.seed, epoch, PHASE_STEP2, NetRole::B).next_u64(),
        };
        let out = epoch_step2(twins, &div_a.split, &div_b.split, x, config, policy, seeds, true)?;
        row.l_dd = Some(out.stats[0].dd);
        row.l_adv = Some(out.stats[0].adv);
        // hard pseudo labels in use are the co-guessed ones
        reported.hard_soft_labels = out.refined_from_a.hard_targets;
    }
    diag.fill(&mut row, twins, x, &reported, config, epoch)?;
    Ok(row)
}
