use beta_core::config::BetaConfig;
use beta_core::division::NetRole;
use beta_core::nn::MlpClassifier;
use beta_core::refine::AugmentationPolicy;
use beta_core::trainer::{divide_by_losses, refine_split, train_on_split, warmup, PreparedTarget, RefinedSplit, TwinNets};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Task;

pub struct Setup {
    pub cfg: BetaConfig,
    pub prep: PreparedTarget,
    pub twins: TwinNets,
    pub policy: AugmentationPolicy,
}

pub fn warmed(task: &Task, cfg: BetaConfig) -> Setup {
    let prep = task.prepared();
    let mut twins = TwinNets::new(&cfg, prep.x.cols(), task.classes, &prep.black_box_labels).unwrap();
    warmup(&mut twins, &prep.x, &prep.black_box_labels, &cfg).unwrap();
    let policy = cfg.augmentation.fitted_to(&prep.x).unwrap();
    Setup {
        cfg,
        prep,
        twins,
        policy,
    }
}

pub fn refined_for_a(s: &Setup, seed: u64) -> RefinedSplit {
    let labels = s.twins.pseudo_labels(NetRole::B);
    let div = divide_by_losses(&s.twins.net_b, &s.prep.x, &labels, NetRole::B, &s.cfg).unwrap();
    assert!(!div.split.hard.is_empty(), "fixture needs a hard subdomain");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refine_split(&div.split, &s.twins.net_a, &s.twins.net_b, &s.prep.x, &s.policy, s.cfg.temperature, &mut rng).unwrap()
}

pub fn train_a(s: &Setup, refined: &RefinedSplit, cfg: &BetaConfig, adversarial: bool) -> (MlpClassifier, MlpClassifier) {
    let mut t = s.twins.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    train_on_split(
        &mut t.net_a,
        &mut t.opt_a,
        &mut t.disc_a,
        &mut t.opt_disc_a,
        &s.prep.x,
        refined,
        cfg,
        &s.policy,
        adversarial,
        &mut rng,
    )
    .unwrap();
    (t.net_a, t.disc_a)
}
