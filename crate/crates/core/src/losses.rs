//! Training objectives.
//!
//! Each objective exists twice: a plain evaluation over probability rows
//! (used for metrics and per-sample statistics) and a tape builder that
//! starts from logits so gradients can flow. Logarithms of probabilities are
//! taken through log-softmax on the tape; the plain versions clamp at
//! [`LOG_FLOOR`]. All entropies are in nats.

use crate::autodiff::{Tape, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Scalar objective value, optionally tied to a tape node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub var: Option<Var>,
    /// Number of log arguments that hit the clamp.
    pub clamped: usize,
}

impl LossValue {
    fn plain(value: f64, clamped: usize) -> Self {
        Self {
            value,
            var: None,
            clamped,
        }
    }

    fn on_tape(tape: &Tape, var: Var) -> Self {
        Self {
            value: tape.scalar(var),
            var: Some(var),
            clamped: 0,
        }
    }

    pub fn var(&self) -> Result<Var> {
        self.var
            .ok_or_else(|| Error::Usage("loss was not recorded on a tape".into()))
    }
}

fn clamped_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < LOG_FLOOR {
        *clamped += 1;
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "distribution lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `-sum_k target_k ln probs_k`.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> Result<LossValue> {
    check_pair(probs, target)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        if t > 0.0 {
            total -= t * clamped_ln(p, &mut clamped);
        }
    }
    Ok(LossValue::plain(total, clamped))
}

/// `sum_k p_k ln p_k`, with `0 ln 0 = 0`.
pub fn negative_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -negative_entropy(probs)
}

/// `D_KL(pseudo || student)`.
pub fn kd_kl(pseudo: &[f64], student: &[f64]) -> Result<LossValue> {
    check_pair(pseudo, student)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (&q, &p) in pseudo.iter().zip(student) {
        if q > 0.0 {
            total += q * (q.ln() - clamped_ln(p, &mut clamped));
        }
    }
    Ok(LossValue::plain(total.max(0.0), clamped))
}

fn column_mean(rows: &DenseArray) -> Vec<f64> {
    let (n, k) = rows.dims();
    let mut mean = vec![0.0; k];
    for row in rows.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    mean
}

/// `H(mean_i p_i) - mean_i H(p_i)`.
pub fn mutual_info(batch_probs: &DenseArray) -> Result<f64> {
    let n = batch_probs.rows();
    if n == 0 {
        return Err(Error::Usage("mutual information of an empty batch".into()));
    }
    let marginal = entropy(&column_mean(batch_probs));
    let conditional = batch_probs.row_iter().map(entropy).sum::<f64>() / n as f64;
    Ok((marginal - conditional).max(0.0))
}

/// `sum_k pi_k ln(pi_k / mean_k)` with uniform `pi`.
pub fn reg_uniform(batch_probs: &DenseArray) -> Result<LossValue> {
    if batch_probs.rows() == 0 {
        return Err(Error::Usage("class-balance term of an empty batch".into()));
    }
    let mean = column_mean(batch_probs);
    let k = mean.len() as f64;
    let pi = 1.0 / k;
    let mut clamped = 0;
    let value = mean
        .iter()
        .map(|&m| pi * (pi.ln() - clamped_ln(m, &mut clamped)))
        .sum::<f64>();
    Ok(LossValue::plain(value, clamped))
}

/// Squared error normalized by the number of classes.
pub fn mse_row(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// `mean_easy ln Omega(x) + mean_hard ln(1 - Omega(x))`, where `Omega` is the
/// discriminator's probability of the easy subdomain.
pub fn adversarial_value(easy_omega: &[f64], hard_omega: &[f64]) -> Result<LossValue> {
    if easy_omega.is_empty() || hard_omega.is_empty() {
        return Err(Error::Usage("adversarial term needs both subdomains".into()));
    }
    let mut clamped = 0;
    let e = easy_omega.iter().map(|&w| clamped_ln(w, &mut clamped)).sum::<f64>()
        / easy_omega.len() as f64;
    let h = hard_omega
        .iter()
        .map(|&w| clamped_ln(1.0 - w, &mut clamped))
        .sum::<f64>()
        / hard_omega.len() as f64;
    Ok(LossValue::plain(e + h, clamped))
}

/// Terms of the distillation step.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub kd: LossValue,
    pub mi: LossValue,
}

/// Terms of the division step. `adv_train` is the tape node that drives
/// the min-max through a gradient-reversal boundary; its value is not used.
#[derive(Debug, Clone, Copy)]
pub struct DivisionTerms {
    pub dd: LossValue,
    pub adv: LossValue,
    pub adv_train: Option<Var>,
}

/// Overall objective for whichever step is active: `L_kd - L_mi` or
/// `L_dd - gamma * L_adv`. The two steps are optimized in separate phases,
/// so passing both is a usage error.
pub fn total_objective(
    tape: Option<&mut Tape>,
    step1: Option<DistillTerms>,
    step2: Option<DivisionTerms>,
    gamma: f64,
) -> Result<LossValue> {
    match (step1, step2) {
        (Some(_), Some(_)) => Err(Error::Usage(
            "distillation and division steps cannot share a backward pass".into(),
        )),
        (None, None) => Err(Error::Usage("no step terms given".into())),
        (Some(t), None) => {
            let value = t.kd.value - t.mi.value;
            match (tape, t.kd.var, t.mi.var) {
                (Some(tape), Some(kd), Some(mi)) => {
                    let v = tape.sub(kd, mi)?;
                    Ok(LossValue {
                        value,
                        var: Some(v),
                        clamped: t.kd.clamped + t.mi.clamped,
                    })
                }
                _ => Ok(LossValue::plain(value, t.kd.clamped + t.mi.clamped)),
            }
        }
        (None, Some(t)) => {
            let value = t.dd.value - gamma * t.adv.value;
            let clamped = t.dd.clamped + t.adv.clamped;
            match (tape, t.dd.var) {
                (Some(tape), Some(dd)) => {
                    let var = match t.adv_train {
                        Some(adv) => tape.sub(dd, adv)?,
                        None => dd,
                    };
                    Ok(LossValue {
                        value,
                        var: Some(var),
                        clamped,
                    })
                }
                _ => Ok(LossValue::plain(value, clamped)),
            }
        }
    }
}

// ---- tape builders ------------------------------------------------------

fn check_targets(tape: &Tape, logits: Var, targets: &DenseArray) -> Result<()> {
    if tape.value(logits).dims() != targets.dims() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs targets {:?}",
            tape.value(logits).dims(),
            targets.dims()
        )));
    }
    if targets.rows() == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    Ok(())
}

/// Batch-mean cross-entropy of `softmax(logits)` against soft targets.
pub fn cross_entropy_graph(tape: &mut Tape, logits: Var, targets: &DenseArray) -> Result<LossValue> {
    check_targets(tape, logits, targets)?;
    let n = targets.rows() as f64;
    let lp = tape.log_softmax(logits);
    let t = tape.constant(targets.clone());
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod);
    let v = tape.scale(s, -1.0 / n);
    Ok(LossValue::on_tape(tape, v))
}

/// Batch-mean `sum_k p_k ln p_k`.
pub fn negative_entropy_graph(tape: &mut Tape, logits: Var) -> Result<LossValue> {
    let n = tape.value(logits).rows() as f64;
    let p = tape.softmax(logits);
    let lp = tape.log_softmax(logits);
    let prod = tape.mul(p, lp)?;
    let s = tape.sum(prod);
    let v = tape.scale(s, 1.0 / n);
    Ok(LossValue::on_tape(tape, v))
}

/// Batch-mean `D_KL(pseudo || softmax(logits))`.
pub fn kd_kl_graph(tape: &mut Tape, logits: Var, pseudo: &DenseArray) -> Result<LossValue> {
    let ce = cross_entropy_graph(tape, logits, pseudo)?;
    let n = pseudo.rows() as f64;
    let self_entropy: f64 = pseudo.row_iter().map(entropy).sum::<f64>() / n;
    let v = tape.add_scalar(ce.var()?, -self_entropy);
    Ok(LossValue::on_tape(tape, v))
}

fn batch_mean_probs(tape: &mut Tape, probs: Var) -> Var {
    let n = tape.value(probs).rows() as f64;
    let cs = tape.col_sum(probs);
    tape.scale(cs, 1.0 / n)
}

/// `H(batch-mean prediction) - batch-mean H(prediction)`.
pub fn mutual_info_graph(tape: &mut Tape, logits: Var) -> Result<LossValue> {
    let n = tape.value(logits).rows();
    if n == 0 {
        return Err(Error::Usage("mutual information of an empty batch".into()));
    }
    let p = tape.softmax(logits);
    let mean = batch_mean_probs(tape, p);
    let log_mean = tape.log(mean);
    let mm = tape.mul(mean, log_mean)?;
    let marginal_neg = tape.sum(mm); // -H(mean)
    let cond_neg = negative_entropy_graph(tape, logits)?.var()?; // -mean H
    let v = tape.sub(cond_neg, marginal_neg)?;
    Ok(LossValue::on_tape(tape, v))
}

/// `sum_k pi_k ln(pi_k / mean_k)` over the rows of `probs`.
pub fn reg_uniform_graph(tape: &mut Tape, probs: Var) -> Result<LossValue> {
    let (n, k) = tape.value(probs).dims();
    if n == 0 {
        return Err(Error::Usage("class-balance term of an empty batch".into()));
    }
    let pi = 1.0 / k as f64;
    let mean = batch_mean_probs(tape, probs);
    let log_mean = tape.log(mean);
    let s = tape.sum(log_mean);
    let s = tape.scale(s, -pi);
    let v = tape.add_scalar(s, pi.ln());
    Ok(LossValue::on_tape(tape, v))
}

/// Batch-mean of `sum_k (p_k - t_k)^2 / K`.
pub fn mse_graph(tape: &mut Tape, probs: Var, targets: &DenseArray) -> Result<LossValue> {
    check_targets(tape, probs, targets)?;
    let (n, k) = targets.dims();
    let t = tape.constant(targets.clone());
    let d = tape.sub(probs, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    let v = tape.scale(s, 1.0 / (n * k) as f64);
    Ok(LossValue::on_tape(tape, v))
}

/// Classifier outputs and targets of one mixed subdomain batch.
#[derive(Debug, Clone, Copy)]
pub struct MixedOutputs<'a> {
    pub logits: Var,
    pub targets: &'a DenseArray,
}

/// `CE(mixed easy) + lambda_mse * MSE(mixed hard) + class-balance(union)`.
///
/// Returns the loss plus the softmax node over the union of both batches
/// (easy rows first), which the adversarial branch reads.
pub fn mixmatch_loss(
    tape: &mut Tape,
    easy: MixedOutputs<'_>,
    hard: Option<MixedOutputs<'_>>,
    lambda_mse: f64,
) -> Result<(LossValue, Var)> {
    if easy.targets.rows() == 0 {
        return Err(Error::Usage("mixed easy batch is empty".into()));
    }
    let ce = cross_entropy_graph(tape, easy.logits, easy.targets)?;
    let p_easy = tape.softmax(easy.logits);
    let mut total = ce.var()?;
    let union = match hard {
        Some(h) if h.targets.rows() > 0 => {
            let p_hard = tape.softmax(h.logits);
            let mse = mse_graph(tape, p_hard, h.targets)?;
            let weighted = tape.scale(mse.var()?, lambda_mse);
            total = tape.add(total, weighted)?;
            concat_rows(tape, p_easy, p_hard)?
        }
        _ => p_easy,
    };
    let reg = reg_uniform_graph(tape, union)?;
    total = tape.add(total, reg.var()?)?;
    Ok((LossValue::on_tape(tape, total), union))
}

/// Stacks two row blocks through constant selection matrices so gradients
/// reach both inputs.
fn concat_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.value(a).rows();
    let nb = tape.value(b).rows();
    let n = na + nb;
    let mut sel_a = vec![0.0; n * na];
    for i in 0..na {
        sel_a[i * na + i] = 1.0;
    }
    let mut sel_b = vec![0.0; n * nb];
    for i in 0..nb {
        sel_b[(na + i) * nb + i] = 1.0;
    }
    let sa = tape.constant(DenseArray::from_raw(n, na, sel_a));
    let sb = tape.constant(DenseArray::from_raw(n, nb, sel_b));
    let top = tape.matmul(sa, a)?;
    let bottom = tape.matmul(sb, b)?;
    tape.add(top, bottom)
}

/// Subdomain log-likelihood from discriminator logits over `n_easy` easy
/// rows followed by hard rows. Column 0 is the easy class.
pub fn adversarial_graph(tape: &mut Tape, disc_logits: Var, n_easy: usize) -> Result<LossValue> {
    let (n, k) = tape.value(disc_logits).dims();
    if k != 2 {
        return Err(Error::Dimension(format!("discriminator has {k} outputs, expected 2")));
    }
    let n_hard = n.checked_sub(n_easy).unwrap_or(0);
    if n_easy == 0 || n_hard == 0 {
        return Err(Error::Usage("adversarial term needs both subdomains".into()));
    }
    let lp = tape.log_softmax(disc_logits);
    let mut mask = vec![0.0; n * 2];
    for i in 0..n_easy {
        mask[i * 2] = 1.0 / n_easy as f64;
    }
    for i in n_easy..n {
        mask[i * 2 + 1] = 1.0 / n_hard as f64;
    }
    let m = tape.constant(DenseArray::from_raw(n, 2, mask));
    let prod = tape.mul(lp, m)?;
    let v = tape.sum(prod);
    Ok(LossValue::on_tape(tape, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    const LN2: f64 = std::f64::consts::LN_2;

    fn rows(r: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap().value, 0.0);
        let u = cross_entropy(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]).unwrap().value;
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let v = cross_entropy(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap().value;
        assert!((v - 0.356675).abs() < 1e-6);
        assert!((v + 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let l = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn negative_entropy_closed_forms() {
        assert_eq!(negative_entropy(&[0.0, 1.0]), 0.0);
        assert!((negative_entropy(&[0.25; 4]) + 4f64.ln()).abs() < 1e-12);
        assert!((negative_entropy(&[0.5, 0.5]) + LN2).abs() < 1e-12);
    }

    #[test]
    fn kd_closed_forms() {
        let p = [0.2, 0.3, 0.5];
        assert!(kd_kl(&p, &p).unwrap().value.abs() < 1e-15);
        let v = kd_kl(&[0.0, 1.0, 0.0], &[0.25, 0.5, 0.25]).unwrap().value;
        assert!((v - LN2).abs() < 1e-12);
        // 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5) = 0.368064...
        let v = kd_kl(&[0.9, 0.1], &[0.5, 0.5]).unwrap().value;
        let direct = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.368064).abs() < 1e-6, "{v}");
    }

    #[test]
    fn mutual_info_cases() {
        let same = rows(&[&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]]);
        assert!(mutual_info(&same).unwrap().abs() < 1e-12);
        let eye = rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!((mutual_info(&eye).unwrap() - 3f64.ln()).abs() < 1e-12);
        let uni = rows(&[&[0.25; 4], &[0.25; 4]]);
        assert!(mutual_info(&uni).unwrap().abs() < 1e-12);
    }

    #[test]
    fn reg_uniform_cases() {
        let uni = rows(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert!(reg_uniform(&uni).unwrap().value.abs() < 1e-12);
        let skew = rows(&[&[0.75, 0.25]]);
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let v = reg_uniform(&skew).unwrap().value;
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn mse_per_row_normalization() {
        assert!((mse_row(&[0.6, 0.4], &[1.0, 0.0]).unwrap() - 0.16).abs() < 1e-12);
    }

    #[test]
    fn adversarial_blind_and_perfect() {
        let v = adversarial_value(&[0.5; 3], &[0.5; 2]).unwrap().value;
        assert!((v + 4f64.ln()).abs() < 1e-12);
        let perfect = adversarial_value(&[1.0], &[0.0]).unwrap();
        assert!(perfect.value <= 0.0 && perfect.value > -1e-9);
        let clamped = adversarial_value(&[0.0], &[1.0]).unwrap();
        assert_eq!(clamped.clamped, 2);
    }

    fn plain(v: f64) -> LossValue {
        LossValue::plain(v, 0)
    }

    #[test]
    fn total_objective_arithmetic() {
        let s1 = DistillTerms { kd: plain(0.5), mi: plain(0.2) };
        assert!((total_objective(None, Some(s1), None, 0.1).unwrap().value - 0.3).abs() < 1e-15);
        let s2 = DivisionTerms { dd: plain(1.0), adv: plain(-1.0), adv_train: None };
        assert!((total_objective(None, None, Some(s2), 0.1).unwrap().value - 1.1).abs() < 1e-15);
        assert_eq!(total_objective(None, None, Some(s2), 0.0).unwrap().value, 1.0);
        assert!(matches!(
            total_objective(None, Some(s1), Some(s2), 0.1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn graph_values_match_plain_values() {
        let probs = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.3, 0.6]]);
        let targets = rows(&[&[1.0, 0.0, 0.0], &[0.2, 0.2, 0.6]]);
        let logits: Vec<Vec<f64>> = probs.row_iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        let logits = DenseArray::from_rows(&logits).unwrap();

        let mut t = Tape::new();
        let z = t.constant(logits);
        let ce = cross_entropy_graph(&mut t, z, &targets).unwrap().value;
        let expect = (cross_entropy(probs.row(0), targets.row(0)).unwrap().value
            + cross_entropy(probs.row(1), targets.row(1)).unwrap().value)
            / 2.0;
        assert!((ce - expect).abs() < 1e-12);

        let kd = kd_kl_graph(&mut t, z, &targets).unwrap().value;
        let expect = (kd_kl(targets.row(0), probs.row(0)).unwrap().value
            + kd_kl(targets.row(1), probs.row(1)).unwrap().value)
            / 2.0;
        assert!((kd - expect).abs() < 1e-12);

        let mi = mutual_info_graph(&mut t, z).unwrap().value;
        assert!((mi - mutual_info(&probs).unwrap()).abs() < 1e-12);

        let ne = negative_entropy_graph(&mut t, z).unwrap().value;
        let expect = (negative_entropy(probs.row(0)) + negative_entropy(probs.row(1))) / 2.0;
        assert!((ne - expect).abs() < 1e-12);

        let p = t.softmax(z);
        let reg = reg_uniform_graph(&mut t, p).unwrap().value;
        assert!((reg - reg_uniform(&probs).unwrap().value).abs() < 1e-12);
        let mse = mse_graph(&mut t, p, &targets).unwrap().value;
        let expect = (mse_row(probs.row(0), targets.row(0)).unwrap()
            + mse_row(probs.row(1), targets.row(1)).unwrap())
            / 2.0;
        assert!((mse - expect).abs() < 1e-12);
    }

    #[test]
    fn mixmatch_zero_weight_and_perfect() {
        let easy_t = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let hard_t = rows(&[&[0.3, 0.7]]);
        let mut t = Tape::new();
        let ze = t.constant(rows(&[&[0.4, -0.2], &[0.1, 0.9]]));
        let zh = t.constant(rows(&[&[2.0, -1.0]]));
        let (l, union) = mixmatch_loss(
            &mut t,
            MixedOutputs { logits: ze, targets: &easy_t },
            Some(MixedOutputs { logits: zh, targets: &hard_t }),
            0.0,
        )
        .unwrap();
        let ce = cross_entropy_graph(&mut t, ze, &easy_t).unwrap().value;
        let reg = reg_uniform_graph(&mut t, union).unwrap().value;
        assert_eq!(l.value, ce + reg);

        // perfect easy predictions and a uniform batch mean
        let mut t = Tape::new();
        let ze = t.constant(rows(&[&[800.0, 0.0], &[0.0, 800.0]]));
        let (l, _) = mixmatch_loss(&mut t, MixedOutputs { logits: ze, targets: &easy_t }, None, 1.0)
            .unwrap();
        assert!(l.value.abs() < 1e-12);

        let mut t = Tape::new();
        let empty = DenseArray::zeros(0, 2);
        let ze = t.constant(empty.clone());
        assert!(mixmatch_loss(&mut t, MixedOutputs { logits: ze, targets: &empty }, None, 0.0).is_err());
    }

    #[test]
    fn every_loss_passes_gradcheck() {
        let logits = rows(&[&[0.3, -0.8, 0.5], &[1.2, 0.1, -0.4], &[-0.6, 0.9, 0.2], &[0.05, 0.0, -0.3]]);
        let soft = rows(&[&[0.6, 0.3, 0.1], &[0.0, 1.0, 0.0], &[0.2, 0.2, 0.6], &[0.5, 0.25, 0.25]]);
        let check = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
            let err = gradcheck(&[logits.clone()], 1e-5, |t, v| f(t, v[0])).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        };
        check(&|t, z| cross_entropy_graph(t, z, &soft)?.var());
        check(&|t, z| negative_entropy_graph(t, z)?.var());
        check(&|t, z| kd_kl_graph(t, z, &soft)?.var());
        check(&|t, z| mutual_info_graph(t, z)?.var());
        check(&|t, z| {
            let p = t.softmax(z);
            reg_uniform_graph(t, p)?.var()
        });
        check(&|t, z| {
            let e = t.slice_rows(z, 0, 2)?;
            let h = t.slice_rows(z, 2, 2)?;
            let et = soft.select_rows(&[0, 1]);
            let ht = soft.select_rows(&[2, 3]);
            let (l, _) = mixmatch_loss(
                t,
                MixedOutputs { logits: e, targets: &et },
                Some(MixedOutputs { logits: h, targets: &ht }),
                0.7,
            )?;
            l.var()
        });
        let disc = rows(&[&[0.4, -0.1], &[0.2, 0.3], &[-0.5, 0.6], &[0.0, 0.1]]);
        let err = gradcheck(&[disc], 1e-5, |t, v| adversarial_graph(t, v[0], 2)?.var()).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
