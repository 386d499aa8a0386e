//! Contrastive objectives: InfoNCE against a negative queue, its in-batch
//! variant, and the mix-up objective that scores mixed queries against soft
//! `λ / 1−λ` targets.
//!
//! All losses are means over query rows and return gradients with respect to
//! the embeddings that produced the logits.

use crate::error::{MixcoError, Result};
use crate::numerics::{
    dot, kl_divergence_to_logits, matmul, matmul_at, soft_cross_entropy, LossGrad, SeededRng,
    Tensor,
};

/// Mixed inputs for the first half of a batch.
///
/// Row `i` mixes sample `i` with its partner `i + B/2`:
/// `x_mix[i] = λ_i·x[i] + (1−λ_i)·x[i + B/2]`.
#[derive(Debug, Clone)]
pub struct MixedHalfBatch {
    x_mix: Tensor,
    lambdas: Vec<f64>,
}

impl MixedHalfBatch {
    pub fn x_mix(&self) -> &Tensor {
        &self.x_mix
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Number of mixed rows, `B/2`.
    pub fn half(&self) -> usize {
        self.lambdas.len()
    }

    /// Index of the sample mixed into row `i` with weight `1 − λ_i`.
    pub fn partner(&self, i: usize) -> usize {
        i + self.half()
    }
}

fn check_even_batch(b: usize) -> Result<()> {
    if b < 2 || b % 2 != 0 {
        return Err(MixcoError::config(format!(
            "mix-up needs an even batch of at least 2 rows, got {b}"
        )));
    }
    Ok(())
}

/// Draws `λ_i ~ Unif(0, 1)` per mixed row and mixes the two batch halves.
pub fn mixup_half_batch(x: &Tensor, rng: &mut SeededRng) -> Result<MixedHalfBatch> {
    let (b, _) = x.expect_matrix("mixup_half_batch")?;
    check_even_batch(b)?;
    let lambdas = (0..b / 2).map(|_| rng.uniform_open()).collect();
    mixup_with_lambdas(x, lambdas)
}

/// Mixes with caller-chosen coefficients. Endpoints 0 and 1 are accepted here
/// so the pure-copy cases can be exercised.
pub fn mixup_with_lambdas(x: &Tensor, lambdas: Vec<f64>) -> Result<MixedHalfBatch> {
    let (b, d) = x.expect_matrix("mixup_with_lambdas")?;
    check_even_batch(b)?;
    let half = b / 2;
    if lambdas.len() != half {
        return Err(MixcoError::Dimension {
            op: "mixup_with_lambdas",
            left: vec![half],
            right: vec![lambdas.len()],
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(MixcoError::contract(format!("mixing coefficient {l} outside [0, 1]")));
    }
    let mut data = Vec::with_capacity(half * d);
    for (i, &lam) in lambdas.iter().enumerate() {
        for (a, c) in x.row(i).iter().zip(x.row(i + half)) {
            data.push(lam * a + (1.0 - lam) * c);
        }
    }
    Ok(MixedHalfBatch {
        x_mix: Tensor::matrix(half, d, data)?,
        lambdas,
    })
}

/// Queries, their positive keys and the negative queue for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ContrastInstance<'a> {
    /// `B × C` query embeddings.
    pub queries: &'a Tensor,
    /// `B × C` key embeddings; row `i` is the positive for query `i`.
    pub keys: &'a Tensor,
    /// `K × C` negatives. `K = 0` is allowed.
    pub queue: &'a Tensor,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastLoss {
    pub loss: f64,
    pub grad_queries: Tensor,
    /// Set when there are no negatives and the loss is identically zero.
    pub degenerate: bool,
}

fn check_temperature(tau: f64, name: &str) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(MixcoError::config(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

fn check_embeddings(op: &'static str, a: &Tensor, b: &Tensor, same_rows: bool) -> Result<()> {
    let (ra, ca) = a.expect_matrix(op)?;
    let (rb, cb) = b.expect_matrix(op)?;
    if ca != cb || (same_rows && ra != rb) {
        return Err(MixcoError::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// InfoNCE with the positive logit in column 0 and the queue as negatives:
/// mean over `i` of `−log softmax([q_i·k_i, q_i·n_1, …, q_i·n_K] / τ)_0`.
pub fn contrastive_loss(inst: &ContrastInstance<'_>) -> Result<ContrastLoss> {
    check_temperature(inst.tau, "tau")?;
    check_embeddings("contrastive_loss", inst.queries, inst.keys, true)?;
    check_embeddings("contrastive_loss", inst.queries, inst.queue, false)?;
    let (b, c) = (inst.queries.rows(), inst.queries.cols());
    let k = inst.queue.rows();
    let width = 1 + k;

    let mut logits = Vec::with_capacity(b * width);
    for i in 0..b {
        let q = inst.queries.row(i);
        logits.push(dot(q, inst.keys.row(i)) / inst.tau);
        for neg in inst.queue.row_iter() {
            logits.push(dot(q, neg) / inst.tau);
        }
    }
    let logits = Tensor::matrix(b, width, logits)?;
    let mut targets = Tensor::zeros(&[b, width]);
    for i in 0..b {
        targets.set(i, 0, 1.0);
    }
    let LossGrad { value, grad } = soft_cross_entropy(&logits, &targets)?;

    let mut grad_queries = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let g = grad.row(i);
        let out = grad_queries.row_mut(i);
        for (o, kv) in out.iter_mut().zip(inst.keys.row(i)) {
            *o += g[0] * kv;
        }
        for (j, neg) in inst.queue.row_iter().enumerate() {
            for (o, nv) in out.iter_mut().zip(neg) {
                *o += g[1 + j] * nv;
            }
        }
        for o in out.iter_mut() {
            *o /= inst.tau;
        }
    }
    Ok(ContrastLoss {
        loss: value,
        grad_queries,
        degenerate: k == 0,
    })
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_queries: Tensor,
    pub grad_keys: Tensor,
}

/// In-batch InfoNCE: row `i` scores `v_i` against every `v′_j`, with the
/// positive on the diagonal and the other `B − 1` keys as negatives.
pub fn simclr_contrastive_loss(v: &Tensor, v_prime: &Tensor, tau: f64) -> Result<PairLoss> {
    check_temperature(tau, "tau")?;
    check_embeddings("simclr_contrastive_loss", v, v_prime, true)?;
    let b = v.rows();
    if b < 2 {
        return Err(MixcoError::config(format!(
            "in-batch contrast needs at least 2 rows, got {b}"
        )));
    }
    let logits = scaled_dots(v, v_prime, tau)?;
    let targets = Tensor::identity(b);
    let LossGrad { value, grad } = soft_cross_entropy(&logits, &targets)?;
    Ok(PairLoss {
        loss: value,
        grad_queries: matmul(&grad, v_prime)?.scale(1.0 / tau),
        grad_keys: matmul_at(&grad, v)?.scale(1.0 / tau),
    })
}

fn scaled_dots(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for ai in a.row_iter() {
        for bj in b.row_iter() {
            out.push(dot(ai, bj) / tau);
        }
    }
    Tensor::matrix(a.rows(), b.rows(), out)
}

/// `[v_mix·keysᵀ | v_mix·queueᵀ] / τ_mix`, shape `(B/2) × (B + K)`.
pub fn build_mixco_logits(
    v_mix: &Tensor,
    keys: &Tensor,
    queue: &Tensor,
    tau_mix: f64,
) -> Result<Tensor> {
    check_temperature(tau_mix, "tau_mix")?;
    check_embeddings("build_mixco_logits", v_mix, keys, false)?;
    check_embeddings("build_mixco_logits", v_mix, queue, false)?;
    let (n, b, k) = (v_mix.rows(), keys.rows(), queue.rows());
    let mut out = Vec::with_capacity(n * (b + k));
    for q in v_mix.row_iter() {
        for key in keys.row_iter().chain(queue.row_iter()) {
            out.push(dot(q, key) / tau_mix);
        }
    }
    Tensor::matrix(n, b + k, out)
}

/// Soft targets for the mixed queries: row `i` holds `λ_i` at column `i`,
/// `1 − λ_i` at column `i + B/2` and zero everywhere else, including all queue
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MixcoTargets(Tensor);

impl MixcoTargets {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn into_matrix(self) -> Tensor {
        self.0
    }
}

pub fn build_mixco_targets(lambdas: &[f64], batch: usize, queue_len: usize) -> Result<MixcoTargets> {
    check_even_batch(batch)?;
    let half = batch / 2;
    if lambdas.len() != half {
        return Err(MixcoError::Dimension {
            op: "build_mixco_targets",
            left: vec![half],
            right: vec![lambdas.len()],
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(MixcoError::contract(format!("mixing coefficient {l} outside (0, 1)")));
    }
    let mut t = Tensor::zeros(&[half, batch + queue_len]);
    for (i, &lam) in lambdas.iter().enumerate() {
        t.set(i, i, lam);
        t.set(i, i + half, 1.0 - lam);
    }
    Ok(MixcoTargets(t))
}

/// Which of the two equivalent objectives to report for the mix-up term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixcoForm {
    /// `−Σ t log p`, the λ-weighted sum of the two log-likelihoods.
    #[default]
    SoftCrossEntropy,
    /// `KL(t ‖ p)`: the cross-entropy minus the target entropy.
    KlDivergence,
}

#[derive(Debug, Clone)]
pub struct MixcoLoss {
    pub loss: f64,
    pub grad_v_mix: Tensor,
    /// Gradient with respect to the batch keys. Ignored when keys come from
    /// the momentum encoder.
    pub grad_keys: Tensor,
}

pub fn mixco_loss(
    v_mix: &Tensor,
    keys: &Tensor,
    queue: &Tensor,
    lambdas: &[f64],
    tau_mix: f64,
) -> Result<MixcoLoss> {
    mixco_loss_with_form(MixcoForm::SoftCrossEntropy, v_mix, keys, queue, lambdas, tau_mix)
}

pub fn mixco_loss_with_form(
    form: MixcoForm,
    v_mix: &Tensor,
    keys: &Tensor,
    queue: &Tensor,
    lambdas: &[f64],
    tau_mix: f64,
) -> Result<MixcoLoss> {
    let logits = build_mixco_logits(v_mix, keys, queue, tau_mix)?;
    if v_mix.rows() != lambdas.len() {
        return Err(MixcoError::Dimension {
            op: "mixco_loss",
            left: v_mix.shape().to_vec(),
            right: vec![lambdas.len()],
        });
    }
    let targets = build_mixco_targets(lambdas, keys.rows(), queue.rows())?;
    let LossGrad { value, grad } = match form {
        MixcoForm::SoftCrossEntropy => soft_cross_entropy(&logits, targets.matrix())?,
        MixcoForm::KlDivergence => kl_divergence_to_logits(&logits, targets.matrix())?,
    };
    let (n, b, c) = (v_mix.rows(), keys.rows(), v_mix.cols());

    let mut grad_v_mix = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let g = grad.row(i);
        let out = grad_v_mix.row_mut(i);
        for (j, key) in keys.row_iter().chain(queue.row_iter()).enumerate() {
            for (o, kv) in out.iter_mut().zip(key) {
                *o += g[j] * kv;
            }
        }
        for o in out.iter_mut() {
            *o /= tau_mix;
        }
    }

    let mut grad_keys = Tensor::zeros(&[b, c]);
    for i in 0..n {
        let g = grad.row(i);
        let q = v_mix.row(i);
        for j in 0..b {
            for (o, qv) in grad_keys.row_mut(j).iter_mut().zip(q) {
                *o += g[j] * qv;
            }
        }
    }
    let grad_keys = grad_keys.scale(1.0 / tau_mix);
    Ok(MixcoLoss {
        loss: value,
        grad_v_mix,
        grad_keys,
    })
}

/// `l_contrast + β·l_mixco`.
pub fn total_loss(l_contrast: f64, l_mixco: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0, "beta must be nonnegative");
    l_contrast + beta * l_mixco
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, l2_normalize_rows, mean_target_entropy};

    fn unit_rows(n: usize, c: usize, rng: &mut SeededRng) -> Tensor {
        let t = Tensor::matrix(n, c, (0..n * c).map(|_| rng.normal()).collect()).unwrap();
        l2_normalize_rows(&t, 1e-12).unwrap().output
    }

    #[test]
    fn mixup_endpoints() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let m = mixup_with_lambdas(&x, vec![1.0, 0.0]).unwrap();
        assert_eq!(m.x_mix().row(0), x.row(0));
        assert_eq!(m.x_mix().row(1), x.row(3));
        assert_eq!(m.partner(1), 3);
    }

    #[test]
    fn mixup_quarter() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [5.0, 6.0]]).unwrap();
        let m = mixup_with_lambdas(&x, vec![0.25]).unwrap();
        assert_eq!(m.x_mix().row(0), &[4.0, 5.0]);
    }

    #[test]
    fn mixup_random_satisfies_invariant() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let m = mixup_half_batch(&x, &mut rng).unwrap();
        for (i, &lam) in m.lambdas().iter().enumerate() {
            assert!(lam > 0.0 && lam < 1.0);
            for j in 0..3 {
                let expected = lam * x.get(i, j) + (1.0 - lam) * x.get(i + 3, j);
                assert_eq!(m.x_mix().get(i, j).to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn mixup_odd_batch() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            mixup_half_batch(&x, &mut SeededRng::new(0)),
            Err(MixcoError::Config(_))
        ));
    }

    #[test]
    fn no_negatives_is_zero() {
        let mut rng = SeededRng::new(2);
        let q = unit_rows(4, 3, &mut rng);
        let k = unit_rows(4, 3, &mut rng);
        let queue = Tensor::zeros(&[0, 3]);
        let out = contrastive_loss(&ContrastInstance { queries: &q, keys: &k, queue: &queue, tau: 0.2 })
            .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.degenerate);
        assert!(out.grad_queries.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        let q = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        // Every key and negative is orthogonal to its query.
        let queue = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let out = contrastive_loss(&ContrastInstance { queries: &q, keys: &k, queue: &queue, tau: 0.2 })
            .unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    fn bad_temperature() {
        let q = Tensor::zeros(&[2, 2]);
        let queue = Tensor::zeros(&[2, 2]);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                contrastive_loss(&ContrastInstance { queries: &q, keys: &q, queue: &queue, tau }),
                Err(MixcoError::Config(_))
            ));
            assert!(build_mixco_logits(&q, &q, &queue, tau).is_err());
        }
    }

    #[test]
    fn simclr_two_orthonormal_rows() {
        let tau = 0.2;
        let v = Tensor::identity(2);
        let out = simclr_contrastive_loss(&v, &v, tau).unwrap();
        let e = (1.0f64 / tau).exp();
        let sigma = e / (e + 1.0);
        assert!((out.loss + sigma.ln()).abs() < 1e-12);
    }

    #[test]
    fn simclr_identical_rows() {
        let row = [0.6, 0.8];
        let v = Tensor::from_rows(&[row, row, row, row, row]).unwrap();
        let out = simclr_contrastive_loss(&v, &v, 0.5).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn simclr_needs_two_rows() {
        let v = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            simclr_contrastive_loss(&v, &v, 0.2),
            Err(MixcoError::Config(_))
        ));
    }

    #[test]
    fn simclr_gradients() {
        let mut rng = SeededRng::new(3);
        let v = unit_rows(4, 3, &mut rng);
        let vp = unit_rows(4, 3, &mut rng);
        let r = finite_difference_check(
            |x| {
                let o = simclr_contrastive_loss(x, &vp, 0.2)?;
                Ok((o.loss, o.grad_queries))
            },
            &v,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        let r = finite_difference_check(
            |x| {
                let o = simclr_contrastive_loss(&v, x, 0.2)?;
                Ok((o.loss, o.grad_keys))
            },
            &vp,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = SeededRng::new(4);
        let q = unit_rows(4, 3, &mut rng);
        let k = unit_rows(4, 3, &mut rng);
        let queue = unit_rows(4, 3, &mut rng);
        let r = finite_difference_check(
            |x| {
                let o = contrastive_loss(&ContrastInstance { queries: x, keys: &k, queue: &queue, tau: 0.2 })?;
                Ok((o.loss, o.grad_queries))
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn targets_example() {
        let t = build_mixco_targets(&[0.3, 0.7], 4, 2).unwrap();
        let m = t.matrix();
        assert_eq!(m.row(0), &[0.3, 0.0, 0.7, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.7, 0.0, 1.0 - 0.7, 0.0, 0.0]);
        assert!((m.get(1, 3) - 0.3).abs() < 1e-15);
        for row in m.row_iter() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(build_mixco_targets(&[0.5], 2, 0).unwrap().matrix().shape(), &[1, 2]);
    }

    #[test]
    fn targets_reject_endpoints() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                build_mixco_targets(&[bad, 0.5], 4, 0),
                Err(MixcoError::Contract(_))
            ));
        }
    }

    #[test]
    fn logits_orthonormal_and_empty_queue() {
        let keys = Tensor::identity(4);
        let v_mix = Tensor::from_rows(&[[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        let queue = Tensor::zeros(&[0, 4]);
        let l = build_mixco_logits(&v_mix, &keys, &queue, 1.0).unwrap();
        assert_eq!(l.shape(), &[2, 4]);
        assert_eq!(l.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(l.row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mixco_uniform_logits() {
        // B=4, K=4: every key and negative orthogonal to both mixed queries.
        let v_mix = Tensor::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let keys = Tensor::from_rows(&[[0.0, 1.0, 0.0]; 4]).unwrap();
        let queue = Tensor::from_rows(&[[0.0, 0.0, 1.0]; 4]).unwrap();
        for lams in [[0.1, 0.9], [0.5, 0.5], [0.999, 0.0001]] {
            let out = mixco_loss(&v_mix, &keys, &queue, &lams, 0.05).unwrap();
            assert!((out.loss - 8f64.ln()).abs() < 1e-12);
            assert!((out.loss - 2.079_441_5).abs() < 1e-7);
        }
    }

    #[test]
    fn mixco_kl_form_offsets_by_entropy() {
        let mut rng = SeededRng::new(5);
        let v_mix = unit_rows(2, 3, &mut rng);
        let keys = unit_rows(4, 3, &mut rng);
        let queue = unit_rows(2, 3, &mut rng);
        let lams = [0.3, 0.8];
        let ce = mixco_loss(&v_mix, &keys, &queue, &lams, 0.05).unwrap();
        let kl = mixco_loss_with_form(MixcoForm::KlDivergence, &v_mix, &keys, &queue, &lams, 0.05)
            .unwrap();
        let h = mean_target_entropy(build_mixco_targets(&lams, 4, 2).unwrap().matrix());
        assert!((ce.loss - kl.loss - h).abs() < 1e-10);
        assert!(ce.grad_v_mix.max_abs_diff(&kl.grad_v_mix) <= 1e-12);
    }

    #[test]
    fn mixco_near_one_reduces_to_single_positive() {
        let mut rng = SeededRng::new(6);
        let v_mix = unit_rows(2, 3, &mut rng);
        let keys = unit_rows(4, 3, &mut rng);
        let queue = unit_rows(3, 3, &mut rng);
        let lam = 1.0 - 1e-13;
        let out = mixco_loss(&v_mix, &keys, &queue, &[lam, lam], 0.05).unwrap();
        let logits = build_mixco_logits(&v_mix, &keys, &queue, 0.05).unwrap();
        let lp = crate::numerics::log_softmax(&logits).unwrap();
        let expected = -(lp.get(0, 0) + lp.get(1, 1)) / 2.0;
        assert!((out.loss - expected).abs() < 1e-10);
    }

    #[test]
    fn mixco_gradients() {
        let mut rng = SeededRng::new(7);
        let v_mix = unit_rows(2, 3, &mut rng);
        let keys = unit_rows(4, 3, &mut rng);
        let queue = unit_rows(2, 3, &mut rng);
        let lams = [0.35, 0.6];
        let r = finite_difference_check(
            |x| {
                let o = mixco_loss(x, &keys, &queue, &lams, 0.05)?;
                Ok((o.loss, o.grad_v_mix))
            },
            &v_mix,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        let r = finite_difference_check(
            |x| {
                let o = mixco_loss(&v_mix, x, &queue, &lams, 0.05)?;
                Ok((o.loss, o.grad_keys))
            },
            &keys,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.25, 7.0, 0.0), 1.25);
        assert_eq!(total_loss(1.0, 2.0, 1.0), 3.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }
}
