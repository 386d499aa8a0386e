//! Seeded gradient-verification suite.
//!
//! Every analytic gradient in the training path is compared against central
//! differences on small random instances: the three losses on their own, and
//! the full `loss ∘ encode` composite with respect to encoder parameters in
//! both the queue and the in-batch modes.

use crate::contrastive::{
    contrastive_loss, mixco_loss, mixup_half_batch, simclr_contrastive_loss, ContrastInstance,
    MixedHalfBatch,
};
use crate::encoder::{embed, encode, encoder_backward, init_encoder, EncoderParams, NORM_EPS};
use crate::error::Result;
use crate::numerics::{finite_difference_check, l2_normalize_rows, GradCheckReport, SeededRng, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradSuiteReport {
    pub instances: usize,
    pub contrastive: GradCheckReport,
    pub simclr: GradCheckReport,
    pub mixco: GradCheckReport,
    pub composite_moco: GradCheckReport,
    pub composite_simclr: GradCheckReport,
}

impl GradSuiteReport {
    pub fn worst(&self) -> GradCheckReport {
        self.contrastive
            .worst(self.simclr)
            .worst(self.mixco)
            .worst(self.composite_moco)
            .worst(self.composite_simclr)
    }

    pub fn families(&self) -> [(&'static str, GradCheckReport); 5] {
        [
            ("contrastive", self.contrastive),
            ("simclr", self.simclr),
            ("mixco", self.mixco),
            ("composite moco+mixco", self.composite_moco),
            ("composite simclr+mixco", self.composite_simclr),
        ]
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
        .expect("shape matches data")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Tensor> {
    Ok(l2_normalize_rows(&random_matrix(rows, cols, rng), NORM_EPS)?.output)
}

fn as_matrix(point: &Tensor, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, point.data().to_vec()).expect("shape matches data")
}

fn params_at(template: &EncoderParams, point: &Tensor) -> Result<EncoderParams> {
    let mut p = template.clone();
    p.set_flat(point.data())?;
    Ok(p)
}

fn flat_grad(g: &EncoderParams) -> Tensor {
    Tensor::vector(g.flatten())
}

/// Zero biases put every row with all hidden units inactive exactly on the
/// normalization guard, where the loss is not differentiable.
fn random_biases(mut params: EncoderParams, rng: &mut SeededRng) -> EncoderParams {
    for (i, t) in params.tensors_mut().enumerate() {
        if i % 2 == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = 0.5 * rng.normal());
        }
    }
    params
}

/// One random instance: shapes, temperatures and tensors drawn from `seed`.
struct Instance {
    batch: usize,
    tau: f64,
    tau_mix: f64,
    beta: f64,
    queries: Tensor,
    keys: Tensor,
    queue: Tensor,
    x_q: Tensor,
    x_k: Tensor,
    encoder: EncoderParams,
    key_encoder: EncoderParams,
    mixed: MixedHalfBatch,
    mix_rng_seed: u64,
}

/// Distance every ReLU input and output norm must keep from the
/// non-differentiable set, far beyond what a probe step can move them.
const SMOOTHNESS_MARGIN: f64 = 1e-3;

fn smooth_at(params: &EncoderParams, x: &Tensor) -> Result<bool> {
    let (_, trace) = encode(params, x)?;
    Ok(trace.relu_margin() > SMOOTHNESS_MARGIN && trace.min_norm() > SMOOTHNESS_MARGIN)
}

impl Instance {
    /// Draws from `seed`, redrawing while any encoder input sits within
    /// [`SMOOTHNESS_MARGIN`] of a ReLU kink or the normalization guard.
    fn draw(seed: u64) -> Result<Self> {
        let mut attempt = 0u64;
        loop {
            let inst = Self::draw_once(seed, attempt)?;
            if smooth_at(&inst.encoder, &inst.x_q)?
                && smooth_at(&inst.encoder, &inst.x_k)?
                && smooth_at(&inst.encoder, inst.mixed.x_mix())?
                && smooth_at(&inst.key_encoder, &inst.x_k)?
            {
                return Ok(inst);
            }
            attempt += 1;
        }
    }

    fn draw_once(seed: u64, attempt: u64) -> Result<Self> {
        let mut rng = SeededRng::with_stream(seed, attempt);
        let batch = 2 * (1 + rng.below(4) as usize);
        let queue_len = rng.below(9) as usize;
        let dim = 2 + rng.below(7) as usize;
        let input = 2 + rng.below(5) as usize;
        let hidden = 2 + rng.below(7) as usize;
        let tau = rng.uniform_range(0.1, 1.0);
        let tau_mix = rng.uniform_range(0.05, 1.0);
        let beta = rng.uniform_range(0.1, 2.0);
        let queries = unit_rows(batch, dim, &mut rng)?;
        let keys = unit_rows(batch, dim, &mut rng)?;
        let queue = unit_rows(queue_len, dim, &mut rng)?;
        let x_q = random_matrix(batch, input, &mut rng);
        let x_k = random_matrix(batch, input, &mut rng);
        let encoder = random_biases(init_encoder(&[input, hidden, dim], &mut rng)?, &mut rng);
        let key_encoder = random_biases(init_encoder(&[input, hidden, dim], &mut rng)?, &mut rng);
        let mix_rng_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let mixed = mixup_half_batch(&x_q, &mut SeededRng::new(mix_rng_seed))?;
        Ok(Instance {
            batch,
            tau,
            tau_mix,
            beta,
            queries,
            keys,
            queue,
            x_q,
            x_k,
            encoder,
            key_encoder,
            mixed,
            mix_rng_seed,
        })
    }

    fn dim(&self) -> usize {
        self.queries.cols()
    }

    fn check_contrastive(&self, step: f64) -> Result<GradCheckReport> {
        let (b, c) = (self.batch, self.dim());
        finite_difference_check(
            |p| {
                let q = as_matrix(p, b, c);
                let out = contrastive_loss(&ContrastInstance {
                    queries: &q,
                    keys: &self.keys,
                    queue: &self.queue,
                    tau: self.tau,
                })?;
                Ok((out.loss, Tensor::vector(out.grad_queries.into_data())))
            },
            &Tensor::vector(self.queries.data().to_vec()),
            step,
        )
    }

    fn check_simclr(&self, step: f64) -> Result<GradCheckReport> {
        let (b, c) = (self.batch, self.dim());
        // Both arguments stacked into one point.
        let mut point = self.queries.data().to_vec();
        point.extend_from_slice(self.keys.data());
        finite_difference_check(
            |p| {
                let v = as_matrix(&Tensor::vector(p.data()[..b * c].to_vec()), b, c);
                let vp = as_matrix(&Tensor::vector(p.data()[b * c..].to_vec()), b, c);
                let out = simclr_contrastive_loss(&v, &vp, self.tau)?;
                let mut g = out.grad_queries.into_data();
                g.extend(out.grad_keys.into_data());
                Ok((out.loss, Tensor::vector(g)))
            },
            &Tensor::vector(point),
            step,
        )
    }

    fn check_mixco(&self, step: f64) -> Result<GradCheckReport> {
        let (half, c) = (self.batch / 2, self.dim());
        let mut rng = SeededRng::new(self.mix_rng_seed);
        let lambdas: Vec<f64> = (0..half).map(|_| rng.uniform_open()).collect();
        let v_mix = unit_rows(half, c, &mut rng)?;
        let split = half * c;
        let mut point = v_mix.data().to_vec();
        point.extend_from_slice(self.keys.data());
        finite_difference_check(
            |p| {
                let vm = as_matrix(&Tensor::vector(p.data()[..split].to_vec()), half, c);
                let k = as_matrix(&Tensor::vector(p.data()[split..].to_vec()), self.batch, c);
                let out = mixco_loss(&vm, &k, &self.queue, &lambdas, self.tau_mix)?;
                let mut g = out.grad_v_mix.into_data();
                g.extend(out.grad_keys.into_data());
                Ok((out.loss, Tensor::vector(g)))
            },
            &Tensor::vector(point),
            step,
        )
    }

    /// Query-encoder parameters against `l_contrast + β·l_mixco` with keys
    /// from a fixed key encoder.
    fn check_composite_moco(&self, step: f64) -> Result<GradCheckReport> {
        let keys = embed(&self.key_encoder, &self.x_k)?;
        let mixed = &self.mixed;
        finite_difference_check(
            |p| {
                let params = params_at(&self.encoder, p)?;
                let (q, trace) = encode(&params, &self.x_q)?;
                let lc = contrastive_loss(&ContrastInstance {
                    queries: &q,
                    keys: &keys,
                    queue: &self.queue,
                    tau: self.tau,
                })?;
                let (q_mix, mix_trace) = encode(&params, mixed.x_mix())?;
                let lm = mixco_loss(&q_mix, &keys, &self.queue, mixed.lambdas(), self.tau_mix)?;
                let mut g = encoder_backward(&params, &trace, &lc.grad_queries)?.params;
                let gm = encoder_backward(&params, &mix_trace, &lm.grad_v_mix.scale(self.beta))?.params;
                for (a, b) in g.tensors_mut().zip(gm.tensors()) {
                    a.add_scaled(b, 1.0)?;
                }
                Ok((lc.loss + self.beta * lm.loss, flat_grad(&g)))
            },
            &Tensor::vector(self.encoder.flatten()),
            step,
        )
    }

    /// Encoder parameters against the in-batch objective, where keys also
    /// depend on the parameters.
    fn check_composite_simclr(&self, step: f64) -> Result<GradCheckReport> {
        let mixed = &self.mixed;
        let empty = Tensor::zeros(&[0, self.dim()]);
        finite_difference_check(
            |p| {
                let params = params_at(&self.encoder, p)?;
                let (q, q_trace) = encode(&params, &self.x_q)?;
                let (k, k_trace) = encode(&params, &self.x_k)?;
                let lc = simclr_contrastive_loss(&q, &k, self.tau)?;
                let (q_mix, mix_trace) = encode(&params, mixed.x_mix())?;
                let lm = mixco_loss(&q_mix, &k, &empty, mixed.lambdas(), self.tau_mix)?;
                let mut grad_k = lc.grad_keys;
                grad_k.add_scaled(&lm.grad_keys, self.beta)?;
                let mut g = encoder_backward(&params, &q_trace, &lc.grad_queries)?.params;
                let parts = [
                    encoder_backward(&params, &k_trace, &grad_k)?.params,
                    encoder_backward(&params, &mix_trace, &lm.grad_v_mix.scale(self.beta))?.params,
                ];
                for part in &parts {
                    for (a, b) in g.tensors_mut().zip(part.tensors()) {
                        a.add_scaled(b, 1.0)?;
                    }
                }
                Ok((lc.loss + self.beta * lm.loss, flat_grad(&g)))
            },
            &Tensor::vector(self.encoder.flatten()),
            step,
        )
    }
}

/// Runs every check on `instances` random instances derived from `seed` and
/// keeps the worst report per family.
pub fn run_gradient_suite(seed: u64, instances: usize, step: f64) -> Result<GradSuiteReport> {
    let mut report: Option<GradSuiteReport> = None;
    for i in 0..instances as u64 {
        let inst = Instance::draw(seed.wrapping_mul(1_000_003).wrapping_add(i))?;
        let next = GradSuiteReport {
            instances: i as usize + 1,
            contrastive: inst.check_contrastive(step)?,
            simclr: inst.check_simclr(step)?,
            mixco: inst.check_mixco(step)?,
            composite_moco: inst.check_composite_moco(step)?,
            composite_simclr: inst.check_composite_simclr(step)?,
        };
        report = Some(match report {
            None => next,
            Some(r) => GradSuiteReport {
                instances: next.instances,
                contrastive: r.contrastive.worst(next.contrastive),
                simclr: r.simclr.worst(next.simclr),
                mixco: r.mixco.worst(next.mixco),
                composite_moco: r.composite_moco.worst(next.composite_moco),
                composite_simclr: r.composite_simclr.worst(next.composite_simclr),
            },
        });
    }
    report.ok_or_else(|| crate::MixcoError::config("gradient suite needs at least one instance"))
}
