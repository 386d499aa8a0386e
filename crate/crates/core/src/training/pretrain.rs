//! The pretraining loop.
//!
//! Per batch: two augmented views; query embeddings (and mixed-query
//! embeddings when the mix-up term is on); keys from the momentum encoder, or
//! from the query encoder itself in the in-batch modes; the contrastive and
//! mix-up losses; one SGD step on the query encoder; then the EMA update and
//! enqueue of the new keys.
//!
//! Randomness comes from four independent streams of the run seed, so turning
//! the mix-up term on or off never shifts the other draws.

use std::path::Path;
use std::time::Instant;

use crate::contrastive::{
    contrastive_loss, mixco_loss, mixup_half_batch, simclr_contrastive_loss, total_loss,
    ContrastInstance,
};
use crate::data::{epoch_batches, two_views, UnlabeledView};
use crate::encoder::{apply_sgd_step, encode, encoder_backward, init_encoder, EncoderParams, SgdVelocity};
use crate::error::{MixcoError, Result};
use crate::moco::{DetachedKeys, MoCoState};
use crate::numerics::{SeededRng, Tensor};
use crate::textio::{write_file, LineReader};

use super::config::RunConfig;

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_BATCHES: u64 = 1;
pub(crate) const STREAM_AUGMENT: u64 = 2;
pub(crate) const STREAM_MIX: u64 = 3;

/// Epoch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_contrast: f64,
    pub l_mixco: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    /// Full momentum-contrast state; `None` in the in-batch modes.
    pub moco: Option<MoCoState>,
    pub metrics: Vec<MetricsRecord>,
}

/// The untrained encoder a run with this config starts from.
pub fn initial_encoder(cfg: &RunConfig) -> Result<EncoderParams> {
    init_encoder(&cfg.layer_sizes(), &mut SeededRng::with_stream(cfg.seed, STREAM_INIT))
}

/// Trains a freshly initialized encoder.
pub fn pretrain(cfg: &RunConfig, data: UnlabeledView<'_>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut init_rng = SeededRng::with_stream(cfg.seed, STREAM_INIT);
    let query = init_encoder(&cfg.layer_sizes(), &mut init_rng)?;
    let moco = if cfg.mode.uses_momentum_encoder() {
        Some(MoCoState::from_query(
            query.clone(),
            cfg.queue_size,
            cfg.key_momentum,
            &mut init_rng,
        )?)
    } else {
        None
    };
    pretrain_from(cfg, data, query, moco)
}

fn add_into(acc: &mut EncoderParams, other: &EncoderParams, scale: f64) -> Result<()> {
    for (a, b) in acc.tensors_mut().zip(other.tensors()) {
        a.add_scaled(b, scale)?;
    }
    Ok(())
}

struct StepRngs<'a> {
    augment: &'a mut SeededRng,
    mix: &'a mut SeededRng,
}

struct StepOutput {
    grads: EncoderParams,
    l_contrast: f64,
    l_mixco: f64,
    /// Keys to enqueue; `None` in the in-batch modes.
    detached: Option<DetachedKeys>,
}

/// Forward and backward pass of one batch; the encoder is not modified.
fn batch_gradients(
    cfg: &RunConfig,
    x: &Tensor,
    params: &EncoderParams,
    moco: Option<&MoCoState>,
    empty_queue: &Tensor,
    rngs: &mut StepRngs<'_>,
) -> Result<StepOutput> {
    let (x_q, x_k) = two_views(x, &cfg.augment, rngs.augment)?;
    let (q, q_trace) = encode(params, &x_q)?;

    // Keys: detached from the momentum encoder, or live from the query
    // encoder when contrasting in-batch.
    let (keys, detached, k_trace) = match moco {
        Some(state) => {
            let d = state.key_forward_no_grad(&x_k)?;
            (d.as_tensor().clone(), Some(d), None)
        }
        None => {
            let (k, trace) = encode(params, &x_k)?;
            (k, None, Some(trace))
        }
    };
    let queue = moco.map_or(empty_queue, |s| s.queue().rows());

    let (l_contrast, grad_q, mut grad_k) = if moco.is_some() {
        let out = contrastive_loss(&ContrastInstance {
            queries: &q,
            keys: &keys,
            queue,
            tau: cfg.tau,
        })?;
        (out.loss, out.grad_queries, None)
    } else {
        let out = simclr_contrastive_loss(&q, &keys, cfg.tau)?;
        (out.loss, out.grad_queries, Some(out.grad_keys))
    };
    let mut grads = encoder_backward(params, &q_trace, &grad_q)?.params;

    let mut l_mixco = 0.0;
    if cfg.mode.mixco_active() {
        let mixed = mixup_half_batch(&x_q, rngs.mix)?;
        let (q_mix, mix_trace) = encode(params, mixed.x_mix())?;
        let out = mixco_loss(&q_mix, &keys, queue, mixed.lambdas(), cfg.tau_mix)?;
        l_mixco = out.loss;
        if cfg.beta != 0.0 {
            let g = encoder_backward(params, &mix_trace, &out.grad_v_mix.scale(cfg.beta))?;
            add_into(&mut grads, &g.params, 1.0)?;
            if let Some(gk) = grad_k.as_mut() {
                gk.add_scaled(&out.grad_keys, cfg.beta)?;
            }
        }
    }
    if let (Some(gk), Some(trace)) = (grad_k.as_ref(), k_trace.as_ref()) {
        let g = encoder_backward(params, trace, gk)?;
        add_into(&mut grads, &g.params, 1.0)?;
    }
    Ok(StepOutput {
        grads,
        l_contrast,
        l_mixco,
        detached,
    })
}

/// Continues training from the given query encoder (and momentum state when
/// the mode uses one).
pub fn pretrain_from(
    cfg: &RunConfig,
    data: UnlabeledView<'_>,
    mut query: EncoderParams,
    mut moco: Option<MoCoState>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.dim() != cfg.input_dim || query.input_dim() != cfg.input_dim {
        return Err(MixcoError::config(format!(
            "field `input_dim`: config says {}, data has {} columns, encoder expects {}",
            cfg.input_dim,
            data.dim(),
            query.input_dim()
        )));
    }
    if cfg.mode.uses_momentum_encoder() != moco.is_some() {
        return Err(MixcoError::contract("momentum state must be present exactly in moco modes"));
    }
    if let Some(state) = moco.as_mut() {
        state.query = query.clone();
    }

    let mut batch_rng = SeededRng::with_stream(cfg.seed, STREAM_BATCHES);
    let mut aug_rng = SeededRng::with_stream(cfg.seed, STREAM_AUGMENT);
    let mut mix_rng = SeededRng::with_stream(cfg.seed, STREAM_MIX);
    let mut velocity = SgdVelocity::new(&query);
    let empty_queue = Tensor::zeros(&[0, cfg.embed_dim]);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let sgd = cfg.sgd(lr);
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut batch_rng)?;
        let (mut sum_c, mut sum_m, mut sum_t) = (0.0, 0.0, 0.0);

        for (b, idx) in batches.iter().enumerate() {
            let x = data.features().select_rows(idx);
            let at = |e: MixcoError| match e {
                MixcoError::Diverged(msg) | MixcoError::Domain(msg) => {
                    MixcoError::Diverged(format!("epoch {}, batch {b}: {msg}", epoch + 1))
                }
                other => other,
            };
            let step = {
                let params = match moco.as_ref() {
                    Some(state) => &state.query,
                    None => &query,
                };
                let mut rngs = StepRngs {
                    augment: &mut aug_rng,
                    mix: &mut mix_rng,
                };
                batch_gradients(cfg, &x, params, moco.as_ref(), &empty_queue, &mut rngs).map_err(at)?
            };
            let (l_contrast, l_mixco) = (step.l_contrast, step.l_mixco);
            let l_total = total_loss(l_contrast, l_mixco, cfg.beta);
            if !l_total.is_finite() {
                return Err(at(MixcoError::Diverged(format!("total loss is {l_total}"))));
            }
            let params = match moco.as_mut() {
                Some(state) => &mut state.query,
                None => &mut query,
            };
            apply_sgd_step(params, &step.grads, &sgd, &mut velocity).map_err(at)?;
            if let (Some(state), Some(d)) = (moco.as_mut(), step.detached.as_ref()) {
                state.momentum_update();
                state.enqueue_dequeue(d)?;
            }
            sum_c += l_contrast;
            sum_m += l_mixco;
            sum_t += l_total;
        }

        let n = batches.len() as f64;
        let (l_contrast, l_mixco) = (sum_c / n, sum_m / n);
        metrics.push(MetricsRecord {
            epoch: epoch + 1,
            l_contrast,
            l_mixco,
            l_total: sum_t / n,
            lr,
            wall_seconds: if cfg.record_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    if let Some(state) = moco.as_ref() {
        query = state.query.clone();
    }
    Ok(PretrainOutcome {
        encoder: query,
        moco,
        metrics,
    })
}

const METRICS_HEADER: &str = "# epoch l_contrast l_mixco l_total lr wall_seconds";

/// One header line, then one whitespace-separated record per epoch.
pub fn write_metrics_log(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{} {:e} {:e} {:e} {:e} {:e}\n",
            r.epoch, r.l_contrast, r.l_mixco, r.l_total, r.lr, r.wall_seconds
        ));
    }
    write_file(path, &out)
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = LineReader::open(path)?;
    if r.next_line()? != METRICS_HEADER {
        return Err(r.error("missing metrics header"));
    }
    let mut records = Vec::new();
    while !r.at_end() {
        let line = r.next_line()?.to_string();
        let (epoch, rest) = line
            .split_once(' ')
            .ok_or_else(|| r.error("truncated metrics record"))?;
        let epoch = epoch
            .parse()
            .map_err(|_| r.error(format!("bad epoch `{epoch}`")))?;
        let v = r.parse_f64s(rest, 5)?;
        records.push(MetricsRecord {
            epoch,
            l_contrast: v[0],
            l_mixco: v[1],
            l_total: v[2],
            lr: v[3],
            wall_seconds: v[4],
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gaussian_clusters;
    use crate::training::config::Mode;

    fn small(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            batch_size: 8,
            queue_size: if mode.uses_momentum_encoder() { 16 } else { 0 },
            input_dim: 5,
            hidden: vec![12],
            embed_dim: 6,
            epochs: 3,
            classes: 3,
            per_class: 12,
            ..RunConfig::default()
        }
    }

    fn data(cfg: &RunConfig) -> crate::data::Dataset {
        generate_gaussian_clusters(&cfg.cluster_spec(), &mut SeededRng::new(11)).unwrap()
    }

    #[test]
    fn beta_zero_matches_plain_moco_bitwise() {
        let mut with_mix = small(Mode::MocoMixco);
        with_mix.beta = 0.0;
        let plain = RunConfig {
            beta: 0.0,
            ..small(Mode::Moco)
        };
        let d = data(&plain);
        let a = pretrain(&with_mix, d.unlabeled()).unwrap();
        let b = pretrain(&plain, d.unlabeled()).unwrap();
        assert!(a.encoder.bit_eq(&b.encoder));
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.l_contrast.to_bits(), rb.l_contrast.to_bits());
            assert_eq!(ra.l_total.to_bits(), ra.l_contrast.to_bits());
            assert!(ra.l_mixco > 0.0);
            assert_eq!(rb.l_mixco, 0.0);
        }
    }

    #[test]
    fn beta_zero_matches_plain_simclr_bitwise() {
        let mut with_mix = small(Mode::SimclrMixco);
        with_mix.beta = 0.0;
        let plain = small(Mode::Simclr);
        let d = data(&plain);
        let a = pretrain(&with_mix, d.unlabeled()).unwrap();
        let b = pretrain(&plain, d.unlabeled()).unwrap();
        assert!(a.encoder.bit_eq(&b.encoder));
        assert!(a.moco.is_none());
    }

    #[test]
    fn repeated_runs_are_identical() {
        for mode in [Mode::MocoMixco, Mode::SimclrMixco] {
            let cfg = small(mode);
            let d = data(&cfg);
            let a = pretrain(&cfg, d.unlabeled()).unwrap();
            let b = pretrain(&cfg, d.unlabeled()).unwrap();
            assert!(a.encoder.bit_eq(&b.encoder));
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_query_encoder() {
        let mut cfg = small(Mode::MocoMixco);
        cfg.lr = 0.0;
        let d = data(&cfg);
        let init = init_encoder(&cfg.layer_sizes(), &mut SeededRng::with_stream(cfg.seed, STREAM_INIT)).unwrap();
        let out = pretrain(&cfg, d.unlabeled()).unwrap();
        assert!(out.encoder.bit_eq(&init));
        let state = out.moco.unwrap();
        assert_eq!(state.queue().ptr(), (cfg.epochs * (d.len() / cfg.batch_size) * cfg.batch_size) % cfg.queue_size);
    }

    #[test]
    fn metrics_log_round_trip() {
        let cfg = small(Mode::MocoMixco);
        let d = data(&cfg);
        let out = pretrain(&cfg, d.unlabeled()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        write_metrics_log(&path, &out.metrics).unwrap();
        assert_eq!(read_metrics_log(&path).unwrap(), out.metrics);
        assert_eq!(out.metrics.len(), cfg.epochs);
        assert_eq!(out.metrics[0].epoch, 1);
    }

    #[test]
    fn mode_and_state_must_agree() {
        let cfg = small(Mode::Moco);
        let d = data(&cfg);
        let q = init_encoder(&cfg.layer_sizes(), &mut SeededRng::new(0)).unwrap();
        assert!(matches!(
            pretrain_from(&cfg, d.unlabeled(), q, None),
            Err(MixcoError::Contract(_))
        ));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let mut cfg = small(Mode::MocoMixco);
        cfg.lr = 1e200;
        cfg.epochs = 5;
        let d = data(&cfg);
        match pretrain(&cfg, d.unlabeled()) {
            Err(MixcoError::Diverged(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
