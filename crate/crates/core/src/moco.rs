//! Query/key encoder pair with an exponential-moving-average key encoder and
//! a FIFO queue of past keys used as negatives.

use std::path::Path;

use crate::encoder::{embed, join, read_params_body, write_params_body, EncoderParams, NORM_EPS};
use crate::error::{MixcoError, Result};
use crate::numerics::{l2_normalize_rows, SeededRng, Tensor};
use crate::textio::{push_f64s, write_file, LineReader};

const CHECKPOINT_MAGIC: &str = "MIXCO-MOCO";
const CHECKPOINT_VERSION: u32 = 1;

/// Fixed-length ring of key embeddings, `K × C`.
///
/// Each enqueue overwrites the `B` oldest rows starting at `ptr`. `K` must be
/// a multiple of `B`, so a batch never straddles the wrap point.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    rows: Tensor,
    ptr: usize,
}

impl KeyQueue {
    /// `len` random unit vectors of width `dim`.
    pub fn random(len: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let raw = Tensor::matrix(len, dim, (0..len * dim).map(|_| rng.normal()).collect())?;
        Ok(KeyQueue {
            rows: l2_normalize_rows(&raw, NORM_EPS)?.output,
            ptr: 0,
        })
    }

    pub fn from_parts(rows: Tensor, ptr: usize) -> Result<Self> {
        rows.expect_matrix("KeyQueue::from_parts")?;
        if (rows.rows() > 0 && ptr >= rows.rows()) || (rows.rows() == 0 && ptr != 0) {
            return Err(MixcoError::contract(format!(
                "queue pointer {ptr} out of range for {} rows",
                rows.rows()
            )));
        }
        Ok(KeyQueue { rows, ptr })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Writes `keys` at `[ptr, ptr + B)` and advances `ptr` modulo `K`.
    /// An empty queue ignores the call.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let (b, c) = keys.expect_matrix("enqueue")?;
        let k = self.len();
        if k == 0 {
            return Ok(());
        }
        if c != self.rows.cols() {
            return Err(MixcoError::Dimension {
                op: "enqueue",
                left: self.rows.shape().to_vec(),
                right: keys.shape().to_vec(),
            });
        }
        if b == 0 || b > k || k % b != 0 {
            return Err(MixcoError::config(format!(
                "queue length {k} must be a positive multiple of the batch size {b}"
            )));
        }
        let start = self.ptr * c;
        self.rows.data_mut()[start..start + b * c].copy_from_slice(keys.data());
        self.ptr = (self.ptr + b) % k;
        Ok(())
    }
}

/// Keys produced by the momentum encoder. There is no trace behind them, so
/// no loss gradient can reach the key parameters.
#[derive(Debug, Clone)]
pub struct DetachedKeys(Tensor);

impl DetachedKeys {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoCoState {
    pub query: EncoderParams,
    key: EncoderParams,
    queue: KeyQueue,
    momentum: f64,
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(MixcoError::config(format!("key momentum must be in [0, 1], got {m}")));
    }
    Ok(())
}

impl MoCoState {
    /// Starts from existing query parameters; the key encoder is a copy.
    pub fn from_query(
        query: EncoderParams,
        queue_len: usize,
        momentum: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        let queue = KeyQueue::random(queue_len, query.output_dim(), rng)?;
        Ok(MoCoState {
            key: query.clone(),
            query,
            queue,
            momentum,
        })
    }

    pub fn from_parts(
        query: EncoderParams,
        key: EncoderParams,
        queue: KeyQueue,
        momentum: f64,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        if query.sizes() != key.sizes() {
            return Err(MixcoError::contract(format!(
                "query sizes {:?} differ from key sizes {:?}",
                query.sizes(),
                key.sizes()
            )));
        }
        if queue.rows().cols() != query.output_dim() && !queue.is_empty() {
            return Err(MixcoError::Dimension {
                op: "MoCoState::from_parts",
                left: queue.rows().shape().to_vec(),
                right: vec![query.output_dim()],
            });
        }
        Ok(MoCoState {
            query,
            key,
            queue,
            momentum,
        })
    }

    pub fn key_params(&self) -> &EncoderParams {
        &self.key
    }

    pub fn queue(&self) -> &KeyQueue {
        &self.queue
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `key ← m·key + (1 − m)·query`, elementwise over every parameter.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        for (k, q) in self.key.tensors_mut().zip(self.query.tensors()) {
            for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
    }

    pub fn enqueue_dequeue(&mut self, keys: &DetachedKeys) -> Result<()> {
        self.queue.enqueue(keys.as_tensor())
    }

    /// Encodes with the key parameters, keeping no trace.
    pub fn key_forward_no_grad(&self, x: &Tensor) -> Result<DetachedKeys> {
        Ok(DetachedKeys(embed(&self.key, x)?))
    }
}

pub fn init_moco(
    layer_sizes: &[usize],
    queue_len: usize,
    momentum: f64,
    rng: &mut SeededRng,
) -> Result<MoCoState> {
    check_momentum(momentum)?;
    let query = crate::encoder::init_encoder(layer_sizes, rng)?;
    MoCoState::from_query(query, queue_len, momentum, rng)
}

/// Writes the full momentum-contrast state:
///
/// ```text
/// MIXCO-MOCO 1
/// seed <u64>
/// sizes <d0> <d1> ...
/// momentum <m>
/// queue <K> <C> <ptr>
/// query
/// <encoder body, as in the encoder checkpoint>
/// key
/// <encoder body>
/// <K lines of C queue values>
/// ```
pub fn save_moco(path: &Path, state: &MoCoState, seed: u64) -> Result<()> {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nseed {seed}\nsizes ");
    out.push_str(&join(state.query.sizes()));
    out.push_str(&format!("\nmomentum {:e}\n", state.momentum));
    out.push_str(&format!(
        "queue {} {} {}\n",
        state.queue.len(),
        state.query.output_dim(),
        state.queue.ptr
    ));
    out.push_str("query\n");
    write_params_body(&mut out, &state.query);
    out.push_str("key\n");
    write_params_body(&mut out, &state.key);
    for row in state.queue.rows.row_iter() {
        push_f64s(&mut out, row);
    }
    write_file(path, &out)
}

pub fn load_moco(path: &Path) -> Result<(MoCoState, u64)> {
    let mut r = LineReader::open(path)?;
    let version: u32 = r.keyed_parse(CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.keyed_parse("seed")?;
    let sizes = r.keyed_list("sizes")?;
    let momentum: f64 = r.keyed_parse("momentum")?;
    let q = r.keyed_list("queue")?;
    let [k, c, ptr] = q[..] else {
        return Err(r.error("queue header needs `K C ptr`"));
    };
    r.keyed("query")?;
    let query = read_params_body(&mut r, &sizes)?;
    r.keyed("key")?;
    let key = read_params_body(&mut r, &sizes)?;
    if c != query.output_dim() {
        return Err(r.error(format!("queue width {c} does not match embedding size")));
    }
    let mut data = Vec::with_capacity(k * c);
    for _ in 0..k {
        data.extend(r.f64_line(c)?);
    }
    if !r.at_end() {
        r.next_line()?;
        return Err(r.error("trailing data after checkpoint"));
    }
    let queue = KeyQueue::from_parts(Tensor::matrix(k, c, data)?, ptr)
        .map_err(|e| r.error(e.to_string()))?;
    let state =
        MoCoState::from_parts(query, key, queue, momentum).map_err(|e| r.error(e.to_string()))?;
    Ok((state, seed))
}
