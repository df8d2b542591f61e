//! Momentum contrast with a time axis.
//!
//! Query and key embeddings have shape `(T, N, C)`. For every time step the
//! query is scored against its own key (the positive, column 0) and against
//! the keys held in a FIFO queue (the negatives). The resulting `(T, N, 1+L)`
//! logits can be reduced over time before the cross-entropy ([`loss_mbc`]),
//! after it ([`loss_mac`]), or as a convex mix of both ([`loss_mix`]).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{concat, ParamStore, Scalar, Tensor, Var};

/// Tolerance on `alpha + beta == 1`.
pub const MIX_TOLERANCE: f64 = 1e-9;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub queue_len: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Start with `queue_len` random unit keys instead of an empty queue.
    pub prefill_random: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            queue_len: 512,
            alpha: 0.5,
            beta: 0.5,
            prefill_random: true,
        }
    }
}

pub(crate) fn check_mix(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) || (alpha + beta - 1.0).abs() > MIX_TOLERANCE {
        return Err(Error::Config(format!(
            "mix weights must be non-negative and sum to 1, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(())
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.queue_len == 0 {
            return Err(Error::Config("queue length must be at least 1".into()));
        }
        check_mix(self.alpha, self.beta)
    }
}

fn normalize_rows<F: Scalar>(rows: &mut [F], dim: usize) {
    for row in rows.chunks_mut(dim) {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::of(NORM_EPS));
        for v in row {
            *v /= norm;
        }
    }
}

/// Ring buffer of unit-norm keys, one slice per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueState<F: Scalar = f32> {
    /// `(T, L, C)`.
    buffer: Tensor<F>,
    write_ptr: usize,
    filled: usize,
}

impl<F: Scalar> QueueState<F> {
    pub fn empty(steps: usize, len: usize, dim: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("queue length must be at least 1".into()));
        }
        Ok(QueueState {
            buffer: Tensor::zeros([steps, len, dim]),
            write_ptr: 0,
            filled: 0,
        })
    }

    /// A full queue of independent random unit vectors.
    pub fn random(steps: usize, len: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut q = Self::empty(steps, len, dim)?;
        for v in q.buffer.data_mut() {
            *v = F::of(StandardNormal.sample(rng));
        }
        normalize_rows(q.buffer.data_mut(), dim.max(1));
        q.filled = len;
        Ok(q)
    }

    pub fn buffer(&self) -> &Tensor<F> {
        &self.buffer
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    /// Valid columns; they are always `0..filled`.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.buffer.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.buffer.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.buffer.shape()[2]
    }

    /// Key in column `l` at time step `t`.
    pub fn key(&self, t: usize, l: usize) -> &[F] {
        let (len, c) = (self.capacity(), self.dim());
        &self.buffer.data()[(t * len + l) * c..][..c]
    }

    /// `(T, C, filled)`: the valid keys transposed for a batched product.
    fn negatives_t(&self) -> Tensor<F> {
        let (steps, len, c, f) = (self.steps(), self.capacity(), self.dim(), self.filled);
        let src = self.buffer.data();
        Tensor::from_fn([steps, c, f], |i| {
            let (t, rest) = (i / (c * f), i % (c * f));
            let (ch, l) = (rest / f, rest % f);
            src[(t * len + l) * c + ch]
        })
    }
}

/// Writes `keys (T, N, C)` after the newest entries, evicting the oldest.
/// Keys are re-normalized and stored without any gradient history.
pub fn enqueue<F: Scalar>(queue: &mut QueueState<F>, keys: &Tensor<F>) -> Result<()> {
    let &[t, n, c] = keys.shape() else {
        return Err(shape_err!("keys must be (T, N, C), got {:?}", keys.shape()));
    };
    if t != queue.steps() || c != queue.dim() {
        return Err(shape_err!(
            "keys {:?} do not fit queue {:?}",
            keys.shape(),
            queue.buffer.shape()
        ));
    }
    let len = queue.capacity();
    if n > len {
        return Err(Error::Config(format!(
            "batch of {n} keys exceeds queue length {len}"
        )));
    }
    let mut rows = keys.data().to_vec();
    normalize_rows(&mut rows, c.max(1));
    let buf = queue.buffer.data_mut();
    for step in 0..t {
        for j in 0..n {
            let col = (queue.write_ptr + j) % len;
            buf[(step * len + col) * c..][..c].copy_from_slice(&rows[(step * n + j) * c..][..c]);
        }
    }
    queue.write_ptr = (queue.write_ptr + n) % len;
    queue.filled = (queue.filled + n).min(len);
    Ok(())
}

/// `(T, N, 1 + filled)` logits: `q·k / tau` in column 0, `q·queue_l / tau`
/// after it. `q` and `k` are expected to be unit-norm per `(t, n)` row; no
/// gradient reaches the queue.
pub fn similarity_logits<'t, F: Scalar>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    queue: &QueueState<F>,
    temperature: f64,
) -> Result<Var<'t, F>> {
    let qs = q.shape();
    let &[t, n, c] = qs.as_slice() else {
        return Err(shape_err!("queries must be (T, N, C), got {:?}", qs));
    };
    if k.shape() != qs {
        return Err(shape_err!("queries {:?} vs keys {:?}", qs, k.shape()));
    }
    if queue.steps() != t || queue.dim() != c {
        return Err(shape_err!(
            "queries {:?} do not match queue {:?}",
            qs,
            queue.buffer.shape()
        ));
    }
    let pos = q.mul(k)?.sum_axis(2)?.reshape([t, n, 1])?;
    let logits = if queue.filled == 0 {
        pos
    } else {
        let negs = q.tape().constant(queue.negatives_t());
        let neg = q.batched_matmul(negs)?;
        concat(&[pos, neg], 2)?
    };
    Ok(logits.scale(F::of(1.0 / temperature)))
}

fn positive_targets(rows: usize) -> Vec<usize> {
    vec![0; rows]
}

fn check_logits(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, n, k] if t > 0 && n > 0 && k > 0 => Ok((t, n, k)),
        _ => Err(shape_err!("logits must be non-empty (T, N, K), got {:?}", shape)),
    }
}

/// Cross-entropy against `target` of the time-averaged logits.
pub fn loss_mbc_with<'t, F: Scalar>(logits: Var<'t, F>, targets: &[usize]) -> Result<Var<'t, F>> {
    check_logits(&logits.shape())?;
    logits.mean_axis(0)?.cross_entropy(targets)
}

/// Cross-entropy per `(t, n)`, averaged over both.
pub fn loss_mac_with<'t, F: Scalar>(logits: Var<'t, F>, targets: &[usize]) -> Result<Var<'t, F>> {
    let (t, n, k) = check_logits(&logits.shape())?;
    if targets.len() != n {
        return Err(shape_err!("{} targets for batch of {}", targets.len(), n));
    }
    let tiled: Vec<usize> = (0..t).flat_map(|_| targets.iter().copied()).collect();
    logits.reshape([t * n, k])?.cross_entropy(&tiled)
}

/// `alpha * mbc + beta * mac` with `alpha + beta = 1`.
pub fn loss_mix_with<'t, F: Scalar>(
    logits: Var<'t, F>,
    targets: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Var<'t, F>> {
    check_mix(alpha, beta)?;
    let mbc = loss_mbc_with(logits, targets)?.scale(F::of(alpha));
    let mac = loss_mac_with(logits, targets)?.scale(F::of(beta));
    mbc.add(mac)
}

/// Mean-before-criterion InfoNCE: the positive sits at index 0.
pub fn loss_mbc<'t, F: Scalar>(logits: Var<'t, F>) -> Result<Var<'t, F>> {
    let (_, n, _) = check_logits(&logits.shape())?;
    loss_mbc_with(logits, &positive_targets(n))
}

/// Mean-after-criterion InfoNCE.
pub fn loss_mac<'t, F: Scalar>(logits: Var<'t, F>) -> Result<Var<'t, F>> {
    let (_, n, _) = check_logits(&logits.shape())?;
    loss_mac_with(logits, &positive_targets(n))
}

/// MixInfoNCE.
pub fn loss_mix<'t, F: Scalar>(logits: Var<'t, F>, alpha: f64, beta: f64) -> Result<Var<'t, F>> {
    let (_, n, _) = check_logits(&logits.shape())?;
    loss_mix_with(logits, &positive_targets(n), alpha, beta)
}

/// Query encoder parameters and their exponential moving average.
#[derive(Clone, Debug)]
pub struct EncoderPair<F: Scalar = f32> {
    pub theta_q: ParamStore<F>,
    pub theta_k: ParamStore<F>,
    pub m: f64,
}

impl<F: Scalar> EncoderPair<F> {
    /// Both encoders start from the same parameters.
    pub fn new(theta_q: ParamStore<F>, m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
        }
        Ok(EncoderPair {
            theta_k: theta_q.clone(),
            theta_q,
            m,
        })
    }

    /// `theta_k = m * theta_k + (1 - m) * theta_q` for every learnable
    /// entry. Batch-norm buffers are left alone.
    pub fn momentum_update(&mut self) -> Result<()> {
        let (m, rest) = (F::of(self.m), F::of(1.0 - self.m));
        for pk in self.theta_k.iter_mut().filter(|p| !p.is_buffer) {
            let pq = self.theta_q.get(&pk.name)?;
            if pq.shape() != pk.value.shape() {
                return Err(Error::Integrity(format!(
                    "`{}`: key shape {:?} vs query shape {:?}",
                    pk.name,
                    pk.value.shape(),
                    pq.shape()
                )));
            }
            for (k, &q) in pk.value.data_mut().iter_mut().zip(pq.data()) {
                *k = m * *k + rest * q;
            }
        }
        Ok(())
    }
}
