use crate::error::{shape_err, Error, Result};
use crate::tensor::{ArcTanSurrogate, Scalar, Tape, Tensor, Var};

/// What happens to the membrane after a spike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// `V' = v_reset` where a spike fired.
    #[default]
    Hard,
    /// `V' = H - v_threshold` where a spike fired.
    Soft,
}

/// Leaky integrate-and-fire neuron constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub tau_mem: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub reset_mode: ResetMode,
    pub surrogate: ArcTanSurrogate,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau_mem: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            reset_mode: ResetMode::Hard,
            surrogate: ArcTanSurrogate::default(),
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_mem >= 1.0 && self.tau_mem.is_finite()) {
            return Err(Error::Config(format!("tau_mem {} must be >= 1", self.tau_mem)));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::Config(format!(
                "v_threshold {} must exceed v_reset {}",
                self.v_threshold, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Membrane potential of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LifState<'t, F: Scalar> {
    pub v: Var<'t, F>,
}

impl<'t, F: Scalar> LifState<'t, F> {
    /// Every neuron at `v_reset`.
    pub fn resting(tape: &'t Tape<F>, shape: &[usize], cfg: &LifConfig) -> Self {
        LifState {
            v: tape.constant(Tensor::full(shape.to_vec(), F::of(cfg.v_reset))),
        }
    }
}

/// One neuron update built from primitive tape ops:
/// `H = V + (X - (V - v_reset)) / tau`, `S = spike(H)`, then the reset.
pub fn lif_step<'t, F: Scalar>(
    state: &LifState<'t, F>,
    input: Var<'t, F>,
    cfg: &LifConfig,
) -> Result<(Var<'t, F>, LifState<'t, F>)> {
    let v = state.v;
    if v.shape() != input.shape() {
        return Err(shape_err!(
            "membrane {:?} vs input {:?}",
            v.shape(),
            input.shape()
        ));
    }
    let leak = input.sub(v.add_scalar(F::of(-cfg.v_reset)))?;
    let h = v.add(leak.scale(F::of(1.0 / cfg.tau_mem)))?;
    let s = h.spike_with(F::of(cfg.v_threshold), cfg.surrogate);
    let v_next = match cfg.reset_mode {
        ResetMode::Hard => h.sub(s.mul(h)?)?.add(s.scale(F::of(cfg.v_reset)))?,
        ResetMode::Soft => h.sub(s.scale(F::of(cfg.v_threshold)))?,
    };
    Ok((s, LifState { v: v_next }))
}

/// Runs a layer of neurons over a whole sequence as one tape node.
///
/// `x` has the time axis first; every other axis is treated as independent
/// neurons starting at rest. Equivalent to chaining [`lif_step`] with
/// gradients flowing through the reset, but stores only the charge per step.
pub fn lif_sequence<'t, F: Scalar>(x: Var<'t, F>, cfg: &LifConfig) -> Result<Var<'t, F>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let Some(&steps) = shape.first() else {
        return Err(shape_err!("lif_sequence needs a leading time axis"));
    };
    let n = if steps == 0 { 0 } else { xv.len() / steps };
    let (tau_inv, th, vr) = (
        F::of(1.0 / cfg.tau_mem),
        F::of(cfg.v_threshold),
        F::of(cfg.v_reset),
    );
    let hard = cfg.reset_mode == ResetMode::Hard;

    let xd = xv.data();
    let mut charge = vec![F::zero(); xd.len()];
    let mut spikes = vec![F::zero(); xd.len()];
    let mut v = vec![vr; n];
    for t in 0..steps {
        let base = t * n;
        for i in 0..n {
            let h = v[i] + (xd[base + i] - (v[i] - vr)) * tau_inv;
            let fired = h >= th;
            charge[base + i] = h;
            spikes[base + i] = if fired { F::one() } else { F::zero() };
            v[i] = match (fired, hard) {
                (false, _) => h,
                (true, true) => vr,
                (true, false) => h - th,
            };
        }
    }

    let surrogate = cfg.surrogate;
    let out = Tensor::new(shape, spikes)?;
    let saved = out.data().to_vec();
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |g, _| {
            let decay = F::one() - tau_inv;
            let mut gx = vec![F::zero(); g.len()];
            let mut gv = vec![F::zero(); n];
            for t in (0..steps).rev() {
                let base = t * n;
                for i in 0..n {
                    let k = base + i;
                    let h = charge[k];
                    let ds = surrogate.derivative(h - th);
                    let dv_dh = if hard {
                        (F::one() - saved[k]) + (vr - h) * ds
                    } else {
                        F::one() - th * ds
                    };
                    let gh = g[k] * ds + gv[i] * dv_dh;
                    gx[k] = gh * tau_inv;
                    gv[i] = gh * decay;
                }
            }
            vec![Some(gx)]
        }),
    ))
}
