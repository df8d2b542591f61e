use rand::Rng;

use super::backbone::Ctx;
use super::*;
use crate::error::Error;
use crate::tensor::gradcheck::{self, rng, uniform};
use crate::tensor::{Binding, ConvSpec, ParamStore, Tape, Tensor};

fn small_cfg() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_widths: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        embed_dim: 6,
        resolution: (8, 8),
        ..BackboneConfig::default()
    }
}

fn scalar_step(v: f64, x: f64, cfg: &LifConfig) -> (f64, f64, f64) {
    let h = v + (x - (v - cfg.v_reset)) / cfg.tau_mem;
    let s = if h >= cfg.v_threshold { 1.0 } else { 0.0 };
    let v = match cfg.reset_mode {
        ResetMode::Hard => s * cfg.v_reset + (1.0 - s) * h,
        ResetMode::Soft => h - s * cfg.v_threshold,
    };
    (h, s, v)
}

#[test]
fn resting_neuron_stays_silent() {
    let tape = Tape::<f64>::new();
    let cfg = LifConfig::default();
    let st = LifState::resting(&tape, &[3], &cfg);
    let x = tape.constant(Tensor::zeros([3]));
    let (s, next) = lif_step(&st, x, &cfg).unwrap();
    assert_eq!(s.value().data(), &[0.0; 3]);
    assert_eq!(next.v.value().data(), &[0.0; 3]);
}

#[test]
fn double_threshold_input_fires_and_resets() {
    let tape = Tape::<f64>::new();
    let cfg = LifConfig::default();
    let st = LifState::resting(&tape, &[1], &cfg);
    let x = tape.constant(Tensor::full([1], 2.0 * cfg.v_threshold));
    let (s, next) = lif_step(&st, x, &cfg).unwrap();
    assert_eq!(s.value().data(), &[1.0]);
    assert_eq!(next.v.value().data(), &[0.0]);
}

#[test]
fn sub_rheobase_current_never_fires() {
    // The fixed point of the charge equation is v_reset + X.
    for reset_mode in [ResetMode::Hard, ResetMode::Soft] {
        let cfg = LifConfig {
            v_reset: -0.2,
            reset_mode,
            ..LifConfig::default()
        };
        let x = cfg.v_threshold - cfg.v_reset - 1e-3;
        let tape = Tape::<f64>::new();
        let seq = tape.constant(Tensor::full([100, 2], x));
        let s = lif_sequence(seq, &cfg).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 0.0));
        let above = cfg.v_threshold - cfg.v_reset + 1e-3;
        let s = lif_sequence(tape.constant(Tensor::full([100, 1], above)), &cfg).unwrap();
        assert!(s.value().data().contains(&1.0));
    }
}

#[test]
fn lif_step_rejects_shape_mismatch() {
    let tape = Tape::<f64>::new();
    let cfg = LifConfig::default();
    let st = LifState::resting(&tape, &[3], &cfg);
    let x = tape.constant(Tensor::zeros([4]));
    assert!(matches!(lif_step(&st, x, &cfg), Err(Error::Shape(_))));
}

#[test]
fn lif_config_validation() {
    let bad = LifConfig {
        tau_mem: 0.5,
        ..LifConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = LifConfig {
        v_reset: 1.0,
        ..LifConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn membrane_trace_matches_scalar_simulation() {
    for seed in 0..10 {
        for reset_mode in [ResetMode::Hard, ResetMode::Soft] {
            let mut r = rng(seed, 7);
            let cfg = LifConfig {
                tau_mem: r.random_range(1.0..4.0),
                v_reset: r.random_range(-0.5..0.0),
                reset_mode,
                ..LifConfig::default()
            };
            let xs = uniform(&mut r, &[50, 5], -1.0, 3.0);
            let tape = Tape::<f64>::new();
            let mut st = LifState::resting(&tape, &[5], &cfg);
            let mut vref = vec![cfg.v_reset; 5];
            for t in 0..50 {
                let xt = tape.constant(Tensor::new([5], xs.data()[t * 5..][..5].to_vec()).unwrap());
                let (s, next) = lif_step(&st, xt, &cfg).unwrap();
                for i in 0..5 {
                    let (_, sr, vr) = scalar_step(vref[i], xs.data()[t * 5 + i], &cfg);
                    vref[i] = vr;
                    assert_eq!(s.value().data()[i], sr);
                    assert!((next.v.value().data()[i] - vr).abs() < 1e-6);
                }
                st = next;
            }
        }
    }
}

#[test]
fn fused_sequence_matches_composed_steps() {
    for seed in 0..20 {
        for reset_mode in [ResetMode::Hard, ResetMode::Soft] {
            let mut r = rng(seed, 11);
            let cfg = LifConfig {
                tau_mem: r.random_range(1.0..3.0),
                v_reset: r.random_range(-0.3..0.0),
                reset_mode,
                ..LifConfig::default()
            };
            let (steps, n) = (12, 7);
            let xs = uniform(&mut r, &[steps, n], -1.0, 3.0);
            let weights = uniform(&mut r, &[steps, n], -1.0, 1.0);

            let tape = Tape::<f64>::new();
            let x = tape.leaf(xs.clone(), true);
            let s = lif_sequence(x, &cfg).unwrap();
            let w = tape.constant(weights.clone());
            tape.backward(s.mul(w).unwrap().sum_all()).unwrap();
            let fused_grad = x.grad().unwrap();

            let tape2 = Tape::<f64>::new();
            let x2 = tape2.leaf(xs, true);
            let mut st = LifState::resting(&tape2, &[n], &cfg);
            let mut outs = Vec::new();
            for t in 0..steps {
                let xt = x2.narrow(0, t, 1).unwrap().reshape([n]).unwrap();
                let (s, next) = lif_step(&st, xt, &cfg).unwrap();
                outs.push(s.reshape([1, n]).unwrap());
                st = next;
            }
            let s2 = crate::tensor::concat(&outs, 0).unwrap();
            assert_eq!(s.value().data(), s2.value().data());
            let w2 = tape2.constant(weights);
            tape2.backward(s2.mul(w2).unwrap().sum_all()).unwrap();
            let diff = fused_grad.max_abs_diff(&x2.grad().unwrap()).unwrap();
            assert!(diff < 1e-12, "seed {seed}: {diff}");
        }
    }
}

fn run_backbone(
    bb: &Backbone,
    store: &ParamStore<f64>,
    frames: Tensor<f64>,
    mode: BnMode,
) -> (Tensor<f64>, BnUpdates<f64>) {
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let out = bb.forward(&bind, store, tape.constant(frames), mode).unwrap();
    ((*out.embeddings.value()).clone(), out.bn_updates)
}

fn spiky_frames(seed: u64, t: usize, n: usize, hw: usize) -> Tensor<f64> {
    let mut r = rng(seed, 3);
    Tensor::from_fn([t, n, 2, hw, hw], |_| if r.random_bool(0.3) { r.random_range(1..4) as f64 } else { 0.0 })
}

#[test]
fn backbone_output_shape() {
    let bb = Backbone::new(BackboneConfig {
        embed_dim: 64,
        ..BackboneConfig::default()
    })
    .unwrap();
    let store: ParamStore<f32> = bb.init_params(&mut rng(0, 0));
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let frames = spiky_frames(1, 16, 4, 32).cast::<f32>();
    let out = bb.forward(&bind, &store, tape.constant(frames), BnMode::Train).unwrap();
    assert_eq!(out.embeddings.shape(), [16, 4, 64]);
    assert_eq!(out.bn_updates.len(), 1 + 2 + 3 + 3);
}

#[test]
fn backbone_rejects_wrong_resolution() {
    let bb = Backbone::new(small_cfg()).unwrap();
    let store: ParamStore<f64> = bb.init_params(&mut rng(0, 0));
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let frames = tape.constant(spiky_frames(0, 2, 1, 9));
    assert!(matches!(bb.forward(&bind, &store, frames, BnMode::Eval), Err(Error::Shape(_))));
    let bad = BackboneConfig {
        in_channels: 3,
        ..small_cfg()
    };
    assert!(matches!(Backbone::new(bad), Err(Error::Config(_))));
}

#[test]
fn repeated_forward_is_stateless() {
    let bb = Backbone::new(small_cfg()).unwrap();
    let store: ParamStore<f64> = bb.init_params(&mut rng(4, 0));
    let frames = spiky_frames(2, 5, 3, 8);
    for mode in [BnMode::Train, BnMode::Eval] {
        let (a, _) = run_backbone(&bb, &store, frames.clone(), mode);
        let (b, _) = run_backbone(&bb, &store, frames.clone(), mode);
        assert_eq!(a, b);
    }
}

fn sample_of(batch: &Tensor<f64>, j: usize) -> Vec<f64> {
    let s = batch.shape();
    let (t, n, per) = (s[0], s[1], s[2..].iter().product::<usize>());
    (0..t).flat_map(|step| batch.data()[(step * n + j) * per..][..per].to_vec()).collect()
}

fn batch_of(samples: &[Vec<f64>], t: usize, rest: &[usize]) -> Tensor<f64> {
    let per: usize = rest.iter().product();
    let n = samples.len();
    let mut data = vec![0.0; t * n * per];
    for (j, s) in samples.iter().enumerate() {
        for step in 0..t {
            data[(step * n + j) * per..][..per].copy_from_slice(&s[step * per..][..per]);
        }
    }
    let mut shape = vec![t, n];
    shape.extend_from_slice(rest);
    Tensor::new(shape, data).unwrap()
}

#[test]
fn eval_mode_is_per_sample() {
    let bb = Backbone::new(small_cfg()).unwrap();
    let mut store: ParamStore<f64> = bb.init_params(&mut rng(5, 0));
    // Non-trivial running statistics.
    let (_, updates) = run_backbone(&bb, &store, spiky_frames(9, 4, 3, 8), BnMode::Train);
    apply_bn_updates(&mut store, &updates, 0.5).unwrap();

    let t = 4;
    let frames = spiky_frames(6, t, 3, 8);
    let samples: Vec<Vec<f64>> = (0..3).map(|j| sample_of(&frames, j)).collect();
    let (base, _) = run_backbone(&bb, &store, frames, BnMode::Eval);
    let per_sample = |emb: &Tensor<f64>, j: usize| sample_of(emb, j);

    let permuted = batch_of(&[samples[2].clone(), samples[0].clone(), samples[1].clone()], t, &[2, 8, 8]);
    let (perm, _) = run_backbone(&bb, &store, permuted, BnMode::Eval);
    assert_eq!(per_sample(&perm, 0), per_sample(&base, 2));
    assert_eq!(per_sample(&perm, 1), per_sample(&base, 0));
    assert_eq!(per_sample(&perm, 2), per_sample(&base, 1));

    let doubled: Vec<Vec<f64>> = samples.iter().chain(&samples).cloned().collect();
    let (dup, _) = run_backbone(&bb, &store, batch_of(&doubled, t, &[2, 8, 8]), BnMode::Eval);
    for j in 0..3 {
        assert_eq!(per_sample(&dup, j), per_sample(&base, j));
        assert_eq!(per_sample(&dup, j + 3), per_sample(&base, j));
    }
}

#[test]
fn identical_samples_share_embeddings_in_training_mode() {
    let bb = Backbone::new(small_cfg()).unwrap();
    let store: ParamStore<f64> = bb.init_params(&mut rng(1, 0));
    let frames = spiky_frames(8, 3, 1, 8);
    let s = sample_of(&frames, 0);
    let (emb, _) = run_backbone(&bb, &store, batch_of(&[s.clone(), s], 3, &[2, 8, 8]), BnMode::Train);
    assert_eq!(sample_of(&emb, 0), sample_of(&emb, 1));
}

fn with_ctx<R>(
    store: &ParamStore<f64>,
    steps: usize,
    f: impl for<'a, 't> FnOnce(&'t Tape<f64>, &mut Ctx<'a, 't, f64>) -> R,
) -> R {
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let mut ctx = Ctx {
        bind: &bind,
        store,
        mode: BnMode::Train,
        steps,
        lif: LifConfig::default(),
        eps: 1e-5,
        updates: Vec::new(),
    };
    f(&tape, &mut ctx)
}

fn block_store(seed: u64, cin: usize, cout: usize) -> ParamStore<f64> {
    let cfg = BackboneConfig {
        stem_channels: cin,
        stage_widths: vec![cout],
        blocks_per_stage: vec![1],
        ..small_cfg()
    };
    Backbone::new(cfg).unwrap().init_params(&mut rng(seed, 1))
}

#[test]
fn sew_activations_are_spike_counts() {
    let mut store = block_store(3, 3, 5);
    // Biased batch norm so both paths fire often.
    for name in ["stem.bn", "stage0.block0.bn2", "stage0.block0.down.bn"] {
        store.get_mut(&format!("{name}.beta")).unwrap().data_mut().fill(1.5);
    }
    let x = spiky_frames(3, 4, 2, 6).map(|v| v.min(1.0)).reshape([8, 2, 6, 6]).unwrap();
    with_ctx(&store, 4, |tape, ctx| {
        let x = tape.constant(x.clone());
        let stem = ctx.conv_bn_sn(x, "stem.conv", "stem.bn", ConvSpec::new(1, 1)).unwrap();
        assert!(stem.value().data().iter().all(|&v| v == 0.0 || v == 1.0));
        let out = ctx.sew_block(stem, "stage0.block0", 1, true).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
        assert!(out.value().data().contains(&2.0));
    });
}

#[test]
fn silent_residual_branch_is_identity() {
    let mut store = block_store(0, 4, 4);
    store.get_mut("stage0.block0.conv2.weight").unwrap().data_mut().fill(0.0);
    let mut r = rng(2, 2);
    let x = Tensor::from_fn([6, 4, 5, 5], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    with_ctx(&store, 3, |tape, ctx| {
        let out = ctx.sew_block(tape.constant(x.clone()), "stage0.block0", 1, false).unwrap();
        assert_eq!(*out.value(), x);
    });
}

#[test]
fn sew_block_rejects_channel_mismatch() {
    let store = block_store(0, 4, 4);
    with_ctx(&store, 1, |tape, ctx| {
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        assert!(matches!(ctx.sew_block(x, "stage0.block0", 1, false), Err(Error::Shape(_))));
    });
}

/// Straight-line recomputation of a projected SEW block: batch norm over
/// explicit loops and the neuron through `lif_step`.
fn reference_block(store: &ParamStore<f64>, x: &Tensor<f64>, steps: usize) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let cfg = LifConfig::default();
    let p = |s: &str| store.get(&format!("stage0.block0.{s}")).unwrap().clone();
    let conv = |x: &Tensor<f64>, w: Tensor<f64>, stride: usize, pad: usize| -> Tensor<f64> {
        (*tape.constant(x.clone()).conv2d(tape.constant(w), None, ConvSpec::new(stride, pad)).unwrap().value()).clone()
    };
    let bn = |x: &Tensor<f64>, g: Tensor<f64>, b: Tensor<f64>| -> Tensor<f64> {
        let s = x.shape().to_vec();
        let (nb, c, inner) = (s[0], s[1], s[2] * s[3]);
        let mut out = x.clone();
        for ch in 0..c {
            let vals: Vec<f64> = (0..nb).flat_map(|i| x.data()[(i * c + ch) * inner..][..inner].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            for i in 0..nb {
                for k in 0..inner {
                    let idx = (i * c + ch) * inner + k;
                    out.data_mut()[idx] = g.data()[ch] * (x.data()[idx] - m) / (v + 1e-5).sqrt() + b.data()[ch];
                }
            }
        }
        out
    };
    let sn = |x: &Tensor<f64>| -> Tensor<f64> {
        let per = x.len() / steps;
        let mut st = LifState::resting(&tape, &[per], &cfg);
        let mut out = Vec::new();
        for t in 0..steps {
            let xt = tape.constant(Tensor::new([per], x.data()[t * per..][..per].to_vec()).unwrap());
            let (s, next) = lif_step(&st, xt, &cfg).unwrap();
            out.extend_from_slice(s.value().data());
            st = next;
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    };
    let a = sn(&bn(&conv(x, p("conv1.weight"), 2, 1), p("bn1.gamma"), p("bn1.beta")));
    let b = sn(&bn(&conv(&a, p("conv2.weight"), 1, 1), p("bn2.gamma"), p("bn2.beta")));
    let d = sn(&bn(&conv(x, p("down.conv.weight"), 2, 0), p("down.bn.gamma"), p("down.bn.beta")));
    b.data().iter().zip(d.data()).map(|(u, v)| u + v).collect()
}

#[test]
fn sew_block_matches_reference_composition() {
    for seed in 0..5 {
        let mut store = block_store(seed, 3, 6);
        let mut r = rng(seed, 9);
        for name in ["bn1", "bn2", "down.bn"] {
            for (suffix, lo, hi) in [("gamma", 0.5, 2.0), ("beta", -0.5, 1.0)] {
                let t = store.get_mut(&format!("stage0.block0.{name}.{suffix}")).unwrap();
                for v in t.data_mut() {
                    *v = r.random_range(lo..hi);
                }
            }
        }
        let steps = 3;
        let x = Tensor::from_fn([steps * 2, 3, 6, 6], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
        let want = reference_block(&store, &x, steps);
        with_ctx(&store, steps, |tape, ctx| {
            let out = ctx.sew_block(tape.constant(x.clone()), "stage0.block0", 2, true).unwrap();
            assert_eq!(out.value().data(), &want[..]);
        });
    }
}

#[test]
fn bn_updates_move_running_stats() {
    let bb = Backbone::new(small_cfg()).unwrap();
    let mut store: ParamStore<f64> = bb.init_params(&mut rng(0, 0));
    let (_, updates) = run_backbone(&bb, &store, spiky_frames(1, 2, 2, 8), BnMode::Train);
    let stem = &updates.iter().find(|(n, _)| n == "stem.bn").unwrap().1;
    apply_bn_updates(&mut store, &updates, 0.1).unwrap();
    let rm = store.get("stem.bn.running_mean").unwrap();
    assert!((rm.data()[0] - 0.1 * stem.mean[0]).abs() < 1e-15);
    let rv = store.get("stem.bn.running_var").unwrap();
    let unbiased = stem.var[0] * stem.count as f64 / (stem.count - 1) as f64;
    assert!((rv.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
}

#[test]
fn zero_classifier_gives_uniform_cross_entropy() {
    let mut store = ParamStore::<f64>::new();
    init_classification_head(&mut store, 5, 10, &mut rng(0, 0));
    store.get_mut("cls.weight").unwrap().data_mut().fill(0.0);
    store.get_mut("cls.bias").unwrap().data_mut().fill(0.0);
    let tape = Tape::new();
    let bind = store.bind(&tape, false);
    let emb = tape.constant(uniform(&mut rng(1, 1), &[16, 4, 5], -1.0, 1.0));
    let logits = classification_head(&bind, emb).unwrap();
    assert_eq!(logits.shape(), [16, 4, 10]);
    let ce = logits.reshape([64, 10]).unwrap().cross_entropy(&[3; 64]).unwrap();
    assert!((ce.value().item().unwrap() - 10f64.ln()).abs() < 1e-12);
    let wrong = tape.constant(Tensor::zeros([16, 4, 6]));
    assert!(matches!(classification_head(&bind, wrong), Err(Error::Shape(_))));
}

#[test]
fn heads_pass_finite_difference_checks() {
    for seed in 0..20 {
        let mut r = rng(seed, 21);
        let mut store = ParamStore::<f64>::new();
        init_projection_head(&mut store, 4, &mut r);
        init_classification_head(&mut store, 4, 3, &mut r);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
        inputs.push(uniform(&mut r, &[2, 3, 4], -1.0, 1.0));
        let f: &gradcheck::ScalarFn<'_> = &|_, vars| {
            let bind = Binding::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let h = projection_head(&bind, vars[vars.len() - 1])?;
            gradcheck::project(classification_head(&bind, h)?, seed)
        };
        let err = gradcheck::max_relative_error(&inputs, f, gradcheck::STEP).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
