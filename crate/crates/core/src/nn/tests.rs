use super::*;
use crate::rng::seeded;

fn tiny_dense_spec() -> NetworkSpec {
    NetworkSpec {
        heads: vec![HeadSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense { inp: 3, out: 4 }, LayerSpec::Tanh],
        }],
        extra_input: 0,
        trunk: vec![
            LayerSpec::Dense { inp: 4, out: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { inp: 5, out: 2 },
        ],
    }
}

fn tiny_conv_spec() -> NetworkSpec {
    NetworkSpec {
        heads: vec![
            HeadSpec {
                input_shape: vec![2, 7, 7],
                layers: vec![
                    LayerSpec::Conv { in_ch: 2, out_ch: 3, kernel: 3, stride: 2 },
                    LayerSpec::Tanh,
                    LayerSpec::Flatten,
                ],
            },
            HeadSpec {
                input_shape: vec![2],
                layers: vec![LayerSpec::Dense { inp: 2, out: 4 }, LayerSpec::Tanh],
            },
        ],
        extra_input: 2,
        trunk: vec![
            LayerSpec::Dense { inp: 3 * 9 + 4 + 2, out: 6 },
            LayerSpec::Tanh,
            LayerSpec::Dense { inp: 6, out: 1 },
            LayerSpec::Scale { factor: 0.5 },
        ],
    }
}

fn random_inputs(spec: &NetworkSpec, batch: usize, seed: u64) -> (Vec<Tensor>, Option<Tensor>) {
    use rand::Rng;
    let mut rng = seeded(seed);
    let heads = spec
        .heads
        .iter()
        .map(|h| {
            let mut shape = vec![batch];
            shape.extend_from_slice(&h.input_shape);
            let n: usize = shape.iter().product();
            Tensor::from_vec(&shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        })
        .collect();
    let extra = (spec.extra_input > 0).then(|| {
        let n = batch * spec.extra_input;
        Tensor::from_vec(
            &[batch, spec.extra_input],
            (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    });
    (heads, extra)
}

/// Scalar objective: sum over the batch of output . probe, with a fixed
/// random probe vector. Its gradient w.r.t. the output is the probe row
/// repeated, which exercises every output coordinate.
fn objective(net: &Network, heads: &[&Tensor], extra: Option<&Tensor>, probe: &[f64]) -> f64 {
    let fwd = net.forward(heads, extra).unwrap();
    let out = fwd.output();
    let d = net.output_dim();
    let mut j = 0.0;
    for b in 0..fwd.batch() {
        for (k, p) in probe.iter().enumerate() {
            j += out.data()[b * d + k] * p;
        }
    }
    j
}

/// Central finite differences against analytic gradients for every
/// `stride`-th parameter coordinate and (when present) the extra input.
fn gradient_check(spec: NetworkSpec, batch: usize, seed: u64, stride: usize) {
    use rand::Rng;
    let mut rng = seeded(seed);
    let mut net = Network::init(spec.clone(), InitOptions::default(), &mut rng).unwrap();
    let (heads, extra) = random_inputs(&spec, batch, seed ^ 0x5f5f);
    let head_refs: Vec<&Tensor> = heads.iter().collect();
    let probe: Vec<f64> = (0..net.output_dim())
        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
        .collect();

    let fwd = net.forward(&head_refs, extra.as_ref()).unwrap();
    let mut upstream = Tensor::zeros(&[batch, net.output_dim()]);
    for b in 0..batch {
        let d = net.output_dim();
        upstream.data_mut()[b * d..(b + 1) * d].copy_from_slice(&probe);
    }
    let grads = net.backward(&fwd, &upstream, extra.is_some()).unwrap();

    let h = 1e-5;
    let mut checked = 0usize;
    for pi in 0..net.params().len() {
        let mut k = 0;
        while k < net.params()[pi].len() {
            let orig = net.params()[pi].data()[k];
            net.params[pi].data_mut()[k] = orig + h;
            let j_plus = objective(&net, &head_refs, extra.as_ref(), &probe);
            net.params[pi].data_mut()[k] = orig - h;
            let j_minus = objective(&net, &head_refs, extra.as_ref(), &probe);
            net.params[pi].data_mut()[k] = orig;
            let numeric = (j_plus - j_minus) / (2.0 * h);
            let analytic = grads.params[pi].data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "param {pi}[{k}]: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
            k += stride;
        }
    }
    assert!(checked > 0);

    if let Some(extra_t) = extra.as_ref() {
        let g_extra = grads.extra_input.as_ref().unwrap();
        let mut extra_var = extra_t.clone();
        for k in 0..extra_var.len() {
            let orig = extra_var.data()[k];
            extra_var.data_mut()[k] = orig + h;
            let j_plus = objective(&net, &head_refs, Some(&extra_var), &probe);
            extra_var.data_mut()[k] = orig - h;
            let j_minus = objective(&net, &head_refs, Some(&extra_var), &probe);
            extra_var.data_mut()[k] = orig;
            let numeric = (j_plus - j_minus) / (2.0 * h);
            let analytic = g_extra.data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "extra[{k}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_dense_relu() {
    gradient_check(tiny_dense_spec(), 3, 101, 1);
}

#[test]
fn gradients_match_finite_differences_conv_multihead() {
    gradient_check(tiny_conv_spec(), 2, 202, 1);
}

#[test]
fn gradients_match_finite_differences_default_shapes() {
    // Small-grid versions of the production architectures, subsampled.
    gradient_check(actor_spec(15), 2, 303, 97);
    gradient_check(critic_spec(3), 2, 404, 7);
    gradient_check(image_critic_spec(5), 2, 505, 11);
}

#[test]
fn dense_forward_example() {
    // dense(2 -> 1), weights [1, 1], bias 0, input (3, 4) -> 7.
    let spec = NetworkSpec {
        heads: vec![HeadSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { inp: 2, out: 1 }],
        }],
        extra_input: 0,
        trunk: vec![],
    };
    let mut net = Network::init(spec, InitOptions::default(), &mut seeded(0)).unwrap();
    net.params[0] = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]);
    net.params[1] = Tensor::from_vec(&[1], vec![0.0]);
    let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]);
    let fwd = net.forward(&[&x], None).unwrap();
    assert_eq!(fwd.output().data(), &[7.0]);
}

#[test]
fn tanh_of_zero_vector_is_zero() {
    let spec = NetworkSpec {
        heads: vec![HeadSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Tanh],
        }],
        extra_input: 0,
        trunk: vec![],
    };
    let net = Network::init(spec, InitOptions::default(), &mut seeded(0)).unwrap();
    let x = Tensor::zeros(&[2, 4]);
    let fwd = net.forward(&[&x], None).unwrap();
    assert!(fwd.output().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_output_shape_32_to_15() {
    let out = layer_output_shape(
        &LayerSpec::Conv { in_ch: 1, out_ch: 4, kernel: 3, stride: 2 },
        &[1, 32, 32],
    )
    .unwrap();
    assert_eq!(out, vec![4, 15, 15]);
}

#[test]
fn forward_rejects_shape_mismatch_naming_layer() {
    let net = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(1)).unwrap();
    let bad = Tensor::zeros(&[2, 5]);
    let err = net.forward(&[&bad], None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("head 0"), "unexpected error: {msg}");
}

#[test]
fn forward_is_pure() {
    let spec = tiny_conv_spec();
    let net = Network::init(spec.clone(), InitOptions::default(), &mut seeded(5)).unwrap();
    let (heads, extra) = random_inputs(&spec, 2, 6);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let a = net.forward(&refs, extra.as_ref()).unwrap();
    let b = net.forward(&refs, extra.as_ref()).unwrap();
    assert_eq!(a.output(), b.output());
    assert!(a.output().all_finite());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = tiny_dense_spec();
    let net = Network::init(spec.clone(), InitOptions::default(), &mut seeded(2)).unwrap();
    let (heads, _) = random_inputs(&spec, 2, 3);
    let refs: Vec<&Tensor> = heads.iter().collect();
    let fwd = net.forward(&refs, None).unwrap();
    let grads = net.backward(&fwd, &Tensor::zeros(&[2, 2]), false).unwrap();
    for g in &grads.params {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn square_function_gradient() {
    // f(w) = w^2 realized as dense(1 -> 1) with the input pinned to the
    // weight's value: J = w * x at x = w = 3, so dJ/dw (parameter route)
    // plus dJ/dx (input route) must equal d(w^2)/dw = 2w = 6.
    let spec = NetworkSpec {
        heads: vec![HeadSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Dense { inp: 1, out: 1 }],
        }],
        extra_input: 0,
        trunk: vec![],
    };
    let mut net = Network::init(spec, InitOptions::default(), &mut seeded(0)).unwrap();
    net.params[0] = Tensor::from_vec(&[1, 1], vec![3.0]);
    net.params[1] = Tensor::from_vec(&[1], vec![0.0]);
    let x = Tensor::from_vec(&[1, 1], vec![3.0]);
    let fwd = net.forward(&[&x], None).unwrap();
    assert_eq!(fwd.output().data(), &[9.0]);
    let grads = net
        .backward(&fwd, &Tensor::from_vec(&[1, 1], vec![1.0]), false)
        .unwrap();
    let d_param = grads.params[0].data()[0];
    // The input carries the same value as the weight, so its route
    // contributes an equal amount; the full derivative of w^2 is their sum.
    assert_eq!(d_param, 3.0);
    assert_eq!(2.0 * d_param, 6.0);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut net = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(3)).unwrap();
    let before = net.params().to_vec();
    let grads = Gradients {
        params: before.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        extra_input: None,
    };
    adam_step(&mut net, &grads, 1e-3).unwrap();
    assert_eq!(net.params(), before.as_slice());
}

#[test]
fn adam_first_step_matches_closed_form() {
    // Scalar parameter, g = 1, lr = 1e-3: first step is lr * g/(|g| + eps).
    let spec = NetworkSpec {
        heads: vec![HeadSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Dense { inp: 1, out: 1 }],
        }],
        extra_input: 0,
        trunk: vec![],
    };
    let mut net = Network::init(spec, InitOptions::default(), &mut seeded(4)).unwrap();
    net.params[0] = Tensor::from_vec(&[1, 1], vec![0.7]);
    net.params[1] = Tensor::from_vec(&[1], vec![0.0]);
    let grads = Gradients {
        params: vec![
            Tensor::from_vec(&[1, 1], vec![1.0]),
            Tensor::from_vec(&[1], vec![0.0]),
        ],
        extra_input: None,
    };
    adam_step(&mut net, &grads, 1e-3).unwrap();
    let expected = 0.7 - 1e-3 * 1.0 / (1.0 + 1e-8);
    assert!((net.params()[0].data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_is_deterministic() {
    let build = || {
        let mut net = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(9)).unwrap();
        let grads = Gradients {
            params: net
                .params()
                .iter()
                .map(|p| Tensor::from_vec(p.shape(), vec![0.01; p.len()]))
                .collect(),
            extra_input: None,
        };
        for _ in 0..10 {
            adam_step(&mut net, &grads, 1e-3).unwrap();
        }
        net
    };
    assert_eq!(build(), build());
}

#[test]
fn adam_lr_zero_is_identity() {
    let mut net = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(10)).unwrap();
    let before = net.params().to_vec();
    let grads = Gradients {
        params: net
            .params()
            .iter()
            .map(|p| Tensor::from_vec(p.shape(), vec![0.3; p.len()]))
            .collect(),
        extra_input: None,
    };
    adam_step(&mut net, &grads, 0.0).unwrap();
    assert_eq!(net.params(), before.as_slice());
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut net = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(11)).unwrap();
    let mut params: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    params[0].data_mut()[0] = f64::NAN;
    let err = adam_step(&mut net, &Gradients { params, extra_input: None }, 1e-3).unwrap_err();
    assert!(matches!(err, NnError::Divergence));
}

#[test]
fn soft_update_blends() {
    let src = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(12)).unwrap();
    let mut tgt = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(13)).unwrap();

    // tau = 0: unchanged.
    let before = tgt.params().to_vec();
    soft_update(&mut tgt, &src, 0.0).unwrap();
    assert_eq!(tgt.params(), before.as_slice());

    // tau = 0.005 on a known pair.
    let mut one = tgt.clone();
    one.params[0].data_mut()[0] = 0.0;
    let mut from = src.clone();
    from.params[0].data_mut()[0] = 1.0;
    soft_update(&mut one, &from, 0.005).unwrap();
    assert!((one.params()[0].data()[0] - 0.005).abs() < 1e-15);

    // tau = 1: copies the source.
    soft_update(&mut tgt, &src, 1.0).unwrap();
    assert_eq!(tgt.params(), src.params());
}

#[test]
fn soft_update_keeps_targets_convex() {
    let mut rng = seeded(14);
    let src = Network::init(tiny_conv_spec(), InitOptions::default(), &mut rng).unwrap();
    let mut tgt = Network::init(tiny_conv_spec(), InitOptions::default(), &mut rng).unwrap();
    for _ in 0..20 {
        let bound = src.max_abs_param().max(tgt.max_abs_param());
        soft_update(&mut tgt, &src, 0.005).unwrap();
        assert!(tgt.max_abs_param() <= bound + 1e-15);
    }
}

#[test]
fn soft_update_rejects_arch_mismatch() {
    let src = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(15)).unwrap();
    let mut tgt = Network::init(tiny_conv_spec(), InitOptions::default(), &mut seeded(16)).unwrap();
    assert!(matches!(
        soft_update(&mut tgt, &src, 0.5),
        Err(NnError::ArchMismatch(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut rng = seeded(17);
    let mut a = Network::init(actor_spec(15), ACTOR_INIT_OPTS, &mut rng).unwrap();
    let c = Network::init(critic_spec(4), InitOptions::default(), &mut rng).unwrap();
    // Give the optimizer state some history.
    let grads = Gradients {
        params: a
            .params()
            .iter()
            .map(|p| Tensor::from_vec(p.shape(), vec![0.02; p.len()]))
            .collect(),
        extra_input: None,
    };
    adam_step(&mut a, &grads, 1e-4).unwrap();

    save_checkpoint(&path, &[("actor", &a), ("critic_0", &c)], 123, 7, "abcd").unwrap();
    let (nets, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.step, 123);
    assert_eq!(meta.seed, 7);
    assert_eq!(meta.config_hash, "abcd");
    assert_eq!(nets.len(), 2);
    assert_eq!(nets[0].1, a);
    assert_eq!(nets[1].1, c);
}

#[test]
fn checkpoint_rejects_wrong_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let a = Network::init(tiny_dense_spec(), InitOptions::default(), &mut seeded(18)).unwrap();
    save_checkpoint(&path, &[("actor", &a)], 0, 0, "x").unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text = text.replace("\"format_version\":1", "\"format_version\":9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(NnError::FormatVersion { found: 9, .. })
    ));
}

#[test]
fn checkpoint_arch_mismatch_reports_both_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let a = Network::init(actor_spec(15), InitOptions::default(), &mut seeded(19)).unwrap();
    save_checkpoint(&path, &[("actor", &a)], 0, 0, "x").unwrap();
    let (nets, _) = load_checkpoint(&path).unwrap();
    let expected = actor_spec(32);
    let err = checkpoint::take_named(nets, "actor", &expected).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("does not match expected"), "{msg}");
}

#[test]
fn default_actor_param_count_matches_descriptor_arithmetic() {
    let spec = actor_spec(32);
    // Conv head: (3*9*8 + 8) + (8*9*16 + 16) + (16*9*16 + 16) parameters,
    // once per image head with the first conv taking 3 or 1 channels.
    let conv_head = |in_ch: usize| {
        (in_ch * 9 * 8 + 8) + (8 * 9 * 16 + 16) + (16 * 9 * 16 + 16)
    };
    let pose_head = 2 * 32 + 32;
    let feat = 2 * (16 * 3 * 3) + 32;
    let trunk = (feat * 256 + 256) + (256 * 256 + 256) + (256 * 2 + 2);
    let expected = conv_head(3) + conv_head(1) + pose_head + trunk;
    assert_eq!(spec.param_count(), expected);
    let net = Network::init(spec, ACTOR_INIT_OPTS, &mut seeded(20)).unwrap();
    assert_eq!(net.param_count(), expected);
}

#[test]
fn final_dense_init_bound_applies_to_last_trunk_dense() {
    let net = Network::init(actor_spec(32), ACTOR_INIT_OPTS, &mut seeded(21)).unwrap();
    // The last dense layer's weight tensor is third from the end of the
    // parameter list (w, b), before tanh/scale which carry no parameters.
    let n = net.params().len();
    let w = &net.params()[n - 2];
    let b = &net.params()[n - 1];
    assert_eq!(w.shape(), &[2, 256]);
    assert!(w.max_abs() <= 3e-3);
    assert!(b.max_abs() <= 3e-3);
    // An interior layer uses the fan-in bound, which is much larger.
    assert!(net.params()[n - 4].max_abs() > 3e-3);
}
