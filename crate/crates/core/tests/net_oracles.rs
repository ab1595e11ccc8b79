mod common;

use common::{rand_tensor, rng};
use qflow_core::flow_conv::ConvVariant;
use qflow_core::net::{
    feu_forward, forward, init_parameters, l1_loss, predict, trunk_forward, ModelParameters, NetworkConfig,
};
use qflow_core::train::{adam_step, loss_and_grads, AdamState};
use qflow_core::{Tape, Tensor};

fn zeroed(params: &ModelParameters<f64>, prefix: &str) -> ModelParameters<f64> {
    let mut p = params.clone();
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            *t = Tensor::zeros(t.shape());
        }
    }
    p
}

#[test]
fn zero_weight_feu_is_identity() {
    for variant in ConvVariant::ALL {
        let cfg = NetworkConfig { conv_variant: variant, ..NetworkConfig::micro() };
        let params = zeroed(&init_parameters(&cfg, 3).unwrap(), "ffb0.feu0.");
        let x = rand_tensor(&mut rng(4), &[2, cfg.channels, 4, 4]);
        for shift in [0, 1] {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = feu_forward(&mut tape, xv, &p, "ffb0.feu0", shift, &cfg).unwrap();
            assert_eq!(tape.data(y), x.data(), "{variant} shift {shift}");
        }
    }
}

#[test]
fn zero_trunk_doubles_shallow_features_without_qsm_and_passes_them_with_it() {
    // with every block weight zero the trunk is f0 + f0 without QSM and
    // QSM(0) + f0 = f0 with it
    for qsm in [false, true] {
        let cfg = NetworkConfig { qsm_enabled: qsm, ..NetworkConfig::micro() };
        let mut params = init_parameters::<f64>(&cfg, 5).unwrap();
        params = zeroed(&params, "ffb");
        params = zeroed(&params, "deep");
        let f0 = rand_tensor(&mut rng(6), &[1, cfg.channels, 4, 4]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(f0.clone());
        let y = trunk_forward(&mut tape, x, &p, &cfg).unwrap();
        let factor = if qsm { 1.0 } else { 2.0 };
        for (a, b) in tape.data(y).iter().zip(f0.data()) {
            assert_eq!(*a, factor * b);
        }
    }
}

fn count(cfg: &NetworkConfig) -> usize {
    init_parameters::<f32>(cfg, 0).unwrap().total()
}

#[test]
fn baseline_parameter_count_matches_formula() {
    for (c, units, blocks, window, heads, scale) in [(24, 2, 2, 4, 3, 2), (6, 1, 1, 2, 2, 4), (48, 6, 6, 8, 6, 8)] {
        let cfg = NetworkConfig {
            channels: c,
            feu_per_ffb: units,
            ffb_count: blocks,
            window,
            heads,
            scale,
            conv_variant: ConvVariant::None,
            qsm_enabled: false,
            ..NetworkConfig::desk()
        };
        let shallow = 3 * c * 9 + c;
        let span = 2 * window - 1;
        let feu = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + span * span * heads;
        let stages = scale.trailing_zeros() as usize;
        let up = stages * (4 * c * c * 9 + 4 * c);
        let last = 3 * c * 9 + 3;
        assert_eq!(count(&cfg), shallow + blocks * units * feu + up + last);
    }
}

#[test]
fn qsm_toggle_adds_exactly_the_quaternion_layers() {
    let on = NetworkConfig::desk();
    let off = NetworkConfig { qsm_enabled: false, ..on.clone() };
    let cq = on.channels / 3;
    let per_layer = 4 * cq * cq * 9 + 3 * cq;
    assert_eq!(count(&on) - count(&off), (on.ffb_count + 2) * per_layer);

    let real = NetworkConfig { qsm_keep_real: true, ..on.clone() };
    let per_real = 4 * cq * cq * 9 + 4 * cq + on.channels * 4 * cq;
    assert_eq!(count(&real) - count(&off), (on.ffb_count + 2) * per_real);
}

#[test]
fn conv_variant_toggle_counts() {
    let base = NetworkConfig { conv_variant: ConvVariant::None, ..NetworkConfig::desk() };
    let (c, k) = (base.channels, base.dfc_k);
    let units = base.ffb_count * base.feu_per_ffb;
    let branch = 2 * k * c * 9 + 2 * k + 2 * c * c * k;
    let expect = [
        (ConvVariant::Ndc, 18 * c * 9 + 18 + c * c * 9),
        (ConvVariant::Ldfc, branch),
        (ConvVariant::Rdfc, branch),
        (ConvVariant::Adfc, branch),
        (ConvVariant::Dfc, 2 * branch + 2 * c * c),
    ];
    for (variant, per_unit) in expect {
        let cfg = NetworkConfig { conv_variant: variant, ..base.clone() };
        assert_eq!(count(&cfg) - count(&base), units * per_unit, "{variant}");
    }
}

#[test]
fn output_shapes_for_all_scales_and_variants() {
    for scale in [2, 4, 8] {
        for variant in [ConvVariant::None, ConvVariant::Dfc] {
            let cfg = NetworkConfig { scale, conv_variant: variant, ..NetworkConfig::micro() };
            let params = init_parameters::<f32>(&cfg, 1).unwrap();
            let y = predict(&params, &cfg, &Tensor::full([1, 3, 6, 4], 0.25)).unwrap();
            assert_eq!(y.shape(), &[1, 3, 6 * scale, 4 * scale]);
        }
    }
}

#[test]
fn input_not_divisible_by_window_is_rejected() {
    let cfg = NetworkConfig::micro();
    let params = init_parameters::<f32>(&cfg, 1).unwrap();
    assert!(predict(&params, &cfg, &Tensor::zeros([1, 3, 5, 4])).is_err());
    assert!(predict(&params, &cfg, &Tensor::zeros([1, 1, 4, 4])).is_err());
}

#[test]
fn all_zero_model_outputs_zero() {
    let cfg = NetworkConfig::micro();
    let params = init_parameters::<f64>(&cfg, 2).unwrap();
    let params = zeroed(&params, "");
    let y = predict(&params, &cfg, &rand_tensor(&mut rng(1), &[1, 3, 4, 4])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_adam_step_lowers_the_loss() {
    let cfg = NetworkConfig::micro();
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let lr = rand_tensor(&mut r, &[2, 3, 4, 4]).map(|v| 0.5 + 0.4 * v);
        let hr = rand_tensor(&mut r, &[2, 3, 8, 8]).map(|v| 0.5 + 0.4 * v);
        let mut params = init_parameters::<f64>(&cfg, seed).unwrap();
        let mut state = AdamState::new(&params);
        let (before, grads) = loss_and_grads(&params, &cfg, &lr, &hr).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        let (after, _) = loss_and_grads(&params, &cfg, &lr, &hr).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn l1_gradient_is_sign_over_count() {
    let mut r = rng(9);
    let a = rand_tensor(&mut r, &[2, 3, 4]);
    let b = rand_tensor(&mut r, &[2, 3, 4]);
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.constant(b.clone());
    let l = l1_loss(&mut tape, av, bv).unwrap();
    tape.backward(l).unwrap();
    let n = a.numel() as f64;
    let want_loss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    assert!((tape.data(l)[0] - want_loss).abs() <= 1e-15);
    for ((g, x), y) in tape.grad(av).unwrap().iter().zip(a.data()).zip(b.data()) {
        assert_eq!(*g, (x - y).signum() / n);
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = NetworkConfig::micro();
    let p64 = init_parameters::<f64>(&cfg, 7).unwrap();
    let p32: ModelParameters<f32> = p64.cast();
    let x = rand_tensor(&mut rng(8), &[1, 3, 4, 4]);
    let y64 = predict(&p64, &cfg, &x).unwrap();
    let y32 = predict(&p32, &cfg, &x.cast::<f32>()).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y64) <= 1e-4);
}

#[test]
fn gradients_reach_every_parameter() {
    let cfg = NetworkConfig::micro();
    let params = init_parameters::<f64>(&cfg, 11).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let x = tape.constant(rand_tensor(&mut rng(12), &[1, 3, 4, 4]));
    let t = tape.constant(rand_tensor(&mut rng(13), &[1, 3, 8, 8]));
    let y = forward(&mut tape, x, &p, &cfg).unwrap();
    let l = l1_loss(&mut tape, y, t).unwrap();
    tape.backward(l).unwrap();
    for (name, v) in p.iter() {
        let g = tape.grad(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
    }
}
