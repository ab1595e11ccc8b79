//! The finite-difference suite over every differentiable op of the crate.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_away_from_kinks, uniform, GradcheckOptions, GradcheckReport};
use crate::autodiff::{AttentionWeights, Tape, Var};
use crate::error::Result;
use crate::flow_conv::{dfc, dfc_branch, ndc, DfcBranchWeights, DfcWeights, FlowPattern, KernelAxis, NdcWeights};
use crate::net::{feu_forward, forward, init_parameters, l1_loss, NetworkConfig};
use crate::quaternion::{qconv2d, qsm, split_activation, QuaternionConvWeights, QuaternionFeature};
use crate::tensor::Tensor;

/// Tolerance for smooth ops.
pub const SMOOTH_TOL: f64 = 1e-4;
/// Tolerance for ops with max/min, abs or floor kinks.
pub const KINKED_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Independent seeds per case; the worst error is reported.
    pub seeds: u64,
    /// Only cases whose name contains this substring.
    pub filter: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seeds: 5, filter: None }
    }
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tol: f64,
    gen: Gen,
    build: Build,
}

fn case(
    name: &'static str,
    tol: f64,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, tol, gen: Box::new(gen), build: Box::new(build) }
}

/// Uniform tensors of the given shapes.
fn shapes(list: &'static [&'static [usize]]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |rng| list.iter().map(|s| uniform(rng, s)).collect()
}

fn scaled(rng: &mut ChaCha8Rng, shape: &[usize], s: f64) -> Tensor<f64> {
    uniform(rng, shape).map(|v| v * s).with_requires_grad(true)
}

fn quaternion_weights(v: &[Var], with_bias: bool) -> QuaternionConvWeights {
    let mut w = QuaternionConvWeights::new(v[0], v[1], v[2], v[3]);
    if with_bias {
        w.bias = [Some(v[4]), Some(v[5]), Some(v[6]), Some(v[7])];
    }
    w
}

fn branch_from(v: &[Var]) -> DfcBranchWeights {
    DfcBranchWeights { offset_w: v[0], offset_b: Some(v[1]), horizontal_w: v[2], vertical_w: v[3] }
}

fn branch_inputs(rng: &mut ChaCha8Rng, c: usize, k: usize) -> Vec<Tensor<f64>> {
    vec![
        scaled(rng, &[2 * k, c, 3, 3], 0.3),
        scaled(rng, &[2 * k], 0.3),
        uniform(rng, &[c, c, 1, k]),
        uniform(rng, &[c, c, k, 1]),
    ]
}

fn cases() -> Vec<Case> {
    vec![
        case("add", SMOOTH_TOL, shapes(&[&[2, 3], &[2, 3]]), |t, v| t.add(v[0], v[1])),
        case("sub", SMOOTH_TOL, shapes(&[&[2, 3], &[2, 3]]), |t, v| t.sub(v[0], v[1])),
        case("mul", SMOOTH_TOL, shapes(&[&[2, 3], &[2, 3]]), |t, v| t.mul(v[0], v[1])),
        case("scale", SMOOTH_TOL, shapes(&[&[5]]), |t, v| Ok(t.scale(v[0], -1.5))),
        case("matmul", SMOOTH_TOL, shapes(&[&[3, 4], &[4, 2]]), |t, v| t.matmul(v[0], v[1])),
        case("bmm", SMOOTH_TOL, shapes(&[&[2, 3, 4], &[2, 4, 2]]), |t, v| t.bmm(v[0], v[1], false)),
        case("bmm_trans_b", SMOOTH_TOL, shapes(&[&[2, 3, 4], &[2, 5, 4]]), |t, v| t.bmm(v[0], v[1], true)),
        case("linear", SMOOTH_TOL, shapes(&[&[5, 3], &[3, 4], &[4]]), |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("sum", SMOOTH_TOL, shapes(&[&[2, 3]]), |t, v| Ok(t.sum(v[0]))),
        case("mean", SMOOTH_TOL, shapes(&[&[2, 3]]), |t, v| Ok(t.mean(v[0]))),
        case("abs", KINKED_TOL, shapes(&[&[4, 4]]), |t, v| Ok(t.abs(v[0]))),
        case("gelu", SMOOTH_TOL, shapes(&[&[4, 4]]), |t, v| Ok(t.gelu(v[0]))),
        case("leaky_relu", KINKED_TOL, shapes(&[&[4, 4]]), |t, v| Ok(t.leaky_relu(v[0], 0.2))),
        case("tanh", SMOOTH_TOL, shapes(&[&[4, 4]]), |t, v| Ok(t.tanh(v[0]))),
        case("softmax", SMOOTH_TOL, shapes(&[&[3, 5]]), |t, v| t.softmax(v[0])),
        case("reshape", SMOOTH_TOL, shapes(&[&[2, 6]]), |t, v| t.reshape(v[0], &[3, 4])),
        case("concat_channels", SMOOTH_TOL, shapes(&[&[1, 2, 3, 3], &[1, 1, 3, 3]]), |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        case("slice_channels", SMOOTH_TOL, shapes(&[&[2, 4, 3, 3]]), |t, v| t.slice_channels(v[0], 1, 2)),
        case("pixel_shuffle", SMOOTH_TOL, shapes(&[&[1, 8, 2, 3]]), |t, v| t.pixel_shuffle(v[0], 2)),
        case("pixel_unshuffle", SMOOTH_TOL, shapes(&[&[1, 2, 4, 6]]), |t, v| t.pixel_unshuffle(v[0], 2)),
        case("conv2d", SMOOTH_TOL, shapes(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]]), |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d_stride2", SMOOTH_TOL, shapes(&[&[1, 2, 6, 6], &[2, 2, 3, 3], &[2]]), |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case("conv2d_rect", SMOOTH_TOL, shapes(&[&[1, 2, 5, 5], &[2, 2, 1, 3]]), |t, v| {
            t.conv2d_padded(v[0], v[1], None, 1, (0, 1))
        }),
        case("layernorm", SMOOTH_TOL, shapes(&[&[2, 4, 3, 3], &[4], &[4]]), |t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
        case("conv_layernorm_sum", SMOOTH_TOL, shapes(&[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3], &[3]]), |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1)?;
            let n = t.layernorm(y, v[2], v[3], 1e-5)?;
            Ok(t.sum(n))
        }),
        case("diamond", SMOOTH_TOL, shapes(&[&[3, 3]]), |t, v| {
            let a = t.tanh(v[0]);
            let b = t.mul(a, v[0])?;
            let c = t.gelu(a);
            t.add(b, c)
        }),
        case(
            "window_attention",
            SMOOTH_TOL,
            shapes(&[&[1, 4, 4, 4], &[4, 12], &[12], &[4, 4], &[4], &[9, 2]]),
            |t, v| {
                let w = AttentionWeights {
                    qkv_w: v[1],
                    qkv_b: Some(v[2]),
                    proj_w: v[3],
                    proj_b: Some(v[4]),
                    rel_bias: Some(v[5]),
                };
                t.window_attention(v[0], &w, 2, 0, 2)
            },
        ),
        case(
            "window_attention_shifted",
            SMOOTH_TOL,
            shapes(&[&[1, 4, 4, 4], &[4, 12], &[12], &[4, 4], &[4], &[9, 2]]),
            |t, v| {
                let w = AttentionWeights {
                    qkv_w: v[1],
                    qkv_b: Some(v[2]),
                    proj_w: v[3],
                    proj_b: Some(v[4]),
                    rel_bias: Some(v[5]),
                };
                t.window_attention(v[0], &w, 2, 1, 2)
            },
        ),
        case(
            "qconv2d",
            SMOOTH_TOL,
            shapes(&[
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2],
                &[2],
                &[2],
                &[2],
                &[1, 2, 4, 4],
                &[1, 2, 4, 4],
                &[1, 2, 4, 4],
                &[1, 2, 4, 4],
            ]),
            |t, v| {
                let q = QuaternionFeature::new(t, v[8], v[9], v[10], v[11])?;
                let out = qconv2d(t, &q, &quaternion_weights(v, true), 1, 1)?;
                t.concat_channels(&out.parts())
            },
        ),
        case(
            "split_gelu",
            SMOOTH_TOL,
            shapes(&[&[1, 1, 2, 2], &[1, 1, 2, 2], &[1, 1, 2, 2], &[1, 1, 2, 2]]),
            |t, v| {
                let q = QuaternionFeature::new(t, v[0], v[1], v[2], v[3])?;
                let out = split_activation(t, &q, crate::autodiff::Activation::Gelu);
                t.concat_channels(&out.parts())
            },
        ),
        case(
            "qsm",
            SMOOTH_TOL,
            shapes(&[
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2, 2, 3, 3],
                &[2],
                &[2],
                &[2],
                &[2],
                &[1, 6, 4, 4],
            ]),
            |t, v| qsm(t, v[8], &quaternion_weights(v, true), None),
        ),
        case(
            "qsm_keep_real",
            SMOOTH_TOL,
            shapes(&[
                &[1, 1, 3, 3],
                &[1, 1, 3, 3],
                &[1, 1, 3, 3],
                &[1, 1, 3, 3],
                &[1],
                &[1],
                &[1],
                &[1],
                &[1, 3, 4, 4],
                &[3, 4, 1, 1],
            ]),
            |t, v| qsm(t, v[8], &quaternion_weights(v, true), Some(v[9])),
        ),
        case(
            "bilinear_sample",
            KINKED_TOL,
            |rng| {
                let x = uniform(rng, &[1, 2, 4, 5]);
                let p = Tensor::from_fn([1, 6, 2], |i| {
                    let hi = if i % 2 == 0 { 5.0 } else { 4.0 };
                    rng.gen_range(-1.0..hi)
                })
                .with_requires_grad(true);
                vec![x, p]
            },
            |t, v| t.bilinear_sample(v[0], v[1]),
        ),
        case(
            "deformable_conv2d",
            KINKED_TOL,
            |rng| vec![uniform(rng, &[1, 2, 5, 5]), uniform(rng, &[2, 2, 3, 3]), scaled(rng, &[1, 18, 5, 5], 1.5)],
            |t, v| t.deformable_conv2d(v[0], v[1], v[2]),
        ),
        case("flow_constraint_left", KINKED_TOL, shapes(&[&[1, 5, 3, 3]]), |t, v| {
            t.flow_constraint(v[0], FlowPattern::Left)
        }),
        case("flow_constraint_adaptive", KINKED_TOL, shapes(&[&[1, 5, 3, 3]]), |t, v| {
            t.flow_constraint(v[0], FlowPattern::Adaptive)
        }),
        case("chain_positions", SMOOTH_TOL, shapes(&[&[1, 5, 2, 3]]), |t, v| {
            t.chain_positions(v[0], KernelAxis::Vertical)
        }),
        case(
            "dfc_branch",
            KINKED_TOL,
            |rng| {
                let mut v = vec![uniform(rng, &[1, 2, 6, 6])];
                v.extend(branch_inputs(rng, 2, 5));
                v
            },
            |t, v| dfc_branch(t, v[0], &branch_from(&v[1..]), FlowPattern::Left, 2.0),
        ),
        case(
            "dfc_branch_adaptive",
            KINKED_TOL,
            |rng| {
                let mut v = vec![uniform(rng, &[1, 2, 6, 6])];
                v.extend(branch_inputs(rng, 2, 5));
                v
            },
            |t, v| dfc_branch(t, v[0], &branch_from(&v[1..]), FlowPattern::Adaptive, 2.0),
        ),
        case(
            "dfc",
            KINKED_TOL,
            |rng| {
                let mut v = vec![uniform(rng, &[1, 2, 5, 5])];
                v.extend(branch_inputs(rng, 2, 3));
                v.extend(branch_inputs(rng, 2, 3));
                v.push(uniform(rng, &[2, 4, 1, 1]));
                v
            },
            |t, v| {
                let w = DfcWeights { left: branch_from(&v[1..5]), right: branch_from(&v[5..9]), fuse_w: v[9] };
                dfc(t, v[0], &w, 2.0)
            },
        ),
        case(
            "ndc",
            KINKED_TOL,
            |rng| {
                vec![
                    uniform(rng, &[1, 2, 4, 4]),
                    scaled(rng, &[18, 2, 3, 3], 0.3),
                    scaled(rng, &[18], 0.3),
                    uniform(rng, &[2, 2, 3, 3]),
                ]
            },
            |t, v| ndc(t, v[0], &NdcWeights { offset_w: v[1], offset_b: Some(v[2]), w: v[3] }, 2.0),
        ),
        case("l1_loss", KINKED_TOL, shapes(&[&[2, 3, 4], &[2, 3, 4]]), |t, v| l1_loss(t, v[0], v[1])),
        case("feu_micro", KINKED_TOL, micro_inputs(4, 4), |t, v| {
            let cfg = NetworkConfig::micro();
            let params = init_parameters::<f64>(&cfg, 0)?;
            let bound = params.bind_vars(&v[1..])?;
            feu_forward(t, v[0], &bound, "ffb0.feu0", 0, &cfg)
        }),
        case("micro_net", KINKED_TOL, micro_inputs(3, 8), |t, v| {
            let cfg = NetworkConfig::micro();
            let params = init_parameters::<f64>(&cfg, 0)?;
            let bound = params.bind_vars(&v[1..])?;
            forward(t, v[0], &bound, &cfg)
        }),
    ]
}

/// Micro-network inputs: an `[1, c, s, s]` feature map followed by every
/// parameter of the micro configuration, perturbed away from its init.
/// Offset-predictor biases get a wide spread: near-zero offsets park the
/// sampling taps on integer pixels, where bilinear interpolation has kinks.
fn micro_inputs(c: usize, s: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |rng| {
        let cfg = NetworkConfig::micro();
        let input =
            if c == 3 { uniform(rng, &[1, 3, s, s]).map(|v| 0.5 + 0.5 * v) } else { uniform(rng, &[1, 6, s, s]) };
        let mut v = vec![input.with_requires_grad(true)];
        let params = init_parameters::<f64>(&cfg, rng.gen()).expect("micro config is valid");
        for (name, t) in params.iter() {
            let spread = if name.ends_with("offset.b") { 1.0 } else { 0.05 };
            let data = t.data().iter().map(|x| x + rng.gen_range(-spread..spread)).collect();
            v.push(Tensor::new(t.shape().to_vec(), data).expect("same shape").with_requires_grad(true));
        }
        v
    }
}

/// Runs every case for `opts.seeds` seeds, returning the worst report per case.
pub fn run_suite(
    opts: &SuiteOptions,
    mut on_report: impl FnMut(&GradcheckReport, f64),
) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for c in cases() {
        if opts.filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let mut worst: Option<GradcheckReport> = None;
        for seed in 0..opts.seeds.max(1) {
            let go = GradcheckOptions { tolerance: c.tol, seed, ..GradcheckOptions::default() };
            let r = check_away_from_kinks(c.name, |rng| (c.gen)(rng), |t, v| (c.build)(t, v), &go)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                let probes = worst.as_ref().map_or(0, |w| w.probes);
                worst = Some(GradcheckReport { probes: probes + r.probes, ..r });
            } else if let Some(w) = worst.as_mut() {
                w.probes += r.probes;
            }
        }
        let r = worst.expect("at least one seed");
        on_report(&r, start.elapsed().as_secs_f64());
        out.push(r);
    }
    Ok(out)
}
