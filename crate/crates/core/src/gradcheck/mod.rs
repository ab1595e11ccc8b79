//! Central finite-difference gradient checking.
//!
//! Every case reduces the op output to a scalar through a fixed random
//! projection `sum(out * R)`, back-propagates once, then compares each
//! analytic gradient with `(f(x + h) - f(x - h)) / 2h`. The error reported
//! per input is the norm-wise relative error
//! `|g_auto - g_fd| / max(|g_auto|, |g_fd|)` over the checked elements.

mod suite;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use suite::{run_suite, SuiteOptions};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements of each input probed; larger inputs are subsampled.
    pub max_probes: usize,
    /// Minimum distance to any kink required before checking.
    pub kink_margin: f64,
    pub max_redraws: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, max_probes: 48, kink_margin: 1e-3, max_redraws: 64, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub redraws: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} rel_err={:.3e} tol={:.0e} probes={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.probes
        )
    }
}

fn projection(tape: &Tape<f64>, out: Var, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn projected_loss<F>(inputs: &[Tensor<f64>], build: &F, proj: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.data(out).iter().zip(proj).map(|(a, b)| a * b).sum())
}

/// Checks `build` at a fixed operating point. Inputs whose tensor has
/// `requires_grad == false` are treated as constants and not probed.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], build: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let proj = projection(&tape, out, opts.seed);
    let r = tape.constant(Tensor::new(tape.shape(out).to_vec(), proj.clone())?);
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let zeros = vec![0.0; input.numel()];
        let analytic = tape.grad(vars[i]).unwrap_or(&zeros).to_vec();
        let picks: Vec<usize> = if input.numel() <= opts.max_probes {
            (0..input.numel()).collect()
        } else {
            let mut v = sample(&mut rng, input.numel(), opts.max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut perturbed = inputs.to_vec();
        for &e in &picks {
            let orig = input.data()[e];
            perturbed[i].data_mut()[e] = orig + opts.step;
            let plus = projected_loss(&perturbed, &build, &proj)?;
            perturbed[i].data_mut()[e] = orig - opts.step;
            let minus = projected_loss(&perturbed, &build, &proj)?;
            perturbed[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            diff2 += (numeric - analytic[e]).powi(2);
            a2 += analytic[e].powi(2);
            n2 += numeric.powi(2);
        }
        probes += picks.len();
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < 1e-300 { diff2.sqrt() } else { diff2.sqrt() / denom };
        worst = worst.max(rel);
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: opts.tolerance,
        probes,
        redraws: 0,
        passed: worst <= opts.tolerance,
    })
}

/// Like [`check`], but draws inputs from `gen` and redraws them while the
/// recorded graph sits within `opts.kink_margin` of a non-differentiable point.
pub fn check_away_from_kinks<G, F>(name: &str, mut gen: G, build: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    G: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    for redraw in 0..opts.max_redraws {
        let inputs = gen(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&mut tape, &vars)?;
        if tape.kink_margin() >= opts.kink_margin {
            let mut report = check(name, &inputs, build, opts)?;
            report.redraws = redraw;
            return Ok(report);
        }
    }
    Err(Error::InvalidArgument(format!(
        "{name}: no input draw cleared the kink margin {} in {} attempts",
        opts.kink_margin, opts.max_redraws
    )))
}

/// Uniform `[-1, 1)` tensor marked as requiring a gradient.
pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).with_requires_grad(true)
}
