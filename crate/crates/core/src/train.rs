//! Optimizer, EMA shadow, training loop, checkpoints, evaluation and the
//! ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{bicubic_upsample, load_split, FlowSample};
use crate::error::{Error, Result};
use crate::fld;
use crate::flow_conv::ConvVariant;
use crate::metrics::{MeanMetrics, MetricReport, SampleMetrics};
use crate::net::{forward, init_parameters, kv_lines, l1_loss, ModelParameters, NetworkConfig};
use crate::tensor::{Scalar, Tensor};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: u64,
    pub ema_decay: f64,
    pub lr_crop: usize,
    pub seed: u64,
    /// Evaluate raw and EMA weights on the test split every this many steps (0 = never).
    pub eval_every: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Run directory receiving `checkpoint/`, `train.log` and `eval.log`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Random flips and 90 degree rotations of training crops.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch: 4,
            iterations: 2000,
            ema_decay: 0.999,
            lr_crop: 32,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
            checkpoint_dir: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: batch 12, 80000 iterations, 64-pixel LR crops.
    pub fn full() -> Self {
        Self { batch: 12, iterations: 80_000, lr_crop: 64, eval_every: 5000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} must lie in (0, 1)", self.ema_decay)));
        }
        if self.batch == 0 || self.lr_crop == 0 {
            return Err(Error::Config("batch and lr_crop must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field; `false` for keys owned elsewhere.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        match key {
            "lr" => self.lr = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "ema_decay" => self.ema_decay = num(key, v)?,
            "lr_crop" => self.lr_crop = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(v)),
            "augment" => {
                self.augment = match v {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    _ => return Err(Error::Config(format!("augment: expected a boolean, got {v:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "ema_decay={:?}", self.ema_decay);
        let _ = writeln!(s, "lr_crop={}", self.lr_crop);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "augment={}", self.augment);
        s
    }
}

/// Applies a `key=value` document to both configs; unknown keys are errors.
pub fn apply_config_text(text: &str, net: &mut NetworkConfig, train: &mut TrainConfig) -> Result<()> {
    for kv in kv_lines(text) {
        let (k, v) = kv?;
        if !net.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adam and EMA

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: ModelParameters<T>,
    pub v: ModelParameters<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros = |p: &ModelParameters<T>| {
            let mut z = ModelParameters::new();
            for (k, t) in p.iter() {
                z.insert(k, Tensor::zeros(t.shape())).expect("unique names");
            }
            z
        };
        Self { m: zeros(params), v: zeros(params), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

/// One Adam update. Every registered parameter needs a gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !params.aligned_with(&state.m) {
        return Err(Error::Alignment("optimizer state does not match parameters".into()));
    }
    for name in params.names() {
        match grads.get(name) {
            Some(g) if g.len() == params.get(name).expect("listed").numel() => {}
            Some(g) => return Err(Error::Alignment(format!("{name}: gradient has {} elements", g.len()))),
            None => return Err(Error::MissingGrad(name.to_string())),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("aligned").data_mut();
        let v = state.v.get_mut(name).expect("aligned").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(shadow: &mut ModelParameters<T>, params: &ModelParameters<T>, decay: f64) -> Result<()> {
    if !shadow.aligned_with(params) {
        return Err(Error::Alignment("EMA shadow does not match parameters".into()));
    }
    for (name, s) in shadow.iter_mut() {
        let p = params.get(name).expect("aligned");
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = T::of(decay * a.as_f64() + (1.0 - decay) * b.as_f64());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// batches

/// Applies one of the 8 square symmetries to the trailing `H x W` planes:
/// bit 0 flips columns, bit 1 flips rows, bit 2 transposes (square only).
pub fn dihedral<T: Scalar>(t: &Tensor<T>, code: u8) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.numel() / (h * w);
    let transpose = code & 4 != 0 && h == w;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if code & 1 != 0 {
                    sx = w - 1 - sx;
                }
                if code & 2 != 0 {
                    sy = h - 1 - sy;
                }
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Tensor<T> {
    let [c, _, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let h = t.shape()[1];
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            out.extend_from_slice(&d[(ch * h + y) * w + x0..][..size]);
        }
    }
    Tensor::new([c, size, size], out).expect("crop shape")
}

/// Random aligned crops for step `step`; deterministic in `(seed, step)`.
pub fn sample_batch<T: Scalar>(
    samples: &[FlowSample<T>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty training split".into()))?;
    let s = first.scale;
    let c = cfg.lr_crop;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let mut lr_data = Vec::with_capacity(cfg.batch * 3 * c * c);
    let mut hr_data = Vec::with_capacity(cfg.batch * 3 * c * c * s * s);
    for _ in 0..cfg.batch {
        let sample = &samples[rng.gen_range(0..samples.len())];
        let (lh, lw) = (sample.lr.shape()[1], sample.lr.shape()[2]);
        if c > lh || c > lw {
            return Err(Error::Dataset(format!("crop {c} larger than LR image {lh}x{lw}")));
        }
        let y = rng.gen_range(0..=lh - c);
        let x = rng.gen_range(0..=lw - c);
        let mut lr = crop(&sample.lr, y, x, c);
        let mut hr = crop(&sample.hr, y * s, x * s, c * s);
        if cfg.augment {
            let code: u8 = rng.gen_range(0..8);
            lr = dihedral(&lr, code);
            hr = dihedral(&hr, code);
        }
        lr_data.extend_from_slice(lr.data());
        hr_data.extend_from_slice(hr.data());
    }
    Ok((Tensor::new([cfg.batch, 3, c, c], lr_data)?, Tensor::new([cfg.batch, 3, c * s, c * s], hr_data)?))
}

/// Loss and gradients of one batch.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParameters<T>,
    net: &NetworkConfig,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(lr.clone());
    let y = tape.constant(hr.clone());
    let pred = forward(&mut tape, x, &bound, net)?;
    let loss = l1_loss(&mut tape, pred, y)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok((value, Gradients::new()));
    }
    tape.backward(loss)?;
    let mut grads = Gradients::new();
    for (name, var) in bound.iter() {
        let g = tape.grad(var).ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        grads.insert(name.to_string(), g.to_vec());
    }
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// checkpoints

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub params: ModelParameters<T>,
    pub ema: ModelParameters<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

impl<T: Scalar> Checkpoint<T> {
    fn group(&self, g: &str) -> &ModelParameters<T> {
        match g {
            "params" => &self.params,
            "ema" => &self.ema,
            "adam_m" => &self.adam.m,
            _ => &self.adam.v,
        }
    }

    /// Writes into a temporary sibling directory, then renames over `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir.file_name().ok_or_else(|| Error::Checkpoint(format!("{} has no file name", dir.display())))?;
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let mut manifest = String::new();
        for g in GROUPS {
            let gdir = tmp.join(g);
            fs::create_dir_all(&gdir).map_err(|e| Error::io(&gdir, e))?;
            for (pname, t) in self.group(g).iter() {
                let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                let _ = writeln!(manifest, "{g}/{pname} {} {}", shape.join(" "), T::DTYPE_NAME);
                fld::write(t, gdir.join(format!("{pname}.fld")))?;
            }
        }
        let files = [
            ("manifest.txt", manifest),
            ("config.txt", format!("{}{}", self.net.to_kv(), self.train.to_kv())),
            (
                "state.txt",
                format!(
                    "step={}\nadam_step={}\nbeta1={:?}\nbeta2={:?}\neps={:?}\n",
                    self.step, self.adam.step, self.adam.beta1, self.adam.beta2, self.adam.eps
                ),
            ),
        ];
        for (f, text) in files {
            let p = tmp.join(f);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |f: &str| {
            let p = dir.join(f);
            fs::read_to_string(&p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
        };
        let mut net = NetworkConfig::desk();
        let mut train = TrainConfig::default();
        apply_config_text(&read("config.txt")?, &mut net, &mut train)?;
        net.validate()?;
        let mut state = BTreeMap::new();
        for kv in kv_lines(&read("state.txt")?) {
            let (k, v) = kv?;
            state.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<f64> {
            state.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Checkpoint(format!("state.txt lacks {k}")))
        };
        let mut groups: BTreeMap<&str, ModelParameters<T>> =
            GROUPS.iter().map(|g| (*g, ModelParameters::new())).collect();
        for line in read("manifest.txt")?.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Checkpoint(format!("malformed manifest line {line:?}"));
            let (entry, rest) = f.split_first().ok_or_else(bad)?;
            let (_, dims) = rest.split_last().ok_or_else(bad)?;
            let shape: Vec<usize> = dims.iter().map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let (g, pname) = entry.split_once('/').ok_or_else(bad)?;
            let t: Tensor<T> = fld::read(dir.join(g).join(format!("{pname}.fld")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{entry}: stored shape {:?} != manifest {shape:?}", t.shape())));
            }
            groups.get_mut(g).ok_or_else(bad)?.insert(pname, t)?;
        }
        let mut take = |g: &str| groups.remove(g).expect("known group");
        let (params, ema, m, v) = (take("params"), take("ema"), take("adam_m"), take("adam_v"));
        let expected = init_parameters::<T>(&net, 0)?;
        for (what, p) in [("params", &params), ("ema", &ema), ("adam_m", &m), ("adam_v", &v)] {
            if !p.aligned_with(&expected) {
                return Err(Error::Checkpoint(format!("{what} does not match the stored network config")));
            }
        }
        Ok(Self {
            net,
            train,
            params,
            ema,
            adam: AdamState {
                m,
                v,
                step: get("adam_step")? as u64,
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                eps: get("eps")?,
            },
            step: get("step")? as u64,
        })
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Source of the prediction being scored.
#[derive(Clone, Copy, Debug)]
pub enum EvalMode<'a, T: Scalar> {
    Model(&'a ModelParameters<T>, &'a NetworkConfig),
    /// Prediction := HR; sanity check of the metric plumbing.
    Oracle,
    /// Bicubic upscaling of the LR input.
    Bicubic,
}

/// Reflect-pads the bottom and right of `[N, C, H, W]` to multiples of `m`.
pub fn pad_reflect<T: Scalar>(t: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if ph == h && pw == w {
        return Ok(t.clone());
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::shape("pad_reflect", format!("{h}x{w} too small to pad to {ph}x{pw}")));
    }
    let refl = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    Ok(Tensor::from_fn([n, c, ph, pw], |i| {
        let x = i % pw;
        let y = (i / pw) % ph;
        let nc = i / (pw * ph);
        t.data()[(nc * h + refl(y, h)) * w + refl(x, w)]
    }))
}

fn crop_top_left<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    let (th, tw) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.numel() / (th * tw);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            out.extend_from_slice(&t.data()[(p * th + y) * tw..][..w]);
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(shape, out).expect("crop")
}

/// Whole-image super-resolution of one `[3, h, w]` input.
pub fn super_resolve<T: Scalar>(params: &ModelParameters<T>, net: &NetworkConfig, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = match *lr.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::shape("super_resolve", format!("expected [3, H, W], got {s:?}"))),
    };
    let batch = lr.clone().reshape([1, c, h, w])?;
    let padded = pad_reflect(&batch, net.window)?;
    let y = crate::net::predict(params, net, &padded)?;
    let y = crop_top_left(&y, h * net.scale, w * net.scale);
    y.reshape([3, h * net.scale, w * net.scale])
}

pub fn evaluate<T: Scalar>(samples: &[FlowSample<T>], mode: EvalMode<'_, T>, label: &str) -> Result<MetricReport> {
    let mut report = MetricReport::new(label);
    for s in samples {
        let pred = match mode {
            EvalMode::Model(p, net) => {
                if net.scale != s.scale {
                    return Err(Error::Config(format!("model scale x{} vs dataset x{}", net.scale, s.scale)));
                }
                super_resolve(p, net, &s.lr)?
            }
            EvalMode::Oracle => s.hr.clone(),
            EvalMode::Bicubic => bicubic_upsample(&s.lr, s.scale)?,
        };
        report.samples.push(SampleMetrics::compute(&s.id, &pred, &s.hr)?);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// trainer

pub struct Trainer<T: Scalar> {
    pub net: NetworkConfig,
    pub cfg: TrainConfig,
    pub params: ModelParameters<T>,
    pub ema: ModelParameters<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    /// `(step, loss)` of every completed step since construction.
    pub losses: Vec<(u64, f64)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        if cfg.lr_crop % net.window != 0 {
            return Err(Error::Config(format!("lr_crop {} not divisible by window {}", cfg.lr_crop, net.window)));
        }
        let params = init_parameters(&net, cfg.seed)?;
        Ok(Self { ema: params.clone(), adam: AdamState::new(&params), params, net, cfg, step: 0, losses: Vec::new() })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        Self {
            net: ck.net,
            cfg: ck.train,
            params: ck.params,
            ema: ck.ema,
            adam: ck.adam,
            step: ck.step,
            losses: Vec::new(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            net: self.net.clone(),
            train: self.cfg.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
            adam: self.adam.clone(),
            step: self.step,
        }
    }

    /// One optimization step; parameters are untouched when the loss is
    /// not finite.
    pub fn step(&mut self, samples: &[FlowSample<T>]) -> Result<f64> {
        let (lr, hr) = sample_batch(samples, &self.cfg, self.step)?;
        let (loss, grads) = loss_and_grads(&self.params, &self.net, &lr, &hr)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.lr)?;
        ema_update(&mut self.ema, &self.params, self.cfg.ema_decay)?;
        self.losses.push((self.step, loss));
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `cfg.iterations`, writing logs and checkpoints into the
    /// run directory when one is configured.
    pub fn run(&mut self, train: &[FlowSample<T>], test: &[FlowSample<T>]) -> Result<RunSummary> {
        let start = Instant::now();
        let dir = self.cfg.checkpoint_dir.clone();
        let mut log = match &dir {
            Some(d) => Some(RunLogs::open(d, self.step)?),
            None => None,
        };
        while self.step < self.cfg.iterations {
            let step = self.step;
            let loss = self.step(train)?;
            if let Some(l) = log.as_mut() {
                l.train(format!("{step} {loss:?} {:?}", self.cfg.lr))?;
            }
            let done = self.step;
            if self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0 && !test.is_empty() {
                let raw = evaluate(test, EvalMode::Model(&self.params, &self.net), "raw")?.mean();
                let ema = evaluate(test, EvalMode::Model(&self.ema, &self.net), "ema")?.mean();
                if let Some(l) = log.as_mut() {
                    l.eval(format!(
                        "{done} raw_psnr={:.4} raw_ssim={:.5} ema_psnr={:.4} ema_ssim={:.5}",
                        raw.psnr, raw.ssim, ema.psnr, ema.ssim
                    ))?;
                }
            }
            if let Some(d) = &dir {
                let periodic = self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0;
                if periodic || done == self.cfg.iterations {
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                    self.checkpoint().save(&d.join("checkpoint"))?;
                }
            }
        }
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        Ok(RunSummary { steps: self.step, seconds: start.elapsed().as_secs_f64(), losses: self.losses.clone() })
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub seconds: f64,
    pub losses: Vec<(u64, f64)>,
}

impl RunSummary {
    /// Mean loss over the step range `[from, to)` of this run.
    pub fn mean_loss(&self, from: u64, to: u64) -> f64 {
        let v: Vec<f64> = self.losses.iter().filter(|(s, _)| (from..to).contains(s)).map(|(_, l)| *l).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

struct RunLogs {
    train: fs::File,
    eval: fs::File,
    dir: PathBuf,
}

impl RunLogs {
    /// Opens both logs, keeping only records of steps before `resume_step`.
    fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let keep = |name: &str| -> Result<fs::File> {
            let path = dir.join(name);
            let old = fs::read_to_string(&path).unwrap_or_default();
            let kept: String = old
                .lines()
                .filter(|l| {
                    let s: u64 = l.split_whitespace().next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                    if name == "train.log" {
                        s < resume_step
                    } else {
                        s <= resume_step
                    }
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
            fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(Self { train: keep("train.log")?, eval: keep("eval.log")?, dir: dir.to_path_buf() })
    }

    fn train(&mut self, line: String) -> Result<()> {
        writeln!(self.train, "{line}").map_err(|e| Error::io(self.dir.join("train.log"), e))
    }

    fn eval(&mut self, line: String) -> Result<()> {
        writeln!(self.eval, "{line}").map_err(|e| Error::io(self.dir.join("eval.log"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.train.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.eval.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

/// Loads the splits, trains, and returns the trainer with its summary.
pub fn train_on_dataset(net: NetworkConfig, cfg: TrainConfig, root: &Path) -> Result<(Trainer<f32>, RunSummary)> {
    let train = load_split::<f32>(root, "train", net.scale)?;
    let test = if cfg.eval_every > 0 { load_split::<f32>(root, "test", net.scale)? } else { Vec::new() };
    let mut trainer = Trainer::new(net, cfg)?;
    let summary = trainer.run(&train, &test)?;
    Ok((trainer, summary))
}

// ---------------------------------------------------------------------------
// ablation

/// Which comparison tables to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTable {
    /// QSM and DFC toggled independently.
    Components,
    /// Local-branch variants.
    ConvVariants,
    /// FEU x FFB depth grid.
    Depth,
}

impl AblationTable {
    pub const ALL: [AblationTable; 3] = [AblationTable::Components, AblationTable::ConvVariants, AblationTable::Depth];

    fn title(self) -> &'static str {
        match self {
            AblationTable::Components => {
                "Components: quaternion spatial modeling (QSM) and dynamic flow convolution (DFC)"
            }
            AblationTable::ConvVariants => "Local convolution variants",
            AblationTable::Depth => {
                "Depth: FEU per FFB x FFB count (reduced desk grid {1,2} x {1,2}; full scale sweeps 4..7)"
            }
        }
    }

    fn rows(self, base: &NetworkConfig) -> Vec<(String, NetworkConfig)> {
        let with =
            |conv: ConvVariant, qsm: bool| NetworkConfig { conv_variant: conv, qsm_enabled: qsm, ..base.clone() };
        match self {
            AblationTable::Components => vec![
                ("Baseline".into(), with(ConvVariant::None, false)),
                ("Baseline+QSM".into(), with(ConvVariant::None, true)),
                ("Baseline+DFC".into(), with(ConvVariant::Dfc, false)),
                ("Ours (QSM+DFC)".into(), with(ConvVariant::Dfc, true)),
            ],
            AblationTable::ConvVariants => [
                ("Baseline", ConvVariant::None),
                ("NDC", ConvVariant::Ndc),
                ("LDFC", ConvVariant::Ldfc),
                ("RDFC", ConvVariant::Rdfc),
                ("ADFC", ConvVariant::Adfc),
                ("DFC", ConvVariant::Dfc),
            ]
            .into_iter()
            .map(|(l, v)| (l.to_string(), with(v, true)))
            .collect(),
            AblationTable::Depth => [(1, 1), (1, 2), (2, 1), (2, 2)]
                .into_iter()
                .map(|(feu, ffb)| {
                    (
                        format!("FEU={feu} FFB={ffb}"),
                        NetworkConfig { feu_per_ffb: feu, ffb_count: ffb, ..with(ConvVariant::Dfc, true) },
                    )
                })
                .collect(),
        }
    }
}

impl std::str::FromStr for AblationTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationTable::Components),
            "variants" | "conv" => Ok(AblationTable::ConvVariants),
            "depth" => Ok(AblationTable::Depth),
            _ => Err(Error::Config(format!("unknown ablation table {s:?} (components, variants, depth)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub net: NetworkConfig,
    pub params: usize,
    pub raw: MeanMetrics,
    pub ema: MeanMetrics,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub tables: Vec<(AblationTable, Vec<AblationRow>)>,
    pub iterations: u64,
    pub lr_crop: usize,
}

impl AblationReport {
    pub fn row(&self, table: AblationTable, label: &str) -> Option<&AblationRow> {
        self.tables.iter().find(|(t, _)| *t == table)?.1.iter().find(|r| r.label == label)
    }
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (table, rows) in &self.tables {
            writeln!(f, "{}", table.title())?;
            writeln!(
                f,
                "desk scale, {} iterations per row, LR crop {}, metrics of raw weights (EMA PSNR alongside)",
                self.iterations, self.lr_crop
            )?;
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>7} {:>7} {:>7} {:>9}",
                "model", "params", "PSNR", "SSIM", "RMSE", "MAE", "EMA-PSNR"
            )?;
            for r in rows {
                writeln!(
                    f,
                    "{:<16} {:>8} {:>8.3} {:>7.4} {:>7.3} {:>7.3} {:>9.3}",
                    r.label, r.params, r.raw.psnr, r.raw.ssim, r.raw.rmse_255, r.raw.mae_255, r.ema.psnr
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains and evaluates every row of the requested tables. Rows sharing an
/// identical network configuration are trained once. `variants`, when set,
/// drops rows whose local branch is not listed.
pub fn ablate(
    base: &NetworkConfig,
    cfg: &TrainConfig,
    train: &[FlowSample<f32>],
    test: &[FlowSample<f32>],
    tables: &[AblationTable],
    variants: Option<&[ConvVariant]>,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    let cfg = TrainConfig { checkpoint_dir: None, eval_every: 0, ..cfg.clone() };
    let mut cache: BTreeMap<String, (usize, MeanMetrics, MeanMetrics)> = BTreeMap::new();
    let mut out = Vec::new();
    for &table in tables {
        let mut rows = Vec::new();
        for (label, net) in table.rows(base) {
            if variants.is_some_and(|v| !v.contains(&net.conv_variant)) {
                continue;
            }
            let key = net.to_kv();
            if !cache.contains_key(&key) {
                progress(&format!("training {label} ({} iterations)", cfg.iterations));
                let mut t = Trainer::<f32>::new(net.clone(), cfg.clone())?;
                t.run(train, test)?;
                let raw = evaluate(test, EvalMode::Model(&t.params, &net), &label)?.mean();
                let ema = evaluate(test, EvalMode::Model(&t.ema, &net), &label)?.mean();
                cache.insert(key.clone(), (t.params.total(), raw, ema));
            }
            let (params, raw, ema) = cache[&key];
            rows.push(AblationRow { label, net, params, raw, ema });
        }
        out.push((table, rows));
    }
    Ok(AblationReport { tables: out, iterations: cfg.iterations, lr_crop: cfg.lr_crop })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_group() {
        let t = Tensor::<f64>::from_fn([1, 3, 3], |i| i as f64);
        assert_eq!(dihedral(&t, 0), t);
        for code in 0..8 {
            let once = dihedral(&t, code);
            let mut sorted: Vec<f64> = once.data().to_vec();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, t.data());
        }
        assert_eq!(dihedral(&t, 1).data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(dihedral(&dihedral(&t, 4), 4), t);
    }

    #[test]
    fn reflect_pad_values() {
        let t = Tensor::<f64>::from_fn([1, 1, 3, 3], |i| i as f64);
        let p = pad_reflect(&t, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 2.0, 1.0]);
        // the padded row mirrors row 1 about the last row
        assert_eq!(&p.data()[12..], &[3.0, 4.0, 5.0, 4.0]);
        assert!(pad_reflect(&Tensor::<f64>::zeros([1, 1, 2, 2]), 4).is_err());
    }

    #[test]
    fn config_text_rejects_unknown_keys() {
        let mut n = NetworkConfig::desk();
        let mut t = TrainConfig::default();
        apply_config_text("lr=0.001\n# c\nchannels=12\n", &mut n, &mut t).unwrap();
        assert_eq!((t.lr, n.channels), (0.001, 12));
        assert!(apply_config_text("colour=red", &mut n, &mut t).is_err());
    }

    #[test]
    fn ema_validation() {
        let cfg = TrainConfig { ema_decay: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
