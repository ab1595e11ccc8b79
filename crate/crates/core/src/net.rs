//! The super-resolution network: shallow convolution, a stack of flow feature
//! extraction blocks, a quaternion-modelled deep residual and a pixel-shuffle
//! reconstruction head.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::autodiff::{AttentionWeights, Tape, Var};
use crate::error::{Error, Result};
use crate::flow_conv::{flow_conv, ConvVariant, DfcBranchWeights, DfcWeights, FlowConvWeights, NdcWeights};
use crate::quaternion::{init_quaternion_kernel, qsm, QuaternionConvWeights};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub channels: usize,
    pub feu_per_ffb: usize,
    pub ffb_count: usize,
    pub window: usize,
    pub heads: usize,
    pub scale: usize,
    pub conv_variant: ConvVariant,
    pub qsm_enabled: bool,
    /// Keep the real output part of QSM and project four parts back to `C`.
    pub qsm_keep_real: bool,
    pub qsm_bias: bool,
    /// Split GELU on the QSM output.
    pub qsm_activation: bool,
    pub dfc_k: usize,
    pub max_offset: f64,
    pub rel_pos_bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl NetworkConfig {
    /// CPU-sized profile used by tests and the default CLI run.
    pub fn desk() -> Self {
        Self {
            channels: 24,
            feu_per_ffb: 2,
            ffb_count: 2,
            window: 4,
            heads: 3,
            scale: 2,
            conv_variant: ConvVariant::Dfc,
            qsm_enabled: true,
            qsm_keep_real: false,
            qsm_bias: true,
            qsm_activation: false,
            dfc_k: 5,
            max_offset: 2.0,
            rel_pos_bias: true,
        }
    }

    /// Full-size profile (6 units x 6 blocks, 48 channels, 9-tap flow kernels).
    pub fn full() -> Self {
        Self { channels: 48, feu_per_ffb: 6, ffb_count: 6, window: 8, heads: 6, dfc_k: 9, ..Self::desk() }
    }

    /// Smallest configuration worth running, for gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self { channels: 6, feu_per_ffb: 1, ffb_count: 1, window: 2, heads: 2, dfc_k: 3, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.channels % 3 != 0 {
            return bad(format!("channels {} must be a positive multiple of 3", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if !(self.scale >= 2 && self.scale.is_power_of_two()) {
            return bad(format!("scale {} must be a power of two >= 2", self.scale));
        }
        if self.feu_per_ffb == 0 || self.ffb_count == 0 {
            return bad("feu_per_ffb and ffb_count must be >= 1".into());
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.dfc_k == 0 || self.dfc_k % 2 == 0 {
            return bad(format!("dfc_k {} must be odd", self.dfc_k));
        }
        if !(self.max_offset > 0.0 && self.max_offset.is_finite()) {
            return bad(format!("max_offset {} must be positive", self.max_offset));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling. Returns `false` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_num(key, v)?,
            "feu_per_ffb" => self.feu_per_ffb = parse_num(key, v)?,
            "ffb_count" => self.ffb_count = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "scale" => self.scale = parse_num(key, v)?,
            "conv_variant" | "conv" => self.conv_variant = v.parse()?,
            "qsm_enabled" | "qsm" => self.qsm_enabled = parse_bool(key, v)?,
            "qsm_keep_real" => self.qsm_keep_real = parse_bool(key, v)?,
            "qsm_bias" => self.qsm_bias = parse_bool(key, v)?,
            "qsm_activation" => self.qsm_activation = parse_bool(key, v)?,
            "dfc_k" => self.dfc_k = parse_num(key, v)?,
            "max_offset" => self.max_offset = parse_num(key, v)?,
            "rel_pos_bias" => self.rel_pos_bias = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("channels", self.channels.to_string()),
            ("feu_per_ffb", self.feu_per_ffb.to_string()),
            ("ffb_count", self.ffb_count.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("scale", self.scale.to_string()),
            ("conv_variant", self.conv_variant.to_string()),
            ("qsm_enabled", self.qsm_enabled.to_string()),
            ("qsm_keep_real", self.qsm_keep_real.to_string()),
            ("qsm_bias", self.qsm_bias.to_string()),
            ("qsm_activation", self.qsm_activation.to_string()),
            ("dfc_k", self.dfc_k.to_string()),
            ("max_offset", format!("{:?}", self.max_offset)),
            ("rel_pos_bias", self.rel_pos_bias.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Window shift of unit `u` within its block.
    pub fn shift_for(&self, unit: usize, h: usize, w: usize) -> usize {
        if unit % 2 == 1 && h > self.window && w > self.window {
            self.window / 2
        } else {
            0
        }
    }
}

/// Iterates `key=value` lines, skipping blanks and `#` comments.
pub fn kv_lines(text: &str) -> impl Iterator<Item = Result<(&str, &str)>> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| {
        l.split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("expected key=value, got {l:?}")))
    })
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelParameters<T> {
    fn default() -> Self {
        Self { tensors: IndexMap::new() }
    }
}

impl<T: Scalar> ModelParameters<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name} registered twice")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// `(name, shape, numel)` per parameter.
    pub fn census(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec(), v.numel())).collect()
    }

    /// Aligned text table of the census with a total line.
    pub fn census_table(&self) -> String {
        let width = self.tensors.keys().map(String::len).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>18}  {:>9}", "name", "shape", "count");
        for (name, shape, n) in self.census() {
            let _ = writeln!(s, "{name:<width$}  {:>18}  {n:>9}", format!("{shape:?}"));
        }
        let _ = writeln!(s, "{:<width$}  {:>18}  {:>9}", "total", "", self.total());
        s
    }

    /// Same names and shapes as `other`, in the same order.
    pub fn aligned_with<U: Scalar>(&self, other: &ModelParameters<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every tensor on `tape`, as trainable parameters or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParameters {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let t = v.clone();
                (k.clone(), if trainable { tape.param(t) } else { tape.constant(t) })
            })
            .collect();
        BoundParameters { vars }
    }
}

impl<T: Scalar> ModelParameters<T> {
    /// Pairs already-recorded handles with the parameter names, in
    /// registration order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParameters> {
        if vars.len() != self.len() {
            return Err(Error::Alignment(format!("{} handles for {} parameters", vars.len(), self.len())));
        }
        Ok(BoundParameters { vars: self.tensors.keys().cloned().zip(vars.iter().copied()).collect() })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.values()
    }
}

/// Tape handles of a bound parameter set.
#[derive(Clone, Debug)]
pub struct BoundParameters {
    vars: IndexMap<String, Var>,
}

impl BoundParameters {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

// ---------------------------------------------------------------------------
// initialization

struct Init<'a, T: Scalar> {
    rng: ChaCha8Rng,
    p: &'a mut ModelParameters<T>,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        self.p.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<()> {
        self.p.insert(name, Tensor::full(shape.to_vec(), T::of(v)))
    }

    /// Weight `[cout, cin, kh, kw]` uniform in `1/sqrt(fan_in)`, times `gain`.
    fn conv(&mut self, name: &str, shape: [usize; 4], bias: bool, gain: f64) -> Result<()> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        self.uniform(format!("{name}.w"), &shape, gain / fan_in.sqrt())?;
        if bias {
            self.fill(format!("{name}.b"), &[shape[0]], 0.0)?;
        }
        Ok(())
    }

    fn qsm(&mut self, name: &str, cfg: &NetworkConfig) -> Result<()> {
        let cq = cfg.channels / 3;
        let parts = init_quaternion_kernel::<T>(&mut self.rng, cq, cq, 3);
        for (part, t) in ["r", "x", "y", "z"].iter().zip(parts) {
            self.p.insert(format!("{name}.{part}"), t)?;
        }
        if cfg.qsm_bias {
            let comps: &[&str] = if cfg.qsm_keep_real { &["br", "bi", "bj", "bk"] } else { &["bi", "bj", "bk"] };
            for c in comps {
                self.fill(format!("{name}.{c}"), &[cq], 0.0)?;
            }
        }
        if cfg.qsm_keep_real {
            self.conv(&format!("{name}.proj"), [cfg.channels, 4 * cq, 1, 1], false, 1.0)?;
        }
        Ok(())
    }

    fn dfc_branch(&mut self, name: &str, c: usize, k: usize) -> Result<()> {
        self.conv(&format!("{name}.offset"), [2 * k, c, 3, 3], true, 0.1)?;
        self.conv(&format!("{name}.h"), [c, c, 1, k], false, 1.0)?;
        self.conv(&format!("{name}.v"), [c, c, k, 1], false, 1.0)
    }
}

/// Freshly initialized parameters for `cfg`, deterministic in `seed`.
pub fn init_parameters<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<ModelParameters<T>> {
    cfg.validate()?;
    let mut params = ModelParameters::new();
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), p: &mut params };
    let c = cfg.channels;
    let k = cfg.dfc_k;
    init.conv("shallow", [c, 3, 3, 3], true, 1.0)?;
    for b in 0..cfg.ffb_count {
        for u in 0..cfg.feu_per_ffb {
            let unit = format!("ffb{b}.feu{u}");
            init.fill(format!("{unit}.ln.gamma"), &[c], 1.0)?;
            init.fill(format!("{unit}.ln.beta"), &[c], 0.0)?;
            let bound = 1.0 / (c as f64).sqrt();
            init.uniform(format!("{unit}.attn.qkv_w"), &[c, 3 * c], bound)?;
            init.fill(format!("{unit}.attn.qkv_b"), &[3 * c], 0.0)?;
            init.uniform(format!("{unit}.attn.proj_w"), &[c, c], bound)?;
            init.fill(format!("{unit}.attn.proj_b"), &[c], 0.0)?;
            if cfg.rel_pos_bias {
                let span = 2 * cfg.window - 1;
                let normal = Normal::new(0.0, 0.02).expect("valid normal");
                let data = (0..span * span * cfg.heads).map(|_| T::of(init.rng.sample(normal))).collect();
                init.p.insert(format!("{unit}.attn.rel_bias"), Tensor::new([span * span, cfg.heads], data)?)?;
            }
            match cfg.conv_variant {
                ConvVariant::None => {}
                ConvVariant::Ndc => {
                    init.conv(&format!("{unit}.ndc.offset"), [18, c, 3, 3], true, 0.1)?;
                    init.conv(&format!("{unit}.ndc"), [c, c, 3, 3], false, 1.0)?;
                }
                ConvVariant::Ldfc | ConvVariant::Rdfc | ConvVariant::Adfc => {
                    init.dfc_branch(&format!("{unit}.dfc"), c, k)?;
                }
                ConvVariant::Dfc => {
                    init.dfc_branch(&format!("{unit}.dfc.left"), c, k)?;
                    init.dfc_branch(&format!("{unit}.dfc.right"), c, k)?;
                    init.conv(&format!("{unit}.dfc.fuse"), [c, 2 * c, 1, 1], false, 1.0)?;
                }
            }
        }
        if cfg.qsm_enabled {
            init.qsm(&format!("ffb{b}.qsm"), cfg)?;
        }
    }
    if cfg.qsm_enabled {
        init.qsm("deep.qsm", cfg)?;
        init.qsm("recon.qsm", cfg)?;
    }
    for s in 0..cfg.scale.trailing_zeros() {
        init.conv(&format!("recon.up{s}"), [4 * c, c, 3, 3], true, 1.0)?;
    }
    init.conv("recon.final", [3, c, 3, 3], true, 1.0)?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// forward

fn branch_weights(p: &BoundParameters, name: &str) -> Result<DfcBranchWeights> {
    Ok(DfcBranchWeights {
        offset_w: p.get(&format!("{name}.offset.w"))?,
        offset_b: p.opt(&format!("{name}.offset.b")),
        horizontal_w: p.get(&format!("{name}.h.w"))?,
        vertical_w: p.get(&format!("{name}.v.w"))?,
    })
}

fn flow_weights(p: &BoundParameters, unit: &str, variant: ConvVariant) -> Result<FlowConvWeights> {
    Ok(match variant {
        ConvVariant::None => FlowConvWeights::None,
        ConvVariant::Ndc => FlowConvWeights::Ndc(NdcWeights {
            offset_w: p.get(&format!("{unit}.ndc.offset.w"))?,
            offset_b: p.opt(&format!("{unit}.ndc.offset.b")),
            w: p.get(&format!("{unit}.ndc.w"))?,
        }),
        ConvVariant::Dfc => FlowConvWeights::Dual(DfcWeights {
            left: branch_weights(p, &format!("{unit}.dfc.left"))?,
            right: branch_weights(p, &format!("{unit}.dfc.right"))?,
            fuse_w: p.get(&format!("{unit}.dfc.fuse.w"))?,
        }),
        single => FlowConvWeights::Single(
            single.single_pattern().expect("single-branch variant"),
            branch_weights(p, &format!("{unit}.dfc"))?,
        ),
    })
}

fn qsm_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BoundParameters,
    name: &str,
    cfg: &NetworkConfig,
) -> Result<Var> {
    let mut w = QuaternionConvWeights::new(
        p.get(&format!("{name}.r"))?,
        p.get(&format!("{name}.x"))?,
        p.get(&format!("{name}.y"))?,
        p.get(&format!("{name}.z"))?,
    );
    for (slot, comp) in w.bias.iter_mut().zip(["br", "bi", "bj", "bk"]) {
        *slot = p.opt(&format!("{name}.{comp}"));
    }
    let proj = if cfg.qsm_keep_real { Some(p.get(&format!("{name}.proj.w"))?) } else { None };
    let y = qsm(tape, x, &w, proj)?;
    Ok(if cfg.qsm_activation { tape.gelu(y) } else { y })
}

/// One feature extraction unit: `LN -> attention + flow conv + residual`.
pub fn feu_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BoundParameters,
    unit: &str,
    shift: usize,
    cfg: &NetworkConfig,
) -> Result<Var> {
    let xn = tape.layernorm(x, p.get(&format!("{unit}.ln.gamma"))?, p.get(&format!("{unit}.ln.beta"))?, LN_EPS)?;
    let attn = AttentionWeights {
        qkv_w: p.get(&format!("{unit}.attn.qkv_w"))?,
        qkv_b: p.opt(&format!("{unit}.attn.qkv_b")),
        proj_w: p.get(&format!("{unit}.attn.proj_w"))?,
        proj_b: p.opt(&format!("{unit}.attn.proj_b")),
        rel_bias: p.opt(&format!("{unit}.attn.rel_bias")),
    };
    let a = tape.window_attention(xn, &attn, cfg.window, shift, cfg.heads)?;
    let mut out = tape.add(a, x)?;
    let fw = flow_weights(p, unit, cfg.conv_variant)?;
    if let Some(local) = flow_conv(tape, xn, &fw, cfg.max_offset)? {
        out = tape.add(out, local)?;
    }
    Ok(out)
}

/// One flow feature extraction block: stacked units, then QSM.
pub fn ffb_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    p: &BoundParameters,
    block: usize,
    cfg: &NetworkConfig,
) -> Result<Var> {
    let [_, _, h, w] = tape.dims4("ffb_forward", z)?;
    let mut z = z;
    for u in 0..cfg.feu_per_ffb {
        z = feu_forward(tape, z, p, &format!("ffb{block}.feu{u}"), cfg.shift_for(u, h, w), cfg)?;
    }
    if cfg.qsm_enabled {
        z = qsm_layer(tape, z, p, &format!("ffb{block}.qsm"), cfg)?;
    }
    Ok(z)
}

/// Block stack plus deep residual: `QSM(FFB(...FFB(f0))) + f0`.
pub fn trunk_forward<T: Scalar>(tape: &mut Tape<T>, f0: Var, p: &BoundParameters, cfg: &NetworkConfig) -> Result<Var> {
    let mut z = f0;
    for b in 0..cfg.ffb_count {
        z = ffb_forward(tape, z, p, b, cfg)?;
    }
    let deep = if cfg.qsm_enabled { qsm_layer(tape, z, p, "deep.qsm", cfg)? } else { z };
    tape.add(deep, f0)
}

/// `[N, 3, H, W]` low-resolution batch to `[N, 3, sH, sW]`.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, lr: Var, p: &BoundParameters, cfg: &NetworkConfig) -> Result<Var> {
    let [_, c, h, w] = tape.dims4("forward", lr)?;
    if c != 3 {
        return Err(Error::shape("forward", format!("expected 3 input channels, got {c}")));
    }
    if h % cfg.window != 0 || w % cfg.window != 0 {
        return Err(Error::shape("forward", format!("input {h}x{w} not divisible by window {}", cfg.window)));
    }
    cfg.validate()?;
    let f0 = tape.conv2d(lr, p.get("shallow.w")?, p.opt("shallow.b"), 1, 1)?;
    let mut r = trunk_forward(tape, f0, p, cfg)?;
    if cfg.qsm_enabled {
        r = qsm_layer(tape, r, p, "recon.qsm", cfg)?;
    }
    for s in 0..cfg.scale.trailing_zeros() {
        let up = tape.conv2d(r, p.get(&format!("recon.up{s}.w"))?, p.opt(&format!("recon.up{s}.b")), 1, 1)?;
        let shuffled = tape.pixel_shuffle(up, 2)?;
        r = tape.gelu(shuffled);
    }
    tape.conv2d(r, p.get("recon.final.w")?, p.opt("recon.final.b"), 1, 1)
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Forward pass without gradient tracking.
pub fn predict<T: Scalar>(params: &ModelParameters<T>, cfg: &NetworkConfig, lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(lr.clone());
    let y = forward(&mut tape, x, &bound, cfg)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = NetworkConfig::full();
        cfg.conv_variant = ConvVariant::Adfc;
        cfg.max_offset = 1.25;
        let text = cfg.to_kv();
        let mut back = NetworkConfig::desk();
        for kv in kv_lines(&text) {
            let (k, v) = kv.unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetworkConfig::desk();
        c.channels = 25;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::desk();
        c.scale = 3;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut p = ModelParameters::<f64>::new();
        p.insert("a", Tensor::zeros([1])).unwrap();
        assert!(p.insert("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn output_shape_per_scale() {
        for s in [2, 4, 8] {
            let cfg = NetworkConfig { scale: s, ..NetworkConfig::micro() };
            let params = init_parameters::<f64>(&cfg, 1).unwrap();
            let y = predict(&params, &cfg, &Tensor::full([2, 3, 4, 4], 0.5)).unwrap();
            assert_eq!(y.shape(), &[2, 3, 4 * s, 4 * s]);
        }
    }

    #[test]
    fn l1_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full([2, 3], 1.0));
        let b = tape.constant(Tensor::full([2, 3], 0.5));
        let l = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.5);
        let l0 = l1_loss(&mut tape, b, b).unwrap();
        assert_eq!(tape.value(l0).data()[0], 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::micro();
        let a = init_parameters::<f32>(&cfg, 5).unwrap();
        let b = init_parameters::<f32>(&cfg, 5).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), init_parameters::<f32>(&cfg, 6).unwrap().checksum());
    }
}
