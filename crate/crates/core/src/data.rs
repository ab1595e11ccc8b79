//! Synthetic turbulence-like velocity fields, LR/HR pair construction, the
//! on-disk dataset layout and PNG export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fld;
use crate::tensor::{Scalar, Tensor};

/// Kolmogorov inertial-range slope of the 2D power spectrum.
pub const KOLMOGOROV_EXPONENT: f64 = -5.0 / 3.0;

/// In-place 2D FFT of a row-major `h x w` complex grid.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point axis.
fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// One zero-mean Gaussian random field with power spectrum `|k|^exponent`.
///
/// White Gaussian noise is filtered in Fourier space by the real, even
/// amplitude `|k|^(exponent/2)`; the filter keeps the Hermitian symmetry of
/// the noise spectrum, so the result is real with uniformly random phases.
/// The mean (k = 0) mode is removed.
pub fn spectral_field(rng: &mut ChaCha8Rng, h: usize, w: usize, exponent: f64) -> Result<Vec<f64>> {
    if !h.is_power_of_two() || !w.is_power_of_two() || h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("field size {h}x{w} must be powers of two")));
    }
    let mut buf: Vec<Complex<f64>> = (0..h * w).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for y in 0..h {
        let ky = wavenumber(y, h);
        for x in 0..w {
            let kx = wavenumber(x, w);
            let k = (kx * kx + ky * ky).sqrt();
            let amp = if k == 0.0 { 0.0 } else { k.powf(exponent / 2.0) };
            buf[y * w + x] *= amp;
        }
    }
    fft2(&mut buf, h, w, true);
    let norm = (h * w) as f64;
    Ok(buf.iter().map(|c| c.re / norm).collect())
}

fn rescale_unit(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { ((*x - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// `[3, H, W]` field in `[0, 1]`: three independent velocity channels, each
/// affinely rescaled so its minimum is 0 and maximum 1.
pub fn gen_synthetic_field(seed: u64, h: usize, w: usize, exponent: f64) -> Result<Tensor<f64>> {
    gen_field(seed, h, w, exponent, false)
}

/// As [`gen_synthetic_field`]; `single_velocity` replicates one channel
/// into all three.
pub fn gen_field(seed: u64, h: usize, w: usize, exponent: f64, single_velocity: bool) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        if single_velocity && c > 0 {
            data.extend_from_within(0..h * w);
            continue;
        }
        let mut ch = spectral_field(&mut rng, h, w, exponent)?;
        rescale_unit(&mut ch);
        data.extend(ch);
    }
    Tensor::new([3, h, w], data)
}

// ---------------------------------------------------------------------------
// resampling

fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape("resample", format!("need at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w).max(1), h, w))
}

fn with_plane<T: Scalar>(t: &Tensor<T>, h: usize, w: usize, data: Vec<T>) -> Result<Tensor<T>> {
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(shape, data)
}

/// `s x s` box-average pooling over the trailing two dimensions.
pub fn downsample<T: Scalar>(hr: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(hr)?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape("downsample", format!("{h}x{w} not divisible by {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    let src = hr.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..s {
                    let row = &plane[(oy * s + dy) * w + ox * s..][..s];
                    acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                out.push(T::of(acc * inv));
            }
        }
    }
    with_plane(hr, oh, ow, out)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: four source indices (edge-clamped) and weights.
fn cubic_taps(out_n: usize, in_n: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let mut idx = [0usize; 4];
            let mut wt = [0.0; 4];
            for k in 0..4 {
                let pos = base + k as f64 - 1.0;
                idx[k] = pos.clamp(0.0, (in_n - 1) as f64) as usize;
                wt[k] = cubic_weight(src - pos);
            }
            (idx, wt)
        })
        .collect()
}

/// Separable bicubic resize of the trailing two dimensions (half-pixel
/// centers, replicated edges).
pub fn bicubic_resize<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(t)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bicubic_resize", "empty extent"));
    }
    let tx = cubic_taps(out_w, w);
    let ty = cubic_taps(out_h, h);
    let src = t.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, (idx, wt)) in tx.iter().enumerate() {
                rows[y * out_w + ox] = (0..4).map(|k| wt[k] * plane[y * w + idx[k]].as_f64()).sum();
            }
        }
        for (idx, wt) in &ty {
            for ox in 0..out_w {
                out.push(T::of((0..4).map(|k| wt[k] * rows[idx[k] * out_w + ox]).sum()));
            }
        }
    }
    with_plane(t, out_h, out_w, out)
}

/// Bicubic upscaling by an integer factor.
pub fn bicubic_upsample<T: Scalar>(lr: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (_, h, w) = plane_dims(lr)?;
    bicubic_resize(lr, h * s, w * s)
}

/// How low-resolution inputs are produced from high-resolution fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Degradation {
    #[default]
    Box,
    Bicubic,
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Degradation::Box),
            "bicubic" => Ok(Degradation::Bicubic),
            _ => Err(Error::Config(format!("unknown degradation {s:?}"))),
        }
    }
}

impl std::fmt::Display for Degradation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Degradation::Box => "box",
            Degradation::Bicubic => "bicubic",
        })
    }
}

pub fn degrade<T: Scalar>(hr: &Tensor<T>, s: usize, how: Degradation) -> Result<Tensor<T>> {
    match how {
        Degradation::Box => downsample(hr, s),
        Degradation::Bicubic => {
            let (_, h, w) = plane_dims(hr)?;
            if s == 0 || h % s != 0 || w % s != 0 {
                return Err(Error::shape("downsample", format!("{h}x{w} not divisible by {s}")));
            }
            bicubic_resize(hr, h / s, w / s)
        }
    }
}

// ---------------------------------------------------------------------------
// dataset on disk

/// A low/high resolution pair.
#[derive(Clone, Debug)]
pub struct FlowSample<T: Scalar> {
    pub id: String,
    pub seed: u64,
    /// `[3, H, W]`
    pub hr: Tensor<T>,
    /// `[3, H/s, W/s]`
    pub lr: Tensor<T>,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub scales: Vec<usize>,
    pub exponent: f64,
    pub single_velocity: bool,
    pub degradation: Degradation,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 64,
            test: 16,
            height: 128,
            width: 128,
            scales: vec![2],
            exponent: KOLMOGOROV_EXPONENT,
            single_velocity: false,
            degradation: Degradation::Box,
        }
    }
}

pub const SPLITS: [&str; 2] = ["train", "test"];

/// Seed of sample `index` of `split`, distinct across splits.
pub fn sample_seed(base: u64, split: &str, index: usize) -> u64 {
    let tag: u64 = if split == "test" { 0x7e57 } else { 0x7a1 };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 40) ^ index as u64
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes both splits under `root`. Each split directory holds
/// `<id>_hr.fld`, one `<id>_lr<s>.fld` per scale and `manifest.txt`.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<()> {
    for &s in &spec.scales {
        if s == 0 || spec.height % s != 0 || spec.width % s != 0 {
            return Err(Error::Dataset(format!("scale {s} does not divide {}x{}", spec.height, spec.width)));
        }
    }
    for (split, count) in SPLITS.iter().zip([spec.train, spec.test]) {
        let dir = split_dir(root, split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(
            manifest,
            "# count={count} exponent={:?} velocity={} degradation={} base_seed={}",
            spec.exponent,
            if spec.single_velocity { "single" } else { "multi" },
            spec.degradation,
            spec.seed
        );
        let _ = writeln!(manifest, "# id seed H W s");
        for i in 0..count {
            let id = format!("{split}{i:04}");
            let seed = sample_seed(spec.seed, split, i);
            let hr = gen_field(seed, spec.height, spec.width, spec.exponent, spec.single_velocity)?.cast::<f32>();
            fld::write(&hr, dir.join(format!("{id}_hr.fld")))?;
            for &s in &spec.scales {
                let lr = degrade(&hr, s, spec.degradation)?;
                fld::write(&lr, dir.join(format!("{id}_lr{s}.fld")))?;
                let _ = writeln!(manifest, "{id} {seed} {} {} {s}", spec.height, spec.width);
            }
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub scale: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Dataset(format!("{}:{}: malformed record {line:?}", path.display(), n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            height: f[2].parse().map_err(|_| bad())?,
            width: f[3].parse().map_err(|_| bad())?,
            scale: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Loads every sample of `split` at `scale`.
pub fn load_split<T: Scalar>(root: &Path, split: &str, scale: usize) -> Result<Vec<FlowSample<T>>> {
    let dir = split_dir(root, split);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("split directory {} not found", dir.display())));
    }
    let mut out = Vec::new();
    for e in read_manifest(&dir)?.into_iter().filter(|e| e.scale == scale) {
        let hr: Tensor<T> = fld::read(dir.join(format!("{}_hr.fld", e.id)))?;
        let lr: Tensor<T> = fld::read(dir.join(format!("{}_lr{scale}.fld", e.id)))?;
        let (hs, ls) = (hr.shape().to_vec(), lr.shape().to_vec());
        if hs != [3, e.height, e.width] || ls != [3, e.height / scale, e.width / scale] {
            return Err(Error::Dataset(format!("{}: shapes {hs:?}/{ls:?} disagree with manifest", e.id)));
        }
        out.push(FlowSample { id: e.id, seed: e.seed, hr, lr, scale });
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no x{scale} samples in {}", dir.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PNG

/// Interleaved 8-bit RGB bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Result<(u32, u32, Vec<u8>)> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::Image(format!("expected [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    if let Some(bad) = d.iter().map(|v| v.as_f64()).find(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Image(format!("value {bad} outside [0, 1]")));
    }
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push((d[ch * plane + p].as_f64() * 255.0).round() as u8);
        }
    }
    Ok((w as u32, h as u32, bytes))
}

pub fn png_export<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (w, h, bytes) = to_rgb8(t)?;
    let img = image::RgbImage::from_raw(w, h, bytes).ok_or_else(|| Error::Image("buffer size".into()))?;
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}
