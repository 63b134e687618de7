//! Degradation, patch sampling, sliding-window restoration and PSNR.
//!
//! Pixels are reals on the 8-bit scale `[0, 255]`; noise levels are in the
//! same units. Degraded images are never clipped, restored images are
//! clipped only for output and scoring.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::CirculantOp;
use crate::pdnet::{predict, NetworkParams};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak value of 8-bit grayscale.
pub const PEAK_8BIT: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array2<f64>,
    pub peak: f64,
}

impl ImageTensor {
    pub fn new(pixels: Array2<f64>) -> Self {
        Self {
            pixels,
            peak: PEAK_8BIT,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn flat(&self) -> Array1<f64> {
        Array1::from_iter(self.pixels.iter().copied())
    }

    pub fn from_flat(flat: Array1<f64>, shape: (usize, usize)) -> Result<Self> {
        let pixels = flat
            .into_shape_with_order(shape)
            .map_err(|e| Error::dim("image reshape", format!("{shape:?}"), e.to_string()))?;
        Ok(Self::new(pixels))
    }

    /// Copy clamped to `[0, peak]`.
    pub fn clipped(&self) -> Self {
        let peak = self.peak;
        Self {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, peak)),
            peak,
        }
    }

    /// Reads an 8-bit grayscale image (PGM or PNG; colour is converted to luma).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let pixels = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            img.get_pixel(c as u32, r as u32)[0] as f64
        });
        Ok(Self::new(pixels))
    }

    /// 8-bit buffer, rounded and clamped.
    pub fn to_u8(&self) -> Vec<u8> {
        let scale = 255.0 / self.peak;
        self.pixels
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Writes a binary PGM (P5, maxval 255).
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.dim();
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(self.to_u8());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Writes PGM or PNG according to the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => {
                let (h, w) = self.dim();
                let buf = image::GrayImage::from_raw(w as u32, h as u32, self.to_u8())
                    .expect("buffer length matches dimensions");
                buf.save(path).map_err(|source| Error::Image {
                    path: path.to_path_buf(),
                    source,
                })
            }
            _ => self.save_pgm(path),
        }
    }
}

/// Blur component of a degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blur {
    /// `p x p` box filter.
    Uniform(usize),
    Custom(Array2<f64>),
}

impl Blur {
    pub fn kernel(&self) -> Array2<f64> {
        match self {
            Blur::Uniform(p) => Array2::from_elem((*p, *p), 1.0 / (p * p) as f64),
            Blur::Custom(k) => k.clone(),
        }
    }

    pub fn operator(&self, shape: (usize, usize)) -> Result<CirculantOp> {
        CirculantOp::new(self.kernel(), shape)
    }

    pub fn label(&self) -> String {
        match self {
            Blur::Uniform(p) => format!("{p}x{p}"),
            Blur::Custom(k) => format!("custom{}x{}", k.nrows(), k.ncols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur: Blur,
    /// Noise standard deviation in pixel units.
    pub alpha: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(blur: Blur, alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::param("alpha", format!("must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { blur, alpha, seed })
    }

    /// `"3x3:50"` style label.
    pub fn label(&self) -> String {
        format!("{}:{}", self.blur.label(), self.alpha)
    }
}

fn add_noise(values: &mut Array2<f64>, alpha: f64, rng: &mut ChaCha8Rng) {
    if alpha == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, alpha).expect("alpha validated");
    for v in values.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// `A x + eps`, `eps ~ N(0, alpha^2 I)` seeded by `spec.seed`. `op` must be
/// built on the image grid.
pub fn degrade(image: &ImageTensor, spec: &DegradationSpec, op: &CirculantOp) -> Result<ImageTensor> {
    let shape = image.dim();
    if op.shape() != shape {
        return Err(Error::dim(
            "degradation operator",
            format!("{shape:?}"),
            format!("{:?}", op.shape()),
        ));
    }
    let blurred = op.apply(image.flat().view())?;
    let mut pixels = blurred
        .into_shape_with_order(shape)
        .expect("operator preserves the grid");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    add_noise(&mut pixels, spec.alpha, &mut rng);
    Ok(ImageTensor {
        pixels,
        peak: image.peak,
    })
}

/// Convenience wrapper building the blur operator on the image grid.
pub fn degrade_image(image: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    let op = spec.blur.operator(image.dim())?;
    degrade(image, spec, &op)
}

/// Aligned clean / degraded patches, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPairSet {
    pub clean: Vec<Array1<f64>>,
    pub degraded: Vec<Array1<f64>>,
    pub patch_side: usize,
    pub source: String,
}

impl PatchPairSet {
    pub fn new(patch_side: usize, source: impl Into<String>) -> Self {
        Self {
            clean: Vec::new(),
            degraded: Vec::new(),
            patch_side,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn push(&mut self, clean: Array1<f64>, degraded: Array1<f64>) -> Result<()> {
        let n = self.patch_side * self.patch_side;
        if clean.len() != n || degraded.len() != n {
            return Err(Error::dim(
                "patch pair",
                n,
                format!("{}/{}", clean.len(), degraded.len()),
            ));
        }
        self.clean.push(clean);
        self.degraded.push(degraded);
        Ok(())
    }

    pub fn extend(&mut self, other: PatchPairSet) -> Result<()> {
        if other.patch_side != self.patch_side {
            return Err(Error::dim("patch side", self.patch_side, other.patch_side));
        }
        self.clean.extend(other.clean);
        self.degraded.extend(other.degraded);
        Ok(())
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> PatchPairSet {
        PatchPairSet {
            clean: indices.iter().map(|&i| self.clean[i].clone()).collect(),
            degraded: indices.iter().map(|&i| self.degraded[i].clone()).collect(),
            patch_side: self.patch_side,
            source: self.source.clone(),
        }
    }
}

fn crop(pixels: &Array2<f64>, r: usize, c: usize, side: usize) -> Array1<f64> {
    Array1::from_iter(pixels.slice(s![r..r + side, c..c + side]).iter().copied())
}

/// Uniformly random top-left corners for `count` patches of `side` inside a
/// `shape` image.
pub fn random_corners(shape: (usize, usize), side: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let (h, w) = shape;
    if side == 0 || side > h || side > w {
        return Err(Error::dim("patch side", format!("1..={}", h.min(w)), side));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.random_range(0..=h - side), rng.random_range(0..=w - side)))
        .collect())
}

/// Crops aligned patches at random locations of a clean image and its
/// (fully) degraded counterpart.
pub fn extract_patches(
    clean: &ImageTensor,
    degraded: &ImageTensor,
    count: usize,
    patch_side: usize,
    seed: u64,
) -> Result<PatchPairSet> {
    if clean.dim() != degraded.dim() {
        return Err(Error::dim(
            "patch sources",
            format!("{:?}", clean.dim()),
            format!("{:?}", degraded.dim()),
        ));
    }
    let corners = random_corners(clean.dim(), patch_side, count, seed)?;
    let mut set = PatchPairSet::new(patch_side, "crop");
    for (r, c) in corners {
        set.push(
            crop(&clean.pixels, r, c, patch_side),
            crop(&degraded.pixels, r, c, patch_side),
        )?;
    }
    Ok(set)
}

/// Crops clean patches and degrades each one on its own periodic patch grid
/// with `patch_op`, matching the network's internal forward model exactly.
pub fn extract_patches_per_patch(
    clean: &ImageTensor,
    spec: &DegradationSpec,
    patch_op: &CirculantOp,
    count: usize,
    seed: u64,
) -> Result<PatchPairSet> {
    let (side, side2) = patch_op.shape();
    if side != side2 {
        return Err(Error::dim("patch operator", "square grid", format!("{side}x{side2}")));
    }
    let corners = random_corners(clean.dim(), side, count, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut set = PatchPairSet::new(side, "per-patch");
    for (r, c) in corners {
        let x = crop(&clean.pixels, r, c, side);
        let mut z = patch_op
            .apply(x.view())?
            .into_shape_with_order((side, side))
            .expect("patch grid");
        add_noise(&mut z, spec.alpha, &mut rng);
        set.push(x, Array1::from_iter(z.iter().copied()))?;
    }
    Ok(set)
}

/// How patch pairs are produced from a clean image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchSource {
    /// Degrade the full image, then crop.
    #[default]
    Crop,
    /// Crop, then degrade each patch periodically.
    PerPatch,
}

/// Sliding-window stitching of patch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stitching {
    /// Non-overlapping tiles (`stride = patch side`).
    Independent,
    /// Overlapping windows averaged per pixel.
    Averaged,
}

impl std::str::FromStr for Stitching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Stitching::Independent),
            "averaged" => Ok(Stitching::Averaged),
            other => Err(Error::param(
                "mode",
                format!("expected independent|averaged, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for Stitching {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stitching::Independent => "independent",
            Stitching::Averaged => "averaged",
        })
    }
}

/// Window origins along one axis: `0, stride, 2 stride, ...` and a final
/// window flush with the far edge when the grid does not tile exactly.
pub fn window_origins(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - side).step_by(stride).collect();
    if *out.last().expect("len >= side") != len - side {
        out.push(len - side);
    }
    out
}

/// Number of windows covering each pixel.
pub fn coverage_counts(shape: (usize, usize), side: usize, stride: usize) -> Array2<u32> {
    let mut counts = Array2::zeros(shape);
    for &r in &window_origins(shape.0, side, stride) {
        for &c in &window_origins(shape.1, side, stride) {
            counts.slice_mut(s![r..r + side, c..c + side]).mapv_inplace(|v| v + 1);
        }
    }
    counts
}

/// Slides the network over `degraded`. In independent mode `stride` is
/// ignored and tiles are placed every `patch_side` pixels. The result is not
/// clipped.
pub fn restore(net: &NetworkParams, degraded: &ImageTensor, mode: Stitching, stride: usize) -> Result<ImageTensor> {
    let side = net.patch_side();
    let (h, w) = degraded.dim();
    if h < side || w < side {
        return Err(Error::dim(
            "image for restoration",
            format!(">= {side}x{side}"),
            format!("{h}x{w}"),
        ));
    }
    let stride = match mode {
        Stitching::Independent => side,
        Stitching::Averaged => {
            if stride == 0 || stride > side {
                return Err(Error::param("stride", format!("must lie in 1..={side}, got {stride}")));
            }
            stride
        }
    };
    let rows = window_origins(h, side, stride);
    let cols = window_origins(w, side, stride);
    let windows: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();

    let outputs = windows
        .par_iter()
        .map(|&(r, c)| predict(net, crop(&degraded.pixels, r, c, side).view()))
        .collect::<Result<Vec<_>>>()?;

    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for (&(r, c), out) in windows.iter().zip(&outputs) {
        let patch = out.view().into_shape_with_order((side, side)).expect("patch grid");
        sum.slice_mut(s![r..r + side, c..c + side])
            .zip_mut_with(&patch, |a, &b| *a += b);
        count.slice_mut(s![r..r + side, c..c + side]).mapv_inplace(|v| v + 1.0);
    }
    Ok(ImageTensor {
        pixels: sum / count,
        peak: degraded.peak,
    })
}

/// `10 log10(peak^2 / MSE)` with the reference's peak; [`PSNR_CAP`] when the
/// images are identical.
pub fn psnr(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::dim(
            "psnr operands",
            format!("{:?}", reference.dim()),
            format!("{:?}", test.dim()),
        ));
    }
    let n = reference.pixels.len() as f64;
    let mse = reference
        .pixels
        .iter()
        .zip(test.pixels.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (reference.peak * reference.peak / mse).log10()).min(PSNR_CAP))
}

/// Deterministic piecewise-smooth grayscale scene: a shaded background with
/// flat and textured shapes. Stands in for natural images where no dataset
/// is available.
pub fn synthetic_image(shape: (usize, usize), seed: u64) -> ImageTensor {
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy, base) = (
        rng.random_range(-60.0..60.0),
        rng.random_range(-60.0..60.0),
        rng.random_range(90.0..160.0),
    );
    let mut px = Array2::from_shape_fn((h, w), |(r, c)| {
        base + gx * (c as f64 / w as f64 - 0.5) + gy * (r as f64 / h as f64 - 0.5)
    });

    let shapes = 6 + (h * w / 2500).min(30);
    for _ in 0..shapes {
        let cr = rng.random_range(0.0..h as f64);
        let cc = rng.random_range(0.0..w as f64);
        let rad = rng.random_range(0.06..0.3) * h.min(w) as f64;
        let level = rng.random_range(10.0..245.0);
        let kind = rng.random_range(0..3u8);
        let freq = rng.random_range(0.15..0.6);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(10.0..40.0);
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                let inside = match kind {
                    0 => dr * dr + dc * dc <= rad * rad,
                    1 => dr.abs() <= rad && dc.abs() <= 0.6 * rad,
                    _ => (dr * angle.cos() + dc * angle.sin()).abs() <= 0.25 * rad && dr.hypot(dc) <= 2.0 * rad,
                };
                if inside {
                    px[[r, c]] = if kind == 1 {
                        level + amp * (freq * (dr * angle.cos() + dc * angle.sin())).sin()
                    } else {
                        level
                    };
                }
            }
        }
    }
    ImageTensor::new(px.mapv(|v| v.clamp(0.0, 255.0).round()))
}
