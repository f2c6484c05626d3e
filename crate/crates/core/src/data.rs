//! Synthetic low-/normal-light pairs, binary PPM/PGM I/O, crop-and-augment,
//! and the on-disk dataset layout:
//!
//! ```text
//! <dir>/index.txt            one basename per line
//! <dir>/pairs/NNNN_low.ppm
//! <dir>/pairs/NNNN_ref.ppm
//! <dir>/pairs/NNNN_illum.pgm   (optional)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::retinex::DegradationConfig;
use crate::tensor::Tensor;

/// A degraded image, its clean reference, and optionally the illumination
/// field used to degrade it (stored before clamping).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub low: Tensor,
    pub reference: Tensor,
    pub illumination: Option<Tensor>,
}

impl ImagePair {
    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.low.hwc()?;
        if self.low.shape() != self.reference.shape() {
            return Err(Error::shape(format!(
                "low {:?} and reference {:?} differ",
                self.low.shape(),
                self.reference.shape()
            )));
        }
        if let Some(l) = &self.illumination {
            if l.shape() != [h, w, 1] {
                return Err(Error::shape(format!("illumination {:?} is not {h}×{w}×1", l.shape())));
            }
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.low) || !in_range(&self.reference) {
            return Err(Error::numeric("pair values outside [0, 1]"));
        }
        Ok(())
    }
}

/// Mixes a base seed and a counter into an independent 64-bit seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bilinear (corner-aligned) upsampling of a `g×g` grid to `h×w`.
fn upsample_grid(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let t = i as f64 * (g - 1) as f64 / (n - 1) as f64;
        let i0 = (t.floor() as usize).min(g - 2);
        (i0, i0 + 1, t - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w);
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bottom = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Smooth random field with values in `[lo, hi]`.
pub fn smooth_field(h: usize, w: usize, grid: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let nodes: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(lo..=hi)).collect();
    upsample_grid(&nodes, grid, h, w)
}

/// `low = clamp((clean + R̂) ⊙ (L + L̂), 0, 1)` with a caller-supplied `L`.
pub fn synth_pair_with_illumination(
    clean: &Tensor,
    illumination: &Tensor,
    cfg: &DegradationConfig,
    seed: u64,
) -> Result<ImagePair> {
    cfg.validate()?;
    let (h, w, c) = clean.hwc()?;
    if illumination.shape() != [h, w, 1] {
        return Err(Error::shape(format!("illumination {:?} is not {h}×{w}×1", illumination.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.illumination_perturbation;
    let perturb = if p > 0.0 {
        smooth_field(h, w, cfg.coarse_grid, -p, p, &mut rng)
    } else {
        vec![0.0; h * w]
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut low = Vec::with_capacity(h * w * c);
    for (i, px) in clean.data().chunks_exact(c).enumerate() {
        let l = illumination.data()[i] as f64 + perturb[i];
        for &v in px {
            let r = v as f64 + if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            low.push((r * l).clamp(0.0, 1.0) as f32);
        }
    }
    let pair = ImagePair {
        low: Tensor::new(vec![h, w, c], low)?,
        reference: clean.clone(),
        illumination: Some(illumination.clone()),
    };
    if cfg!(debug_assertions) {
        pair.validate()?;
    }
    Ok(pair)
}

/// Degrades `clean` with a sampled smooth illumination `L ∈ [l_min, 1]`,
/// a smooth perturbation `L̂` and Gaussian reflectance noise `R̂`.
pub fn synth_pair(clean: &Tensor, cfg: &DegradationConfig, seed: u64) -> Result<ImagePair> {
    cfg.validate()?;
    let (h, w, _) = clean.hwc()?;
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::usage("clean image values must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = smooth_field(h, w, cfg.coarse_grid, cfg.illumination_min, 1.0, &mut rng);
    let illumination = Tensor::new(vec![h, w, 1], field.into_iter().map(|v| v as f32).collect())?;
    synth_pair_with_illumination(clean, &illumination, cfg, derive_seed(seed, 1))
}

/// Procedural clean image: a colour gradient with a few flat shapes and a
/// faint stripe texture, values within `[0.05, 0.95]`.
pub fn procedural_clean(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.1..0.9)) };
    let (a, b) = (colour(&mut rng), colour(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * ((y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx);
            for ch in 0..3 {
                img[(y * w + x) * 3 + ch] = a[ch] * (1.0 - t) + b[ch] * t;
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.08..0.3) * h as f64;
        let rx = rng.random_range(0.08..0.3) * w as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    img[(y * w + x) * 3..][..3].copy_from_slice(&col);
                }
            }
        }
    }
    let freq = rng.random_range(0.2..0.8);
    let amp = rng.random_range(0.0..0.06);
    for y in 0..h {
        for x in 0..w {
            let s = amp * ((x as f64 * dx + y as f64 * dy) * freq).sin();
            for ch in 0..3 {
                let v = &mut img[(y * w + x) * 3 + ch];
                *v = (*v + s).clamp(0.05, 0.95);
            }
        }
    }
    Tensor::new(vec![h, w, 3], img.into_iter().map(|v| v as f32).collect()).expect("shape matches")
}

/// Rotates an `H×W×C` tensor by 90° counter-clockwise.
pub fn rotate90(t: &Tensor) -> Tensor {
    let (h, w, c) = t.hwc().expect("rank-3 tensor");
    let mut out = Vec::with_capacity(t.len());
    for y in 0..w {
        for x in 0..h {
            let (sy, sx) = (x, w - 1 - y);
            out.extend_from_slice(&t.data()[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(vec![w, h, c], out).expect("shape matches")
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w, c) = t.hwc().expect("rank-3 tensor");
    let mut out = Vec::with_capacity(t.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&t.data()[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(vec![h, w, c], out).expect("shape matches")
}

pub fn crop(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if top + height > h || left + width > w || height == 0 || width == 0 {
        return Err(Error::usage(format!("crop {height}×{width}+{top}+{left} outside {h}×{w}")));
    }
    let mut out = Vec::with_capacity(height * width * c);
    for y in top..top + height {
        out.extend_from_slice(&t.data()[(y * w + left) * c..][..width * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

/// Same random `size×size` window, rotation (0/90/180/270°) and optional
/// horizontal flip applied to every member of the pair.
pub fn random_crop_augment(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let (h, w, _) = pair.low.hwc()?;
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::usage(format!("crop size {size} must be a positive multiple of 4")));
    }
    if size > h.min(w) {
        return Err(Error::usage(format!("crop size {size} exceeds image {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let turns = rng.random_range(0..4);
    let flip = rng.random_bool(0.5);
    let apply = |t: &Tensor| -> Result<Tensor> {
        let mut t = crop(t, top, left, size, size)?;
        for _ in 0..turns {
            t = rotate90(&t);
        }
        Ok(if flip { flip_horizontal(&t) } else { t })
    };
    Ok(ImagePair {
        low: apply(&pair.low)?,
        reference: apply(&pair.reference)?,
        illumination: pair.illumination.as_ref().map(apply).transpose()?,
    })
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, format!("expected header field {}", ["width", "height", "maxval"][i])));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|_| Error::format(start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos, "expected a single whitespace byte after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval {maxval} unsupported; only 8-bit (255) files are accepted")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos, "zero image dimension"));
    }
    Ok(Header { width, height, payload: pos + 1 })
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Tensor> {
    let hdr = parse_header(bytes, magic)?;
    let n = hdr.width * hdr.height * channels;
    let body = &bytes[hdr.payload..];
    if body.len() < n {
        return Err(Error::format(bytes.len(), format!("payload truncated: {} of {n} bytes", body.len())));
    }
    if body.len() > n {
        return Err(Error::format(hdr.payload + n, "unexpected bytes after payload"));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![hdr.height, hdr.width, channels], data)
}

fn encode(t: &Tensor, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (h, w, c) = t.hwc()?;
    if c != channels {
        return Err(Error::shape(format!("{magic} needs {channels} channels, tensor has {c}")));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes binary PPM (P6, maxval 255) into `H×W×3` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, b"P6", 3)
}

/// Encodes `H×W×3` as P6; values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    encode(t, "P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode(bytes, b"P5", 1)
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    encode(t, "P5", 1)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

/// Pairs with their basenames, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, pair: ImagePair) {
        self.ids.push(id.into());
        self.pairs.push(pair);
    }

    /// Writes `index.txt` and `pairs/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("pairs"))?;
        let mut index = String::new();
        for (id, pair) in self.ids.iter().zip(&self.pairs) {
            save_image(&pair.low, dir.join(format!("pairs/{id}_low.ppm")))?;
            save_image(&pair.reference, dir.join(format!("pairs/{id}_ref.ppm")))?;
            if let Some(l) = &pair.illumination {
                fs::write(dir.join(format!("pairs/{id}_illum.pgm")), encode_pgm(l)?)?;
            }
            index.push_str(id);
            index.push('\n');
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join("index.txt"))?;
        let mut set = Dataset::default();
        for id in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let low = load_image(dir.join(format!("pairs/{id}_low.ppm")))?;
            let reference = load_image(dir.join(format!("pairs/{id}_ref.ppm")))?;
            let illum_path = dir.join(format!("pairs/{id}_illum.pgm"));
            let illumination = if illum_path.exists() { Some(decode_pgm(&fs::read(illum_path)?)?) } else { None };
            let pair = ImagePair { low, reference, illumination };
            pair.validate()?;
            set.push(id, pair);
        }
        Ok(set)
    }

    /// `count` pairs from procedural clean images of `size×size`.
    pub fn synthetic(count: usize, size: usize, cfg: &DegradationConfig, seed: u64) -> Result<Self> {
        let mut set = Dataset::default();
        for i in 0..count {
            let clean = procedural_clean(size, size, derive_seed(seed, 2 * i as u64));
            let pair = synth_pair(&clean, cfg, derive_seed(seed, 2 * i as u64 + 1))?;
            set.push(format!("{i:04}"), pair);
        }
        Ok(set)
    }

    /// Splits off the last `n` pairs.
    pub fn split_off(&mut self, n: usize) -> Dataset {
        let at = self.len().saturating_sub(n);
        Dataset { ids: self.ids.split_off(at), pairs: self.pairs.split_off(at) }
    }
}
