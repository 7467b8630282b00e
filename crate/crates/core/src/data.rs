//! Paired dataset loading, synthetic achromatic rain, patch sampling and
//! reflect padding.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::rcp::RgbImage;
use crate::tensor::Real;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Independent deterministic stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainPair {
    pub rainy: RgbImage,
    pub clean: RgbImage,
    pub key: String,
}

impl RainPair {
    pub fn new(rainy: RgbImage, clean: RgbImage, key: impl Into<String>) -> Result<Self> {
        let key = key.into();
        if rainy.data().dim() != clean.data().dim() {
            return Err(Error::DatasetIntegrity {
                key,
                reason: format!("rainy {:?} vs clean {:?}", rainy.data().dim(), clean.data().dim()),
            });
        }
        Ok(Self { rainy, clean, key })
    }
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an 8-bit image to a `(1, 3, H, W)` array in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let decoded = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = rgb.into_raw();
    let data = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| raw[(y * w + x) * 3 + c] as f32 / 255.0);
    RgbImage::new(data)
}

/// `round(255 * v)` with halves away from zero, after clamping to `[0, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the first batch item of a 1- or 3-channel array as an 8-bit image;
/// the format follows the file extension.
pub fn save_image(path: &Path, data: &Array4<f32>) -> Result<()> {
    let (_, c, h, w) = data.dim();
    let plane = data.index_axis(Axis(0), 0);
    let result = match c {
        1 => {
            let raw: Vec<u8> = plane.index_axis(Axis(0), 0).iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").save(path)
        }
        3 => {
            let mut raw = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        raw.push(to_u8(plane[[ch, y, x]]));
                    }
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").save(path)
        }
        _ => return input_err(format!("cannot save a {c}-channel image")),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    })
}

/// Image files in `dir` keyed by file stem, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image_file(&path) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                return Err(Error::DatasetIntegrity {
                    key: stem,
                    reason: format!("ambiguous files {} and {}", prev.display(), path.display()),
                });
            }
        }
    }
    Ok(out)
}

/// Loads `root/rainy/*` and `root/gt/*`, matched by file stem.
pub fn load_pairs(root: &Path) -> Result<Vec<RainPair>> {
    let dir = |name: &str| {
        let d = root.join(name);
        if d.is_dir() {
            Ok(d)
        } else {
            Err(Error::DatasetIntegrity { key: format!("{name}/"), reason: format!("missing directory {}", d.display()) })
        }
    };
    let rainy = list_images(&dir("rainy")?)?;
    let gt = list_images(&dir("gt")?)?;
    if let Some(k) = rainy.keys().find(|k| !gt.contains_key(*k)) {
        return Err(Error::DatasetIntegrity { key: k.clone(), reason: "no ground-truth counterpart".into() });
    }
    if let Some(k) = gt.keys().find(|k| !rainy.contains_key(*k)) {
        return Err(Error::DatasetIntegrity { key: k.clone(), reason: "no rainy counterpart".into() });
    }
    rainy
        .iter()
        .map(|(key, path)| RainPair::new(load_image(path)?, load_image(&gt[key])?, key.clone()))
        .collect()
}

fn range_ok<T: PartialOrd + Copy>(r: [T; 2]) -> bool {
    r[0] <= r[1]
}

fn sample<T: rand::distributions::uniform::SampleUniform + PartialOrd + Copy>(rng: &mut impl Rng, r: [T; 2]) -> T {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Streak field parameters. Every streak is grey: one scalar intensity is
/// added to all three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRainParams {
    pub num_streaks: [usize; 2],
    /// Degrees from horizontal.
    pub angle: [f64; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub intensity: [f64; 2],
    /// Length in pixels of the box motion blur along the rain direction.
    pub blur_kernel_len: usize,
    pub seed: u64,
    /// Side of procedurally generated clean scenes when no clean images are
    /// supplied.
    pub scene_size: usize,
}

impl Default for SynthRainParams {
    fn default() -> Self {
        Self {
            num_streaks: [40, 90],
            angle: [60.0, 120.0],
            length: [8.0, 24.0],
            width: [1.0, 2.0],
            intensity: [0.25, 0.6],
            blur_kernel_len: 5,
            seed: 0,
            scene_size: 128,
        }
    }
}

impl SynthRainParams {
    pub fn validate(&self) -> Result<()> {
        let ok = range_ok(self.num_streaks)
            && range_ok(self.angle)
            && range_ok(self.length)
            && range_ok(self.width)
            && range_ok(self.intensity)
            && self.length[0] >= 0.0
            && self.width[0] > 0.0
            && self.intensity[0] > 0.0
            && self.intensity[1] <= 0.8
            && self.blur_kernel_len >= 1
            && [self.angle, self.length, self.width, self.intensity].iter().flatten().all(|v| v.is_finite());
        if !ok {
            return input_err(format!("invalid rain parameters {self:?}"));
        }
        Ok(())
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn bilinear(m: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = m.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            m[[yy as usize, xx as usize]]
        }
    };
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1.0) * fx * (1.0 - fy)
        + at(y0 + 1.0, x0) * (1.0 - fx) * fy
        + at(y0 + 1.0, x0 + 1.0) * fx * fy
}

/// Single-channel streak intensity field in `[0, max intensity]`.
pub fn streak_mask(h: usize, w: usize, params: &SynthRainParams, rng: &mut impl Rng) -> Result<Array2<f32>> {
    params.validate()?;
    let mut mask = Array2::<f64>::zeros((h, w));
    let count = sample(rng, params.num_streaks);
    let base_angle = sample(rng, params.angle);
    for _ in 0..count {
        let angle = (base_angle + rng.gen_range(-5.0..=5.0)).clamp(params.angle[0], params.angle[1]);
        let len = sample(rng, params.length);
        let width = sample(rng, params.width);
        let strength = sample(rng, params.intensity);
        let cx = rng.gen_range(-0.1..1.1) * w as f64;
        let cy = rng.gen_range(-0.1..1.1) * h as f64;
        let rad = angle * PI / 180.0;
        let (dx, dy) = (rad.cos() * len / 2.0, -rad.sin() * len / 2.0);
        let (a, b) = ((cx - dx, cy - dy), (cx + dx, cy + dy));
        let reach = width / 2.0 + 1.0;
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w);
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                let v = strength * cover;
                if v > mask[[y, x]] {
                    mask[[y, x]] = v;
                }
            }
        }
    }
    let taps = params.blur_kernel_len;
    let blurred = if taps <= 1 {
        mask
    } else {
        let rad = base_angle * PI / 180.0;
        let (ux, uy) = (rad.cos(), -rad.sin());
        let half = (taps - 1) as f64 / 2.0;
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..taps)
                .map(|t| {
                    let o = t as f64 - half;
                    bilinear(&mask, x as f64 + o * ux, y as f64 + o * uy)
                })
                .sum::<f64>()
                / taps as f64
        })
    };
    Ok(blurred.mapv(|v| v as f32))
}

/// Adds a grey streak field to `clean`; rainy = clamp(clean + mask).
pub fn synth_rain(clean: &RgbImage, key: &str, params: &SynthRainParams, rng: &mut impl Rng) -> Result<RainPair> {
    let (b, _, h, w) = clean.data().dim();
    let mut rainy = clean.data().clone();
    for n in 0..b {
        let mask = streak_mask(h, w, params, rng)?;
        for ch in 0..3 {
            let mut plane = rainy.slice_mut(s![n, ch, .., ..]);
            plane.zip_mut_with(&mask, |v, &m| *v = (*v + m).min(1.0));
        }
    }
    RainPair::new(RgbImage::new(rainy)?, clean.clone(), key)
}

/// Procedural clean scene: a two-colour gradient with soft-edged coloured
/// rectangles and discs.
pub fn desk_scene(h: usize, w: usize, rng: &mut impl Rng) -> RgbImage {
    let color = |rng: &mut dyn rand::RngCore| -> [f64; 3] { [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)] };
    let (c0, c1) = (color(rng), color(rng));
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut img = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| {
        let t = ((x as f64 / w.max(1) as f64 - 0.5) * gx + (y as f64 / h.max(1) as f64 - 0.5) * gy + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = rng.gen_range(3..=7);
    for _ in 0..shapes {
        let col = color(rng);
        let disc = rng.gen_bool(0.5);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(0.08..0.3) * w as f64;
        let ry = rng.gen_range(0.08..0.3) * h as f64;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    let r = ((px / rx).powi(2) + (py / ry).powi(2)).sqrt();
                    (1.0 - r) * rx.min(ry)
                } else {
                    (rx - px.abs()).min(ry - py.abs())
                };
                let a = (inside + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    for c in 0..3 {
                        let v = &mut img[[0, c, y, x]];
                        *v = *v * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }
    RgbImage::clamped(img.mapv(|v| v as f32)).expect("3-channel scene")
}

/// Same crop window (and optional shared horizontal flip) for both images.
pub fn random_patch(pair: &RainPair, size: usize, hflip: bool, rng: &mut impl Rng) -> Result<RainPair> {
    let (h, w) = (pair.rainy.height(), pair.rainy.width());
    if size == 0 || h < size || w < size {
        return input_err(format!("{}: {h}x{w} image is smaller than patch {size}", pair.key));
    }
    let y = rng.gen_range(0..=h - size);
    let x = rng.gen_range(0..=w - size);
    let flip = hflip && rng.gen_bool(0.5);
    let crop = |img: &RgbImage| {
        let mut view = img.data().slice(s![.., .., y..y + size, x..x + size]);
        if flip {
            view.invert_axis(Axis(3));
        }
        RgbImage::new(view.as_standard_layout().into_owned())
    };
    RainPair::new(crop(&pair.rainy)?, crop(&pair.clean)?, pair.key.clone())
}

/// Original spatial size, recorded so padding can be undone exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads right and bottom up to the next multiple of `m`.
pub fn pad_array<T: Real>(x: &Array4<T>, m: usize) -> (Array4<T>, CropRecord) {
    let (b, c, h, w) = x.dim();
    let record = CropRecord { height: h, width: w };
    let m = m.max(1);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return (x.clone(), record);
    }
    let out = Array4::from_shape_fn((b, c, ph, pw), |(n, ch, y, xx)| x[[n, ch, reflect(y, h), reflect(xx, w)]]);
    (out, record)
}

pub fn unpad_array<T: Real>(x: &Array4<T>, record: CropRecord) -> Array4<T> {
    x.slice(s![.., .., ..record.height, ..record.width]).to_owned()
}

pub fn pad_to_multiple(image: &RgbImage, m: usize) -> (RgbImage, CropRecord) {
    let (data, rec) = pad_array(image.data(), m);
    (RgbImage::new(data).expect("padding keeps values"), rec)
}

pub fn unpad(image: &RgbImage, record: CropRecord) -> RgbImage {
    RgbImage::new(unpad_array(image.data(), record)).expect("cropping keeps values")
}

/// `count` synthetic pairs from procedural scenes, keyed `scene0000`...
pub fn desk_dataset(count: usize, size: usize, params: &SynthRainParams, seed: u64) -> Result<Vec<RainPair>> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let clean = desk_scene(size, size, &mut rng);
            synth_rain(&clean, &format!("scene{i:04}"), params, &mut rng)
        })
        .collect()
}
