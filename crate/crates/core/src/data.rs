//! Procedural two-modality benchmark: smooth correlated textures, elliptical
//! defects and the flat binary cache format.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng::{self, DATA};
use crate::tensor::Tensor;
use rand::Rng;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

/// Channels of the color-like modality.
pub const CHANNELS_A: usize = 3;
/// Channels of the depth-like modality.
pub const CHANNELS_B: usize = 1;

const CACHE_MAGIC: &[u8; 4] = b"ADNB";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `CHANNELS_A × H × W`.
    pub modality_a: Tensor,
    /// `CHANNELS_B × H × W`.
    pub modality_b: Tensor,
    pub mask: Mask,
    pub label: bool,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }

    /// Checks the label/mask agreement and the pixel range.
    pub fn validate(&self) -> Result<()> {
        if self.label != self.mask.any() {
            return Err(Error::invalid("label disagrees with mask"));
        }
        let (h, w) = self.size();
        if self.modality_a.shape() != [CHANNELS_A, h, w] {
            return Err(Error::shape(self.modality_a.shape(), &[CHANNELS_A, h, w]));
        }
        if self.modality_b.shape() != [CHANNELS_B, h, w] {
            return Err(Error::shape(self.modality_b.shape(), &[CHANNELS_B, h, w]));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.modality_a) || !in_range(&self.modality_b) {
            return Err(Error::invalid("pixel values outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Defect area as a fraction of the image, drawn from `[area_min, area_max]`.
    pub area_min: f64,
    pub area_max: f64,
    /// Probability that the online generator leaves a training sample normal.
    pub keep_normal: f64,
    /// Additive defect magnitude range; signs are random.
    pub shift_min: f64,
    pub shift_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            n_train: 200,
            n_test: 100,
            area_min: 0.01,
            area_max: 0.08,
            keep_normal: 0.5,
            shift_min: 0.15,
            shift_max: 0.35,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.area_min) || !open(self.area_max) || self.area_min > self.area_max {
            return Err(Error::config(format!(
                "anomaly area range [{}, {}] must lie in (0, 1)",
                self.area_min, self.area_max
            )));
        }
        if !(0.0..=1.0).contains(&self.keep_normal) {
            return Err(Error::config(format!("keep_normal {} outside [0, 1]", self.keep_normal)));
        }
        if !(self.shift_min >= 0.0 && self.shift_min <= self.shift_max) {
            return Err(Error::config("defect magnitude range is invalid"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        Ok(())
    }
}

/// Sum of a few low-frequency plane waves.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..1.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            out.push(
                waves
                    .iter()
                    .map(|&(a, fx, fy, p)| a * (2.0 * PI * (fx * u + fy * v) + p).sin())
                    .sum(),
            );
        }
    }
    out
}

/// Rescales into `[0.15, 0.85]`.
fn normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    for x in v {
        *x = 0.15 + 0.7 * (*x - lo) / span;
    }
}

/// A defect-free sample. Both modalities share one latent field so they are
/// correlated but not redundant.
pub fn generate_normal(rng: &mut impl Rng, size: usize) -> Sample {
    let (h, w) = (size, size);
    let shared = smooth_field(rng, h, w);
    let mut blend = |mix: f64| {
        let own = smooth_field(rng, h, w);
        let mut v: Vec<f64> = shared
            .iter()
            .zip(&own)
            .map(|(s, o)| mix * s + (1.0 - mix) * o)
            .collect();
        normalize(&mut v);
        for x in v.iter_mut() {
            *x += rng.random_range(-0.02..0.02);
        }
        v
    };
    let mut a = Vec::with_capacity(CHANNELS_A * h * w);
    for _ in 0..CHANNELS_A {
        a.extend(blend(0.5));
    }
    let b = blend(0.7);
    Sample {
        modality_a: Tensor::new(vec![CHANNELS_A, h, w], a).expect("sizes agree"),
        modality_b: Tensor::new(vec![CHANNELS_B, h, w], b).expect("sizes agree"),
        mask: Mask::empty(h, w),
        label: false,
    }
}

fn ellipse(rng: &mut impl Rng, h: usize, w: usize, area: f64) -> Vec<bool> {
    let ratio: f64 = rng.random_range(0.5..2.0);
    let a = (area / (PI * ratio)).sqrt().max(0.5);
    let b = a * ratio;
    let theta: f64 = rng.random_range(0.0..PI);
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let (s, c) = theta.sin_cos();
    let mut px = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            px[y * w + x] = u * u + v * v <= 1.0;
        }
    }
    if !px.iter().any(|&p| p) {
        px[(cy as usize).min(h - 1) * w + (cx as usize).min(w - 1)] = true;
    }
    px
}

fn magnitude(rng: &mut impl Rng, cfg: &DataConfig) -> f64 {
    let m = cfg.shift_min + (cfg.shift_max - cfg.shift_min) * rng.random::<f64>();
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn shift_plane(t: &mut Tensor, channel: usize, blob: &[bool], delta: f64) {
    let n = blob.len();
    for (v, &inside) in t.data_mut()[channel * n..(channel + 1) * n].iter_mut().zip(blob) {
        if inside {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
}

/// Plants 1–3 elliptical defects into a normal sample. Each defect shifts the
/// color modality, the depth modality, or both. With probability
/// `cfg.keep_normal` the sample is returned unchanged.
pub fn generate_anomaly(normal: &Sample, rng: &mut impl Rng, cfg: &DataConfig) -> Result<Sample> {
    cfg.validate()?;
    if normal.label {
        return Err(Error::Precondition("anomaly generation needs a normal sample".into()));
    }
    if rng.random::<f64>() < cfg.keep_normal {
        return Ok(normal.clone());
    }
    let (h, w) = normal.size();
    let mut out = normal.clone();
    let blobs = rng.random_range(1..=3usize);
    let total = rng.random_range(cfg.area_min..=cfg.area_max) * (h * w) as f64;
    let shares: Vec<f64> = (0..blobs).map(|_| rng.random_range(0.5..1.5)).collect();
    let share_sum: f64 = shares.iter().sum();
    for share in shares {
        let blob = ellipse(rng, h, w, total * share / share_sum);
        let which = rng.random_range(0..3u8);
        if which != 1 {
            for ch in 0..CHANNELS_A {
                let d = magnitude(rng, cfg);
                shift_plane(&mut out.modality_a, ch, &blob, d);
            }
        }
        if which != 0 {
            let d = magnitude(rng, cfg);
            shift_plane(&mut out.modality_b, 0, &blob, d);
        }
        for (m, b) in out.mask.pixels.iter_mut().zip(&blob) {
            *m |= *b;
        }
    }
    out.label = out.mask.any();
    Ok(out)
}

/// Normal training images and a test set alternating normal and defective
/// samples (odd indices are defective).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
        cfg.validate()?;
        let size = cfg.image_size;
        let train = (0..cfg.n_train)
            .map(|i| generate_normal(&mut rng::keyed(seed, DATA, &[0, i as u64]), size))
            .collect();
        let forced = DataConfig {
            keep_normal: 0.0,
            ..cfg.clone()
        };
        let test = (0..cfg.n_test)
            .map(|i| {
                let normal = generate_normal(&mut rng::keyed(seed, DATA, &[1, i as u64]), size);
                if i % 2 == 1 {
                    generate_anomaly(&normal, &mut rng::keyed(seed, DATA, &[2, i as u64]), &forced)
                } else {
                    Ok(normal)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: cfg.clone(),
            seed,
            train,
            test,
        })
    }

    /// Online defect for training image `index` at `epoch`.
    pub fn augment(&self, index: usize, epoch: usize) -> Result<Sample> {
        let mut r = rng::keyed(self.seed, DATA, &[3, index as u64, epoch as u64]);
        generate_anomaly(&self.train[index], &mut r, &self.config)
    }
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("value does not fit the cache header"))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(input: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Writes samples to the flat cache format. Pixels are stored as `f32`.
pub fn save_cache(path: &Path, samples: &[Sample]) -> Result<()> {
    let (h, w) = samples.first().map_or((0, 0), Sample::size);
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION as usize)?;
    for v in [samples.len(), h, w, CHANNELS_A, CHANNELS_B] {
        put_u32(&mut out, v)?;
    }
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::shape(&[s.mask.h, s.mask.w], &[h, w]));
        }
        for v in s.modality_a.data().iter().chain(s.modality_b.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend(s.mask.pixels.iter().map(|&p| u8::from(p)));
    }
    std::fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_cache(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut input = bytes.as_slice();
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Parse("cache too short".into()))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Parse("not a dataset cache".into()));
    }
    let header = (0..6).map(|_| get_u32(&mut input)).collect::<Result<Vec<_>>>()?;
    let [version, count, h, w, ca, cb] = header[..] else {
        unreachable!()
    };
    if version != CACHE_VERSION as usize || ca != CHANNELS_A || cb != CHANNELS_B {
        return Err(Error::Parse(format!(
            "unsupported cache layout (version {version}, channels {ca}/{cb})"
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let read_plane = |input: &mut &[u8], n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| Error::Parse("cache truncated".into()))?;
            v.push(f64::from(f32::from_le_bytes(b)));
        }
        Ok(v)
    };
    for _ in 0..count {
        let a = read_plane(&mut input, ca * h * w)?;
        let b = read_plane(&mut input, cb * h * w)?;
        let mut m = vec![0u8; h * w];
        input.read_exact(&mut m).map_err(|_| Error::Parse("cache truncated".into()))?;
        let mask = Mask::from_pixels(h, w, m.iter().map(|&x| x != 0).collect())?;
        samples.push(Sample {
            modality_a: Tensor::new(vec![ca, h, w], a)?,
            modality_b: Tensor::new(vec![cb, h, w], b)?,
            label: mask.any(),
            mask,
        });
    }
    if !input.is_empty() {
        return Err(Error::Parse("trailing bytes after cache samples".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(seed: u64) -> Sample {
        generate_normal(&mut rng::keyed(seed, DATA, &[]), 32)
    }

    #[test]
    fn normal_samples_are_valid() {
        let s = normal(0);
        s.validate().unwrap();
        assert!(!s.label);
        assert_eq!(s, normal(0));
    }

    #[test]
    fn keep_normal_one_returns_input() {
        let s = normal(1);
        let cfg = DataConfig {
            keep_normal: 1.0,
            ..DataConfig::default()
        };
        let out = generate_anomaly(&s, &mut rng::stream(3, DATA), &cfg).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn zero_magnitude_leaves_pixels() {
        let s = normal(2);
        let cfg = DataConfig {
            keep_normal: 0.0,
            shift_min: 0.0,
            shift_max: 0.0,
            ..DataConfig::default()
        };
        let out = generate_anomaly(&s, &mut rng::stream(4, DATA), &cfg).unwrap();
        assert!(out.label && out.mask.any());
        assert_eq!(out.modality_a, s.modality_a);
        assert_eq!(out.modality_b, s.modality_b);
    }

    #[test]
    fn defects_stay_inside_mask() {
        let cfg = DataConfig {
            keep_normal: 0.0,
            ..DataConfig::default()
        };
        for seed in 0..20 {
            let s = normal(seed);
            let out = generate_anomaly(&s, &mut rng::stream(seed, DATA), &cfg).unwrap();
            out.validate().unwrap();
            let n = 32 * 32;
            for (i, &inside) in out.mask.pixels.iter().enumerate() {
                if !inside {
                    for c in 0..CHANNELS_A {
                        assert_eq!(out.modality_a.data()[c * n + i], s.modality_a.data()[c * n + i]);
                    }
                    assert_eq!(out.modality_b.data()[i], s.modality_b.data()[i]);
                }
            }
            let frac = out.mask.count() as f64 / n as f64;
            assert!(frac > 0.0 && frac < 0.2, "{frac}");
        }
    }

    #[test]
    fn bad_area_and_labels_rejected() {
        let s = normal(5);
        let cfg = DataConfig {
            area_max: 1.5,
            ..DataConfig::default()
        };
        assert!(matches!(
            generate_anomaly(&s, &mut rng::stream(0, DATA), &cfg),
            Err(Error::Config(_))
        ));
        let mut bad = s.clone();
        bad.label = true;
        assert!(generate_anomaly(&bad, &mut rng::stream(0, DATA), &DataConfig::default()).is_err());
    }

    #[test]
    fn geometry_is_seeded() {
        let cfg = DataConfig {
            keep_normal: 0.0,
            ..DataConfig::default()
        };
        let s = normal(6);
        let a = generate_anomaly(&s, &mut rng::stream(9, DATA), &cfg).unwrap();
        let b = generate_anomaly(&s, &mut rng::stream(9, DATA), &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn test_split_alternates() {
        let cfg = DataConfig {
            n_train: 3,
            n_test: 6,
            ..DataConfig::default()
        };
        let d = Dataset::generate(&cfg, 11).unwrap();
        let labels: Vec<bool> = d.test.iter().map(|s| s.label).collect();
        assert_eq!(labels, [false, true, false, true, false, true]);
        assert_eq!(d, Dataset::generate(&cfg, 11).unwrap());
    }
}
