//! Seeded geometric and spectral augmentation, shared by training and
//! test-time evaluation.
//!
//! Transforms operate on square, channel-interleaved RGB buffers so the same
//! code serves both full 200x200 patches and model-resolution inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{hsv_to_rgb_pixel, rgb_to_hsv_pixel, PatchImage, RgbImage, PATCH_SIDE};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMode {
    QuarterTurns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub geometric: bool,
    pub hue: bool,
    pub gamma: bool,
    pub noise: bool,
    /// Degrees.
    pub hue_shift_max: f32,
    pub gamma_range: [f32; 2],
    /// In units of 1/255.
    pub noise_sigma_max: f32,
    pub rotation_mode: RotationMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            geometric: true,
            hue: true,
            gamma: true,
            noise: true,
            hue_shift_max: 18.0,
            gamma_range: [0.7, 1.4],
            noise_sigma_max: 5.0,
            rotation_mode: RotationMode::QuarterTurns,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            geometric: false,
            hue: false,
            gamma: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.geometric || self.hue || self.gamma || self.noise)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let [lo, hi] = self.gamma_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(AugmentError::Config(format!(
                "gamma_range must satisfy 0 < lo <= 1 <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.hue_shift_max >= 0.0 && self.hue_shift_max.is_finite()) {
            return Err(AugmentError::Config("hue_shift_max must be >= 0".into()));
        }
        if !(self.noise_sigma_max >= 0.0 && self.noise_sigma_max.is_finite()) {
            return Err(AugmentError::Config("noise_sigma_max must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic random stream.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, parts...)`, e.g. `(global seed, sample, epoch)`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let mut s = splitmix64(seed);
        for &p in parts {
            s = splitmix64(s ^ splitmix64(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        Self::new(s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl rand::RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to fold string identifiers into rng stream keys.
pub fn stable_hash(s: &str) -> u64 {
    stable_hash_bytes(s.bytes())
}

pub fn stable_hash_bytes(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Counter-clockwise quarter turns followed by optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeometricTransform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl GeometricTransform {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4),
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
        }
    }

    /// Source (row, col) feeding output (row, col) in a `side x side` image.
    fn source(&self, mut r: usize, mut c: usize, side: usize) -> (usize, usize) {
        let last = side - 1;
        if self.flip_vertical {
            r = last - r;
        }
        if self.flip_horizontal {
            c = last - c;
        }
        for _ in 0..self.quarter_turns % 4 {
            // Output of a CCW turn at (r, c) reads input (c, last - r).
            (r, c) = (c, last - r);
        }
        (r, c)
    }

    /// Applies to a square, channel-interleaved buffer.
    pub fn apply<T: Copy>(&self, data: &[T], side: usize, channels: usize) -> Vec<T> {
        if *self == Self::default() {
            return data.to_vec();
        }
        let mut out = Vec::with_capacity(data.len());
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = self.source(r, c, side);
                let i = (sr * side + sc) * channels;
                out.extend_from_slice(&data[i..i + channels]);
            }
        }
        out
    }
}

/// Hue rotation and value gamma in HSV space, then additive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralTransform {
    pub hue_shift: f32,
    pub gamma: f32,
    /// Noise standard deviation on the `[0, 1]` scale.
    pub sigma: f32,
}

impl SpectralTransform {
    pub fn sample<R: Rng>(config: &AugmentConfig, rng: &mut R) -> Self {
        let hue_shift = if config.hue && config.hue_shift_max > 0.0 {
            rng.gen_range(-config.hue_shift_max..=config.hue_shift_max)
        } else {
            0.0
        };
        let [lo, hi] = config.gamma_range;
        let gamma = if config.gamma && hi > lo { rng.gen_range(lo..=hi) } else if config.gamma { lo } else { 1.0 };
        let sigma = if config.noise && config.noise_sigma_max > 0.0 {
            rng.gen_range(0.0..=config.noise_sigma_max) / 255.0
        } else {
            0.0
        };
        Self { hue_shift, gamma, sigma }
    }

    /// Transforms interleaved RGB values in `[0, 1]` in place.
    pub fn apply<R: Rng>(&self, rgb: &mut [f32], rng: &mut R) {
        if self.hue_shift != 0.0 || self.gamma != 1.0 {
            for px in rgb.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv_pixel(px[0], px[1], px[2]);
                let (r, g, b) = hsv_to_rgb_pixel(h + self.hue_shift, s, v.powf(self.gamma));
                px.copy_from_slice(&[r, g, b]);
            }
        }
        if self.sigma > 0.0 {
            let normal = Normal::new(0.0f32, self.sigma).expect("sigma is finite and positive");
            for c in rgb.iter_mut() {
                *c = (*c + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}

fn with_pixels(patch: &PatchImage, pixels: Vec<u8>) -> PatchImage {
    let img = RgbImage::new(PATCH_SIDE, PATCH_SIDE, pixels).expect("patch geometry preserved");
    PatchImage::new(img, patch.source.clone(), patch.centroid).expect("patch geometry preserved")
}

/// Uniform quarter-turn rotation with independent horizontal and vertical flips.
pub fn random_geometric<R: Rng>(patch: &PatchImage, rng: &mut R) -> PatchImage {
    let t = GeometricTransform::sample(rng);
    with_pixels(patch, t.apply(patch.pixels(), PATCH_SIDE, 3))
}

pub fn random_spectral<R: Rng>(patch: &PatchImage, config: &AugmentConfig, rng: &mut R) -> PatchImage {
    if !(config.hue || config.gamma || config.noise) {
        return patch.clone();
    }
    let t = SpectralTransform::sample(config, rng);
    let mut rgb: Vec<f32> = patch.pixels().iter().map(|&b| b as f32 / 255.0).collect();
    t.apply(&mut rgb, rng);
    with_pixels(patch, rgb.iter().map(|&c| (c * 255.0).round().clamp(0.0, 255.0) as u8).collect())
}

/// Geometric then spectral, as enabled by `config`.
pub fn augment<R: Rng>(patch: &PatchImage, config: &AugmentConfig, rng: &mut R) -> PatchImage {
    let geo = if config.geometric {
        random_geometric(patch, rng)
    } else {
        patch.clone()
    };
    random_spectral(&geo, config, rng)
}

/// Same transform sequence on a square `[0, 1]` float buffer (interleaved RGB).
pub fn augment_float<R: Rng>(rgb: &[f32], side: usize, config: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let mut out = if config.geometric {
        GeometricTransform::sample(rng).apply(rgb, side, 3)
    } else {
        rgb.to_vec()
    };
    if config.hue || config.gamma || config.noise {
        SpectralTransform::sample(config, rng).apply(&mut out, rng);
    }
    out
}
