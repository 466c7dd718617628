//! Seeded synthetic landmark-like images.
//!
//! Each class owns a base pattern: a low-frequency colour texture with a few
//! solid shapes at class-specific places. A sample is the base pattern
//! shifted by a few pixels (edge-clamped) plus Gaussian noise, clipped to
//! `[0, 1]`. Sample `(class, index)` is generated from its own RNG stream,
//! so any image can be produced independently of all others.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// Translation drawn uniformly from `[-max_shift, max_shift]` per axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 8,
            images_per_class: 20,
            image_size: 32,
            noise_std: 0.05,
            max_shift: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.images_per_class == 0 || self.image_size == 0 {
            return Err(Error::Config("synthetic dataset needs classes, images and size".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.max_shift >= self.image_size {
            return Err(Error::Config("max_shift must be smaller than the image".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, h: f64, w: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Disc { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
        }
    }
}

/// Stream id for the RNG of one `(class, index)` draw. `index == u64::MAX`
/// is the class pattern itself.
fn stream(seed: u64, class: usize, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) ^ index);
    rng
}

/// Noise-free, unshifted pattern of `class`: `[S, S, 3]`.
pub fn class_pattern(spec: &SyntheticSpec, class: usize) -> Tensor {
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = stream(spec.seed, class, u64::MAX);
    let tau = core::f64::consts::TAU;

    // two plane waves per channel at frequencies 1..=2 cycles per image
    let mut waves = [[(0.0, 0.0, 0.0, 0.0); 2]; CHANNELS];
    for ch in waves.iter_mut() {
        for w in ch.iter_mut() {
            let fy = rng.random_range(0..=2) as f64;
            let fx = rng.random_range(1..=2) as f64;
            *w = (fy, fx, rng.random_range(0.0..tau), rng.random_range(0.1..0.25));
        }
    }
    let base: [f64; CHANNELS] = core::array::from_fn(|_| rng.random_range(0.25..0.75));
    let shapes: Vec<(Shape, [f64; CHANNELS])> = (0..3)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    y0: rng.random_range(0.0..0.7) * sf,
                    x0: rng.random_range(0.0..0.7) * sf,
                    h: rng.random_range(0.15..0.35) * sf,
                    w: rng.random_range(0.15..0.35) * sf,
                }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.15..0.85) * sf,
                    cx: rng.random_range(0.15..0.85) * sf,
                    r: rng.random_range(0.08..0.2) * sf,
                }
            };
            let colour: [f64; CHANNELS] = core::array::from_fn(|_| rng.random_range(0.0..1.0));
            (shape, colour)
        })
        .collect();

    let mut out = Tensor::zeros(&[s, s, CHANNELS]);
    let d = out.data_mut();
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let px = &mut d[(y * s + x) * CHANNELS..(y * s + x + 1) * CHANNELS];
            for (c, v) in px.iter_mut().enumerate() {
                *v = base[c];
                for &(fy, fx, phase, amp) in &waves[c] {
                    *v += amp * libm::sin(tau * (fy * yf + fx * xf) / sf + phase);
                }
            }
            for (shape, colour) in &shapes {
                if shape.contains(yf, xf) {
                    px.copy_from_slice(colour);
                }
            }
            for v in px.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Sample `index` of `class`: `[S, S, 3]` in `[0, 1]`.
pub fn generate_image(spec: &SyntheticSpec, class: usize, index: usize) -> Tensor {
    render(spec, &class_pattern(spec, class), class, index)
}

fn render(spec: &SyntheticSpec, pattern: &Tensor, class: usize, index: usize) -> Tensor {
    let s = spec.image_size;
    let mut rng = stream(spec.seed, class, index as u64);
    let m = spec.max_shift as i64;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
    let src = pattern.data();
    let mut out = Tensor::zeros(&[s, s, CHANNELS]);
    let d = out.data_mut();
    let last = s as i64 - 1;
    for y in 0..s {
        let sy = (y as i64 - dy).clamp(0, last) as usize;
        for x in 0..s {
            let sx = (x as i64 - dx).clamp(0, last) as usize;
            for c in 0..CHANNELS {
                let mut v = src[(sy * s + sx) * CHANNELS + c];
                if spec.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                d[(y * s + x) * CHANNELS + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// Position within its class.
    pub index: usize,
    pub image: Tensor,
}

/// Whole dataset ordered class-major.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_classes * spec.images_per_class);
    for class in 0..spec.n_classes {
        let pattern = class_pattern(spec, class);
        for index in 0..spec.images_per_class {
            out.push(Sample {
                id: format!("c{class:03}_{index:04}"),
                label: class,
                index,
                image: render(spec, &pattern, class, index),
            });
        }
    }
    Ok(out)
}

/// Splits per class by position: the first `n_first` samples of every class
/// go left, the rest right.
pub fn split_per_class(samples: &[Sample], n_first: usize) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| s.index < n_first)
}
