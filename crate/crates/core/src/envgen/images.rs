//! Procedural 3-channel class textures and the two line overlays.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lines::{LineConfig, Orientation};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) const N_IMAGE_CLASSES: usize = 10;
const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub hw: usize,
    /// Amplitude of the class sinusoid around the 0.5 gray level.
    pub texture_amplitude: f64,
    /// Per-pixel Gaussian noise std.
    pub noise_std: f64,
    /// Std of a per-sample random phase shift, in radians. Zero gives a fixed
    /// texture per class.
    pub phase_jitter: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            hw: 8,
            texture_amplitude: 0.25,
            noise_std: 0.2,
            phase_jitter: 0.6,
        }
    }
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hw < 4 {
            return Err(Error::InvalidArgument(format!(
                "image_hw = {} cannot hold middle lines, need >= 4",
                self.hw
            )));
        }
        if self.noise_std < 0.0 || self.texture_amplitude < 0.0 || self.phase_jitter < 0.0 {
            return Err(Error::InvalidArgument("image amplitudes must be >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        vec![CHANNELS, self.hw, self.hw]
    }

    pub fn middle(&self) -> usize {
        self.hw / 2
    }

    fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.hw + row) * self.hw + col
    }
}

/// Frequency (cycles per image) and orientation of the class texture.
fn class_wave(class: usize) -> (f64, f64) {
    let freq = 1.0 + (class % 2) as f64;
    let theta = PI * (class / 2) as f64 / 5.0 + 0.3 * (class % 2) as f64;
    (freq, theta)
}

/// One noisy texture, channel-major, clipped to `[0, 1]`.
pub(crate) fn class_image(spec: &ImageSpec, class: usize, r: &mut Rng) -> Vec<f64> {
    let (freq, theta) = class_wave(class);
    let (s, c) = theta.sin_cos();
    let hw = spec.hw as f64;
    let mut out = vec![0.0; CHANNELS * spec.hw * spec.hw];
    let jitter: f64 = spec.phase_jitter * r.sample::<f64, _>(StandardNormal);
    for ch in 0..CHANNELS {
        let phase = 2.0 * PI * ch as f64 / 3.0 + jitter;
        for i in 0..spec.hw {
            for j in 0..spec.hw {
                let t = 2.0 * PI * freq * (i as f64 * c + j as f64 * s) / hw + phase;
                let noise: f64 = r.sample(StandardNormal);
                let v = 0.5 + spec.texture_amplitude * t.sin() + spec.noise_std * noise;
                out[spec.index(ch, i, j)] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Overwrites the four middle lines with `0.5 + 0.5·sign·strength`.
pub(crate) fn draw_lines(spec: &ImageSpec, img: &mut [f64], config: &LineConfig, strength: f64) {
    let m = spec.middle();
    for slot in &config.slots {
        let v = (0.5 + 0.5 * f64::from(slot.sign) * strength).clamp(0.0, 1.0);
        for k in 0..spec.hw {
            let idx = match slot.orientation {
                Orientation::Vertical => spec.index(slot.channel, k, m),
                Orientation::Horizontal => spec.index(slot.channel, m, k),
            };
            img[idx] = v;
        }
    }
}

/// Last channel becomes `(x + 4 + B·[middle column]) / 9`.
pub(crate) fn vertical_line_transform(spec: &ImageSpec, img: &mut [f64], b: f64) {
    let m = spec.middle();
    let ch = CHANNELS - 1;
    for i in 0..spec.hw {
        for j in 0..spec.hw {
            let idx = spec.index(ch, i, j);
            let line = if j == m { b } else { 0.0 };
            img[idx] = (img[idx] + 4.0 + line) / 9.0;
        }
    }
}
