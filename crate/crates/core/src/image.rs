use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image, row-major, channel-last, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::Contract(alloc::format!(
                "image {height}x{width}x{CHANNELS} needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Rounds every value to the nearest multiple of 1/255 after clamping to
    /// `[0, 1]`, i.e. what an 8-bit PNG round trip preserves.
    pub fn quantized_u8(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| crate::math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| crate::math::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }
}
