//! Square single-channel frames with values in `[-1, 1]`.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageBuffer, ImageEncoder, Luma};
use sonorl_tensor::Tensor;

use crate::error::{Result, SonoError};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    size: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != size * size {
            return Err(SonoError::Contract(format!(
                "frame of side {size} needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            data: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Values remapped from `[-1, 1]` to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|v| (v + 1.0) / 2.0).collect()
    }

    /// Linear map `[-1, 1] → [0, 255]`, rounded and clamped.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn pgm_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let side = self.size as u32;
        PnmEncoder::new(&mut buf)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.to_gray8(), side, side, image::ExtendedColorType::L8)?;
        Ok(buf)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.pgm_bytes()?)?;
        Ok(())
    }

    /// Bilinear resize to `size × size`.
    pub fn resized(&self, size: usize) -> Frame {
        if size == self.size {
            return self.clone();
        }
        let side = self.size as u32;
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(side, side, self.data.iter().map(|&v| v as f32).collect())
                .expect("frame buffer size");
        let out = image::imageops::resize(&buf, size as u32, size as u32, image::imageops::FilterType::Triangle);
        Frame {
            size,
            data: out.into_raw().into_iter().map(f64::from).collect(),
        }
    }
}

/// Stacks frames into an `[n, 1, s, s]` tensor.
pub fn stack(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| SonoError::Contract("cannot stack zero frames".into()))?;
    let s = first.size;
    let mut data = Vec::with_capacity(frames.len() * s * s);
    for f in frames {
        if f.size != s {
            return Err(SonoError::Contract(format!(
                "frame sizes differ: {} and {}",
                s, f.size
            )));
        }
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::new(&[frames.len(), 1, s, s], data)?)
}
