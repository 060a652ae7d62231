//! Dense channel-major raster used by the data, metrics and I/O layers.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `channels × height × width` image stored channel-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Stack channel planes of several same-sized images.
    pub fn concat_channels(parts: &[&Image]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels: no images"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::invalid("concat_channels: spatial size mismatch"));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Image::new(channels, h, w, data)
    }

    /// `1 × C × H × W` tensor of the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `C × H × W` or `1 × C × H × W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::invalid(format!(
                    "expected a single image tensor, got shape {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }
}

/// Stack same-shaped images into a `B × C × H × W` tensor.
pub fn stack_images(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty image list"))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        img.ensure_same_shape(first, "stack_images")?;
        data.extend_from_slice(img.data());
    }
    let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Split a `B × C × H × W` tensor into images.
pub fn unstack_images(t: &Tensor) -> Result<Vec<Image>> {
    let b = t.dim(0)?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_keeps_layout() {
        let img = Image::new(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 2, 2, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
        assert_eq!(img.get(1, 0, 2), 8.0);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Image::new(2, 2, 2, vec![0.0; 7]).is_err());
    }
}
