//! Fixed orthogonal patch codec between pixel images and latent codes.
//!
//! Pixels in `[0, 1]` are mapped to `[-1, 1]`, cut into non-overlapping
//! `p x p` patches, flattened channel-major and multiplied by a seeded
//! orthogonal matrix. Decoding applies the transpose, so the round trip is
//! exact up to floating point.

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;

use crate::diffusion::LatentCode;
use crate::error::{Error, Result};
use crate::rng;

/// RGB image with values in `[0, 1]`, stored as a `(3, H, W)` `f64` tensor.
#[derive(Debug, Clone)]
pub struct PixelImage(Tensor);

impl PixelImage {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3().map_err(|_| Error::shape("(3, H, W)", data.dims()))?;
        if c != 3 {
            return Err(Error::shape("(3, H, W)", data.dims()));
        }
        let data = data.to_dtype(DType::F64)?;
        let values = data.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "pixel values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self(data))
    }

    /// Builds an image from channel-major values, clipping to `[0, 1]`.
    pub fn from_vec_clipped(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(Tensor::from_vec(data, (3, height, width), &Device::Cpu)?)
    }

    pub fn from_rgb8(pixels: &[u8], height: usize, width: usize) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, pixels.len()));
        }
        let mut data = vec![0.0; pixels.len()];
        for (i, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * height * width + i] = px[c] as f64 / 255.0;
            }
        }
        Self::new(Tensor::from_vec(data, (3, height, width), &Device::Cpu)?)
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.dims();
        let data = self.to_vec();
        let mut out = vec![0u8; h * w * 3];
        for i in 0..h * w {
            for c in 0..3 {
                out[i * 3 + c] = (data[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3().expect("rank checked at construction")
    }

    pub fn height(&self) -> usize {
        self.dims().1
    }

    pub fn width(&self) -> usize {
        self.dims().2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0
            .flatten_all()
            .and_then(|t| t.to_vec1::<f64>())
            .expect("f64 tensor")
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &PixelImage) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok((&self.0 - &other.0)?.abs()?.mean_all()?.to_scalar::<f64>()?)
    }

    pub fn max_abs_diff(&self, other: &PixelImage) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok((&self.0 - &other.0)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    patch_size: usize,
    height: usize,
    width: usize,
    /// `(3 p^2, 3 p^2)` orthogonal matrix.
    projection: Tensor,
}

impl Codec {
    pub fn new(patch_size: usize, seed: u64, height: usize, width: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        let n = 3 * patch_size * patch_size;
        let mut r = rng::stream(seed, 0xC0DEC);
        let gaussian = DMatrix::from_vec(n, n, rng::gaussian_vec(&mut r, n * n));
        let qr = gaussian.qr();
        let mut q = qr.q();
        // Fix column signs so the factorization is unique.
        let r_diag = qr.r().diagonal();
        for (j, d) in r_diag.iter().enumerate() {
            if *d < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)])
            .collect();
        let projection = Tensor::from_vec(rows, (n, n), &Device::Cpu)?;
        Ok(Self {
            patch_size,
            height,
            width,
            projection,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let p = self.patch_size;
        (3 * p * p, self.height / p, self.width / p)
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn encode(&self, x: &PixelImage) -> Result<LatentCode> {
        let (_, h, w) = x.dims();
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape((3, self.height, self.width), x.dims()));
        }
        let p = self.patch_size;
        let (n, lh, lw) = self.latent_shape();
        let centered = x.tensor().affine(2.0, -1.0)?;
        // (3, lh, p, lw, p) -> (lh, lw, 3, p, p) -> (lh*lw, n)
        let patches = centered
            .reshape((3, lh, p, lw, p))?
            .permute((1, 3, 0, 2, 4))?
            .contiguous()?
            .reshape((lh * lw, n))?;
        let z = patches.matmul(&self.projection.t()?)?;
        LatentCode::new(z.t()?.contiguous()?.reshape((n, lh, lw))?)
    }

    /// Inverse transform without clipping.
    pub fn decode_unclipped(&self, z: &LatentCode) -> Result<Tensor> {
        if z.shape() != self.latent_shape() {
            return Err(Error::shape(self.latent_shape(), z.shape()));
        }
        let p = self.patch_size;
        let (n, lh, lw) = self.latent_shape();
        let patches = z.tensor().reshape((n, lh * lw))?.t()?.matmul(&self.projection)?;
        let img = patches
            .reshape((lh, lw, 3, p, p))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?
            .reshape((3, self.height, self.width))?;
        Ok(img.affine(0.5, 0.5)?)
    }

    pub fn decode(&self, z: &LatentCode) -> Result<PixelImage> {
        PixelImage::new(self.decode_unclipped(z)?.clamp(0.0, 1.0)?)
    }
}
