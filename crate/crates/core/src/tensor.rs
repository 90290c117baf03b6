//! Image and latent tensors.
//!
//! All tensors are stored channel-first: an RGB image of width `w` and
//! height `h` is an `Array3` of shape `(3, h, w)`, and a latent of spatial
//! size `(w̃, h̃)` with depth `d` is `(d, h̃, w̃)`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};

/// Spatial size of an image, width first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub const fn new(width: usize, height: usize) -> Self {
        ImageSize { width, height }
    }

    pub const fn square(side: usize) -> Self {
        ImageSize::new(side, side)
    }
}

/// Shape of a latent tensor as `(w̃, h̃, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl LatentShape {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        LatentShape {
            width,
            height,
            depth,
        }
    }

    pub fn to_chw(self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn from_chw(chw: [usize; 3]) -> Self {
        LatentShape::new(chw[2], chw[1], chw[0])
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got shape {:?}",
                values.shape()
            )));
        }
        if values.shape()[1] == 0 || values.shape()[2] == 0 {
            return Err(Error::Shape("image has zero extent".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "image values must lie in [0,1], found {bad}"
            )));
        }
        Ok(ImageTensor(values))
    }

    /// Constant-valued image.
    pub fn filled(size: ImageSize, value: f64) -> Result<Self> {
        ImageTensor::new(Array3::from_elem((3, size.height, size.width), value))
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.0.shape()[2], self.0.shape()[1])
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    pub fn digest(&self) -> Digest {
        array_digest(&self.0)
    }

    /// Checks that the image matches the expected spatial size.
    pub fn expect_size(&self, size: ImageSize) -> Result<()> {
        if self.size() != size {
            return Err(Error::Shape(format!(
                "expected {}x{} image, got {}x{}",
                size.width,
                size.height,
                self.size().width,
                self.size().height
            )));
        }
        Ok(())
    }
}

/// Encoder output `z = E(x)` together with the digest of the encoder that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub values: Array3<f64>,
    pub source_digest: Digest,
}

impl LatentTensor {
    pub fn new(values: Array3<f64>, source_digest: Digest) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        Ok(LatentTensor {
            values,
            source_digest,
        })
    }

    pub fn shape(&self) -> LatentShape {
        let s = self.values.shape();
        LatentShape::from_chw([s[0], s[1], s[2]])
    }

    /// Digest of the latent values alone.
    pub fn content_digest(&self) -> Digest {
        array_digest(&self.values)
    }
}

/// Digest over shape and values of a 3-d array.
pub fn array_digest(a: &Array3<f64>) -> Digest {
    let mut b = DigestBuilder::new();
    for &d in a.shape() {
        b.usize(d);
    }
    b.f64s(a.iter());
    b.finish()
}

pub fn array2_digest(a: &Array2<f64>) -> Digest {
    let mut b = DigestBuilder::new();
    for &d in a.shape() {
        b.usize(d);
    }
    b.f64s(a.iter());
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        let a = Array3::from_elem((3, 2, 2), 1.5);
        assert!(matches!(ImageTensor::new(a), Err(Error::Argument(_))));
        let a = Array3::from_elem((1, 2, 2), 0.5);
        assert!(matches!(ImageTensor::new(a), Err(Error::Shape(_))));
    }

    #[test]
    fn size_is_width_first() {
        let img = ImageTensor::new(Array3::zeros((3, 4, 6))).unwrap();
        assert_eq!(img.size(), ImageSize::new(6, 4));
        assert!(img.expect_size(ImageSize::new(4, 6)).is_err());
    }

    #[test]
    fn latent_rejects_nan() {
        let mut a = Array3::zeros((2, 2, 2));
        a[[0, 1, 1]] = f64::NAN;
        assert!(LatentTensor::new(a, Digest::of_bytes(b"")).is_err());
    }
}
