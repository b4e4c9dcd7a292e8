//! Raster carriers: 2-D grids for labels and masks, 3-D grids for imagery
//! and feature maps, each tagged with a ground resolution.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Single-channel raster: label maps, boolean masks, per-pixel scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    data: Array2<T>,
    /// Ground distance covered by one pixel, in arbitrary length units.
    pub meters_per_pixel: f64,
}

impl<T: Clone> Raster<T> {
    pub fn new(data: Array2<T>, meters_per_pixel: f64) -> Self {
        Self {
            data,
            meters_per_pixel,
        }
    }

    pub fn filled(height: usize, width: usize, value: T, meters_per_pixel: f64) -> Self {
        Self::new(Array2::from_elem((height, width), value), meters_per_pixel)
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

/// Multi-channel raster in (height, width, channels) layout; pixel values are f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    data: Array3<f32>,
    pub meters_per_pixel: f64,
}

impl ImageRaster {
    pub fn new(data: Array3<f32>, meters_per_pixel: f64) -> Self {
        Self {
            data,
            meters_per_pixel,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize, meters_per_pixel: f64) -> Self {
        Self::new(Array3::zeros((height, width, channels)), meters_per_pixel)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Bitwise equality of pixel data, for round-trip checks where `==` on
    /// floats would conflate distinct NaN payloads or signed zeros.
    pub fn bits_eq(&self, other: &ImageRaster) -> bool {
        self.data.shape() == other.data.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Checks that two rasters share a (height, width) footprint.
pub fn expect_same_shape<A, B>(a: &Raster<A>, b: &Raster<B>, what: &str) -> Result<()>
where
    A: Clone,
    B: Clone,
{
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
