//! Dense row-major image maps with an arbitrary number of channels per pixel.

use serde::{Deserialize, Serialize};

/// An `height × width × channels` map stored row-major, channel-minor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }
}

impl<T: Clone + Default> Grid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::default())
    }
}

impl<T> Grid<T> {
    /// Wraps an existing buffer. Returns `None` when the length does not match the shape.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels (`height · width`).
    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.height * self.width
    }

    /// `[height, width, channels]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Channel values of the pixel at flat index `idx = row · width + col`.
    #[inline]
    pub fn at(&self, idx: usize) -> &[T] {
        let c = self.channels;
        &self.data[idx * c..(idx + 1) * c]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        self.at(row * self.width + col)
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let idx = row * self.width + col;
        self.at_mut(idx)
    }

    /// Iterates over pixels in row-major order, yielding each pixel's channel slice.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels.max(1))
    }

    pub fn pixels_mut(&mut self) -> std::slice::ChunksExactMut<'_, T> {
        self.data.chunks_exact_mut(self.channels.max(1))
    }
}

impl<T: Copy> Grid<T> {
    /// Value of a single-channel map at flat pixel index `idx`.
    #[inline]
    pub fn value(&self, idx: usize) -> T {
        self.data[idx * self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let i = (row * self.width + col) * self.channels + ch;
        self.data[i] = value;
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_channel_minor() {
        let mut g = Grid::<f64>::zeros(2, 3, 2);
        g.set(1, 2, 1, 7.0);
        assert_eq!(g.as_slice()[(1 * 3 + 2) * 2 + 1], 7.0);
        assert_eq!(g.pixel(1, 2), &[0.0, 7.0]);
        assert_eq!(g.pixels().count(), 6);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(2, 2, 1, vec![0u8; 3]).is_none());
        assert!(Grid::from_vec(2, 2, 1, vec![0u8; 4]).is_some());
    }
}
