use crate::error::{Error, Result};

/// Default reserved label excluded from loss, selection and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class labels in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Samples `(y0 + step*i, x0 + step*j)` for every in-bounds `(i, j)`.
    pub fn subsample(&self, origin: (usize, usize), step: usize) -> LabelMap {
        let count = |len: usize, o: usize| if o >= len { 0 } else { (len - 1 - o) / step + 1 };
        let h = count(self.height, origin.0);
        let w = count(self.width, origin.1);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(self.get(origin.0 + step * i, origin.1 + step * j));
            }
        }
        LabelMap { height: h, width: w, data }
    }

    /// Labels on the score grid of a network with the given output stride:
    /// score `(i, j)` is centred on input pixel `(stride*i, stride*j)`.
    pub fn at_stride(&self, stride: usize) -> LabelMap {
        self.subsample((0, 0), stride)
    }
}
