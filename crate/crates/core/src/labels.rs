use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Integer class map `[H, W]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels for {height}×{width}", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors with the first pixel index whose label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l as usize >= classes) {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel {i} (y={}, x={}) is outside 0..{classes}",
                self.data[i],
                i / self.width,
                i % self.width
            ))),
            None => Ok(()),
        }
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }

    /// Nearest-neighbour downsampling by an integer factor, sampling pixel
    /// `factor·i + factor/2` (the one nearest the cell centre).
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(
                "downsample_nearest",
                format!("{}×{} by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let o = factor / 2;
        let data = (0..h * w).map(|p| self.at((p / w) * factor + o, (p % w) * factor + o)).collect();
        Ok(LabelMap { height: h, width: w, data })
    }

    /// `[C, H, W]` one-hot encoding.
    pub fn one_hot<T: Float>(&self, classes: usize) -> Result<Tensor<T>> {
        self.check_classes(classes)?;
        let n = self.len();
        let mut out = vec![T::zero(); classes * n];
        for (p, &l) in self.data.iter().enumerate() {
            out[l as usize * n + p] = T::one();
        }
        Tensor::from_vec(&[classes, self.height, self.width], out)
    }

    /// Per-pixel argmax over the class axis of a `[C, H, W]` tensor.
    pub fn argmax<T: Float>(scores: &Tensor<T>) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 3 || s[0] == 0 || s[0] > 256 {
            return Err(Error::shape("argmax", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = scores.data();
        let data = (0..h * w)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * h * w + p] > d[best * h * w + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, data)
    }
}
