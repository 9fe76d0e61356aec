use crate::error::{shape_err, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A rank-4 `(batch, channels, height, width)` tensor. Gradients for feature
/// maps live on the [`Graph`](super::Graph) that produced them.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(b, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(shape_err!("expected a rank-4 feature map, got {:?}", self.shape)),
        }
    }

    /// View as `(outer, channels, inner)` around axis 1.
    pub fn channel_view(&self) -> Result<[usize; 3]> {
        if self.shape.len() < 2 {
            return Err(shape_err!("need at least rank 2, got {:?}", self.shape));
        }
        let inner: usize = self.shape[2..].iter().product();
        Ok([self.shape[0], self.shape[1], inner])
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((b * cc + c) * hh + h) * ww + w]
    }
}
