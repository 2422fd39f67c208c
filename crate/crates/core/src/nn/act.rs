use super::Tensor;

/// ReLU that remembers its activation pattern for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = x.data().iter().map(|v| *v > 0.0).collect();
        Self::infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        assert_eq!(self.mask.len(), dy.data().len(), "relu backward without forward");
        let mut dx = dy.clone();
        for (d, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
        self.mask = Vec::new();
        dx
    }
}
