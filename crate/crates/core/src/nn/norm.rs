use super::{Module, Param, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Batch normalization over `(batch, x, y, z)` per channel.
///
/// Training uses batch statistics and updates exponential running averages
/// (unbiased variance); evaluation uses the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, 1.0),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.channels, "batchnorm channel mismatch");
        let mut y = x.clone();
        let v = x.voxels();
        for n in 0..x.batch() {
            let s = y.sample_mut(n);
            for c in 0..self.channels {
                let inv = 1.0 / (self.running_var[c] as f64 + EPS).sqrt();
                let scale = (self.gamma.value[c] as f64 * inv) as f32;
                let shift = (self.beta.value[c] as f64 - self.running_mean[c] as f64 * self.gamma.value[c] as f64 * inv) as f32;
                s[c * v..(c + 1) * v].iter_mut().for_each(|e| *e = *e * scale + shift);
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.channels, "batchnorm channel mismatch");
        let v = x.voxels();
        let m = (x.batch() * v) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![0.0; self.channels];
        for c in 0..self.channels {
            let mut sum = 0.0;
            for n in 0..x.batch() {
                sum += x.channel(n, c).iter().map(|e| *e as f64).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for n in 0..x.batch() {
                sq += x.channel(n, c).iter().map(|e| (*e as f64 - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c] as f64, self.beta.value[c] as f64);
            for n in 0..x.batch() {
                let off = (n * self.channels + c) * v;
                for i in off..off + v {
                    let h = (x.data()[i] as f64 - mean) * inv;
                    xhat.data_mut()[i] = h as f32;
                    y.data_mut()[i] = (g * h + b) as f32;
                }
            }
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            self.running_mean[c] = ((1.0 - MOMENTUM) * self.running_mean[c] as f64 + MOMENTUM * mean) as f32;
            self.running_var[c] = ((1.0 - MOMENTUM) * self.running_var[c] as f64 + MOMENTUM * unbiased) as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batchnorm backward without forward");
        let v = dy.voxels();
        let m = (dy.batch() * v) as f64;
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for n in 0..dy.batch() {
                for (d, h) in dy.channel(n, c).iter().zip(xhat.channel(n, c)) {
                    sum_dy += *d as f64;
                    sum_dy_xhat += *d as f64 * *h as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let k = self.gamma.value[c] as f64 * inv_std[c] / m;
            for n in 0..dy.batch() {
                let off = (n * self.channels + c) * v;
                for i in off..off + v {
                    let d = dy.data()[i] as f64;
                    let h = xhat.data()[i] as f64;
                    dx.data_mut()[i] = (k * (m * d - sum_dy - h * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
