use rand::Rng;
use rayon::prelude::*;

use super::gemm::{sgemm, Mat};
use super::{Module, Param, Tensor};

/// Upper bound on the im2col scratch size (in floats) for one chunk.
const MAX_COL_ELEMS: usize = 1 << 22;

/// Cubic 3D convolution with zero padding `kernel / 2` and an optional bias.
///
/// Weights are stored as a row-major `out_ch x (in_ch * k^3)` matrix.
#[derive(Debug, Clone)]
pub struct Conv3d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

/// Output x-plane range handled by one work item.
#[derive(Clone, Copy)]
struct Chunk {
    n: usize,
    x0: usize,
    x1: usize,
}

impl Conv3d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        let k3 = kernel * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: Param::he_normal(out_ch * in_ch * k3, in_ch * k3, rng),
            bias: bias.then(|| Param::zeros(out_ch)),
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn kdim(&self) -> usize {
        self.in_ch * self.kernel * self.kernel * self.kernel
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        std::array::from_fn(|a| (s[a] + 2 * p - self.kernel) / self.stride + 1)
    }

    fn chunks(&self, batch: usize, osp: [usize; 3]) -> Vec<Chunk> {
        let plane = osp[1] * osp[2];
        let per = (MAX_COL_ELEMS / (self.kdim() * plane).max(1)).max(1);
        let mut out = Vec::new();
        for n in 0..batch {
            let mut x0 = 0;
            while x0 < osp[0] {
                let x1 = (x0 + per).min(osp[0]);
                out.push(Chunk { n, x0, x1 });
                x0 = x1;
            }
        }
        out
    }

    /// Valid output index range along one axis for kernel offset `kk`.
    #[inline]
    fn valid_range(&self, kk: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad() as isize);
        let kk = kk as isize;
        // need 0 <= o*s + kk - p < in_len
        let lo = ((p - kk).max(0) + s - 1) / s;
        let hi = ((in_len as isize + p - kk) + s - 1) / s;
        (lo.max(0) as usize, (hi.max(0) as usize).min(out_len))
    }

    fn im2col(&self, inp: &[f32], isp: [usize; 3], osp: [usize; 3], x0: usize, x1: usize, cols: &mut Vec<f32>) {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let pc = (x1 - x0) * osp[1] * osp[2];
        cols.clear();
        cols.resize(self.kdim() * pc, 0.0);
        let ivox = isp[0] * isp[1] * isp[2];
        for ci in 0..self.in_ch {
            let ch = &inp[ci * ivox..(ci + 1) * ivox];
            for kx in 0..k {
                let (ox_lo, ox_hi) = self.valid_range(kx, isp[0], osp[0]);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, isp[1], osp[1]);
                    for kz in 0..k {
                        let (oz_lo, oz_hi) = self.valid_range(kz, isp[2], osp[2]);
                        let row = ((ci * k + kx) * k + ky) * k + kz;
                        let dst = &mut cols[row * pc..(row + 1) * pc];
                        for ox in ox_lo.max(x0)..ox_hi.min(x1) {
                            let ix = ox * s + kx - p;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let src = (ix * isp[1] + iy) * isp[2];
                                let d = ((ox - x0) * osp[1] + oy) * osp[2];
                                if s == 1 {
                                    let iz0 = oz_lo + kz - p;
                                    let len = oz_hi.saturating_sub(oz_lo);
                                    dst[d + oz_lo..d + oz_lo + len].copy_from_slice(&ch[src + iz0..src + iz0 + len]);
                                } else {
                                    for oz in oz_lo..oz_hi {
                                        dst[d + oz] = ch[src + oz * s + kz - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an input-gradient buffer that covers
    /// input x-planes starting at `ix_base`.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[f32], isp: [usize; 3], osp: [usize; 3], x0: usize, x1: usize, ix_base: usize, ix_len: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let pc = (x1 - x0) * osp[1] * osp[2];
        let cvox = ix_len * isp[1] * isp[2];
        for ci in 0..self.in_ch {
            let ch = &mut dx[ci * cvox..(ci + 1) * cvox];
            for kx in 0..k {
                let (ox_lo, ox_hi) = self.valid_range(kx, isp[0], osp[0]);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, isp[1], osp[1]);
                    for kz in 0..k {
                        let (oz_lo, oz_hi) = self.valid_range(kz, isp[2], osp[2]);
                        let row = ((ci * k + kx) * k + ky) * k + kz;
                        let src = &cols[row * pc..(row + 1) * pc];
                        for ox in ox_lo.max(x0)..ox_hi.min(x1) {
                            let ix = ox * s + kx - p - ix_base;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let d = (ix * isp[1] + iy) * isp[2];
                                let c = ((ox - x0) * osp[1] + oy) * osp[2];
                                for oz in oz_lo..oz_hi {
                                    ch[d + oz * s + kz - p] += src[c + oz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Input x-plane range touched by output planes `[x0, x1)`.
    fn input_plane_range(&self, x0: usize, x1: usize, in_len: usize) -> (usize, usize) {
        let (s, p, k) = (self.stride, self.pad(), self.kernel);
        let lo = (x0 * s).saturating_sub(p);
        let hi = ((x1 - 1) * s + k - p).min(in_len);
        (lo, hi - lo)
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(x.channels(), self.in_ch, "conv input channel mismatch");
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let isp = x.spatial();
        let osp = self.out_spatial(isp);
        let ovox = osp[0] * osp[1] * osp[2];
        let mut out = Tensor::zeros([x.batch(), self.out_ch, osp[0], osp[1], osp[2]]);
        let kd = self.kdim();
        if self.pointwise() {
            for n in 0..x.batch() {
                let dst = out.sample_mut(n);
                sgemm(
                    self.out_ch,
                    kd,
                    ovox,
                    Mat::row_major(&self.weight.value, kd),
                    Mat::row_major(x.sample(n), ovox),
                    0.0,
                    dst,
                    0,
                    ovox,
                );
                if let Some(b) = &self.bias {
                    add_bias(dst, &b.value, ovox);
                }
            }
            return out;
        }
        let plane = osp[1] * osp[2];
        let parts: Vec<(Chunk, Vec<f32>)> = self
            .chunks(x.batch(), osp)
            .into_par_iter()
            .map_init(Vec::new, |cols, ch| {
                self.im2col(x.sample(ch.n), isp, osp, ch.x0, ch.x1, cols);
                let pc = (ch.x1 - ch.x0) * plane;
                let mut buf = vec![0.0; self.out_ch * pc];
                sgemm(
                    self.out_ch,
                    kd,
                    pc,
                    Mat::row_major(&self.weight.value, kd),
                    Mat::row_major(cols, pc),
                    0.0,
                    &mut buf,
                    0,
                    pc,
                );
                (ch, buf)
            })
            .collect();
        for (ch, buf) in parts {
            let pc = (ch.x1 - ch.x0) * plane;
            let dst = out.sample_mut(ch.n);
            for co in 0..self.out_ch {
                let b = self.bias.as_ref().map_or(0.0, |b| b.value[co]);
                let d = &mut dst[co * ovox + ch.x0 * plane..co * ovox + ch.x1 * plane];
                for (o, v) in d.iter_mut().zip(&buf[co * pc..(co + 1) * pc]) {
                    *o = v + b;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward");
        let isp = x.spatial();
        let osp = self.out_spatial(isp);
        assert_eq!(dy.spatial(), osp, "conv backward shape mismatch");
        let ovox = osp[0] * osp[1] * osp[2];
        let ivox = isp[0] * isp[1] * isp[2];
        let kd = self.kdim();
        let mut dx = Tensor::zeros(x.shape());

        if let Some(bias) = &mut self.bias {
            for n in 0..dy.batch() {
                for co in 0..self.out_ch {
                    bias.grad[co] += dy.channel(n, co).iter().sum::<f32>();
                }
            }
        }

        if self.pointwise() {
            for n in 0..x.batch() {
                sgemm(
                    self.out_ch,
                    ovox,
                    kd,
                    Mat::row_major(dy.sample(n), ovox),
                    Mat::transposed(x.sample(n), ivox),
                    1.0,
                    &mut self.weight.grad,
                    0,
                    kd,
                );
                sgemm(
                    kd,
                    self.out_ch,
                    ivox,
                    Mat::transposed(&self.weight.value, kd),
                    Mat::row_major(dy.sample(n), ovox),
                    0.0,
                    dx.sample_mut(n),
                    0,
                    ivox,
                );
            }
            return dx;
        }

        let plane = osp[1] * osp[2];
        let iplane = isp[1] * isp[2];
        let parts: Vec<(Chunk, Vec<f32>, usize, Vec<f32>)> = self
            .chunks(x.batch(), osp)
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(cols, dcols), ch| {
                    self.im2col(x.sample(ch.n), isp, osp, ch.x0, ch.x1, cols);
                    let pc = (ch.x1 - ch.x0) * plane;
                    let dyv = Mat {
                        data: dy.sample(ch.n),
                        off: ch.x0 * plane,
                        rs: ovox,
                        cs: 1,
                    };
                    let mut dw = vec![0.0; self.out_ch * kd];
                    sgemm(self.out_ch, pc, kd, dyv, Mat::transposed(cols, pc), 0.0, &mut dw, 0, kd);
                    dcols.clear();
                    dcols.resize(kd * pc, 0.0);
                    sgemm(kd, self.out_ch, pc, Mat::transposed(&self.weight.value, kd), dyv, 0.0, dcols, 0, pc);
                    let (ix0, ixn) = self.input_plane_range(ch.x0, ch.x1, isp[0]);
                    let mut dxp = vec![0.0; self.in_ch * ixn * iplane];
                    self.col2im(dcols, isp, osp, ch.x0, ch.x1, ix0, ixn, &mut dxp);
                    (ch, dw, ix0, dxp)
                },
            )
            .collect();

        for (ch, dw, ix0, dxp) in parts {
            for (g, d) in self.weight.grad.iter_mut().zip(&dw) {
                *g += d;
            }
            let ixn = dxp.len() / (self.in_ch * iplane);
            let dst = dx.sample_mut(ch.n);
            for ci in 0..self.in_ch {
                let d = &mut dst[ci * ivox + ix0 * iplane..ci * ivox + (ix0 + ixn) * iplane];
                let s = &dxp[ci * ixn * iplane..(ci + 1) * ixn * iplane];
                for (o, v) in d.iter_mut().zip(s) {
                    *o += v;
                }
            }
        }
        dx
    }
}

fn add_bias(dst: &mut [f32], bias: &[f32], vox: usize) {
    for (c, b) in bias.iter().enumerate() {
        dst[c * vox..(c + 1) * vox].iter_mut().for_each(|v| *v += b);
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Vec<f32>)) {}
}

/// Transposed convolution with kernel 2 and stride 2: halves the channel
/// count (as configured) and doubles every spatial dimension.
///
/// Weights are a row-major `in_ch x (out_ch * 8)` matrix; the 8 columns of an
/// output channel are the offsets `(a, b, c)` in `a*4 + b*2 + c` order.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    in_ch: usize,
    out_ch: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: Param::he_normal(in_ch * out_ch * 8, in_ch, rng),
            bias: Param::zeros(out_ch),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_ch, "transposed conv channel mismatch");
        let isp = x.spatial();
        let osp = [isp[0] * 2, isp[1] * 2, isp[2] * 2];
        let ivox = x.voxels();
        let ovox = 8 * ivox;
        let m = self.out_ch * 8;
        let mut out = Tensor::zeros([x.batch(), self.out_ch, osp[0], osp[1], osp[2]]);
        let mut mbuf = vec![0.0; m * ivox];
        for n in 0..x.batch() {
            sgemm(
                m,
                self.in_ch,
                ivox,
                Mat::transposed(&self.weight.value, m),
                Mat::row_major(x.sample(n), ivox),
                0.0,
                &mut mbuf,
                0,
                ivox,
            );
            let dst = out.sample_mut(n);
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let och = &mut dst[co * ovox..(co + 1) * ovox];
                for t in 0..8 {
                    let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                    let row = &mbuf[(co * 8 + t) * ivox..(co * 8 + t + 1) * ivox];
                    for_each_voxel(isp, |v, xi, yi, zi| {
                        let o = ((2 * xi + a) * osp[1] + 2 * yi + bb) * osp[2] + 2 * zi + c;
                        och[o] = row[v] + b;
                    });
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("transposed conv backward without forward");
        let isp = x.spatial();
        let osp = dy.spatial();
        assert_eq!(osp, [isp[0] * 2, isp[1] * 2, isp[2] * 2]);
        let ivox = x.voxels();
        let ovox = 8 * ivox;
        let m = self.out_ch * 8;
        let mut dx = Tensor::zeros(x.shape());
        let mut dm = vec![0.0; m * ivox];
        for n in 0..x.batch() {
            let src = dy.sample(n);
            for co in 0..self.out_ch {
                let och = &src[co * ovox..(co + 1) * ovox];
                self.bias.grad[co] += och.iter().sum::<f32>();
                for t in 0..8 {
                    let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                    let row = &mut dm[(co * 8 + t) * ivox..(co * 8 + t + 1) * ivox];
                    for_each_voxel(isp, |v, xi, yi, zi| {
                        let o = ((2 * xi + a) * osp[1] + 2 * yi + bb) * osp[2] + 2 * zi + c;
                        row[v] = och[o];
                    });
                }
            }
            sgemm(
                self.in_ch,
                ivox,
                m,
                Mat::row_major(x.sample(n), ivox),
                Mat::transposed(&dm, ivox),
                1.0,
                &mut self.weight.grad,
                0,
                m,
            );
            sgemm(
                self.in_ch,
                m,
                ivox,
                Mat::row_major(&self.weight.value, m),
                Mat::row_major(&dm, ivox),
                0.0,
                dx.sample_mut(n),
                0,
                ivox,
            );
        }
        dx
    }
}

#[inline]
fn for_each_voxel(sp: [usize; 3], mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut v = 0;
    for x in 0..sp[0] {
        for y in 0..sp[1] {
            for z in 0..sp[2] {
                f(v, x, y, z);
                v += 1;
            }
        }
    }
}

impl Module for ConvTranspose3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Vec<f32>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv3d, x: &Tensor) -> Tensor {
        let isp = x.spatial();
        let osp = conv.out_spatial(isp);
        let (k, s, p) = (conv.kernel as isize, conv.stride as isize, conv.pad() as isize);
        let mut out = Tensor::zeros([x.batch(), conv.out_ch, osp[0], osp[1], osp[2]]);
        let ovox = osp.iter().product::<usize>();
        for n in 0..x.batch() {
            for co in 0..conv.out_ch {
                for ox in 0..osp[0] {
                    for oy in 0..osp[1] {
                        for oz in 0..osp[2] {
                            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]) as f64;
                            for ci in 0..conv.in_ch {
                                for kx in 0..k {
                                    for ky in 0..k {
                                        for kz in 0..k {
                                            let ix = ox as isize * s + kx - p;
                                            let iy = oy as isize * s + ky - p;
                                            let iz = oz as isize * s + kz - p;
                                            if ix < 0 || iy < 0 || iz < 0 || ix >= isp[0] as isize || iy >= isp[1] as isize || iz >= isp[2] as isize {
                                                continue;
                                            }
                                            let w = conv.weight.value[(((co * conv.in_ch + ci) * k as usize + kx as usize) * k as usize + ky as usize) * k as usize + kz as usize];
                                            let xi = x.channel(n, ci)[(ix as usize * isp[1] + iy as usize) * isp[2] + iz as usize];
                                            acc += w as f64 * xi as f64;
                                        }
                                    }
                                }
                            }
                            let idx = (n * conv.out_ch + co) * ovox + (ox * osp[1] + oy) * osp[2] + oz;
                            out.data_mut()[idx] = acc as f32;
                        }
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, sp) in [(3, 1, [5, 4, 6]), (3, 2, [6, 5, 4]), (1, 1, [3, 3, 2]), (3, 2, [1, 2, 3])] {
            let conv = {
                let mut c = Conv3d::new(3, 4, k, s, true, &mut rng);
                c.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
                c
            };
            let x = random_tensor([2, 3, sp[0], sp[1], sp[2]], 7);
            let got = conv.infer(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// The backward pass is the adjoint of the (linear) forward pass:
    /// <dy, conv(x)> = <conv^T(dy), x> and weight gradients satisfy the same
    /// identity with respect to the weights.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(2, 3, k, s, true, &mut rng);
            let x = random_tensor([2, 2, 6, 5, 4], 3);
            let y = conv.forward(&x);
            let dy = random_tensor(y.shape(), 4);
            let dx = conv.backward(&dy);
            // bias is zero so forward is linear in x
            assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-3);
            // linear in weights too: <dy, y> = <dW, W>
            let wdot: f64 = conv.weight.grad.iter().zip(&conv.weight.value).map(|(g, w)| *g as f64 * *w as f64).sum();
            assert!((dot(&dy, &y) - wdot).abs() < 1e-3);
            let bsum: f32 = dy.data().iter().sum();
            assert!((conv.bias.as_ref().unwrap().grad.iter().sum::<f32>() - bsum).abs() < 1e-3);
        }
    }

    #[test]
    fn transposed_conv_shapes_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut up = ConvTranspose3d::new(4, 2, &mut rng);
        let x = random_tensor([1, 4, 2, 3, 2], 6);
        let y = up.forward(&x);
        assert_eq!(y.shape(), [1, 2, 4, 6, 4]);
        // each output voxel gets exactly one contribution per input channel
        let w = &up.weight.value;
        let (xi, yi, zi, a, b, c, co) = (1usize, 2usize, 0usize, 1usize, 0usize, 1usize, 1usize);
        let t = a * 4 + b * 2 + c;
        let mut want = 0.0;
        for ci in 0..4 {
            want += w[ci * 16 + co * 8 + t] * x.channel(0, ci)[(xi * 3 + yi) * 2 + zi];
        }
        let got = y.channel(0, co)[((2 * xi + a) * 6 + 2 * yi + b) * 4 + 2 * zi + c];
        assert!((got - want).abs() < 1e-5);
        let dy = random_tensor(y.shape(), 8);
        let dx = up.backward(&dy);
        assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-3);
        let wdot: f64 = up.weight.grad.iter().zip(&up.weight.value).map(|(g, w)| *g as f64 * *w as f64).sum();
        assert!((dot(&dy, &y) - wdot).abs() < 1e-3);
    }
}
