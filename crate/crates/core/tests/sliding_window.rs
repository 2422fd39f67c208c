use aortaseg::error::Result;
use aortaseg::infer::{sliding_window_predict, Blend, Predictor, WindowConfig};
use aortaseg::nn::Tensor;
use aortaseg::segresnet::{build_model, ArchConfig};
use aortaseg::volume::{Volume, VolumeKind};

/// Class-1 logit depends on the voxel value and its position inside the
/// window, so the blend weights matter.
struct PositionStub;

impl Predictor for PositionStub {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let v = x.voxels();
        let mut out = vec![0.0; 2 * v];
        for (i, val) in x.data().iter().enumerate() {
            out[v + i] = 0.01 * val - 0.3 * (i % 7) as f32 + 0.1 * (i / 16) as f32;
        }
        Tensor::from_vec([1, 2, x.spatial()[0], x.spatial()[1], x.spatial()[2]], out)
    }
}

fn starts_oracle(size: usize, roi: usize, stride: usize) -> Vec<usize> {
    let mut s = vec![0];
    while s.last().unwrap() + roi < size {
        let next = s.last().unwrap() + stride;
        s.push(next.min(size - roi));
    }
    s
}

fn gaussian(roi: usize, i: usize) -> f64 {
    let c = (roi as f64 - 1.0) / 2.0;
    let sigma = 0.125 * roi as f64;
    (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Direct accumulation of windowed softmax outputs.
fn oracle(image: &Volume, roi: usize, overlap: f64, blend: Blend) -> Vec<f64> {
    let [n, _, _] = image.shape();
    let stride = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let starts = starts_oracle(n, roi, stride);
    let v = n * n * n;
    let mut acc = vec![0.0; v];
    let mut wsum = vec![0.0; v];
    for &sx in &starts {
        for &sy in &starts {
            for &sz in &starts {
                let mut win = Vec::new();
                for x in 0..roi {
                    for y in 0..roi {
                        for z in 0..roi {
                            win.push(image.get(sx + x, sy + y, sz + z));
                        }
                    }
                }
                let l = PositionStub.predict_logits(&Tensor::from_vec([1, 1, roi, roi, roi], win).unwrap()).unwrap();
                let rv = roi * roi * roi;
                for x in 0..roi {
                    for y in 0..roi {
                        for z in 0..roi {
                            let i = (x * roi + y) * roi + z;
                            let w = match blend {
                                Blend::Gaussian => gaussian(roi, x) * gaussian(roi, y) * gaussian(roi, z),
                                Blend::Constant => 1.0,
                            };
                            let p1 = 1.0 / (1.0 + (-(l.data()[rv + i] as f64 - l.data()[i] as f64)).exp());
                            let o = ((sx + x) * n + sy + y) * n + sz + z;
                            acc[o] += w * p1;
                            wsum[o] += w;
                        }
                    }
                }
            }
        }
    }
    acc.iter().zip(&wsum).map(|(a, w)| a / w).collect()
}

#[test]
fn blended_output_matches_accumulation_oracle() {
    let n = 8;
    let data: Vec<f32> = (0..n * n * n).map(|i| ((i * 37) % 101) as f32 - 50.0).collect();
    let image = Volume::new(data, [n; 3], [1.0; 3], [0.0; 3], VolumeKind::Image).unwrap();
    for overlap in [0.25, 0.5] {
        for blend in [Blend::Gaussian, Blend::Constant] {
            let cfg = WindowConfig {
                blend,
                ..WindowConfig::new([4; 3], overlap)
            };
            let got = sliding_window_predict(&PositionStub, &image, &cfg).unwrap();
            let want = oracle(&image, 4, overlap, blend);
            for i in 0..n * n * n {
                assert!((got.class(1)[i] as f64 - want[i]).abs() < 1e-6, "overlap {overlap} voxel {i}");
                assert!((got.class(0)[i] as f64 + got.class(1)[i] as f64 - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_window_equals_forward_softmax() {
    let arch = ArchConfig {
        init_filters: 4,
        blocks_per_stage: vec![1, 1, 1],
        deep_supervision_levels: 1,
        ..ArchConfig::default()
    };
    let model = build_model(&arch, 3).unwrap();
    let n = 16;
    let data: Vec<f32> = (0..n * n * n).map(|i| ((i as f32) * 0.37).sin()).collect();
    let image = Volume::new(data.clone(), [n; 3], [0.7, 0.7, 1.0], [0.0; 3], VolumeKind::Image).unwrap();
    let got = sliding_window_predict(&model, &image, &WindowConfig::new([n; 3], 0.25)).unwrap();
    let logits = model.infer(&Tensor::from_vec([1, 1, n, n, n], data).unwrap()).unwrap().logits;
    let v = n * n * n;
    let l = logits.data();
    for i in 0..v {
        let p1 = 1.0 / (1.0 + ((l[i] - l[v + i]) as f64).exp());
        assert!((got.class(1)[i] as f64 - p1).abs() < 1e-6);
    }
}

#[test]
fn roi_must_respect_model_divisor() {
    let model = build_model(&ArchConfig::default(), 0).unwrap();
    let image = Volume::filled(0.0, [8, 8, 8], [1.0; 3], VolumeKind::Image).unwrap();
    let e = sliding_window_predict(&model, &image, &WindowConfig::new([12, 16, 16], 0.25)).unwrap_err();
    assert_eq!(e.kind(), "shape");
}
