#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twins_core::network::{bn_affine_names, conv_name, AffineSet};
use twins_core::{BranchMode, Head, Model, ModelConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// 64-bit MiniCNN on `[2, 6, 6]` inputs with 3 target and 4 source classes,
/// randomized affines and distinct frozen/running statistics.
pub fn tiny_model(seed: u64, eps: f64) -> Model<f64> {
    let mut r = rng(seed);
    let mut cfg = ModelConfig::new([2, 6, 6], 3);
    cfg.widths = vec![3, 4];
    cfg.source_classes = Some(4);
    cfg.eps = eps;
    cfg.dtype = twins_core::DType::F64;
    let mut m = Model::<f64>::new(cfg, &mut r).unwrap();
    for l in 0..m.num_layers() {
        for set in [AffineSet::Adaptive, AffineSet::Frozen] {
            let (g, b) = bn_affine_names(l, set);
            for v in m.params.get_mut(&g).unwrap().data_mut() {
                *v = r.random_range(0.6..1.4);
            }
            for v in m.params.get_mut(&b).unwrap().data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
        let s = &mut m.bn[l];
        for v in s.frozen_mean.iter_mut().chain(s.running_mean.iter_mut()) {
            *v = r.random_range(-0.2..0.2);
        }
        for v in s.frozen_var.iter_mut().chain(s.running_var.iter_mut()) {
            *v = r.random_range(0.3..1.5);
        }
    }
    for name in ["head.bias", "source_head.bias"] {
        for v in m.params.get_mut(name).unwrap().data_mut() {
            *v = r.random_range(-0.2..0.2);
        }
    }
    m
}

pub fn tiny_batch(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let x = uniform(&[n, 2, 6, 6], 0.0, 1.0, &mut r);
    let y = (0..n).map(|_| r.random_range(0..3)).collect();
    (x, y)
}

fn at4(shape: &[usize], i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * shape[1] + j) * shape[2] + k) * shape[3] + l
}

/// Direct-loop 3×3, stride 2, pad 1 cross-correlation.
pub fn conv_direct(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, c, h, w, o) = (xs[0], xs[1], xs[2], xs[3], ks[0]);
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let shape = [n, o, oh, ow];
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for p in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..3 {
                            for j in 0..3 {
                                let (r, s) = ((p * 2 + i) as isize - 1, (q * 2 + j) as isize - 1);
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += x.data()[at4(xs, b, ic, r as usize, s as usize)] * k.data()[at4(ks, oc, ic, i, j)];
                            }
                        }
                    }
                    out[at4(&shape, b, oc, p, q)] = acc;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

/// Per-channel mean and biased variance of `[N, C, H, W]`.
pub fn channel_stats(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s[0] * s[2] * s[3]) as f64;
    let mut mean = vec![0.0; s[1]];
    let mut var = vec![0.0; s[1]];
    for c in 0..s[1] {
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|b| (0..s[2]).flat_map(move |i| (0..s[3]).map(move |j| (b, i, j))))
            .map(|(b, i, j)| x.data()[at4(s, b, c, i, j)])
            .collect();
        mean[c] = vals.iter().sum::<f64>() / m;
        var[c] = vals.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / m;
    }
    (mean, var)
}

/// Which statistics and affines the oracle normalizes with.
#[derive(Clone, Copy)]
pub enum OracleNorm {
    Branch(BranchMode),
    /// Batch statistics with the frozen affines.
    BatchWithFrozenAffine,
}

pub struct OracleOut {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Batch statistics of each layer's pre-normalization activations.
    pub pre_norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Forward pass written with plain loops, independent of the tape.
pub fn oracle_forward(m: &Model<f64>, x: &Tensor<f64>, norm: OracleNorm, head: Head) -> OracleOut {
    let mut h = x.clone();
    let mut pre_norm_stats = Vec::new();
    for l in 0..m.num_layers() {
        let z = conv_direct(&h, m.params.get(&conv_name(l)).unwrap());
        let (bm, bv) = channel_stats(&z);
        let st = &m.bn[l];
        let (mean, var, set) = match norm {
            OracleNorm::Branch(BranchMode::AdaptiveTrain) => (bm.clone(), bv.clone(), AffineSet::Adaptive),
            OracleNorm::Branch(BranchMode::FrozenTrain) => {
                (st.frozen_mean.clone(), st.frozen_var.clone(), AffineSet::Frozen)
            }
            OracleNorm::Branch(BranchMode::Inference) => {
                (st.running_mean.clone(), st.running_var.clone(), AffineSet::Adaptive)
            }
            OracleNorm::BatchWithFrozenAffine => (bm.clone(), bv.clone(), AffineSet::Frozen),
        };
        pre_norm_stats.push((bm, bv));
        let (gn, bn) = bn_affine_names(l, set);
        let (g, b) = (m.params.get(&gn).unwrap().data(), m.params.get(&bn).unwrap().data());
        let s = z.shape().to_vec();
        let mut out = z.data().to_vec();
        for (idx, v) in out.iter_mut().enumerate() {
            let c = (idx / (s[2] * s[3])) % s[1];
            let y = g[c] * (*v - mean[c]) / (var[c] + st.eps).sqrt() + b[c];
            *v = y.max(0.0);
        }
        h = Tensor::new(s, out).unwrap();
    }
    let s = h.shape();
    let features: Vec<Vec<f64>> = (0..s[0])
        .map(|b| {
            (0..s[1])
                .map(|c| {
                    let mut acc = 0.0;
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            acc += h.data()[at4(s, b, c, i, j)];
                        }
                    }
                    acc / (s[2] * s[3]) as f64
                })
                .collect()
        })
        .collect();
    let prefix = match head {
        Head::Target => "head",
        Head::Source => "source_head",
    };
    let w = m.params.get(&format!("{prefix}.weight")).unwrap();
    let bias = m.params.get(&format!("{prefix}.bias")).unwrap().data();
    let k = w.shape()[1];
    let logits = features
        .iter()
        .map(|f| {
            (0..k)
                .map(|j| bias[j] + f.iter().enumerate().map(|(i, fi)| fi * w.data()[i * k + j]).sum::<f64>())
                .collect()
        })
        .collect();
    OracleOut {
        features,
        logits,
        pre_norm_stats,
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn mean_ce(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    logits.iter().zip(y).map(|(z, &c)| -log_softmax(z)[c]).sum::<f64>() / y.len() as f64
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`.
pub fn mean_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let (la, lb) = (log_softmax(a), log_softmax(b));
            la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum::<f64>()
        })
        .sum::<f64>()
        / p.len() as f64
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
