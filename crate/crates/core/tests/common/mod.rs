//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use millie_core::tensor::{Scalar, Tape, Tensor, Var};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- Otsu ----

/// Right-closed bin of `v`: the smallest `k` with `v * bins <= k + 1`.
pub fn bin_of(v: f32, bins: usize) -> usize {
    let x = v as f64 * bins as f64;
    (0..bins).find(|&k| x <= (k + 1) as f64).unwrap_or(bins - 1)
}

pub fn histogram_of(channel: &[f32], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in channel {
        h[bin_of(v, bins)] += 1;
    }
    h
}

/// Brute-force Otsu: evaluates `w0 * w1 * (mu0 - mu1)^2` for every cut in
/// exact rationals and keeps the first maximum.
pub fn otsu_brute(hist: &[u64]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let n = BigRational::from_integer(BigInt::from(total));
    let mut best: Option<(usize, BigRational)> = None;
    for k in 0..hist.len().saturating_sub(1) {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for (i, &c) in hist.iter().enumerate() {
            if i <= k {
                n0 += c;
                s0 += i as u64 * c;
            } else {
                n1 += c;
                s1 += i as u64 * c;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let r = |a: u64| BigRational::from_integer(BigInt::from(a));
        let w0 = r(n0) / &n;
        let w1 = r(n1) / &n;
        let d = r(s0) / r(n0) - r(s1) / r(n1);
        let var = w0 * w1 * &d * &d;
        if var == r(0) {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

// ---- ROC AUC ----

/// Mann-Whitney pair count: wins plus half ties over all positive/negative pairs.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_u, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            twice_u += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_u as f64 / (2 * pos * neg) as f64
}

// ---- PCA ----

pub fn sample_covariance(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = data.len();
    let d = data[0].len();
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for (a, row) in c.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = data.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64;
        }
    }
    c
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// decreasing order with unit eigenvectors.
pub fn jacobi_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mut a = m.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Distance between two axes up to sign.
pub fn axis_distance(a: &[f64], b: &[f64]) -> f64 {
    let plus = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let minus = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    plus.min(minus)
}

/// Dataset with well separated principal variances.
pub fn anisotropic_dataset<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let scales = [6.0, 3.5, 2.0, 1.0, 0.4];
    let mut q = vec![vec![0.0; 5]; 5];
    for row in q.iter_mut() {
        for x in row.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    // Gram-Schmidt into a random rotation.
    for i in 0..5 {
        for j in 0..i {
            let d: f64 = (0..5).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..5 {
                q[i][k] -= d * q[j][k];
            }
        }
        let norm = q[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        q[i].iter_mut().for_each(|x| *x /= norm);
    }
    let shift: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect();
            (0..5).map(|k| shift[k] + (0..5).map(|i| z[i] * q[i][k]).sum::<f64>()).collect()
        })
        .collect()
}

// ---- Gradients ----

/// Central-difference step: the power of two nearest 1e-5, so `x +- h` is
/// exact at the dyadic test points.
pub const FD_STEP: f64 = 1.0 / 131072.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    ConvInput,
    ConvKernels,
    ConvBias,
    Relu,
    MaxPool,
    GlobalMax,
    StackRows,
    MaxReduce,
    AffineX,
    AffineW,
    AffineB,
    Softmax,
    CrossEntropy,
    SoftmaxCrossEntropy,
    WeightedSum,
}

impl GradOp {
    pub const ALL: [GradOp; 15] = [
        GradOp::ConvInput,
        GradOp::ConvKernels,
        GradOp::ConvBias,
        GradOp::Relu,
        GradOp::MaxPool,
        GradOp::GlobalMax,
        GradOp::StackRows,
        GradOp::MaxReduce,
        GradOp::AffineX,
        GradOp::AffineW,
        GradOp::AffineB,
        GradOp::Softmax,
        GradOp::CrossEntropy,
        GradOp::SoftmaxCrossEntropy,
        GradOp::WeightedSum,
    ];
}

/// One gradient-check instance. All values are f32-representable so the
/// same point can be evaluated in either precision.
pub struct GradCase {
    pub op: GradOp,
    pub point: Tensor<f64>,
    pub consts: Vec<Tensor<f64>>,
    pub weights: Vec<f64>,
    pub target: usize,
}

/// Random multiples of 1/256: exact in f32, and short enough that sums of
/// products stay exact in f64.
fn f32_values<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = ((lo * 256.0) as i64, (hi * 256.0) as i64);
    (0..n).map(|_| rng.gen_range(a..b) as f64 / 256.0).collect()
}

/// Distinct nonzero multiples of 1/256 in (-1, 1), shuffled: keeps every max
/// and ReLU comparison far from a tie.
fn spread_values<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut pool: Vec<i64> = (-255..=255).filter(|&v| v != 0).collect();
    pool.shuffle(rng);
    pool[..n].iter().map(|&v| v as f64 / 256.0).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl GradCase {
    pub fn random<R: Rng>(op: GradOp, rng: &mut R) -> Self {
        let (ci, co, hw) = (2, 3, 5);
        let x_shape = [ci, hw, hw];
        let k_shape = [co, ci, 3, 3];
        let conv_out = co * hw * hw;
        let (point, consts, out_len) = match op {
            GradOp::ConvInput => (
                t(&x_shape, f32_values(rng, ci * hw * hw, -1.0, 1.0)),
                vec![t(&k_shape, f32_values(rng, co * ci * 9, -1.0, 1.0)), t(&[co], f32_values(rng, co, -1.0, 1.0))],
                conv_out,
            ),
            GradOp::ConvKernels => (
                t(&k_shape, f32_values(rng, co * ci * 9, -1.0, 1.0)),
                vec![t(&x_shape, f32_values(rng, ci * hw * hw, -1.0, 1.0)), t(&[co], f32_values(rng, co, -1.0, 1.0))],
                conv_out,
            ),
            GradOp::ConvBias => (
                t(&[co], f32_values(rng, co, -1.0, 1.0)),
                vec![t(&x_shape, f32_values(rng, ci * hw * hw, -1.0, 1.0)), t(&k_shape, f32_values(rng, co * ci * 9, -1.0, 1.0))],
                conv_out,
            ),
            GradOp::Relu => (t(&[3, 4, 4], spread_values(rng, 48)), vec![], 48),
            GradOp::MaxPool => (t(&[2, 6, 6], spread_values(rng, 72)), vec![], 18),
            GradOp::GlobalMax => (t(&[3, 4, 4], spread_values(rng, 48)), vec![], 3),
            GradOp::StackRows => (t(&[6], f32_values(rng, 6, -1.0, 1.0)), vec![t(&[6], f32_values(rng, 6, -1.0, 1.0))], 18),
            GradOp::MaxReduce => (t(&[5, 8], spread_values(rng, 40)), vec![], 8),
            GradOp::AffineX => (
                t(&[6], f32_values(rng, 6, -1.0, 1.0)),
                vec![t(&[6, 4], f32_values(rng, 24, -1.0, 1.0)), t(&[4], f32_values(rng, 4, -1.0, 1.0))],
                4,
            ),
            GradOp::AffineW => (
                t(&[6, 4], f32_values(rng, 24, -1.0, 1.0)),
                vec![t(&[6], f32_values(rng, 6, -1.0, 1.0)), t(&[4], f32_values(rng, 4, -1.0, 1.0))],
                4,
            ),
            GradOp::AffineB => (
                t(&[4], f32_values(rng, 4, -1.0, 1.0)),
                vec![t(&[6], f32_values(rng, 6, -1.0, 1.0)), t(&[6, 4], f32_values(rng, 24, -1.0, 1.0))],
                4,
            ),
            GradOp::Softmax => (t(&[5], f32_values(rng, 5, -2.0, 2.0)), vec![], 5),
            GradOp::CrossEntropy => (t(&[4], f32_values(rng, 4, 0.2, 1.0)), vec![], 1),
            GradOp::SoftmaxCrossEntropy => (t(&[5], f32_values(rng, 5, -2.0, 2.0)), vec![], 1),
            GradOp::WeightedSum => (t(&[7], f32_values(rng, 7, -1.0, 1.0)), vec![], 7),
        };
        let weights = f32_values(rng, out_len, -1.0, 1.0);
        let n_classes = match op {
            GradOp::CrossEntropy => 4,
            _ => 5,
        };
        GradCase {
            op,
            point,
            consts,
            weights,
            target: rng.gen_range(0..n_classes),
        }
    }

    /// Records the objective for this case on `tape` given the input node.
    pub fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mut c = self.consts.iter().map(|k| k.cast::<T>()).collect::<Vec<_>>().into_iter();
        let mut next = |tape: &mut Tape<T>| tape.input(c.next().unwrap());
        let out = match self.op {
            GradOp::ConvInput => {
                let (k, b) = (next(tape), next(tape));
                tape.conv2d(x, k, b, 1, 1).unwrap()
            }
            GradOp::ConvKernels => {
                let (i, b) = (next(tape), next(tape));
                tape.conv2d(i, x, b, 1, 1).unwrap()
            }
            GradOp::ConvBias => {
                let (i, k) = (next(tape), next(tape));
                tape.conv2d(i, k, x, 1, 1).unwrap()
            }
            GradOp::Relu => tape.relu(x),
            GradOp::MaxPool => tape.max_pool2(x).unwrap(),
            GradOp::GlobalMax => tape.global_max(x).unwrap(),
            GradOp::StackRows => {
                let other = next(tape);
                tape.stack_rows(&[x, other, x]).unwrap()
            }
            GradOp::MaxReduce => tape.max_reduce_instances(x).unwrap().0,
            GradOp::AffineX => {
                let (w, b) = (next(tape), next(tape));
                tape.affine(x, w, b).unwrap()
            }
            GradOp::AffineW => {
                let (xi, b) = (next(tape), next(tape));
                tape.affine(xi, x, b).unwrap()
            }
            GradOp::AffineB => {
                let (xi, w) = (next(tape), next(tape));
                tape.affine(xi, w, x).unwrap()
            }
            GradOp::Softmax => tape.softmax(x).unwrap(),
            GradOp::CrossEntropy => return tape.cross_entropy(x, self.target).unwrap(),
            GradOp::SoftmaxCrossEntropy => {
                let p = tape.softmax(x).unwrap();
                return tape.cross_entropy(p, self.target).unwrap();
            }
            GradOp::WeightedSum => x,
        };
        let w = self.weights.iter().map(|&v| T::of_f64(v)).collect();
        tape.weighted_sum(out, w).unwrap()
    }

    /// Autodiff gradient of the objective in precision `T`.
    pub fn analytic<T: Scalar>(&self) -> Vec<f64> {
        let mut tape = Tape::<T>::new();
        let x = tape.watched(self.point.cast::<T>());
        let out = self.build(&mut tape, x);
        let grads = tape.backward(out);
        match grads.get(x) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; self.point.len()],
        }
    }

    pub fn value<T: Scalar>(&self, p: &Tensor<f64>) -> f64 {
        let mut tape = Tape::<T>::new();
        let x = tape.input(p.cast::<T>());
        let out = self.build(&mut tape, x);
        tape.value(out).data()[0].as_f64()
    }

    /// Central differences of the objective evaluated in precision `T`.
    pub fn numeric<T: Scalar>(&self, eps: f64) -> Vec<f64> {
        (0..self.point.len())
            .map(|i| {
                let mut plus = self.point.clone();
                plus.data_mut()[i] += eps;
                let mut minus = self.point.clone();
                minus.data_mut()[i] -= eps;
                (self.value::<T>(&plus) - self.value::<T>(&minus)) / (2.0 * eps)
            })
            .collect()
    }
}

/// Largest componentwise `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
