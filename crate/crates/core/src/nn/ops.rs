//! Tape-free forward passes. These run the same kernels as the [`Tape`]
//! methods, so a value computed here is bit-identical to the recorded one.
//!
//! [`Tape`]: super::Tape

use super::kernels;
use super::tape::{ce_dims, conv_dims, linear_dims, pool_dims};
use super::tensor::Tensor;
use crate::error::Result;

/// 3x3 convolution, padding 1, stride 1: `[C_in,H,W] -> [C_out,H,W]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = conv_dims(input.shape(), weights.shape(), bias.shape())?;
    let c_out = weights.shape()[0];
    let (out, _) =
        kernels::conv3x3_forward(input.data(), weights.data(), bias.data(), c_in, c_out, h, w);
    Ok(Tensor::from_parts(vec![c_out, h, w], out))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let out = input
        .data()
        .iter()
        .map(|&x| if x > 0.0 { x } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub fn maxpool2x2_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_dims(input.shape())?;
    let (out, _) = kernels::maxpool2x2_forward(input.data(), c, h, w);
    Ok(Tensor::from_parts(vec![c, h / 2, w / 2], out))
}

pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, f_in, f_out) = linear_dims(input.shape(), weights.shape(), bias.shape())?;
    let out = kernels::linear_forward(
        input.data(),
        weights.data(),
        bias.data(),
        batch,
        f_in,
        f_out,
    );
    Ok(Tensor::from_parts(vec![batch, f_out], out))
}

/// Mean cross-entropy of `targets` under the row softmax of `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (_, k) = ce_dims(logits.shape(), targets)?;
    Ok(kernels::softmax_cross_entropy(logits.data(), targets, k).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Convolution by definition: every tap, explicit zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = w.shape()[0];
        Tensor::from_fn(&[c_out, h, wd], |idx| {
            let co = idx / (h * wd);
            let y = (idx / wd) % h;
            let xx = idx % wd;
            let mut acc = b.data()[co];
            for ci in 0..c_in {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w.at(&[co, ci, ky, kx]) * x.at(&[ci, sy as usize, sx as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_single_tap() {
        let mut w = vec![0.0; 9];
        w[4] = 3.0;
        let out = conv2d_forward(
            &t(&[1, 1, 1], &[2.0]),
            &t(&[1, 1, 3, 3], &w),
            &t(&[1], &[1.0]),
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_zero_weights_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 5, 4], &mut rng);
        let out = conv2d_forward(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::zeros(&[2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_box_kernel_matches_direct_sum() {
        // Each output of a 2x2 image with a 3x3 box sees all four pixels once.
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let b = t(&[1], &[0.0]);
        let out = conv2d_forward(&x, &w, &b).unwrap();
        let oracle = conv_oracle(&x, &w, &b);
        assert_eq!(oracle.data(), &[10.0, 10.0, 10.0, 10.0]);
        assert_eq!(out.data(), oracle.data());
    }

    #[test]
    fn conv_random_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (c_in, c_out, h, w) in [(1, 1, 1, 1), (2, 3, 5, 7), (4, 2, 8, 3), (3, 5, 1, 6)] {
            let x = random(&[c_in, h, w], &mut rng);
            let wt = random(&[c_out, c_in, 3, 3], &mut rng);
            let b = random(&[c_out], &mut rng);
            let out = conv2d_forward(&x, &wt, &b).unwrap();
            let oracle = conv_oracle(&x, &wt, &b);
            for (a, e) in out.data().iter().zip(oracle.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 6, 6], &mut rng);
        let y = random(&[2, 6, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[3]);
        let (a, b) = (1.7, -0.4);
        let combo = Tensor::from_fn(&[2, 6, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d_forward(&combo, &w, &zero).unwrap();
        let fx = conv2d_forward(&x, &w, &zero).unwrap();
        let fy = conv2d_forward(&y, &w, &zero).unwrap();
        for i in 0..lhs.numel() {
            let rhs = a * fx.data()[i] + b * fy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(
            relu_forward(&t(&[3], &[-1.0, 0.0, 2.5])).data(),
            &[0.0, 0.0, 2.5]
        );
        assert!(relu_forward(&t(&[2], &[-3.0, -0.1]))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_examples() {
        let out = maxpool2x2_forward(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let c = maxpool2x2_forward(&t(&[1, 2, 2], &[5.0; 4])).unwrap();
        assert_eq!(c.data(), &[5.0]);
        assert!(maxpool2x2_forward(&t(&[1, 1, 4], &[0.0; 4])).is_err());
    }

    #[test]
    fn maxpool_random_matches_window_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(&[1, 4, 4], &mut rng);
        let out = maxpool2x2_forward(&x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(&[0, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(out.at(&[0, oy, ox]), m);
            }
        }
        // odd sizes floor
        let odd = maxpool2x2_forward(&random(&[2, 5, 7], &mut rng)).unwrap();
        assert_eq!(odd.shape(), &[2, 2, 3]);
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let out = linear_forward(
            &x,
            &t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]),
            &Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
        let id =
            linear_forward(&x, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(id.data(), x.data());
        assert!(linear_forward(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn linear_random_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let b = random(&[5], &mut rng);
        let out = linear_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for i in 0..4 {
                    acc += x.at(&[r, i]) * w.at(&[o, i]);
                }
                assert!((out.at(&[r, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-12);
        let confident = softmax_cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(confident.is_finite() && confident.abs() < 1e-12);
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[5]).is_err());
    }

    #[test]
    fn cross_entropy_random_matches_direct_formula() {
        // Direct formula with log-sum-exp evaluated around zero (no shift) is
        // safe for these magnitudes and independent of the stabilised path.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let logits = random(&[2, 3], &mut rng);
        let targets = [2, 0];
        let mut expect = 0.0;
        for (r, &tg) in targets.iter().enumerate() {
            let z: f64 = (0..3).map(|k| logits.at(&[r, k]).exp()).sum();
            expect += -(logits.at(&[r, tg]).exp() / z).ln();
        }
        expect /= 2.0;
        let got = softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }
}
