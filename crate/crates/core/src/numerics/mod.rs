//! Dense tensors and the reverse-mode tape every model component runs on.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Activation, BatchStats, Gradients, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_grad_ok<F>(f: F, inputs: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
    {
        let report = gradcheck::check(f, inputs, 1e-5, 1e-4, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, &[3, 3]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(eye), tape.constant(m.clone()));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &m);

        let x = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3]));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((tape.value(c).at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_naming_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Tensor::new(&[1, 6], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let w = tape.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(vx, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv1d_output_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 8]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
    }

    #[test]
    fn conv1d_too_short() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv1d(x, w, b, 1, 1), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn conv1d_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c_in, c_out, len, k, stride, pad) = (3, 4, 11, 5, 2, 2);
        let x = random(&mut rng, &[c_in, len]);
        let w = random(&mut rng, &[c_out, c_in, k]);
        let b = random(&mut rng, &[c_out]);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1d(vx, vw, vb, stride, pad).unwrap();
        let out_len = (len + 2 * pad - k) / stride + 1;
        let mut padded = vec![vec![0.0; len + 2 * pad]; c_in];
        for ci in 0..c_in {
            for t in 0..len {
                padded[ci][t + pad] = x.at(ci, t);
            }
        }
        for co in 0..c_out {
            for o in 0..out_len {
                let mut s = b.data()[co];
                for ci in 0..c_in {
                    for kk in 0..k {
                        s += w.data()[(co * c_in + ci) * k + kk] * padded[ci][o * stride + kk];
                    }
                }
                assert!((tape.value(y).at(co, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(&[2, 5], 1.5));
        let p = tape.max_pool_time(c).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 1.5]);

        let mut spike = vec![0.0; 8];
        spike[3] = 7.0;
        let s = tape.leaf(Tensor::new(&[1, 8], spike).unwrap().with_grad());
        let p = tape.max_pool_time(s).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random(&mut rng, &[4, 50]);
        let v = tape.constant(r.clone());
        let p = tape.max_pool_time(v).unwrap();
        for ch in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for t in 0..50 {
                if r.at(ch, t) > best {
                    best = r.at(ch, t);
                }
            }
            assert_eq!(tape.value(p).data()[ch], best);
        }
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 4], vec![1.0, 3.0, 3.0, 0.0]).unwrap().with_grad());
        let p = tape.max_pool_time(x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let z = tape.constant(Tensor::row(&[0.0]));
        let t = tape.tanh(z);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(t).data(), &[0.0]);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let u = tape.constant(Tensor::row(&[0.3; 4]));
        let sm = tape.softmax(u);
        for v in tape.value(sm).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[6.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[1.0, -2.0, 0.5]).with_grad());
        let b = tape.leaf(Tensor::row(&[4.0, 5.0, 6.0]).with_grad());
        let unused = tape.leaf(Tensor::row(&[9.0]).with_grad());
        let ab = tape.mul(a, b).unwrap();
        let loss = tape.sum(ab);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]).with_grad());
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Rank { .. })));
    }

    #[test]
    fn gradients_of_dense_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[2])];
        assert_grad_ok(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                let y = t.tanh(y);
                let m = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(m);
                let p = t.mul(y, s)?;
                let q = t.softmax(p);
                let r = t.sub(q, y)?;
                let sq = t.mul(r, r)?;
                Ok(t.sum(sq))
            },
            &inputs,
        );
    }

    #[test]
    fn gradients_of_structural_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 2]), random(&mut rng, &[5, 3])];
        assert_grad_ok(
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let s = t.slice_cols(c, 1, 4)?;
                let tiled = t.tile_cols(v[1], 2)?;
                let e = t.exp(tiled);
                let sp = t.softplus(s);
                let rows = t.concat_rows(&[sp, v[0]])?;
                let g = t.gather_rows(v[2], &[4, 1, 1, 0])?;
                let prod = t.mul(rows, g)?;
                let tr = t.transpose(prod)?;
                let sr = t.slice_rows(tr, 1, 3)?;
                let cl = t.clamp(sr, -0.3, 0.3);
                let rs = t.reshape(cl, &[8])?;
                let w = t.weighted_sum(rs, &[1.0, -2.0, 0.5, 3.0, 1.0, 1.0, -1.0, 0.25])?;
                let row = t.slice_rows(e, 0, 1)?;
                let row = t.slice_cols(row, 1, 3)?;
                let e0 = t.add_row(v[1], row)?;
                let scaled = t.scale(e0, 0.7);
                let extra = t.sum(scaled);
                t.add(w, extra)
            },
            &inputs,
        );
    }

    #[test]
    fn gradients_of_encoder_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [
            random(&mut rng, &[2, 9]),
            random(&mut rng, &[3, 2, 3]),
            random(&mut rng, &[3]),
            random(&mut rng, &[3]),
            random(&mut rng, &[3]),
        ];
        assert_grad_ok(
            |t, v| {
                let c = t.conv1d(v[0], v[1], v[2], 2, 1)?;
                let n = t.batch_norm(c, v[3], v[4])?;
                let r = t.tanh(n);
                let p = t.max_pool_time(r)?;
                t.weighted_sum(p, &[1.0, 0.5, -1.5])
            },
            &inputs,
        );
        assert_grad_ok(
            |t, v| {
                let c = t.conv1d(v[0], v[1], v[2], 1, 2)?;
                let n = t.batch_norm_eval(c, v[3], v[4], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?;
                let sq = t.mul(n, n)?;
                Ok(t.sum(sq))
            },
            &inputs,
        );
    }

    #[test]
    fn gradients_of_loss_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
        assert_grad_ok(
            |t, v| {
                let kl = t.kl_diag_normal(v[0], v[1])?;
                let k = t.weighted_sum(kl, &[0.2, 0.3, 0.5])?;
                let e = t.weighted_sq_err(v[0], v[2], &[1.0, 0.5, 2.0])?;
                t.add(k, e)
            },
            &inputs,
        );
    }

    #[test]
    fn gradients_of_mixture_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut kappa = random(&mut rng, &[2, 3]);
        for v in kappa.data_mut() {
            *v = (*v + 1.0) * 1.5;
        }
        let mut sigma = random(&mut rng, &[2, 3]);
        for v in sigma.data_mut() {
            *v = 0.6 + v.abs();
        }
        let inputs = [random(&mut rng, &[2, 3]), kappa, sigma, random(&mut rng, &[2, 4, 5])];
        assert_grad_ok(
            |t, v| {
                let pi = t.softmax(v[0]);
                let c = t.mixture_read(pi, v[1], v[2], v[3], &[4, 3])?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            },
            &inputs,
        );
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 1.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.batch_norm(x, g, b).unwrap();
        for ch in 0..2 {
            let row = tape.value(y).row_slice(ch);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        let stats = tape.batch_stats(y).unwrap();
        assert_eq!(stats.mean, vec![2.5, 0.0]);
        assert_eq!(stats.var, vec![1.25, 1.0]);
    }
}
