use super::*;
use crate::gradcheck;
use crate::rng::{StreamId, StreamRng};
use crate::tensor::Tensor;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

/// Direct six-loop cross-correlation, the independent oracle for conv2d.
fn naive_conv(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, cin, h, wid): (usize, usize, usize, usize),
    spec: &ConvSpec,
) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (oh, ow) = spec.out_extent(h, wid).unwrap();
    let cout = spec.out_channels;
    let mut out = vec![0.0; n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * sh + ki) as isize - ph as isize;
                                let ix = (ox * sw + kj) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wid {
                                    continue;
                                }
                                acc += x[((img * cin + ci) * h + iy as usize) * wid + ix as usize]
                                    * w[((co * cin + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((img * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_one_by_one_unit_kernel_is_identity() {
    let spec = ConvSpec::conv(1, 1, (1, 1));
    let x = t(&[0.1, 0.7, -0.3, 0.9, 0.2, 0.5], &[1, 1, 2, 3]);
    let w = t(&[1.0], &[1, 1, 1, 1]);
    let b = t(&[0.0], &[1]);
    let y = conv2d(&x, &w, &b, &spec).unwrap();
    assert_eq!(*y.data(), *x.data());
}

#[test]
fn conv_ones_kernel_counts_interior_neighbors() {
    let spec = ConvSpec::conv(1, 1, (3, 3)).with_padding((1, 1));
    let c = 0.4;
    let x = Tensor::full(&[1, 1, 5, 6], c);
    let w = t(&[1.0; 9], &[1, 1, 3, 3]);
    let b = t(&[0.0], &[1]);
    let y = conv2d(&x, &w, &b, &spec).unwrap();
    // Interior pixels see all nine neighbors.
    let yd = y.data();
    for iy in 1..4 {
        for ix in 1..5 {
            assert!((yd[iy * 6 + ix] - 9.0 * c).abs() < 1e-12);
        }
    }
    // A corner sees only four.
    assert!((yd[0] - 4.0 * c).abs() < 1e-12);
}

#[test]
fn conv_matches_direct_convolution_oracle() {
    let mut rng = StreamRng::new(5, StreamId::Data);
    let spec = ConvSpec::conv(2, 3, (3, 3)).with_padding((1, 1));
    let dims = (2, 2, 6, 10);
    let x: Vec<f64> = (0..2 * 2 * 6 * 10).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let want = naive_conv(&x, &w, &b, dims, &spec);
    let got = conv2d(
        &t(&x, &[2, 2, 6, 10]),
        &t(&w, &[3, 2, 3, 3]),
        &t(&b, &[3]),
        &spec,
    )
    .unwrap();
    for (g, wv) in got.data().iter().zip(&want) {
        assert!((g - wv).abs() < 1e-10);
    }
}

#[test]
fn conv_channel_mismatch_errors() {
    let spec = ConvSpec::conv(3, 1, (1, 1));
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let w = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
    let b = Tensor::<f64>::zeros(&[1]);
    assert!(conv2d(&x, &w, &b, &spec).is_err());
}

#[test]
fn conv_transpose_unit_kernel_is_identity() {
    let spec = ConvSpec::conv(1, 1, (1, 1)).transposed();
    let x = t(&[0.3, -0.2, 0.8, 0.1], &[1, 1, 2, 2]);
    let w = t(&[1.0], &[1, 1, 1, 1]);
    let b = t(&[0.0], &[1]);
    let y = conv_transpose2d(&x, &w, &b, &spec).unwrap();
    assert_eq!(*y.data(), *x.data());
}

#[test]
fn conv_transpose_on_single_pixel_reproduces_kernel() {
    let spec = ConvSpec::conv(1, 1, (2, 2)).with_stride((2, 2)).transposed();
    let x = t(&[1.0], &[1, 1, 1, 1]);
    let w = t(&[0.1, 0.2, 0.3, 0.4], &[1, 1, 2, 2]);
    let b = t(&[0.0], &[1]);
    let y = conv_transpose2d(&x, &w, &b, &spec).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(*y.data(), vec![0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv_input_gradient() {
    let mut rng = StreamRng::new(9, StreamId::Data);
    // Shared raw weight: [3, 2, kh, kw] in both layouts.
    let (kh, kw) = (3, 2);
    let wdata: Vec<f64> = (0..3 * 2 * kh * kw).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let t_spec = ConvSpec {
        in_channels: 3,
        out_channels: 2,
        kernel: (kh, kw),
        stride: (2, 1),
        padding: (1, 0),
        transposed: true,
    };
    let c_spec = ConvSpec {
        transposed: false,
        in_channels: 2,
        out_channels: 3,
        ..t_spec
    };

    let (h, w) = (5, 7);
    let ydata: Vec<f64> = (0..3 * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let y = t(&ydata, &[1, 3, h, w]);
    let zero_b2 = Tensor::zeros(&[2]);
    let via_transpose = conv_transpose2d(&y, &t(&wdata, &[3, 2, kh, kw]), &zero_b2, &t_spec).unwrap();

    // Backward-input of the matching forward conv, probed with dL/dout = y.
    let (oh, ow) = t_spec.out_extent(h, w).unwrap();
    let x = Tensor::param(vec![0.0; 2 * oh * ow], &[1, 2, oh, ow]).unwrap();
    let conv_out = conv2d(
        &x,
        &t(&wdata, &[3, 2, kh, kw]),
        &Tensor::zeros(&[3]),
        &c_spec,
    )
    .unwrap();
    assert_eq!(conv_out.shape(), y.shape());
    conv_out.mul(&y).unwrap().sum_all().unwrap().backward().unwrap();
    let dx = x.grad().unwrap();

    for (a, b) in via_transpose.data().iter().zip(&dx) {
        assert!((a - b).abs() < 1e-10, "adjoint mismatch: {a} vs {b}");
    }
}

#[test]
fn batchnorm_train_standardizes_per_channel() {
    let mut rng = StreamRng::new(3, StreamId::Data);
    let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.uniform(-2.0, 5.0)).collect();
    let xt = t(&x, &[2, 3, 4, 4]);
    let bn = BatchNorm2d::<f64>::new(3);
    let y = bn.forward(&xt, true).unwrap();
    let yd = y.data();
    for ch in 0..3 {
        let mut vals = Vec::new();
        for img in 0..2 {
            let base = (img * 3 + ch) * 16;
            vals.extend_from_slice(&yd[base..base + 16]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let x = t(&[0.5, -1.5, 2.0, 0.0], &[2, 1, 1, 2]);
    let bn = BatchNorm2d::<f64>::new(1);
    let y = bn.forward(&x, false).unwrap();
    for (a, b) in y.data().iter().zip(x.data().iter()) {
        assert!((a - b).abs() < 1e-5); // within the eps effect
    }
}

#[test]
fn batchnorm_batch_of_one_errors_in_train_mode() {
    let bn = BatchNorm2d::<f64>::new(1);
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    assert!(bn.forward(&x, true).is_err());
    assert!(bn.forward(&x, false).is_ok());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = StreamRng::new(21, StreamId::Data);
    let x = gradcheck::rand_away_from_zero(&[2, 3, 4, 4], &mut rng);
    let bn = BatchNorm2d::<f64>::new(3);
    for training in [true, false] {
        let err = gradcheck::max_rel_err(
            &[x.clone(), bn.gamma.clone(), bn.beta.clone()],
            gradcheck::DEFAULT_EPS,
            |ts| {
                batchnorm2d(
                    &ts[0],
                    &ts[1],
                    &ts[2],
                    &bn.running_mean,
                    &bn.running_var,
                    0.0, // freeze running stats so re-evaluations see one function
                    bn.eps,
                    training,
                )?
                .square()?
                .mean_all()
            },
        )
        .unwrap();
        assert!(err < gradcheck::DEFAULT_TOL, "training={training}: rel err {err}");
    }
}

#[test]
fn prelu_direct_values() {
    let slopes = Tensor::param(vec![0.25], &[1]).unwrap();
    let y = prelu(&t(&[2.0, -2.0], &[1, 1, 1, 2]), &slopes).unwrap();
    assert_eq!(*y.data(), vec![2.0, -0.5]);
}

#[test]
fn prelu_slope_gradient_matches_finite_differences() {
    let x = Tensor::param(vec![-2.0], &[1, 1, 1, 1]).unwrap();
    let slopes = Tensor::param(vec![0.25], &[1]).unwrap();
    let loss = prelu(&x, &slopes).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(slopes.grad().unwrap(), vec![-2.0]);

    let mut rng = StreamRng::new(33, StreamId::Data);
    let x = gradcheck::rand_away_from_zero(&[2, 3, 2, 5], &mut rng);
    let s = Tensor::param(vec![0.25, 0.1, 0.6], &[3]).unwrap();
    let err = gradcheck::max_rel_err(&[x, s], gradcheck::DEFAULT_EPS, |ts| {
        prelu(&ts[0], &ts[1])?.square()?.sum_all()
    })
    .unwrap();
    assert!(err < gradcheck::DEFAULT_TOL);
}

#[test]
fn avgpool_constant_and_direct() {
    let c = Tensor::full(&[1, 1, 4, 4], 0.7f64);
    let y = avgpool2d(&c, (2, 2)).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let y = avgpool2d(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]), (2, 2)).unwrap();
    assert_eq!(*y.data(), vec![2.5]);
}

#[test]
fn avgpool_rejects_non_divisible_extent() {
    assert!(avgpool2d(&Tensor::<f64>::zeros(&[1, 1, 5, 4]), (2, 2)).is_err());
}

#[test]
fn avgpool_backward_distributes_uniformly() {
    let mut rng = StreamRng::new(41, StreamId::Data);
    let x = gradcheck::rand_away_from_zero(&[2, 2, 4, 6], &mut rng);
    let err = gradcheck::max_rel_err(&[x.clone()], gradcheck::DEFAULT_EPS, |ts| {
        avgpool2d(&ts[0], (2, 2))?.square()?.sum_all()
    })
    .unwrap();
    assert!(err < gradcheck::DEFAULT_TOL);
}

#[test]
fn texture_energy_direct_values() {
    let y = texture_energy_layer(&Tensor::full(&[2, 3, 4, 5], -3.0f64)).unwrap();
    assert_eq!(y.shape(), &[2, 3]);
    assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));

    let z = texture_energy_layer(&Tensor::<f64>::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn texture_energy_matches_loop_oracle_and_ignores_permutation() {
    let mut rng = StreamRng::new(43, StreamId::Data);
    let (n, c, h, w) = (2, 3, 4, 6);
    let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let y = texture_energy_layer(&t(&data, &[n, c, h, w])).unwrap();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let want: f64 =
                data[base..base + h * w].iter().map(|v| v.abs()).sum::<f64>() / (h * w) as f64;
            assert!((y.data()[img * c + ch] - want).abs() < 1e-12);
        }
    }

    // Spatial permutation leaves the energies unchanged.
    let mut perm: Vec<usize> = (0..h * w).collect();
    rng.shuffle(&mut perm);
    let mut permuted = vec![0.0; data.len()];
    for plane in 0..n * c {
        for (dst, &src) in perm.iter().enumerate() {
            permuted[plane * h * w + dst] = data[plane * h * w + src];
        }
    }
    let yp = texture_energy_layer(&t(&permuted, &[n, c, h, w])).unwrap();
    for (a, b) in y.data().iter().zip(yp.data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fully_connected_passthrough_and_bias_rows() {
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let y = fully_connected(&x, &t(&eye, &[3, 3]), &Tensor::zeros(&[3])).unwrap();
    assert_eq!(*y.data(), *x.data());

    let y = fully_connected(&x, &Tensor::zeros(&[3, 2]), &t(&[7.0, 8.0], &[2])).unwrap();
    assert_eq!(*y.data(), vec![7.0, 8.0, 7.0, 8.0]);
}

#[test]
fn fully_connected_matches_matmul_oracle() {
    let mut rng = StreamRng::new(47, StreamId::Data);
    let x: Vec<f64> = (0..4 * 5).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w: Vec<f64> = (0..5 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let y = fully_connected(&t(&x, &[4, 5]), &t(&w, &[5, 3]), &t(&b, &[3])).unwrap();
    for r in 0..4 {
        for cidx in 0..3 {
            let mut want = b[cidx];
            for k in 0..5 {
                want += x[r * 5 + k] * w[k * 3 + cidx];
            }
            assert!((y.data()[r * 3 + cidx] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn sigmoid_values_and_gradient() {
    let y = sigmoid(&t(&[0.0, 40.0, -40.0], &[3])).unwrap();
    assert!((y.data()[0] - 0.5).abs() < 1e-15);
    assert!((y.data()[1] - 1.0).abs() < 1e-12);
    assert!(y.data()[2] < 1e-12);

    let mut rng = StreamRng::new(51, StreamId::Data);
    let x = gradcheck::rand_away_from_zero(&[2, 4], &mut rng);
    let err = gradcheck::max_rel_err(&[x], gradcheck::DEFAULT_EPS, |ts| {
        sigmoid(&ts[0])?.square()?.sum_all()
    })
    .unwrap();
    assert!(err < gradcheck::DEFAULT_TOL);
}

#[test]
fn batchnorm_eval_is_per_sample_affine_independent_of_batching() {
    let mut rng = StreamRng::new(53, StreamId::Data);
    let bn = BatchNorm2d::<f64>::new(2);
    // Non-trivial running stats.
    bn.running_mean.data_mut().copy_from_slice(&[0.3, -0.2]);
    bn.running_var.data_mut().copy_from_slice(&[1.7, 0.4]);
    let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let batched: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let y_all = bn.forward(&t(&batched, &[2, 2, 3, 4]), false).unwrap();
    let y_a = bn.forward(&t(&a, &[1, 2, 3, 4]), false).unwrap();
    let y_b = bn.forward(&t(&b, &[1, 2, 3, 4]), false).unwrap();

    let all = y_all.data();
    for (i, v) in y_a.data().iter().enumerate() {
        assert_eq!(*v, all[i]);
    }
    for (i, v) in y_b.data().iter().enumerate() {
        assert_eq!(*v, all[24 + i]);
    }
}
