use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::exec::Exec;

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_identity_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = Conv2d::zeros(1, 1, 1);
    c.weight.data_mut()[0] = 1.0;
    let x = random_tensor(vec![2, 4, 5, 1], &mut rng);
    assert_eq!(c.forward(&x, Exec::Sequential).unwrap().data(), x.data());

    let mut c = Conv2d::glorot(3, 2, 3, &mut rng);
    c.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let y = c
        .forward(&Tensor::zeros(vec![1, 3, 3, 2]), Exec::Sequential)
        .unwrap();
    for px in y.data().chunks(3) {
        assert_eq!(px, &[0.5, -1.0, 2.0]);
    }
}

fn naive_conv(c: &Conv2d, x: &Tensor) -> Vec<f64> {
    let (b, h, w, cin) = x.dims4().unwrap();
    let (k, cout) = (c.kernel as i64, c.out_channels);
    let pad = k / 2;
    let (h, w) = (h as i64, w as i64);
    let wt = c.weight.data();
    let mut out = Vec::new();
    for i in 0..b {
        let xs = &x.data()[i * (h * w) as usize * cin..];
        for yy in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut acc = c.bias.data()[co];
                    for dh in 0..k {
                        for dw in 0..k {
                            let (sy, sx) = (yy + dh - pad, xx + dw - pad);
                            if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = xs[((sy * w + sx) as usize) * cin + ci];
                                acc += xv * wt[(((dh * k + dw) as usize) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// One case per lowering: 1x1, unfolded patches, per-tap products.
const CONV_CASES: [(usize, usize, usize); 4] = [(1, 3, 4), (3, 2, 4), (3, 9, 5), (5, 8, 3)];

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, cin, cout) in CONV_CASES {
        let mut c = Conv2d::glorot(k, cin, cout, &mut rng);
        c.bias = random_tensor(vec![cout], &mut rng);
        let x = random_tensor(vec![2, 5, 7, cin], &mut rng);
        let y = c.forward(&x, Exec::Sequential).unwrap();
        let d = max_abs_diff(y.data(), &naive_conv(&c, &x));
        assert!(d < 1e-12, "k={k} cin={cin}: {d}");
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (k, cin, cout) in CONV_CASES {
        let mut c = Conv2d::glorot(k, cin, cout, &mut rng);
        c.bias = random_tensor(vec![cout], &mut rng);
        let x = random_tensor(vec![2, 4, 6, cin], &mut rng);
        let r = random_tensor(vec![2, 4, 6, cout], &mut rng);
        // loss = <r, conv(x)>, so dL/dy = r
        let loss = |c: &Conv2d, x: &Tensor| -> f64 {
            let y = c.forward(x, Exec::Sequential).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let dx = c.backward(&x, &r, Exec::Sequential, true).unwrap().unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() < 1e-7 * (1.0 + numeric.abs()),
                "k={k} cin={cin} {what}: {analytic} vs {numeric}"
            );
        };
        for j in 0..c.weight.len() {
            let mut p = c.clone();
            p.weight.data_mut()[j] += h;
            let mut m = c.clone();
            m.weight.data_mut()[j] -= h;
            check(
                c.weight.grad().unwrap()[j],
                loss(&p, &x),
                loss(&m, &x),
                "weight",
            );
        }
        for j in 0..cout {
            let mut p = c.clone();
            p.bias.data_mut()[j] += h;
            let mut m = c.clone();
            m.bias.data_mut()[j] -= h;
            check(
                c.bias.grad().unwrap()[j],
                loss(&p, &x),
                loss(&m, &x),
                "bias",
            );
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            check(dx.data()[j], loss(&c, &xp), loss(&c, &xm), "input");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let c = Conv2d::zeros(3, 2, 4);
    assert!(matches!(
        c.forward(&Tensor::zeros(vec![1, 3, 3, 3]), Exec::Sequential),
        Err(crate::Error::Shape(_))
    ));
}

#[test]
fn conv_parallel_is_bitwise_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cin in [3, 8] {
        let c = Conv2d::glorot(3, cin, 5, &mut rng);
        let x = random_tensor(vec![6, 7, 9, cin], &mut rng);
        let dy = random_tensor(vec![6, 7, 9, 5], &mut rng);
        let a = c.forward(&x, Exec::Sequential).unwrap();
        let b = c.forward(&x, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let (mut c1, mut c2) = (c.clone(), c);
        let d1 = c1.backward(&x, &dy, Exec::Sequential, true).unwrap();
        let d2 = c2.backward(&x, &dy, Exec::Parallel, true).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(c1.weight.grad(), c2.weight.grad());
    }
}

#[test]
fn batchnorm_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bn = BatchNorm::new(3);
    // uninitialized running stats
    assert!(matches!(
        bn.forward(&Tensor::zeros(vec![1, 2, 2, 3]), Mode::Infer),
        Err(crate::Error::State(_))
    ));

    // train mode output is standardized per channel
    let mut x = random_tensor(vec![4, 3, 5, 3], &mut rng);
    x.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = *v * 10.0 * (1 + i % 3) as f64 + 7.0);
    let (y, _) = bn.forward(&x, Mode::Train).unwrap();
    for ch in 0..3 {
        let vals: Vec<f64> = y.data().iter().skip(ch).step_by(3).cloned().collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    // constant channel -> beta
    let mut bn2 = BatchNorm::new(1);
    bn2.beta.data_mut()[0] = 0.7;
    let (y, cache) = bn2
        .forward(&Tensor::filled(vec![2, 2, 2, 1], 3.0), Mode::Train)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.7));
    bn2.update_running(&cache);
    let r = bn2.running.as_ref().unwrap();
    assert!((r.mean[0] - 0.3).abs() < 1e-12);
    assert!((r.var[0] - 0.9).abs() < 1e-12);

    // identity when running stats are (0, 1 - eps)
    let mut bn3 = BatchNorm::new(2);
    bn3.running = Some(RunningStats {
        mean: vec![0.0; 2],
        var: vec![1.0 - 1e-5; 2],
    });
    let x = random_tensor(vec![1, 2, 2, 2], &mut rng);
    let (y, _) = bn3.forward(&x, Mode::Infer).unwrap();
    assert!(max_abs_diff(y.data(), x.data()) < 1e-12);
}

#[test]
fn se_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let se = SqueezeExcite::zeros(4, 2).unwrap();
    assert_eq!(se.hidden, 2);
    let x = random_tensor(vec![2, 3, 3, 4], &mut rng);
    let (y, cache) = se.forward(&x, Exec::Sequential).unwrap();
    assert!(cache.gates().iter().all(|&s| s == 0.5));
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.5 * b));

    let se = SqueezeExcite::glorot(4, 2, &mut rng).unwrap();
    let (y, _) = se
        .forward(&Tensor::zeros(vec![1, 2, 2, 4]), Exec::Sequential)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(SqueezeExcite::zeros(5, 2).is_err());
    assert_eq!(SqueezeExcite::zeros(40, 2).unwrap().hidden, 20);
}

#[test]
fn se_channel_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, hd) = (6, 3);
    let mut se = SqueezeExcite::glorot(c, 2, &mut rng).unwrap();
    se.b1 = random_tensor(vec![hd], &mut rng);
    se.b2 = random_tensor(vec![c], &mut rng);
    let x = random_tensor(vec![1, 3, 4, c], &mut rng);
    let perm = [3usize, 0, 5, 1, 4, 2];

    let permute_last = |t: &Tensor| {
        let d: Vec<f64> = t
            .data()
            .chunks(c)
            .flat_map(|px| perm.iter().map(move |&p| px[p]))
            .collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mut sp = se.clone();
    // w1 rows follow input channels, w2 columns and b2 follow output channels
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..hd {
            sp.w1.data_mut()[new * hd + j] = se.w1.data()[old * hd + j];
            sp.w2.data_mut()[j * c + new] = se.w2.data()[j * c + old];
        }
        sp.b2.data_mut()[new] = se.b2.data()[old];
    }
    let (y, _) = se.forward(&x, Exec::Sequential).unwrap();
    let (yp, _) = sp.forward(&permute_last(&x), Exec::Sequential).unwrap();
    assert!(max_abs_diff(yp.data(), permute_last(&y).data()) < 1e-12);
}

#[test]
fn se_never_amplifies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let se = SqueezeExcite::glorot(8, 2, &mut rng).unwrap();
    let x = random_tensor(vec![2, 3, 3, 8], &mut rng);
    let (y, _) = se.forward(&x, Exec::Sequential).unwrap();
    assert!(y
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| a.abs() <= b.abs()));
}

fn initialized_block(in_ch: usize, rng: &mut ChaCha8Rng) -> ConvStandardPost {
    let mut b = ConvStandardPost::new(in_ch, 4, 3, 2, true, rng).unwrap();
    for bn in [b.bn1.as_mut().unwrap(), b.bn2.as_mut().unwrap()] {
        bn.gamma = random_tensor(vec![4], rng);
        bn.beta = random_tensor(vec![4], rng);
        bn.running = Some(RunningStats {
            mean: (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
        });
    }
    b.se.b1 = random_tensor(vec![2], rng);
    b
}

#[test]
fn block_zero_branch_is_se_of_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = initialized_block(4, &mut rng);
    // BN2 with gamma = beta = 0 silences the residual branch
    let bn2 = b.bn2.as_mut().unwrap();
    bn2.gamma = Tensor::zeros(vec![4]);
    bn2.beta = Tensor::zeros(vec![4]);
    let x = random_tensor(vec![1, 3, 5, 4], &mut rng);
    let (y, _) = b.forward(&x, Mode::Infer, Exec::Sequential).unwrap();
    let mut rx = x.clone();
    rx.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let (want, _) = b.se.forward(&rx, Exec::Sequential).unwrap();
    assert!(max_abs_diff(y.data(), want.data()) < 1e-15);

    // and every parameter in the silenced branch gets exactly zero gradient
    let (_, cache) = b.forward(&x, Mode::Infer, Exec::Sequential).unwrap();
    b.backward(
        &cache,
        &random_tensor(vec![1, 3, 5, 4], &mut rng),
        Exec::Sequential,
        true,
    )
    .unwrap();
    assert!(b.conv1.weight.grad().unwrap().iter().all(|&g| g == 0.0));
    assert!(b.conv2.weight.grad().unwrap().iter().all(|&g| g == 0.0));
    assert!(b
        .bn1
        .as_ref()
        .unwrap()
        .gamma
        .grad()
        .unwrap()
        .iter()
        .all(|&g| g == 0.0));
}

#[test]
fn block_zero_input_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut b = ConvStandardPost::new(1, 4, 3, 2, true, &mut rng).unwrap();
    for bn in [b.bn1.as_mut().unwrap(), b.bn2.as_mut().unwrap()] {
        bn.running = Some(RunningStats {
            mean: vec![0.0; 4],
            var: vec![1.0; 4],
        });
    }
    let (y, _) = b
        .forward(
            &Tensor::zeros(vec![1, 4, 4, 1]),
            Mode::Infer,
            Exec::Sequential,
        )
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_matches_straight_line_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = initialized_block(2, &mut rng);
    let x = random_tensor(vec![1, 4, 6, 2], &mut rng);
    let (y, _) = b.forward(&x, Mode::Infer, Exec::Sequential).unwrap();

    // recompute pixel by pixel with scalar loops
    let (h, w, c) = (4usize, 6usize, 4usize);
    let conv = |inp: &[f64], cin: usize, layer: &Conv2d| -> Vec<f64> {
        let k = layer.kernel as i64;
        let mut out = vec![0.0; h * w * c];
        for yy in 0..h as i64 {
            for xx in 0..w as i64 {
                for co in 0..c {
                    let mut acc = layer.bias.data()[co];
                    for dh in 0..k {
                        for dw in 0..k {
                            let (sy, sx) = (yy + dh - k / 2, xx + dw - k / 2);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += inp[(sy as usize * w + sx as usize) * cin + ci]
                                    * layer.weight.data()
                                        [(((dh * k + dw) as usize) * cin + ci) * c + co];
                            }
                        }
                    }
                    out[(yy as usize * w + xx as usize) * c + co] = acc;
                }
            }
        }
        out
    };
    let bn = |v: &mut [f64], p: &BatchNorm| {
        let r = p.running.as_ref().unwrap();
        for (i, x) in v.iter_mut().enumerate() {
            let ch = i % c;
            *x = p.gamma.data()[ch] * (*x - r.mean[ch]) / (r.var[ch] + 1e-5).sqrt()
                + p.beta.data()[ch];
        }
    };
    let mut a = conv(x.data(), 2, &b.conv1);
    bn(&mut a, b.bn1.as_ref().unwrap());
    a.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut a2 = conv(&a, 4, &b.conv2);
    bn(&mut a2, b.bn2.as_ref().unwrap());
    let s = conv(x.data(), 2, b.shortcut.as_ref().unwrap());
    let u: Vec<f64> = a2.iter().zip(&s).map(|(p, q)| (p + q).max(0.0)).collect();
    let mut z = vec![0.0; c];
    for (i, v) in u.iter().enumerate() {
        z[i % c] += v / (h * w) as f64;
    }
    let se = &b.se;
    let hid: Vec<f64> = (0..se.hidden)
        .map(|j| {
            let p: f64 = se.b1.data()[j]
                + (0..c)
                    .map(|ch| z[ch] * se.w1.data()[ch * se.hidden + j])
                    .sum::<f64>();
            p.max(0.0)
        })
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|ch| {
            let p: f64 = se.b2.data()[ch]
                + (0..se.hidden)
                    .map(|j| hid[j] * se.w2.data()[j * c + ch])
                    .sum::<f64>();
            1.0 / (1.0 + (-p).exp())
        })
        .collect();
    let want: Vec<f64> = u.iter().enumerate().map(|(i, v)| v * gate[i % c]).collect();
    assert!(max_abs_diff(y.data(), &want) < 1e-12);
}

#[test]
fn maxpool_shapes_and_values() {
    let x = Tensor::filled(vec![1, 64, 499, 2], 3.0);
    let (y, _) = maxpool2d(&x, (1, 10)).unwrap();
    assert_eq!(y.shape(), &[1, 64, 49, 2]);
    assert!(y.data().iter().all(|&v| v == 3.0));
    let (y2, _) = maxpool2d(&Tensor::zeros(vec![1, 64, 49, 2]), (1, 10)).unwrap();
    assert_eq!(y2.shape(), &[1, 64, 4, 2]);
    assert!(maxpool2d(&Tensor::zeros(vec![1, 2, 9, 1]), (1, 10)).is_err());

    let x = Tensor::new(vec![1, 1, 5, 1], vec![1.0, 5.0, 2.0, 9.0, 0.0]).unwrap();
    let (y, arg) = maxpool2d(&x, (1, 2)).unwrap();
    assert_eq!(y.data(), &[5.0, 9.0]);
    let dx = maxpool2d_backward(
        &Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap(),
        &arg,
        x.shape(),
    )
    .unwrap();
    assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 2.0, 0.0]);
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(vec![1, 10, 10, 1], &mut rng);
    assert_eq!(dropout(&x, 0.3, Mode::Infer, &mut rng).unwrap().0, x);
    assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);

    let ones = Tensor::filled(vec![1_000_000], 1.0);
    let (y, mask) = dropout(&ones, 0.3, Mode::Train, &mut rng).unwrap();
    let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
    assert!((dropped - 0.3).abs() < 0.003, "{dropped}");
    let keep = 1.0 / 0.7;
    assert!(y.data().iter().all(|&v| v == 0.0 || v == keep));
    assert_eq!(mask.unwrap().len(), 1_000_000);
}

#[test]
fn global_pool_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y = global_avg_pool(&Tensor::filled(vec![2, 3, 4, 5], 1.5)).unwrap();
    assert_eq!(y.shape(), &[2, 5]);
    assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    let px = random_tensor(vec![1, 1, 1, 3], &mut rng);
    assert_eq!(global_avg_pool(&px).unwrap().data(), px.data());

    let x = random_tensor(vec![2, 3, 4, 2], &mut rng);
    let y = global_avg_pool(&x).unwrap();
    for b in 0..2 {
        for ch in 0..2 {
            let mut s = 0.0;
            for i in 0..12 {
                s += x.data()[(b * 12 + i) * 2 + ch];
            }
            assert!((y.data()[b * 2 + ch] - s / 12.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = Dense::zeros(40, 10);
    let p = dense_softmax(&random_tensor(vec![3, 40], &mut rng), &d).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

    let logits = random_tensor(vec![4, 10], &mut rng);
    let p = softmax(&logits).unwrap();
    let mut shifted = logits.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 123.0);
    let q = softmax(&shifted).unwrap();
    assert!(max_abs_diff(p.data(), q.data()) < 1e-12);
    for (row, lr) in p.data().chunks(10).zip(logits.data().chunks(10)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let denom: f64 = lr.iter().map(|v| v.exp()).sum();
        for (pv, l) in row.iter().zip(lr) {
            assert!((pv - l.exp() / denom).abs() < 1e-12);
            assert!(*pv >= 0.0);
        }
    }
}

#[test]
fn dense_focal_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut d = Dense::glorot(6, 10, &mut rng);
    d.bias = random_tensor(vec![10], &mut rng);
    let x = random_tensor(vec![3, 6], &mut rng);
    let targets = [2usize, 7, 0];
    let fl = FocalLoss::default();
    let probs = dense_softmax(&x, &d).unwrap();
    let dlogits = fl.grad_logits(&probs, &targets).unwrap();
    d.backward(&x, &dlogits).unwrap();

    // dL/dz_k = alpha (delta_kt - p_k) [gamma (1-p)^(gamma-1) p ln p - (1-p)^gamma] / B
    let (a, g) = (fl.alpha, fl.gamma);
    let mut want_w = vec![0.0; 60];
    let mut want_b = vec![0.0; 10];
    for (bi, &t) in targets.iter().enumerate() {
        let p = &probs.data()[bi * 10..(bi + 1) * 10];
        let pt = p[t];
        let common = g * (1.0 - pt).powf(g - 1.0) * pt * pt.ln() - (1.0 - pt).powf(g);
        for k in 0..10 {
            let delta = if k == t { 1.0 } else { 0.0 };
            let dz = a * (delta - p[k]) * common / 3.0;
            want_b[k] += dz;
            for i in 0..6 {
                want_w[i * 10 + k] += x.data()[bi * 6 + i] * dz;
            }
        }
    }
    assert!(max_abs_diff(d.weight.grad().unwrap(), &want_w) < 1e-10);
    assert!(max_abs_diff(d.bias.grad().unwrap(), &want_b) < 1e-10);
}

#[test]
fn default_parameter_counts() {
    // counted by hand from the layer formulas
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let se = |c: usize, r: usize| c * (c / r) + c / r + (c / r) * c + c;
    let folded = conv(3, 1, 40)
        + conv(3, 40, 40)
        + conv(1, 1, 40)
        + se(40, 2)
        + conv(3, 40, 40)
        + conv(3, 40, 40)
        + se(40, 2)
        + 40 * 10
        + 10;
    assert_eq!(folded, 47_530);

    let m = Model::new(ModelSpec::default(), 0).unwrap();
    assert_eq!(m.param_count(), folded + 4 * 2 * 40);
    let m = Model::new(
        ModelSpec {
            batch_norm: false,
            ..ModelSpec::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(m.param_count(), 47_530);
}

#[test]
fn backward_requires_forward() {
    let mut m = Model::new(ModelSpec::default(), 0).unwrap();
    assert!(matches!(
        m.backward(&[0], &FocalLoss::default()),
        Err(crate::Error::State(_))
    ));
}

#[test]
fn model_rejects_short_inputs() {
    let m = Model::new(ModelSpec::default(), 0).unwrap();
    assert!(m.predict(&Tensor::zeros(vec![1, 64, 50, 1])).is_err());
}

#[test]
fn fresh_model_needs_training_before_inference() {
    let m = Model::new(ModelSpec::default(), 0).unwrap();
    assert!(matches!(
        m.predict(&Tensor::zeros(vec![1, 4, 100, 1])),
        Err(crate::Error::State(_))
    ));
}

#[test]
fn train_forward_is_deterministic_across_exec_modes() {
    let spec = ModelSpec {
        filters: 4,
        ..ModelSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_tensor(vec![3, 4, 100, 1], &mut rng);
    let run = |exec: Exec| {
        let mut m = Model::new(spec.clone(), 1).unwrap().with_exec(exec);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let p = m.forward(&x, Mode::Train, &mut r).unwrap();
        m.backward(&[0, 1, 2], &FocalLoss::default()).unwrap();
        let grads: Vec<f64> = m
            .params()
            .iter()
            .flat_map(|(_, t)| t.grad().unwrap().to_vec())
            .collect();
        (p, grads)
    };
    let (p1, g1) = run(Exec::Sequential);
    let (p2, g2) = run(Exec::Parallel);
    assert_eq!(p1, p2);
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn batch_stacking() {
    use crate::dsp::FeatureMatrix;
    let a = FeatureMatrix::new(2, 3, vec![1.0; 6]).unwrap();
    let b = FeatureMatrix::new(2, 3, vec![2.0; 6]).unwrap();
    let t = batch_from_features(&[&a, &b]).unwrap();
    assert_eq!(t.shape(), &[2, 2, 3, 1]);
    assert_eq!(t.data()[6], 2.0);
    let c = FeatureMatrix::new(3, 2, vec![0.0; 6]).unwrap();
    assert!(batch_from_features(&[&a, &c]).is_err());
    assert!(batch_from_features(&[]).is_err());
    let p = Tensor::new(vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.2, 0.3]).unwrap();
    assert_eq!(argmax_rows(&p), vec![1, 0]);
}
