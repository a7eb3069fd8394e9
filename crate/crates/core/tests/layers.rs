use proptest::prelude::*;
use unet3p_core::gradcheck::{gradcheck, gradcheck_many, DEFAULT_STEP};
use unet3p_core::graph::NormStats;
use unet3p_core::{Graph, Tensor, Var};

const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, seed, -1.0, 1.0).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// carries a distinct adjoint.
fn probe(g: &mut Graph, y: Var, seed: u64) -> unet3p_core::Result<Var> {
    let w = g.constant(rand(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Direct-loop cross-correlation used as the oracle for conv2d.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bn * o * oh * ow];
    for bi in 0..bn {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + i) * k + j];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[bn, o, oh, ow], out).unwrap()
}

#[test]
fn conv_sum_of_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn conv_identity_kernel() {
    let xv = rand(&[2, 3, 5, 5], 1);
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(xv.clone());
    let w = g.constant(t(&[3, 3, 1, 1], &eye));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn conv_matches_direct_loops() {
    for (seed, stride, pad, k) in [(1, 1, 1, 3), (2, 2, 1, 3), (3, 1, 0, 3), (4, 1, 2, 5), (5, 2, 0, 1)] {
        let xv = rand(&[2, 3, 8, 7], seed);
        let wv = rand(&[4, 3, k, k], seed + 10);
        let bv = rand(&[4], seed + 20);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let w = g.constant(wv.clone());
        let b = g.constant(bv.clone());
        let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
        let want = naive_conv(&xv, &wv, Some(&bv), stride, pad);
        assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::new();
    let x = g.constant(rand(&[1, 2, 4, 4], 1));
    let w = g.constant(rand(&[1, 3, 3, 3], 2));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(unet3p_core::Error::ShapeMismatch { .. })));
    let x = g.constant(rand(&[1, 3, 2, 2], 1));
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(unet3p_core::Error::InvalidGeometry { .. })));
}

#[test]
fn conv_gradcheck_ten_seeds() {
    for seed in 0..10 {
        let inputs = [rand(&[2, 3, 8, 8], seed), rand(&[4, 3, 3, 3], seed + 100), rand(&[4], seed + 200)];
        let errs = gradcheck_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                probe(g, y, seed)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "seed {seed}: {errs:?}");
    }
}

#[test]
fn strided_and_pointwise_conv_gradcheck() {
    for (stride, pad, k) in [(2, 1, 3), (1, 0, 1)] {
        let inputs = [rand(&[2, 2, 6, 6], 7), rand(&[3, 2, k, k], 8)];
        let errs = gradcheck_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, stride, pad)?;
                probe(g, y, 3)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::full(&[1, 2, 8, 8], 2.5).unwrap());
    let y = g.maxpool(c, 4).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let odd = g.constant(rand(&[1, 1, 6, 6], 1));
    assert!(matches!(g.maxpool(odd, 4), Err(unet3p_core::Error::InvalidGeometry { .. })));
}

#[test]
fn maxpool_tie_routes_to_first_cell() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap().with_requires_grad(true));
    let y = g.maxpool(x, 2).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_factors_compose() {
    for seed in 0..5 {
        let xv = rand(&[2, 3, 8, 8], seed);
        let mut g = Graph::new();
        let x = g.constant(xv);
        let direct = g.maxpool(x, 4).unwrap();
        let a = g.maxpool(x, 2).unwrap();
        let twice = g.maxpool(a, 2).unwrap();
        assert_eq!(g.value(direct), g.value(twice));
    }
}

#[test]
fn pooling_gradcheck_ten_seeds() {
    for seed in 0..10 {
        let x = rand(&[2, 2, 8, 8], seed);
        for factor in [2, 4] {
            let e = gradcheck(
                |g, v| {
                    let y = g.maxpool(v, factor)?;
                    probe(g, y, seed)
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(e < TOL, "maxpool seed {seed}: {e}");
            let e = gradcheck(
                |g, v| {
                    let y = g.avgpool(v, factor)?;
                    probe(g, y, seed)
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(e < TOL, "avgpool seed {seed}: {e}");
        }
        let e = gradcheck(
            |g, v| {
                let y = g.global_maxpool(v)?;
                probe(g, y, seed)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "global maxpool seed {seed}: {e}");
    }
}

/// Evaluates the half-pixel bilinear rule for a single output coordinate.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, f: usize, oy: usize, ox: usize) -> f64 {
    let coord = |d: usize, n: usize| {
        let s = (d as f64 + 0.5) / f as f64 - 0.5;
        let s = s.max(0.0).min((n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let (y0, y1, wy) = coord(oy, h);
    let (x0, x1, wx) = coord(ox, w);
    let at = |y: usize, x: usize| src[y * w + x];
    (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1.0 - wx) * at(y1, x0) + wx * at(y1, x1))
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = g.upsample(x, 2).unwrap();
    let row = [0.0, 0.25, 0.75, 1.0];
    assert_eq!(g.value(y).data(), [row, row, row, row].concat().as_slice());

    let one = g.constant(t(&[1, 1, 1, 1], &[3.5]));
    let y = g.upsample(one, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.5; 4]);

    let c = g.constant(Tensor::full(&[2, 3, 3, 5], -1.25).unwrap());
    let y = g.upsample(c, 4).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -1.25));

    let xv = rand(&[1, 2, 3, 4], 9);
    let x = g.constant(xv.clone());
    let y = g.upsample(x, 1).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn upsample_matches_coordinate_oracle() {
    let xv = rand(&[1, 1, 3, 5], 4);
    for f in [2, 3, 4, 8] {
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let y = g.upsample(x, f).unwrap();
        let out = g.value(y).data();
        for oy in 0..3 * f {
            for ox in 0..5 * f {
                let want = bilinear_oracle(xv.data(), 3, 5, f, oy, ox);
                assert!((out[oy * 5 * f + ox] - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn upsample_then_avgpool_recovers_constants() {
    let mut g = Graph::new();
    for f in [1, 2, 4, 8] {
        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 0.7).unwrap());
        let u = g.upsample(c, f).unwrap();
        let back = g.avgpool(u, f).unwrap();
        assert_eq!(g.value(back).data(), g.value(c).data());
    }
}

#[test]
fn upsample_gradcheck_ten_seeds() {
    for seed in 0..10 {
        let x = rand(&[2, 2, 3, 4], seed);
        for f in [2, 4] {
            let e = gradcheck(
                |g, v| {
                    let y = g.upsample(v, f)?;
                    probe(g, y, seed)
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(e < TOL, "seed {seed} factor {f}: {e}");
        }
    }
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let xv = rand(&[2, 3, 4, 4], 1);
    let x = g.constant(xv.clone());
    let y = g.concat(&[x]).unwrap();
    assert_eq!(g.value(y), &xv);

    let parts: Vec<Var> = (0..5).map(|i| g.constant(rand(&[1, 64, 2, 2], i))).collect();
    let y = g.concat(&parts).unwrap();
    assert_eq!(g.shape(y), &[1, 320, 2, 2]);

    let a = g.constant(rand(&[1, 2, 4, 4], 1));
    let b = g.constant(rand(&[1, 2, 2, 2], 2));
    assert!(matches!(g.concat(&[a, b]), Err(unet3p_core::Error::ShapeMismatch { .. })));
    assert!(g.concat(&[]).is_err());
}

#[test]
fn concat_routes_gradient_slices() {
    let mut g = Graph::new();
    let a = g.leaf(rand(&[2, 1, 2, 2], 1).with_requires_grad(true));
    let b = g.leaf(rand(&[2, 3, 2, 2], 2).with_requires_grad(true));
    let y = g.concat(&[a, b]).unwrap();
    let w = rand(&[2, 4, 2, 2], 3);
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    let ga = grads.get(a).unwrap();
    let gb = grads.get(b).unwrap();
    for bi in 0..2 {
        assert_eq!(&ga[bi * 4..bi * 4 + 4], &w.data()[bi * 16..bi * 16 + 4]);
        assert_eq!(&gb[bi * 12..bi * 12 + 12], &w.data()[bi * 16 + 4..bi * 16 + 16]);
    }
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);
    let big = g.constant(t(&[2], &[-800.0, 800.0]));
    let s = g.sigmoid(big).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[0.0]).with_requires_grad(true));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0]);
}

#[test]
fn activation_gradchecks() {
    for seed in 0..10 {
        let x = Tensor::uniform(&[3, 7], seed, -4.0, 4.0).unwrap();
        let e = gradcheck(
            |g, v| {
                let y = g.sigmoid(v)?;
                probe(g, y, seed)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < 1e-6, "sigmoid {e}");
        let e = gradcheck(
            |g, v| {
                let y = g.relu(v)?;
                probe(g, y, seed)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL, "relu {e}");
    }
}

#[test]
fn batchnorm_gradcheck_ten_seeds() {
    for seed in 0..10 {
        let inputs =
            [rand(&[2, 3, 4, 4], seed), Tensor::uniform(&[3], seed + 1, 0.5, 1.5).unwrap(), rand(&[3], seed + 2)];
        let errs = gradcheck_many(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?;
                probe(g, y, seed)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "train seed {seed}: {errs:?}");

        let (mean, var) = ([0.1, -0.2, 0.3], [1.5, 0.7, 2.0]);
        let errs = gradcheck_many(
            |g, v| {
                let stats = NormStats::Running { mean: &mean, var: &var, eps: 1e-5 };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], stats)?;
                probe(g, y, seed)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "eval seed {seed}: {errs:?}");
    }
}

#[test]
fn batchnorm_train_statistics() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(&[3, 2, 5, 5], 11, -4.0, 9.0).unwrap());
    let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    let (y, _) = g.batch_norm(x, gamma, beta, NormStats::Batch { eps: 1e-5 }).unwrap();
    let v = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| v[(b * 2 + c) * 25..(b * 2 + c + 1) * 25].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6 * 1e1, "variance {var}");
    }
}

#[test]
fn dropout_modes() {
    let xv = rand(&[4, 8], 3);
    let mut g = Graph::new();
    let x = g.constant(xv.clone());
    let y = g.dropout(x, 0.0, 1).unwrap();
    assert_eq!(g.value(y), &xv);

    let a = g.dropout(x, 0.5, 7).unwrap();
    let b = g.dropout(x, 0.5, 7).unwrap();
    assert_eq!(g.value(a), g.value(b));
    for (out, inp) in g.value(a).data().iter().zip(xv.data()) {
        assert!(*out == 0.0 || (*out - 2.0 * inp).abs() < 1e-15);
    }
    assert!(g.dropout(x, 1.0, 1).is_err());

    for seed in 0..10 {
        let e = gradcheck(
            |g, v| {
                let y = g.dropout(v, 0.3, seed)?;
                probe(g, y, seed)
            },
            &xv,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL);
    }
}

#[test]
fn elementwise_gradchecks() {
    for seed in 0..10 {
        let a = Tensor::uniform(&[2, 5], seed, 0.5, 2.0).unwrap();
        let b = Tensor::uniform(&[2, 5], seed + 50, 0.5, 2.0).unwrap();
        let s = Tensor::uniform(&[1], seed + 99, 0.5, 2.0).unwrap();
        type BinOp = fn(&mut Graph, Var, Var) -> unet3p_core::Result<Var>;
        let ops: [(&str, BinOp); 4] = [
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| g.div(a, b)),
        ];
        for (name, op) in ops {
            for rhs in [&b, &s] {
                let errs = gradcheck_many(
                    |g, v| {
                        let y = op(g, v[0], v[1])?;
                        probe(g, y, seed)
                    },
                    &[a.clone(), rhs.clone()],
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(errs.iter().all(|&e| e < TOL), "{name}: {errs:?}");
            }
        }
        let e = gradcheck(
            |g, v| {
                let y = g.pow(v, 0.37)?;
                probe(g, y, seed)
            },
            &a,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL);
        let e = gradcheck(
            |g, v| {
                let y = g.log(v)?;
                probe(g, y, seed)
            },
            &a,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL);
        let e = gradcheck(
            |g, v| {
                let y = g.clamp(v, 0.0, 10.0)?;
                probe(g, y, seed)
            },
            &a,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(e < TOL);
    }
}

#[test]
fn determinism_of_forward_and_backward() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(rand(&[2, 3, 8, 8], 5).with_requires_grad(true));
        let w = g.leaf(rand(&[4, 3, 3, 3], 6).with_requires_grad(true));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.upsample(y, 2).unwrap();
        let y = g.maxpool(y, 4).unwrap();
        let l = probe(&mut g, y, 1).unwrap();
        let grads = g.backward(l).unwrap();
        let mut bits: Vec<u64> = g.value(l).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.get(x).unwrap().iter().map(|v| v.to_bits()));
        bits.extend(grads.get(w).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn doubled_function_doubles_gradient_exactly() {
    let xv = rand(&[1, 2, 4, 4], 3);
    let wv = rand(&[2, 2, 3, 3], 4);
    let grad_of = |twice: bool| {
        let mut g = Graph::new();
        let x = g.leaf(xv.clone().with_requires_grad(true));
        let w = g.constant(wv.clone());
        let f = |g: &mut Graph| {
            let y = g.conv2d(x, w, None, 1, 1).unwrap();
            let y = g.sigmoid(y).unwrap();
            g.sum(y).unwrap()
        };
        let l = if twice {
            let a = f(&mut g);
            let b = f(&mut g);
            g.add(a, b).unwrap()
        } else {
            f(&mut g)
        };
        g.backward(l).unwrap().get(x).unwrap().to_vec()
    };
    let once = grad_of(false);
    let twice = grad_of(true);
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_padding_preserves_spatial_dims(h in 1usize..9, w in 1usize..9, half in 0usize..3, seed in any::<u64>()) {
        let k = 2 * half + 1;
        let mut g = Graph::new();
        let x = g.constant(rand(&[1, 2, h, w], seed));
        let wt = g.constant(rand(&[3, 2, k, k], seed ^ 1));
        let y = g.conv2d(x, wt, None, 1, half).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 3, h, w]);
    }

    #[test]
    fn maxpool_composition(a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let n = a * b * 2;
        let mut g = Graph::new();
        let x = g.constant(rand(&[1, 2, n, n], seed));
        let direct = g.maxpool(x, a * b).unwrap();
        let first = g.maxpool(x, a).unwrap();
        let nested = g.maxpool(first, b).unwrap();
        prop_assert_eq!(g.value(direct), g.value(nested));
    }
}

#[test]
fn single_plane_filter_matches_loops_and_gradcheck() {
    for seed in 0..4 {
        let xv = rand(&[3, 1, 13, 12], seed);
        let wv = rand(&[1, 1, 5, 5], seed + 1);
        let bv = rand(&[1], seed + 2);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let w = g.constant(wv.clone());
        let b = g.constant(bv.clone());
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_conv(&xv, &wv, Some(&bv), 1, 0)).unwrap() < 1e-12);

        let errs = gradcheck_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                probe(g, y, seed)
            },
            &[xv, wv, bv],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "{errs:?}");
    }
}
