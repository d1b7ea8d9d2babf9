//! Forward values of the lowered kernels against direct loop definitions.

use autograd::{Adam, ConvParams, Graph, ParamSet, Tensor};

fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64) * k).sin())
}

fn at5(t: &Tensor<f64>, i: [usize; 5]) -> f64 {
    let s = t.shape();
    t.data()[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]]
}

#[test]
fn conv3d_matches_direct_loops() {
    let p = ConvParams { kernel: [3, 2, 3], stride: [2, 1, 2], padding: [1, 1, 0] };
    let x = ramp(&[2, 2, 5, 4, 7], 0.31);
    let w = ramp(&[3, 2, 3, 2, 3], 0.17);
    let b = ramp(&[3], 1.3);
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv3d(xi, wi, Some(bi), p);
    let y = g.value(y).clone();
    let s = y.shape().to_vec();
    assert_eq!(s, vec![2, 3, 3, 5, 3]);
    for n in 0..2 {
        for o in 0..3 {
            for z in 0..s[2] {
                for yy in 0..s[3] {
                    for xx in 0..s[4] {
                        let mut acc = b.data()[o];
                        for c in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..2 {
                                    for kx in 0..3 {
                                        let iz = (z * 2 + kz) as isize - 1;
                                        let iy = (yy + ky) as isize - 1;
                                        let ix = (xx * 2 + kx) as isize;
                                        if iz < 0 || iy < 0 || iz >= 5 || iy >= 4 || ix >= 7 {
                                            continue;
                                        }
                                        acc += at5(&x, [n, c, iz as usize, iy as usize, ix as usize])
                                            * at5(&w, [o, c, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        let got = at5(&y, [n, o, z, yy, xx]);
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

#[test]
fn conv_transpose3d_matches_scatter_definition() {
    let p = ConvParams::cubic(3, 2, 1);
    let x = ramp(&[1, 2, 2, 3, 2], 0.7);
    let w = ramp(&[2, 3, 3, 3, 3], 0.23);
    let mut g = Graph::new();
    let (xi, wi) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_transpose3d(xi, wi, None, p, [1, 1, 1]);
    let y = g.value(y).clone();
    let s = y.shape().to_vec();
    assert_eq!(s, vec![1, 3, 4, 6, 4]);
    let mut want = vec![0.0; y.len()];
    for c in 0..2 {
        for z in 0..2 {
            for yy in 0..3 {
                for xx in 0..2 {
                    let v = at5(&x, [0, c, z, yy, xx]);
                    for o in 0..3 {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let oz = (z * 2 + kz) as isize - 1;
                                    let oy = (yy * 2 + ky) as isize - 1;
                                    let ox = (xx * 2 + kx) as isize - 1;
                                    if oz < 0 || oy < 0 || ox < 0 || oz >= 4 || oy >= 6 || ox >= 4 {
                                        continue;
                                    }
                                    let idx = ((o * 4 + oz as usize) * 6 + oy as usize) * 4 + ox as usize;
                                    want[idx] += v * at5(&w, [c, o, kz, ky, kx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn instance_norm_output_is_standardized() {
    let mut g = Graph::new();
    let x = g.constant(ramp(&[2, 3, 4, 4, 4], 0.9));
    let y = g.instance_norm(x, 0.0);
    for chunk in g.value(y).data().chunks(64) {
        let mean: f64 = chunk.iter().sum::<f64>() / 64.0;
        let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // With bias correction the first update is lr * sign(g) (up to eps).
    let mut set = ParamSet::new();
    let id = set.add("p", Tensor::new(&[3], vec![1.0_f64, 1.0, 1.0]));
    let mut adam = Adam::new(0.1, 0.5, 0.999);
    adam.step(&mut set, &[Some(Tensor::new(&[3], vec![2.0, -0.5, 0.0]))]);
    let p = set.get(id).data();
    assert!((p[0] - 0.9).abs() < 1e-6);
    assert!((p[1] - 1.1).abs() < 1e-6);
    assert_eq!(p[2], 1.0);
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut set = ParamSet::new();
    let id = set.add("p", Tensor::new(&[2], vec![3.0_f64, -2.0]));
    let mut adam = Adam::new(0.05, 0.9, 0.999);
    for _ in 0..2000 {
        let mut g = Graph::new();
        let p = g.param(&set, id);
        let loss = g.mean_sq_to_const(p, 0.5);
        let grads = g.backward(loss).for_params(&set);
        adam.step(&mut set, &grads);
    }
    for &v in set.get(id).data() {
        assert!((v - 0.5).abs() < 1e-3, "{v}");
    }
}
