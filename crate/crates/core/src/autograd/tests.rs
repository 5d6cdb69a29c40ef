use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::grid::VoxelCoord;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn random_coords(r: &mut impl Rng, n: usize, side: i32) -> Arc<CoordSet> {
    let v = (0..n)
        .map(|_| {
            VoxelCoord::new(
                r.gen_range(-side..side),
                r.gen_range(-side..side),
                r.gen_range(-side..side),
            )
        })
        .collect();
    CoordSet::shared(v)
}

/// Dense reference: value at `c` of a full 3×3×3 correlation over a grid
/// holding only the active inputs.
fn naive_subm(coords: &CoordSet, x: &[f64], w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; coords.len() * cout];
    for (i, c) in coords.coords().iter().enumerate() {
        for (j, n) in coords.coords().iter().enumerate() {
            let d = [n.x - c.x, n.y - c.y, n.z - c.z];
            if d.iter().any(|v| v.abs() > 1) {
                continue;
            }
            let o = subm_offset_index(d[0], d[1], d[2]);
            for ci in 0..cin {
                for co in 0..cout {
                    out[i * cout + co] += x[j * cin + ci] * w[(o * cin + ci) * cout + co];
                }
            }
        }
    }
    out
}

#[test]
fn subm_conv_matches_naive_reference() {
    let mut r = rng(1);
    let coords = random_coords(&mut r, 60, 3);
    let (cin, cout) = (3, 2);
    let x = randn(&mut r, coords.len() * cin);
    let w = randn(&mut r, 27 * cin * cout);
    let mut g = Graph::<f64>::new();
    let t = g.sparse_input(coords.clone(), cin, x.clone()).unwrap();
    let wv = g.input(w.clone());
    let y = g.subm_conv3(&t, wv, None, cout).unwrap();
    let reference = naive_subm(&coords, &x, &w, cin, cout);
    for (a, b) in g.value(y.feats).iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn down_and_up_conv_are_adjoint() {
    let mut r = rng(2);
    let fine = random_coords(&mut r, 40, 4);
    let (cin, cout) = (2, 3);
    let w = randn(&mut r, 8 * cin * cout);
    // Transposed weights: [o][cout][cin].
    let mut wt = vec![0.0; w.len()];
    for o in 0..8 {
        for ci in 0..cin {
            for co in 0..cout {
                wt[(o * cout + co) * cin + ci] = w[(o * cin + ci) * cout + co];
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let x = g.sparse_input(fine.clone(), cin, randn(&mut r, fine.len() * cin)).unwrap();
    let wv = g.input(w);
    let down = g.down_conv2(&x, wv, None, cout).unwrap();
    let yv = randn(&mut r, down.len() * cout);
    let y = g.sparse_input(down.coords.clone(), cout, yv.clone()).unwrap();
    let wtv = g.input(wt);
    let up = g.up_conv2(&y, wtv, None, cin).unwrap();
    let lhs: f64 = g.value(down.feats).iter().zip(&yv).map(|(a, b)| a * b).sum();
    // The transposed conv covers every child; restrict to the fine set.
    let upf = g.gather_coords(&up, fine).unwrap();
    let rhs: f64 = g.value(upf.feats).iter().zip(g.value(x.feats)).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} {rhs}");
}

#[test]
fn sparse_conv_gradients() {
    let mut r = rng(3);
    let coords = random_coords(&mut r, 25, 2);
    let (cin, cout) = (2, 3);
    let n = coords.len();
    let proj = randn(&mut r, n * cout);
    let leaves = vec![randn(&mut r, n * cin), randn(&mut r, 27 * cin * cout), randn(&mut r, cout)];
    let res = check_gradients(&leaves, 1e-5, |g, v| {
        let x = SparseTensor {
            coords: coords.clone(),
            feats: v[0],
            channels: cin,
        };
        let y = g.subm_conv3(&x, v[1], Some(v[2]), cout)?;
        g.dot(y.feats, proj.clone())
    })
    .unwrap();
    assert!(res.max_error() < 1e-7, "{res:?}");
}

#[test]
fn dense_conv_gradients_and_reference() {
    let mut r = rng(4);
    let geom = ConvGeom {
        batch: 2,
        cin: 2,
        cout: 3,
        kernel: 3,
        pad: 1,
        dims: [4, 3, 5],
    };
    let si = 60;
    let x = randn(&mut r, 2 * 2 * si);
    let w = randn(&mut r, 27 * 2 * 3);
    let mut g = Graph::<f64>::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.dense_conv(xv, wv, None, geom).unwrap();
    let yv = g.value(y);
    let [dx, dy, dz] = [4i32, 3, 5];
    for b in 0..2 {
        for co in 0..3 {
            for z in 0..dz {
                for yy in 0..dy {
                    for xx in 0..dx {
                        let mut s = 0.0;
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (ix, iy, iz) = (xx + kx - 1, yy + ky - 1, z + kz - 1);
                                    if ix < 0 || iy < 0 || iz < 0 || ix >= dx || iy >= dy || iz >= dz {
                                        continue;
                                    }
                                    let tap = (kx + 3 * (ky + 3 * kz)) as usize;
                                    for ci in 0..2 {
                                        let xi = (b * 2 + ci) * si + ((iz * dy + iy) * dx + ix) as usize;
                                        s += x[xi] * w[(tap * 2 + ci) * 3 + co];
                                    }
                                }
                            }
                        }
                        let oi = (b * 3 + co) * si + ((z * dy + yy) * dx + xx) as usize;
                        assert!((yv[oi] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
    let proj = randn(&mut r, 2 * 3 * si);
    let res = check_gradients(&[x, w, randn(&mut r, 3)], 1e-5, |g, v| {
        let y = g.dense_conv(v[0], v[1], Some(v[2]), geom)?;
        g.dot(y, proj.clone())
    })
    .unwrap();
    assert!(res.max_error() < 1e-7, "{res:?}");
}

#[test]
fn batch_norm_train_gradients() {
    let mut r = rng(5);
    let layout = BnLayout::Rows { n: 7, channels: 3 };
    let proj = randn(&mut r, 21);
    let leaves = vec![randn(&mut r, 21), randn(&mut r, 3), randn(&mut r, 3)];
    let res = check_gradients(&leaves, 1e-5, |g, v| {
        let (y, _) = g.batch_norm(v[0], layout, v[1], v[2], BnMode::Train)?;
        g.dot(y, proj.clone())
    })
    .unwrap();
    assert!(res.max_error() < 1e-6, "{res:?}");
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![1.0, 2.0, 3.0, 4.0]);
    let gamma = g.input(vec![2.0, 1.0]);
    let beta = g.input(vec![0.5, 0.0]);
    let layout = BnLayout::Planar {
        batch: 1,
        channels: 2,
        spatial: 2,
    };
    let mode = BnMode::Eval {
        mean: &[1.0, 0.0],
        var: &[4.0, 1.0],
    };
    let (y, stats) = g.batch_norm(x, layout, gamma, beta, mode).unwrap();
    assert!(stats.is_none());
    let s0 = 1.0 / (4.0 + BN_EPS).sqrt();
    let s1 = 1.0 / (1.0 + BN_EPS).sqrt();
    let expect = [0.5, 2.0 * s0 + 0.5, 3.0 * s1, 4.0 * s1];
    for (a, b) in g.value(y).iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_reports_unbiased_variance() {
    let mut g = Graph::<f64>::new();
    let x = g.input(vec![1.0, 3.0]);
    let gamma = g.input(vec![1.0]);
    let beta = g.input(vec![0.0]);
    let (y, stats) = g
        .batch_norm(x, BnLayout::Rows { n: 2, channels: 1 }, gamma, beta, BnMode::Train)
        .unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![2.0]);
    assert!((g.value(y)[0] + 1.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
}

#[test]
fn elementwise_and_loss_gradients() {
    let mut r = rng(6);
    // Keep inputs away from kinks so central differences are smooth.
    let x: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..2.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let y = randn(&mut r, 12);
    let rows: Vec<usize> = vec![0, 2, 3, 7, 11];
    let targets: Vec<f64> = vec![0.3, -1.5, 2.0, 0.0, -0.2];
    let occ: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0, 1.0];
    let proj = randn(&mut r, 12);
    let res = check_gradients(&[x, y], 1e-5, |g, v| {
        let a = g.relu(v[0]);
        let b = g.sigmoid(v[1]);
        let c = g.clamp(v[0], -1.5, 1.5);
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let d = g.dot(s, proj.clone())?;
        let l1 = g.l1_log(v[0], rows.clone(), targets.clone())?;
        let bce = g.bce_logits(v[1], rows.clone(), occ.clone())?;
        g.weighted_sum(&[(d, 1.0), (l1, 0.7), (bce, 1.3)])
    })
    .unwrap();
    assert!(res.max_error() < 1e-6, "{res:?}");
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(7);
    let a = random_coords(&mut r, 15, 2);
    let b = random_coords(&mut r, 15, 2);
    let proj_cat = randn(&mut r, b.len() * 5);
    let proj_dense = randn(&mut r, 2 * 5 * 5 * 5);
    let leaves = vec![randn(&mut r, a.len() * 2), randn(&mut r, b.len() * 3)];
    let res = check_gradients(&leaves, 1e-5, |g, v| {
        let ta = SparseTensor {
            coords: a.clone(),
            feats: v[0],
            channels: 2,
        };
        let tb = SparseTensor {
            coords: b.clone(),
            feats: v[1],
            channels: 3,
        };
        let cat = g.skip_concat(&tb, &ta)?;
        let d = g.to_dense(&ta, [-2, -2, -2], [5, 5, 5], 1)?;
        let back = g.to_sparse(&d, b.clone())?;
        let p1 = g.dot(cat.feats, proj_cat.clone())?;
        let p2 = g.dot(d.data, proj_dense[..250].to_vec())?;
        let p3 = g.dot(back.feats, proj_cat[..b.len() * 2].to_vec())?;
        g.weighted_sum(&[(p1, 1.0), (p2, 1.0), (p3, 1.0)])
    })
    .unwrap();
    assert!(res.max_error() < 1e-8, "{res:?}");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(vec![1.0, 2.0]);
    assert!(matches!(g.backward(x), Err(crate::Error::Usage(_))));
}

#[test]
fn empty_loss_rows_give_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(vec![1.0, 2.0]);
    let l = g.l1_log(x, vec![], vec![]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn param_grads_reach_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", &[2], vec![1.0, -2.0]);
    let mut g = Graph::<f32>::new();
    let w = g.param(&store, id);
    let l = g.dot(w, vec![3.0, 4.0]).unwrap();
    g.backward(l).unwrap();
    g.accumulate_param_grads(&mut store);
    assert_eq!(store.get(id).grad, vec![3.0, 4.0]);
    assert!(store.get(id).touched());
}
