use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn stack(g: &mut Graph<'_, f64>, layers: &[Tensor<f64>]) -> StackedStates {
    let len = layers[0].rows();
    let vars = layers.iter().map(|t| g.input(t.clone())).collect();
    StackedStates::new(vars, vec![true; len])
}

/// Brute force over (i, j, p, q); first strict maximum wins.
fn enumerate(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<(usize, usize)>>) {
    let (la, lb) = (a[0].rows(), b[0].rows());
    let mut s = vec![vec![f64::NEG_INFINITY; lb]; la];
    let mut arg = vec![vec![(0, 0); lb]; la];
    for i in 0..la {
        for j in 0..lb {
            for (p, ap) in a.iter().enumerate() {
                for (q, bq) in b.iter().enumerate() {
                    let v: f64 = ap.row(i).iter().zip(bq.row(j)).map(|(x, y)| x * y).sum();
                    if v > s[i][j] {
                        s[i][j] = v;
                        arg[i][j] = (p, q);
                    }
                }
            }
        }
    }
    (s, arg)
}

#[test]
fn two_layer_worked_example() {
    let mut g = Graph::<f64>::new();
    let a = stack(&mut g, &[Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap(), Tensor::from_f64([1, 2], &[0.0, 1.0]).unwrap()]);
    let b = stack(&mut g, &[Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap(), Tensor::from_f64([1, 2], &[2.0, 0.0]).unwrap()]);
    let s = costack_affinity(&mut g, &a, &b).unwrap();
    assert_eq!(g.value(s.scores).data(), &[2.0]);
    assert_eq!(s.pairs, vec![(0, 1)]);
}

#[test]
fn single_layer_is_plain_dot_product() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (la, lb, w) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..9));
        let (ta, tb) = (random(&mut r, &[la, w]), random(&mut r, &[lb, w]));
        let mut g = Graph::<f64>::new();
        let a = stack(&mut g, &[ta.clone()]);
        let b = stack(&mut g, &[tb.clone()]);
        let s = costack_affinity(&mut g, &a, &b).unwrap();
        let plain = ta.matmul(&tb.transpose().unwrap()).unwrap();
        assert_eq!(g.value(s.scores), &plain);
        let last = last_layer_affinity(&mut g, &a, &b).unwrap();
        assert_eq!(g.value(last.scores), &plain);
    }
}

#[test]
fn matches_enumeration_oracle() {
    let mut r = rng(2);
    for _ in 0..100 {
        let k = r.gen_range(1..=3);
        let (la, lb, h) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=4));
        let ta: Vec<_> = (0..k).map(|_| random(&mut r, &[la, 2 * h])).collect();
        let tb: Vec<_> = (0..k).map(|_| random(&mut r, &[lb, 2 * h])).collect();
        let mut g = Graph::<f64>::new();
        let (a, b) = (stack(&mut g, &ta), stack(&mut g, &tb));
        let s = costack_affinity(&mut g, &a, &b).unwrap();
        let (want, arg) = enumerate(&ta, &tb);
        for i in 0..la {
            for j in 0..lb {
                assert!((g.value(s.scores).at(i, j) - want[i][j]).abs() <= 1e-10);
                assert_eq!(s.pairs[i * lb + j], arg[i][j]);
            }
        }
    }
}

#[test]
fn affinity_is_symmetric_under_swap() {
    let mut r = rng(3);
    let ta: Vec<_> = (0..3).map(|_| random(&mut r, &[4, 6])).collect();
    let tb: Vec<_> = (0..3).map(|_| random(&mut r, &[2, 6])).collect();
    let mut g = Graph::<f64>::new();
    let (a, b) = (stack(&mut g, &ta), stack(&mut g, &tb));
    let ab = costack_affinity(&mut g, &a, &b).unwrap();
    let ba = costack_affinity(&mut g, &b, &a).unwrap();
    assert_eq!(g.value(ab.scores), &g.value(ba.scores).transpose().unwrap());
}

#[test]
fn scaling_a_layer_never_lowers_scores() {
    let mut r = rng(4);
    for _ in 0..20 {
        let ta: Vec<_> = (0..2).map(|_| random(&mut r, &[3, 4]).map(f64::abs)).collect();
        let tb: Vec<_> = (0..2).map(|_| random(&mut r, &[3, 4]).map(f64::abs)).collect();
        let mut scaled = ta.clone();
        let c = r.gen_range(1.1..3.0);
        scaled[1] = scaled[1].map(|v| v * c);
        let (before, _) = enumerate(&ta, &tb);
        let mut g = Graph::<f64>::new();
        let (a, b) = (stack(&mut g, &scaled), stack(&mut g, &tb));
        let s = costack_affinity(&mut g, &a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(g.value(s.scores).at(i, j) >= before[i][j]);
            }
        }
    }
}

#[test]
fn affinity_errors() {
    let mut g = Graph::<f64>::new();
    let a = stack(&mut g, &[Tensor::zeros([2, 4])]);
    let b = stack(&mut g, &[Tensor::zeros([2, 6])]);
    assert!(matches!(costack_affinity(&mut g, &a, &b), Err(Error::Dimension(_))));
    let empty = StackedStates::new(Vec::new(), vec![true]);
    assert!(matches!(costack_affinity(&mut g, &empty, &a), Err(Error::Dimension(_))));
    assert!(matches!(concat_stack(&mut g, &empty), Err(Error::Dimension(_))));
}

#[test]
fn gradient_reaches_only_the_winning_pair() {
    let mut r = rng(5);
    let ta: Vec<_> = (0..2).map(|_| random(&mut r, &[2, 3])).collect();
    let tb: Vec<_> = (0..2).map(|_| random(&mut r, &[2, 3])).collect();
    let (_, arg) = enumerate(&ta, &tb);
    let mut g = Graph::<f64>::new();
    let (a, b) = (stack(&mut g, &ta), stack(&mut g, &tb));
    let s = costack_affinity(&mut g, &a, &b).unwrap();
    // pick cell (0, 0) only
    let pick = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let y = g.mul(s.scores, pick).unwrap();
    let y = g.sum_all(y);
    g.backward(y).unwrap();
    let (p, q) = arg[0][0];
    for (layer, &v) in a.layers.iter().enumerate() {
        let grad = g.grad(v).unwrap();
        let row0_nonzero = grad.row(0).iter().any(|&x| x != 0.0);
        assert_eq!(row0_nonzero, layer == p);
        assert!(grad.row(1).iter().all(|&x| x == 0.0));
        if layer == p {
            assert_eq!(grad.row(0), tb[q].row(0));
        }
    }
    for (layer, &v) in b.layers.iter().enumerate() {
        let nonzero = g.grad(v).unwrap().data().iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, layer == q);
    }
}

#[test]
fn concat_stack_layout() {
    let mut r = rng(6);
    let layers: Vec<_> = (0..3).map(|_| random(&mut r, &[2, 4])).collect();
    let mut g = Graph::<f64>::new();
    let s = stack(&mut g, &layers);
    let c = concat_stack(&mut g, &s).unwrap();
    assert_eq!(g.shape(c), &[2, 12]);
    for (p, layer) in layers.iter().enumerate() {
        for i in 0..2 {
            assert_eq!(&g.value(c).row(i)[p * 4..(p + 1) * 4], layer.row(i));
        }
    }
    let one = stack(&mut g, &layers[..1]);
    let c = concat_stack(&mut g, &one).unwrap();
    assert_eq!(g.value(c), &layers[0]);
}

#[test]
fn bidir_align_matches_direct_evaluation() {
    let mut r = rng(7);
    let s = random(&mut r, &[2, 3]);
    let (acat, bcat) = (random(&mut r, &[2, 4]), random(&mut r, &[3, 4]));
    let mask_b = [true, true, false];
    let mut g = Graph::<f64>::new();
    let scores = g.constant(s.clone());
    let affinity = AffinityMatrix {
        scores,
        pairs: vec![(0, 0); 6],
        rows: 2,
        cols: 3,
    };
    let (av, bv) = (g.constant(acat.clone()), g.constant(bcat.clone()));
    let (b_bar, a_bar) = bidir_align(&mut g, av, bv, &affinity, &[true, true], &mask_b).unwrap();
    assert_eq!(g.shape(b_bar), &[2, 4]);
    assert_eq!(g.shape(a_bar), &[3, 4]);
    for i in 0..2 {
        let e: Vec<f64> = (0..2).map(|j| s.at(i, j).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..4 {
            let want = (e[0] * bcat.at(0, c) + e[1] * bcat.at(1, c)) / z;
            assert!((g.value(b_bar).at(i, c) - want).abs() < 1e-14);
        }
    }
    for j in 0..3 {
        let e: Vec<f64> = (0..2).map(|i| s.at(i, j).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..4 {
            let want = (e[0] * acat.at(0, c) + e[1] * acat.at(1, c)) / z;
            assert!((g.value(a_bar).at(j, c) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn matching_vector_slices() {
    let mut r = rng(8);
    let (x, al) = (random(&mut r, &[3, 12]), random(&mut r, &[3, 12]));
    let mut g = Graph::<f64>::new();
    let (xv, av) = (g.constant(x.clone()), g.constant(al.clone()));
    let m = matching_vector(&mut g, xv, av).unwrap();
    assert_eq!(g.shape(m), &[3, 48]);
    for i in 0..3 {
        let row = g.value(m).row(i);
        for c in 0..12 {
            assert_eq!(row[c], al.at(i, c) - x.at(i, c));
            assert_eq!(row[12 + c], al.at(i, c) * x.at(i, c));
            assert_eq!(row[24 + c], al.at(i, c));
            assert_eq!(row[36 + c], x.at(i, c));
        }
    }
    let same = matching_vector(&mut g, xv, xv).unwrap();
    assert!((0..3).all(|i| g.value(same).row(i)[..12].iter().all(|&v| v == 0.0)));
    let short = g.constant(Tensor::zeros([2, 12]));
    assert!(matches!(matching_vector(&mut g, xv, short), Err(Error::Dimension(_))));
}

#[test]
fn pooling_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 5.0]).unwrap());
    let b = g.constant(Tensor::from_f64([3, 2], &[-1.0, 0.5, 9.0, 9.0, 7.0, 7.0]).unwrap());
    let z = pool_features(&mut g, a, b, &[true, true], &[true, false, false]).unwrap();
    assert_eq!(g.value(z).shape(), &[1, 4]);
    assert_eq!(g.value(z).data(), &[4.0, 7.0, -1.0, 0.5]);
}

fn matcher_z(
    store: &ParamStore<f64>,
    m: &CoStackMatcher,
    ta: &[Tensor<f64>],
    tb: &[Tensor<f64>],
    mask_a: &[bool],
    mask_b: &[bool],
) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let mut a = stack(&mut g, ta);
    let mut b = stack(&mut g, tb);
    a.mask = mask_a.to_vec();
    b.mask = mask_b.to_vec();
    let out = m.forward(&mut g, &a, &b).unwrap();
    g.value(out.z).clone()
}

#[test]
fn matcher_swap_symmetry_and_padding() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let m = CoStackMatcher::new(&mut store, 8, 3, 2, true, &mut r);
    assert_eq!(m.feature_width(), 12);
    let ta: Vec<_> = (0..2).map(|_| random(&mut r, &[3, 4])).collect();
    let tb: Vec<_> = (0..2).map(|_| random(&mut r, &[2, 4])).collect();
    let z = matcher_z(&store, &m, &ta, &tb, &[true; 3], &[true; 2]);
    let swapped = matcher_z(&store, &m, &tb, &ta, &[true; 2], &[true; 3]);
    let half = 6;
    for c in 0..half {
        assert_eq!(z.data()[c], swapped.data()[half + c]);
        assert_eq!(z.data()[half + c], swapped.data()[c]);
    }

    // append two padded rows of garbage to b
    let padded: Vec<_> = tb
        .iter()
        .map(|t| {
            let mut d = t.data().to_vec();
            d.extend([7.0; 8]);
            Tensor::new([4, 4], d).unwrap()
        })
        .collect();
    let zp = matcher_z(&store, &m, &ta, &padded, &[true; 3], &[true, true, false, false]);
    assert!(z.max_abs_diff(&zp) <= 1e-10);
}

#[test]
fn matcher_passes_grad_check() {
    let mut r = rng(10);
    let mut store = ParamStore::<f64>::new();
    let m = CoStackMatcher::new(&mut store, 4, 2, 1, true, &mut r);
    let ta: Vec<_> = (0..2).map(|_| random(&mut r, &[3, 2])).collect();
    let tb: Vec<_> = (0..2).map(|_| random(&mut r, &[2, 2])).collect();
    let w = random(&mut r, &[1, 8]);
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check(&mut store, &ids, 1e-5, |g| {
        let a = StackedStates::new(ta.iter().map(|t| g.constant(t.clone())).collect(), vec![true; 3]);
        let b = StackedStates::new(tb.iter().map(|t| g.constant(t.clone())).collect(), vec![true; 2]);
        let out = m.forward(g, &a, &b)?;
        let wv = g.constant(w.clone());
        let y = g.mul(out.z, wv)?;
        Ok(g.sum_all(y))
    })
    .unwrap();
    for p in &report.params {
        assert!(p.max_relative_error < 1e-5, "{} {}", p.name, p.max_relative_error);
    }
}

#[test]
fn affinity_dump_format() {
    let mut g = Graph::<f64>::new();
    let a = stack(&mut g, &[Tensor::from_f64([2, 1], &[1.0, 2.0]).unwrap()]);
    let b = stack(&mut g, &[Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap()]);
    let s = costack_affinity(&mut g, &a, &b).unwrap();
    let mut out = Vec::new();
    write_affinity_dump(&mut out, &g, &s, &[true, true], &[true, false]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, "# scores 2x2\n3\t-inf\n6\t-inf\n# argmax_pq 2x2\n0,0\t0,0\n0,0\t0,0\n");
}
