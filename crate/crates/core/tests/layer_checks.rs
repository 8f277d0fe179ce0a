//! Layer-level oracles: finite-difference gradient checks through each
//! building block, causality and locality probes, and dependency masks.

mod util;

use proptest::prelude::*;
use rand::Rng as _;
use stlab_core::layers::{
    AgnosticConvBlock, BatchNorm, ConvLstmCell, GraphConvLayer, GraphStencil, RegressorHead,
};
use stlab_core::tape::Tape;
use stlab_core::tensor::Tensor;
use util::{fd_compare, rand_tensor, seeded};

/// Swaps a layer's parameters for the given tensors (same order as
/// `params()`).
fn set_params<'a>(params: Vec<&mut Tensor>, values: impl Iterator<Item = &'a Tensor>) {
    for (p, v) in params.into_iter().zip(values) {
        *p = v.clone();
    }
}

#[test]
fn agnostic_block_gradient_check() {
    let mut rng = seeded(100);
    let block = AgnosticConvBlock::new(1, 3, 2, 4, &mut rng).unwrap();
    let x = rand_tensor(&[2, 1, 5, 4], &mut rng);

    let mut inputs = vec![x.clone()];
    inputs.extend(block.params().into_iter().cloned());

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (y, leased) = block.forward(&mut tape, xv).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let mut analytic = vec![tape.grad(xv).unwrap().to_vec()];
    for v in leased {
        analytic.push(tape.grad(v).unwrap().to_vec());
    }

    fd_compare(&inputs, &analytic, |ts| {
        let mut b = block.clone();
        set_params(b.params_mut(), ts[1..].iter());
        let mut tape = Tape::new();
        let xv = tape.leaf(ts[0].clone());
        let (y, _) = b.forward(&mut tape, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        tape.value(loss).item().unwrap()
    });
}

#[test]
fn convlstm_gradient_check_through_time() {
    let mut rng = seeded(101);
    let cell = ConvLstmCell::new(1, 2, &mut rng).unwrap();
    let steps = 3;
    let xs: Vec<Tensor> = (0..steps)
        .map(|_| rand_tensor(&[1, 1, 1, 3], &mut rng))
        .collect();

    let run = |cell: &ConvLstmCell, xs: &[Tensor], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leased = cell.lease(&mut tape);
        let mut h = tape.leaf(Tensor::zeros(&[1, 2, 1, 3]));
        let mut c = tape.leaf(Tensor::zeros(&[1, 2, 1, 3]));
        let mut xvars = Vec::new();
        let mut acc = None;
        for x in xs {
            let xv = tape.leaf(x.clone());
            xvars.push(xv);
            let (hn, cn) = cell.step(&mut tape, &leased, xv, h, c).unwrap();
            h = hn;
            c = cn;
            let sq = tape.mul(hn, hn).unwrap();
            let s = tape.sum(sq);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s).unwrap(),
            });
        }
        let loss = acc.unwrap();
        let lv = tape.value(loss).item().unwrap();
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(loss).unwrap();
            for v in xvars.iter().chain(&leased) {
                grads.push(tape.grad(*v).unwrap().to_vec());
            }
        }
        (lv, grads)
    };

    let (_, analytic) = run(&cell, &xs, true);
    let mut inputs = xs.clone();
    inputs.extend(cell.params().into_iter().cloned());
    fd_compare(&inputs, &analytic, |ts| {
        let mut c = cell.clone();
        set_params(c.params_mut(), ts[steps..].iter());
        run(&c, &ts[..steps], false).0
    });
}

#[test]
fn graph_conv_gradient_check() {
    let mut rng = seeded(102);
    // 4-cycle adjacency.
    let a = [
        0u8, 1, 0, 1, //
        1, 0, 1, 0, //
        0, 1, 0, 1, //
        1, 0, 1, 0,
    ];
    let stencil = GraphStencil::from_adjacency(&a, 4, 2).unwrap();
    let layer = GraphConvLayer::new(stencil, &mut rng);
    let x = rand_tensor(&[4, 3], &mut rng);

    let mut inputs = vec![x.clone()];
    inputs.extend(layer.params().into_iter().cloned());

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (y, leased) = layer.forward(&mut tape, xv).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let mut analytic = vec![tape.grad(xv).unwrap().to_vec()];
    for v in leased {
        analytic.push(tape.grad(v).unwrap().to_vec());
    }

    fd_compare(&inputs, &analytic, |ts| {
        let mut l = layer.clone();
        set_params(l.params_mut(), ts[1..].iter());
        let mut tape = Tape::new();
        let xv = tape.leaf(ts[0].clone());
        let (y, _) = l.forward(&mut tape, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        tape.value(loss).item().unwrap()
    });
}

#[test]
fn regressor_gradient_check() {
    let mut rng = seeded(103);
    let head = RegressorHead::new(2, 3, 2, &mut rng).unwrap();
    let latent = rand_tensor(&[2, 2, 3, 4], &mut rng);

    let mut inputs = vec![latent.clone()];
    inputs.extend(head.params().into_iter().cloned());

    let mut tape = Tape::new();
    let lv = tape.leaf(latent);
    let (y, leased) = head.forward(&mut tape, lv).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.mean(sq);
    tape.backward(loss).unwrap();
    let mut analytic = vec![tape.grad(lv).unwrap().to_vec()];
    for v in leased {
        analytic.push(tape.grad(v).unwrap().to_vec());
    }

    fd_compare(&inputs, &analytic, |ts| {
        let mut h = head.clone();
        set_params(h.params_mut(), ts[1..].iter());
        let mut tape = Tape::new();
        let lv = tape.leaf(ts[0].clone());
        let (y, _) = h.forward(&mut tape, lv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean(sq);
        tape.value(loss).item().unwrap()
    });
}

#[test]
fn batchnorm_gradient_check() {
    let mut rng = seeded(104);
    let bn = BatchNorm::new(2);
    let x = rand_tensor(&[4, 2, 3, 3], &mut rng);

    let mut inputs = vec![x.clone()];
    inputs.extend(bn.params().into_iter().cloned());

    let mut bn_run = bn.clone();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (y, leased) = bn_run.forward(&mut tape, xv, true).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let mut analytic = vec![tape.grad(xv).unwrap().to_vec()];
    for v in leased {
        analytic.push(tape.grad(v).unwrap().to_vec());
    }

    fd_compare(&inputs, &analytic, |ts| {
        let mut b = bn.clone();
        set_params(b.params_mut(), ts[1..].iter());
        let mut tape = Tape::new();
        let xv = tape.leaf(ts[0].clone());
        let (y, _) = b.forward(&mut tape, xv, true).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        tape.value(loss).item().unwrap()
    });
}

#[test]
fn graph_conv_dependency_mask_matches_stencil_support() {
    let mut rng = seeded(105);
    // Random 5-node symmetric graph.
    let s = 5;
    let mut a = vec![0u8; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            if rng.gen_bool(0.4) {
                a[i * s + j] = 1;
                a[j * s + i] = 1;
            }
        }
    }
    let k = 2;
    let stencil = GraphStencil::from_adjacency(&a, s, k).unwrap();
    let layer = GraphConvLayer::new(stencil.clone(), &mut rng);

    // Expected reachability: union over orders of the stencil supports.
    let mut reach = vec![false; s * s];
    for kappa in 1..=k {
        for &(i, j) in stencil.order(kappa).iter() {
            reach[i * s + j] = true;
        }
    }

    let base = rand_tensor(&[s, 1], &mut rng);
    let run = |x: Tensor| -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let (y, _) = layer.forward(&mut tape, xv).unwrap();
        tape.value(y).data().to_vec()
    };
    let y0 = run(base.clone());
    for m in 0..s {
        let mut pert = base.clone();
        pert.data_mut()[m] += 1.0;
        let y1 = run(pert);
        for i in 0..s {
            let changed = (y1[i] - y0[i]).abs() > 1e-12;
            assert_eq!(
                changed,
                reach[i * s + m],
                "node {i} response to perturbing node {m}"
            );
        }
    }
}

#[test]
fn regressor_never_mixes_columns() {
    let mut rng = seeded(106);
    let head = RegressorHead::new(3, 4, 2, &mut rng).unwrap();
    let base = rand_tensor(&[1, 3, 4, 6], &mut rng);
    let run = |latent: Tensor| -> Vec<f64> {
        let mut tape = Tape::new();
        let lv = tape.leaf(latent);
        let (y, _) = head.forward(&mut tape, lv).unwrap();
        tape.value(y).data().to_vec()
    };
    let y0 = run(base.clone());
    let s = 6;
    for target in 0..s {
        let mut pert = base.clone();
        for c in 0..3 {
            for t in 0..4 {
                pert.data_mut()[(c * 4 + t) * s + target] += 0.5 + target as f64;
            }
        }
        let y1 = run(pert);
        for tp in 0..2 {
            for col in 0..s {
                if col == target {
                    continue;
                }
                assert_eq!(
                    y0[tp * s + col],
                    y1[tp * s + col],
                    "column {col} moved when perturbing column {target}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Causality: output rows strictly before a perturbed time step never move.
    #[test]
    fn agnostic_block_is_causal(
        seed in 0u64..1000,
        t_past in 1usize..4,
        t in 2usize..6,
        s in 2usize..5,
        t0 in 0usize..6,
    ) {
        prop_assume!(t0 < t);
        let mut rng = seeded(seed);
        let block = AgnosticConvBlock::new(1, t_past, 2, s, &mut rng).unwrap();
        let base = rand_tensor(&[1, 1, t, s], &mut rng);
        let run = |x: Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (y, _) = block.forward(&mut tape, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        let y0 = run(base.clone());
        let mut pert = base;
        for si in 0..s {
            pert.data_mut()[t0 * s + si] += 3.0;
        }
        let y1 = run(pert);
        // Output layout [1,2,t,s]: check all rows < t0 across both channels.
        for c in 0..2 {
            for ti in 0..t0 {
                for si in 0..s {
                    let idx = (c * t + ti) * s + si;
                    prop_assert_eq!(y0[idx], y1[idx]);
                }
            }
        }
    }
}
