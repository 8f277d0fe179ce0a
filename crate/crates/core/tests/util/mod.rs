//! Shared helpers for the oracle test suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stlab_core::tape::{Tape, Var};
use stlab_core::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Compares precomputed analytic gradients against central differences of a
/// scalar evaluation function over every element of every input.
pub fn fd_compare(inputs: &[Tensor], analytic: &[Vec<f64>], eval: impl Fn(&[Tensor]) -> f64) {
    assert_eq!(inputs.len(), analytic.len());
    for (ii, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[ei] += H;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[ei] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let got = analytic[ii][ei];
            let denom = fd.abs().max(got.abs()).max(ABS_FLOOR / REL_TOL);
            assert!(
                (fd - got).abs() <= REL_TOL * denom + ABS_FLOOR,
                "input {ii} element {ei}: analytic {got}, finite diff {fd}"
            );
        }
    }
}

/// Checks analytic gradients of `build` w.r.t. every element of every input
/// against a central finite difference. `build` must lease the inputs as
/// leaves in order and return a scalar loss.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();

    for (ii, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[ii])
            .unwrap_or_else(|| panic!("input {ii} has no gradient"));
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[ei] += H;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[ei] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let got = analytic[ei];
            let denom = fd.abs().max(got.abs()).max(ABS_FLOOR / REL_TOL);
            assert!(
                (fd - got).abs() <= REL_TOL * denom + ABS_FLOOR,
                "input {ii} element {ei}: analytic {got}, finite diff {fd}"
            );
        }
    }
}
