//! Central finite differences against the hand-written backward pass.

use o2o_core::numerics::{mlp_backward, mlp_forward, MlpLayout, MlpParams, OutputHead, RealArray, Rng};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn objective(p: &MlpParams, x: &RealArray, cot: &RealArray) -> f64 {
    let y = mlp_forward(p, x).unwrap();
    y.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
}

fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff / analytic.abs().max(numeric.abs()) <= REL_TOL
}

fn random_instance(seed: u64) -> (MlpParams, RealArray, RealArray) {
    let mut rng = Rng::seed_from(seed);
    let input = 1 + rng.index(5);
    let output = 1 + rng.index(3);
    let head = if seed.is_multiple_of(2) {
        OutputHead::Linear
    } else {
        OutputHead::Tanh {
            scale: rng.uniform(0.5, 2.0),
        }
    };
    let mut p = MlpParams::init(MlpLayout::new(input, 8, output), head, false, &mut rng);
    // Move layer-norm gain/offset away from their defaults so their
    // gradients are exercised at a generic point.
    for v in p.gain_mut() {
        *v = rng.uniform(0.5, 1.5);
    }
    for v in p.offset_mut() {
        *v = rng.uniform(-0.3, 0.3);
    }
    let batch = 1 + rng.index(4);
    let x: Vec<f64> = (0..batch * input).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let c: Vec<f64> = (0..batch * output).map(|_| rng.normal()).collect();
    (
        p,
        RealArray::from_vec(&[batch, input], x).unwrap(),
        RealArray::from_vec(&[batch, output], c).unwrap(),
    )
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..24 {
        let (p, x, cot) = random_instance(seed);
        let (grads, _) = mlp_backward(&p, &x, &cot).unwrap();
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += H;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= H;
            let numeric = (objective(&plus, &x, &cot) - objective(&minus, &x, &cot)) / (2.0 * H);
            let analytic = grads.as_slice()[i];
            assert!(
                agrees(analytic, numeric),
                "seed {seed} param {i}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 20 * 100);
}

#[test]
fn input_gradients_match_finite_differences() {
    for seed in 100..124 {
        let (p, x, cot) = random_instance(seed);
        let (_, dx) = mlp_backward(&p, &x, &cot).unwrap();
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += H;
            let mut minus = x.clone();
            minus.data_mut()[i] -= H;
            let numeric = (objective(&p, &plus, &cot) - objective(&p, &minus, &cot)) / (2.0 * H);
            assert!(
                agrees(dx.data()[i], numeric),
                "seed {seed} input {i}: analytic {} numeric {numeric}",
                dx.data()[i]
            );
        }
    }
}

#[test]
fn single_weight_perturbation_matches_jacobian_entry() {
    // Perturb one weight and compare the change of one output coordinate
    // against the Jacobian row obtained with a one-hot cotangent.
    for seed in 200..220 {
        let (p, x, _) = random_instance(seed);
        let out = mlp_forward(&p, &x).unwrap();
        let mut onehot = RealArray::zeros(out.shape());
        onehot.data_mut()[0] = 1.0;
        let (grads, _) = mlp_backward(&p, &x, &onehot).unwrap();
        let idx = (seed as usize * 7) % p.len();
        let mut plus = p.clone();
        plus.as_mut_slice()[idx] += H;
        let mut minus = p.clone();
        minus.as_mut_slice()[idx] -= H;
        let numeric = (mlp_forward(&plus, &x).unwrap().data()[0]
            - mlp_forward(&minus, &x).unwrap().data()[0])
            / (2.0 * H);
        assert!(agrees(grads.as_slice()[idx], numeric));
    }
}
