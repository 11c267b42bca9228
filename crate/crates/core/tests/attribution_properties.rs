use codesign_core::attribution::{
    coalition_feature, coalition_values, coalition_values_ppnn, dominant_dimension, shapley_exact,
    shapley_exact_ppnn, shapley_from_values, COALITIONS,
};
use codesign_core::design_space::{DesignSpace, DIMENSION_COUNT};
use codesign_core::preference::{LogitModel, Ppnn, FEATURE_DIM, PARAM_COUNT};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl LogitModel for Linear {
    fn logit(&self, x: &[f64]) -> f64 {
        self.b + self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
}

fn block(d: usize) -> std::ops::Range<usize> {
    let s = DesignSpace::canonical();
    s.offsets()[d]..s.offsets()[d] + s.attribute_count(d)
}

fn random_vec(rng: &mut impl Rng) -> Vec<f64> {
    (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_net(rng: &mut impl Rng) -> Ppnn {
    Ppnn::from_params((0..PARAM_COUNT).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap()
}

/// Textbook Shapley sum written independently of the library: iterate coalitions
/// by explicit subset lists and weights from factorials.
fn brute_force<M: LogitModel>(m: &M, x: &[f64], z: &[f64]) -> [f64; DIMENSION_COUNT] {
    let fact = |k: u32| (1..=k as u64).product::<u64>() as f64;
    let mut phi = [0.0; DIMENSION_COUNT];
    for (d, phi_d) in phi.iter_mut().enumerate() {
        for s in 0..COALITIONS {
            if s >> d & 1 == 1 {
                continue;
            }
            let size = (s as u32).count_ones();
            let weight = fact(size) * fact(8 - size) / fact(9);
            let with = m.logit(&coalition_feature(x, z, s | 1 << d));
            let without = m.logit(&coalition_feature(x, z, s));
            *phi_d += weight * (with - without);
        }
    }
    phi
}

#[test]
fn linear_closed_form_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let m = Linear { w: random_vec(&mut rng), b: rng.gen_range(-1.0..1.0) };
        let x = random_vec(&mut rng);
        let z = random_vec(&mut rng);
        let brute = brute_force(&m, &x, &z);
        let fast = shapley_exact(&m, &x, &z);
        for d in 0..DIMENSION_COUNT {
            let closed: f64 = block(d).map(|j| m.w[j] * (x[j] - z[j])).sum();
            assert!((brute[d] - closed).abs() < 1e-9);
            assert!((fast[d] - closed).abs() < 1e-9);
        }
        let closed: [f64; DIMENSION_COUNT] =
            std::array::from_fn(|d| block(d).map(|j| m.w[j] * (x[j] - z[j])).sum());
        assert_eq!(dominant_dimension(&fast), dominant_dimension(&closed));
    }
}

#[test]
fn network_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let net = random_net(&mut rng);
        let x = random_vec(&mut rng);
        let z = random_vec(&mut rng);
        let brute = brute_force(&net, &x, &z);
        let fast = shapley_exact_ppnn(&net, &x, &z);
        for d in 0..DIMENSION_COUNT {
            assert!((brute[d] - fast[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn efficiency_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2_000 {
        let net = random_net(&mut rng);
        let x = random_vec(&mut rng);
        let z = random_vec(&mut rng);
        let phi = shapley_exact_ppnn(&net, &x, &z);
        let gap = net.logit(&x) - net.logit(&coalition_feature(&x, &z, 0));
        assert!((phi.iter().sum::<f64>() - gap).abs() < 1e-6);
    }
}

#[test]
fn symmetry_and_dummy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Sleeve Length (1) and Wearing Style (3) both have three attributes.
    let (a, b) = (block(1), block(3));
    for _ in 0..100 {
        let mut net = random_net(&mut rng);
        let mut x = random_vec(&mut rng);
        let mut z = random_vec(&mut rng);
        for (i, j) in a.clone().zip(b.clone()) {
            x[j] = x[i];
            z[j] = z[i];
            let wi: Vec<f64> = net.input_weights(i).to_vec();
            let hidden = codesign_core::preference::HIDDEN_DIM;
            net.params_mut()[j * hidden..(j + 1) * hidden].copy_from_slice(&wi);
        }
        let phi = shapley_exact_ppnn(&net, &x, &z);
        assert!((phi[1] - phi[3]).abs() < 1e-9, "{} vs {}", phi[1], phi[3]);

        let mut lin = Linear { w: random_vec(&mut rng), b: 0.0 };
        for j in block(6) {
            lin.w[j] = 0.0;
        }
        assert_eq!(shapley_exact(&lin, &x, &z)[6], 0.0);
    }
}

#[test]
fn permutation_sampling_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(&mut rng);
    let x = random_vec(&mut rng);
    let z = random_vec(&mut rng);
    let values = coalition_values_ppnn(&net, &x, &z);
    let exact = shapley_from_values(&values);
    let samples = 100_000;
    let mut sum = [0.0; DIMENSION_COUNT];
    let mut sq = [0.0; DIMENSION_COUNT];
    let mut order: Vec<usize> = (0..DIMENSION_COUNT).collect();
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let mut mask = 0usize;
        for &d in &order {
            let delta = values[mask | 1 << d] - values[mask];
            sum[d] += delta;
            sq[d] += delta * delta;
            mask |= 1 << d;
        }
    }
    for d in 0..DIMENSION_COUNT {
        let n = samples as f64;
        let mean = sum[d] / n;
        let se = ((sq[d] / n - mean * mean).max(0.0) / n).sqrt();
        assert!((mean - exact[d]).abs() <= 3.0 * se + 1e-12, "dim {d}: {mean} vs {exact:?}");
    }
}

#[test]
fn generic_and_fast_tables_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = random_net(&mut rng);
    let x = random_vec(&mut rng);
    let z = random_vec(&mut rng);
    let a = coalition_values(&net, &x, &z);
    let b = coalition_values_ppnn(&net, &x, &z);
    assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-10));
}

proptest! {
    #[test]
    fn efficiency_property(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&mut rng);
        let x = random_vec(&mut rng);
        let z = random_vec(&mut rng);
        let phi = shapley_exact_ppnn(&net, &x, &z);
        let gap = net.logit(&x) - net.logit(&coalition_feature(&x, &z, 0));
        prop_assert!((phi.iter().sum::<f64>() - gap).abs() < 1e-6);
    }
}
