//! Finite-difference checks of the trainable twins.

use fusionnet_core::gradcheck::{grad_check, DEFAULT_STEP};
use fusionnet_core::models::{build_toy, Variant};
use fusionnet_core::params::ParamStore;
use fusionnet_core::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn batch(n: usize, seed: u64) -> Tensor {
    let shape = Shape::new(vec![n, 32, 32, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn toy_m4_gradients_match_central_differences() {
    let m = build_toy(Variant::M4, 3).unwrap();
    let p = ParamStore::init(&m.graph, 17);
    let r = grad_check(&m.graph, &p, &batch(2, 18), &[0, 2], DEFAULT_STEP).unwrap();
    println!("{r:?}");
    assert_eq!(r.checked as u64, m.graph.param_count().trainable);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
