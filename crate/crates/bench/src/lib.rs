//! Fixtures shared by the benches.

use fusionnet_core::params::ParamStore;
use fusionnet_core::{GraphBuilder, LayerSpec, ModelGraph, Padding, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// conv 3x3 -> relu -> max pool -> GAP -> dense -> softmax on `n x hw x hw x c`.
pub fn conv_block(n: usize, hw: usize, c: usize, filters: usize) -> (ModelGraph, ParamStore, Tensor, Vec<usize>) {
    let mut b = GraphBuilder::new();
    let shape = Shape::new(vec![hw, hw, c]).expect("valid shape");
    let x = b.input("in", shape).expect("input");
    let conv = b
        .add("conv", LayerSpec::conv(filters, 3, 1, Padding::Same, true), &[x])
        .expect("conv");
    let r = b.add("relu", LayerSpec::ReLU, &[conv]).expect("relu");
    let p = b
        .add("pool", LayerSpec::max_pool(2, 2, Padding::Valid), &[r])
        .expect("pool");
    let g = b.add("gap", LayerSpec::GlobalAvgPool2D, &[p]).expect("gap");
    let d = b.add("fc", LayerSpec::dense(3), &[g]).expect("dense");
    let s = b.add("softmax", LayerSpec::Softmax, &[d]).expect("softmax");
    let graph = b.finish(&[s]).expect("graph");
    let params = ParamStore::init(&graph, 1);
    (
        graph,
        params,
        random_batch(&[n, hw, hw, c], 2),
        (0..n).map(|i| i % 3).collect(),
    )
}

pub fn random_batch(dims: &[usize], seed: u64) -> Tensor {
    let shape = Shape::new(dims.to_vec()).expect("valid shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}
