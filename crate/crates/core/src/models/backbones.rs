//! Shape-level reconstructions of ResNet50V2 and InceptionV3 following the
//! Keras application definitions layer for layer, including their layer
//! names, plus the two small trainable backbones.

use std::collections::HashMap;

use crate::graph::{GraphBuilder, GraphError, LayerSpec, NodeId, Padding};

/// Keras-style automatic names: the first layer of a kind is `prefix`, later
/// ones `prefix_1`, `prefix_2`, ... Counters are shared by every backbone
/// built with the same namer, as they are within one Keras session.
#[derive(Debug, Default)]
pub(crate) struct Namer {
    counts: HashMap<&'static str, usize>,
}

impl Namer {
    pub fn next(&mut self, prefix: &'static str) -> String {
        let n = self.counts.entry(prefix).or_insert(0);
        let name = if *n == 0 {
            prefix.to_string()
        } else {
            format!("{prefix}_{n}")
        };
        *n += 1;
        name
    }
}

const RESNET_BN_EPSILON: f64 = 1.001e-5;

fn resnet_bn() -> LayerSpec {
    LayerSpec::BatchNorm {
        scale: true,
        center: true,
        epsilon: RESNET_BN_EPSILON,
    }
}

fn conv(filters: usize, kernel: (usize, usize), stride: usize, padding: Padding, bias: bool) -> LayerSpec {
    LayerSpec::Conv2D {
        filters,
        kernel,
        stride: (stride, stride),
        padding,
        bias,
    }
}

fn block2(
    b: &mut GraphBuilder,
    namer: &mut Namer,
    x: NodeId,
    filters: usize,
    stride: usize,
    conv_shortcut: bool,
    name: &str,
) -> Result<NodeId, GraphError> {
    let preact = b.add(format!("{name}_preact_bn"), resnet_bn(), &[x])?;
    let preact = b.add(format!("{name}_preact_relu"), LayerSpec::ReLU, &[preact])?;
    let shortcut = if conv_shortcut {
        b.add(
            format!("{name}_0_conv"),
            conv(4 * filters, (1, 1), stride, Padding::Valid, true),
            &[preact],
        )?
    } else if stride > 1 {
        b.add(
            namer.next("max_pooling2d"),
            LayerSpec::max_pool(1, stride, Padding::Valid),
            &[x],
        )?
    } else {
        x
    };
    let y = b.add(
        format!("{name}_1_conv"),
        conv(filters, (1, 1), 1, Padding::Valid, false),
        &[preact],
    )?;
    let y = b.add(format!("{name}_1_bn"), resnet_bn(), &[y])?;
    let y = b.add(format!("{name}_1_relu"), LayerSpec::ReLU, &[y])?;
    let y = b.add(
        format!("{name}_2_pad"),
        LayerSpec::ZeroPad2D { pad: (1, 1, 1, 1) },
        &[y],
    )?;
    let y = b.add(
        format!("{name}_2_conv"),
        conv(filters, (3, 3), stride, Padding::Valid, false),
        &[y],
    )?;
    let y = b.add(format!("{name}_2_bn"), resnet_bn(), &[y])?;
    let y = b.add(format!("{name}_2_relu"), LayerSpec::ReLU, &[y])?;
    let y = b.add(
        format!("{name}_3_conv"),
        conv(4 * filters, (1, 1), 1, Padding::Valid, true),
        &[y],
    )?;
    b.add(format!("{name}_out"), LayerSpec::Add, &[shortcut, y])
}

fn stack2(
    b: &mut GraphBuilder,
    namer: &mut Namer,
    mut x: NodeId,
    filters: usize,
    blocks: usize,
    stride1: usize,
    name: &str,
) -> Result<NodeId, GraphError> {
    x = block2(b, namer, x, filters, 1, true, &format!("{name}_block1"))?;
    for i in 2..blocks {
        x = block2(b, namer, x, filters, 1, false, &format!("{name}_block{i}"))?;
    }
    block2(b, namer, x, filters, stride1, false, &format!("{name}_block{blocks}"))
}

/// ResNet50V2 without the classification top; returns `post_relu`.
pub(crate) fn resnet50v2(b: &mut GraphBuilder, namer: &mut Namer, input: NodeId) -> Result<NodeId, GraphError> {
    let x = b.add("conv1_pad", LayerSpec::ZeroPad2D { pad: (3, 3, 3, 3) }, &[input])?;
    let x = b.add("conv1_conv", conv(64, (7, 7), 2, Padding::Valid, true), &[x])?;
    let x = b.add("pool1_pad", LayerSpec::ZeroPad2D { pad: (1, 1, 1, 1) }, &[x])?;
    let mut x = b.add("pool1_pool", LayerSpec::max_pool(3, 2, Padding::Valid), &[x])?;
    for (filters, blocks, stride1, name) in [
        (64, 3, 2, "conv2"),
        (128, 4, 2, "conv3"),
        (256, 6, 2, "conv4"),
        (512, 3, 1, "conv5"),
    ] {
        x = stack2(b, namer, x, filters, blocks, stride1, name)?;
    }
    let x = b.add("post_bn", resnet_bn(), &[x])?;
    b.add("post_relu", LayerSpec::ReLU, &[x])
}

/// Conv (no bias) + BatchNorm without scale + ReLU, named from the shared
/// counters.
fn conv2d_bn(
    b: &mut GraphBuilder,
    namer: &mut Namer,
    x: NodeId,
    filters: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
) -> Result<NodeId, GraphError> {
    let x = b.add(
        namer.next("conv2d"),
        conv(filters, kernel, stride, padding, false),
        &[x],
    )?;
    let x = b.add(
        namer.next("batch_normalization"),
        LayerSpec::BatchNorm {
            scale: false,
            center: true,
            epsilon: 1e-3,
        },
        &[x],
    )?;
    b.add(namer.next("activation"), LayerSpec::ReLU, &[x])
}

fn avg_pool_same(b: &mut GraphBuilder, namer: &mut Namer, x: NodeId) -> Result<NodeId, GraphError> {
    b.add(
        namer.next("average_pooling2d"),
        LayerSpec::AvgPool2D {
            pool: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
        },
        &[x],
    )
}

/// InceptionV3 without the classification top; returns `mixed10`.
pub(crate) fn inception_v3(b: &mut GraphBuilder, namer: &mut Namer, input: NodeId) -> Result<NodeId, GraphError> {
    use Padding::{Same, Valid};
    let n = namer;
    let x = conv2d_bn(b, n, input, 32, (3, 3), 2, Valid)?;
    let x = conv2d_bn(b, n, x, 32, (3, 3), 1, Valid)?;
    let x = conv2d_bn(b, n, x, 64, (3, 3), 1, Same)?;
    let x = b.add(n.next("max_pooling2d"), LayerSpec::max_pool(3, 2, Valid), &[x])?;
    let x = conv2d_bn(b, n, x, 80, (1, 1), 1, Valid)?;
    let x = conv2d_bn(b, n, x, 192, (3, 3), 1, Valid)?;
    let mut x = b.add(n.next("max_pooling2d"), LayerSpec::max_pool(3, 2, Valid), &[x])?;

    // mixed 0, 1, 2: 35x35 in the canonical 299 input
    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = conv2d_bn(b, n, x, 64, (1, 1), 1, Same)?;
        let b5 = conv2d_bn(b, n, x, 48, (1, 1), 1, Same)?;
        let b5 = conv2d_bn(b, n, b5, 64, (5, 5), 1, Same)?;
        let d = conv2d_bn(b, n, x, 64, (1, 1), 1, Same)?;
        let d = conv2d_bn(b, n, d, 96, (3, 3), 1, Same)?;
        let d = conv2d_bn(b, n, d, 96, (3, 3), 1, Same)?;
        let p = avg_pool_same(b, n, x)?;
        let p = conv2d_bn(b, n, p, pool_filters, (1, 1), 1, Same)?;
        x = b.add(format!("mixed{i}"), LayerSpec::Concat, &[b1, b5, d, p])?;
    }

    // mixed 3: reduction
    let b3 = conv2d_bn(b, n, x, 384, (3, 3), 2, Valid)?;
    let d = conv2d_bn(b, n, x, 64, (1, 1), 1, Same)?;
    let d = conv2d_bn(b, n, d, 96, (3, 3), 1, Same)?;
    let d = conv2d_bn(b, n, d, 96, (3, 3), 2, Valid)?;
    let p = b.add(n.next("max_pooling2d"), LayerSpec::max_pool(3, 2, Valid), &[x])?;
    x = b.add("mixed3", LayerSpec::Concat, &[b3, d, p])?;

    // mixed 4-7: factorized 7x7
    for (i, c7) in [(4, 128), (5, 160), (6, 160), (7, 192)] {
        let b1 = conv2d_bn(b, n, x, 192, (1, 1), 1, Same)?;
        let b7 = conv2d_bn(b, n, x, c7, (1, 1), 1, Same)?;
        let b7 = conv2d_bn(b, n, b7, c7, (1, 7), 1, Same)?;
        let b7 = conv2d_bn(b, n, b7, 192, (7, 1), 1, Same)?;
        let d = conv2d_bn(b, n, x, c7, (1, 1), 1, Same)?;
        let d = conv2d_bn(b, n, d, c7, (7, 1), 1, Same)?;
        let d = conv2d_bn(b, n, d, c7, (1, 7), 1, Same)?;
        let d = conv2d_bn(b, n, d, c7, (7, 1), 1, Same)?;
        let d = conv2d_bn(b, n, d, 192, (1, 7), 1, Same)?;
        let p = avg_pool_same(b, n, x)?;
        let p = conv2d_bn(b, n, p, 192, (1, 1), 1, Same)?;
        x = b.add(format!("mixed{i}"), LayerSpec::Concat, &[b1, b7, d, p])?;
    }

    // mixed 8: reduction
    let b3 = conv2d_bn(b, n, x, 192, (1, 1), 1, Same)?;
    let b3 = conv2d_bn(b, n, b3, 320, (3, 3), 2, Valid)?;
    let b7 = conv2d_bn(b, n, x, 192, (1, 1), 1, Same)?;
    let b7 = conv2d_bn(b, n, b7, 192, (1, 7), 1, Same)?;
    let b7 = conv2d_bn(b, n, b7, 192, (7, 1), 1, Same)?;
    let b7 = conv2d_bn(b, n, b7, 192, (3, 3), 2, Valid)?;
    let p = b.add(n.next("max_pooling2d"), LayerSpec::max_pool(3, 2, Valid), &[x])?;
    x = b.add("mixed8", LayerSpec::Concat, &[b3, b7, p])?;

    // mixed 9, 10: expanded filter banks
    for i in 0..2 {
        let b1 = conv2d_bn(b, n, x, 320, (1, 1), 1, Same)?;
        let b3 = conv2d_bn(b, n, x, 384, (1, 1), 1, Same)?;
        let b3a = conv2d_bn(b, n, b3, 384, (1, 3), 1, Same)?;
        let b3b = conv2d_bn(b, n, b3, 384, (3, 1), 1, Same)?;
        let b3 = b.add(format!("mixed9_{i}"), LayerSpec::Concat, &[b3a, b3b])?;
        let d = conv2d_bn(b, n, x, 448, (1, 1), 1, Same)?;
        let d = conv2d_bn(b, n, d, 384, (3, 3), 1, Same)?;
        let da = conv2d_bn(b, n, d, 384, (1, 3), 1, Same)?;
        let db = conv2d_bn(b, n, d, 384, (3, 1), 1, Same)?;
        let d = b.add(n.next("concatenate"), LayerSpec::Concat, &[da, db])?;
        let p = avg_pool_same(b, n, x)?;
        let p = conv2d_bn(b, n, p, 192, (1, 1), 1, Same)?;
        x = b.add(format!("mixed{}", 9 + i), LayerSpec::Concat, &[b1, b3, d, p])?;
    }
    Ok(x)
}

fn conv_bn_relu(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    filters: usize,
    kernel: usize,
    stride: usize,
    scale: bool,
) -> Result<NodeId, GraphError> {
    let x = b.add(
        format!("{name}_conv"),
        conv(filters, (kernel, kernel), stride, Padding::Same, false),
        &[x],
    )?;
    let x = b.add(
        format!("{name}_bn"),
        LayerSpec::BatchNorm {
            scale,
            center: true,
            epsilon: crate::graph::DEFAULT_BN_EPSILON,
        },
        &[x],
    )?;
    b.add(format!("{name}_relu"), LayerSpec::ReLU, &[x])
}

fn toy_block(b: &mut GraphBuilder, x: NodeId, filters: usize, stride: usize, name: &str) -> Result<NodeId, GraphError> {
    let y = conv_bn_relu(b, &format!("{name}_1"), x, filters, 3, stride, true)?;
    let y = b.add(
        format!("{name}_2_conv"),
        conv(filters, (3, 3), 1, Padding::Same, false),
        &[y],
    )?;
    let y = b.add(format!("{name}_2_bn"), LayerSpec::batch_norm(), &[y])?;
    let shortcut = if stride > 1 || b.shape(x).channels() != filters {
        b.add(
            format!("{name}_0_conv"),
            conv(filters, (1, 1), stride, Padding::Valid, false),
            &[x],
        )?
    } else {
        x
    };
    let s = b.add(format!("{name}_add"), LayerSpec::Add, &[shortcut, y])?;
    b.add(format!("{name}_out"), LayerSpec::ReLU, &[s])
}

/// Three residual blocks on a 32x32 input: 16x16x4, 8x8x8, 4x4x16.
/// Returns `res_block3_out`.
pub(crate) fn toy_residual(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, GraphError> {
    let x = conv_bn_relu(b, "res_stem", input, 4, 3, 1, true)?;
    let x = b.add("res_pool1", LayerSpec::max_pool(2, 2, Padding::Valid), &[x])?;
    let x = toy_block(b, x, 4, 1, "res_block1")?;
    let x = toy_block(b, x, 8, 2, "res_block2")?;
    toy_block(b, x, 16, 2, "res_block3")
}

/// A stem, a parallel-branch block at 8x8, a strided reduction, and a
/// second parallel-branch block ending at 4x4x16. Returns
/// `inc_mixed_b`.
pub(crate) fn toy_branch(b: &mut GraphBuilder, input: NodeId) -> Result<NodeId, GraphError> {
    let x = conv_bn_relu(b, "inc_stem", input, 8, 3, 2, false)?;
    let x = b.add("inc_pool1", LayerSpec::max_pool(2, 2, Padding::Valid), &[x])?;

    let a1 = conv_bn_relu(b, "inc_a_1x1", x, 8, 1, 1, false)?;
    let a3 = conv_bn_relu(b, "inc_a_3x3a", x, 4, 1, 1, false)?;
    let a3 = conv_bn_relu(b, "inc_a_3x3b", a3, 8, 3, 1, false)?;
    let ap = b.add(
        "inc_a_avg",
        LayerSpec::AvgPool2D {
            pool: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
        },
        &[x],
    )?;
    let ap = conv_bn_relu(b, "inc_a_pool", ap, 8, 1, 1, false)?;
    let x = b.add("inc_mixed_a", LayerSpec::Concat, &[a1, a3, ap])?;
    // A padded strided conv rather than a pool: after a pool, a channel
    // shift could reach batch-statistics BN through 1x1 convs only and
    // cancel exactly, leaving parameters with identically zero gradient.
    let x = conv_bn_relu(b, "inc_reduce", x, 16, 3, 2, false)?;

    let b1 = conv_bn_relu(b, "inc_b_1x1", x, 4, 1, 1, false)?;
    let b3 = conv_bn_relu(b, "inc_b_3x3a", x, 4, 1, 1, false)?;
    let b3 = conv_bn_relu(b, "inc_b_3x3b", b3, 8, 3, 1, false)?;
    let bp = b.add("inc_b_max", LayerSpec::max_pool(3, 1, Padding::Same), &[x])?;
    let bp = conv_bn_relu(b, "inc_b_pool", bp, 4, 1, 1, false)?;
    b.add("inc_mixed_b", LayerSpec::Concat, &[b1, b3, bp])
}
