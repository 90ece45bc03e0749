//! Model zoo: the two full-size backbones, the fusion variants built on them,
//! and small trainable twins with the same fusion plumbing.
//!
//! | variant | fusion |
//! |---|---|
//! | M1 | multilayer, ResNet side only |
//! | M2 | multilayer, Inception side only |
//! | M3 | backbone outputs only, fused by addition |
//! | M4 | multilayer on both sides, fused by addition |

mod backbones;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fdsfm::{emit_subgraph, plan_fusion, FusionNames, PlanError};
use crate::graph::{GraphBuilder, GraphError, LayerSpec, ModelGraph, NodeId};
use crate::shape;
use crate::tensor::Shape;
use backbones::Namer;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("{side} tap `{node}` does not exist in the backbone")]
    UnknownTap { side: &'static str, node: String },
    #[error("tap `{node}` has shape {actual}, config declares {expected}")]
    TapShape {
        node: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("invalid fusion config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::M1, Variant::M2, Variant::M3, Variant::M4];

    fn uses_resnet(self) -> bool {
        self != Variant::M2
    }

    fn uses_inception(self) -> bool {
        self != Variant::M1
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::M4 => "m4",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            "m4" => Ok(Variant::M4),
            _ => Err(format!("unknown variant `{s}` (expected m1, m2, m3 or m4)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Toy,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Toy => "toy",
        })
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Scale::Full),
            "toy" => Ok(Scale::Toy),
            _ => Err(format!("unknown scale `{s}` (expected full or toy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet50v2,
    Inceptionv3,
}

/// A named node whose activation is extracted, with its declared
/// per-sample shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub node: String,
    pub shape: Shape,
}

impl Tap {
    fn new(node: &str, shape: Shape) -> Tap {
        Tap {
            node: node.to_string(),
            shape,
        }
    }
}

/// The trunk map appended after the multilayer concat. Several nodes are
/// concatenated (in order) into one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkTap {
    pub nodes: Vec<String>,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideTaps {
    pub maps: Vec<Tap>,
    pub trunk: TrunkTap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub resnet_taps: SideTaps,
    pub inception_taps: SideTaps,
    pub projection_filters: usize,
    pub dense_units: usize,
    pub classes: usize,
    pub dropout: f64,
    pub freeze_backbones: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            resnet_taps: SideTaps {
                maps: vec![
                    Tap::new("conv3_block1_1_relu", shape![28, 28, 128]),
                    Tap::new("conv4_block6_out", shape![7, 7, 1024]),
                    Tap::new("conv3_block4_out", shape![14, 14, 512]),
                    Tap::new("conv2_block3_out", shape![28, 28, 256]),
                ],
                trunk: TrunkTap {
                    nodes: vec!["post_relu".into()],
                    shape: shape![7, 7, 2048],
                },
            },
            inception_taps: SideTaps {
                maps: vec![
                    Tap::new("activation_77", shape![5, 5, 384]),
                    Tap::new("activation_80", shape![5, 5, 448]),
                    Tap::new("activation_86", shape![5, 5, 384]),
                    Tap::new("activation_89", shape![5, 5, 448]),
                ],
                // the last block's 3x3 bank, its double-3x3 bank, and the
                // shared 3x3 conv feeding the latter: 768 + 768 + 384
                trunk: TrunkTap {
                    nodes: vec!["mixed9_1".into(), "concatenate_1".into(), "activation_90".into()],
                    shape: shape![5, 5, 1920],
                },
            },
            projection_filters: 2048,
            dense_units: 256,
            classes: 3,
            dropout: 0.3,
            freeze_backbones: true,
        }
    }
}

impl FusionConfig {
    /// Configuration of the trainable twins. Nothing is frozen.
    pub fn toy(classes: usize) -> FusionConfig {
        FusionConfig {
            resnet_taps: SideTaps {
                maps: vec![
                    Tap::new("res_pool1", shape![16, 16, 4]),
                    Tap::new("res_block3_1_relu", shape![4, 4, 16]),
                    Tap::new("res_block2_out", shape![8, 8, 8]),
                    Tap::new("res_block1_out", shape![16, 16, 4]),
                ],
                trunk: TrunkTap {
                    nodes: vec!["res_block3_out".into()],
                    shape: shape![4, 4, 16],
                },
            },
            inception_taps: SideTaps {
                maps: vec![
                    Tap::new("inc_b_1x1_relu", shape![4, 4, 4]),
                    Tap::new("inc_b_3x3a_relu", shape![4, 4, 4]),
                    Tap::new("inc_b_3x3b_relu", shape![4, 4, 8]),
                    Tap::new("inc_b_pool_relu", shape![4, 4, 4]),
                ],
                trunk: TrunkTap {
                    nodes: vec!["inc_mixed_b".into()],
                    shape: shape![4, 4, 16],
                },
            },
            projection_filters: 16,
            dense_units: 16,
            classes,
            dropout: 0.3,
            freeze_backbones: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.projection_filters == 0 || self.dense_units == 0 {
            return bad("projection_filters and dense_units must be positive".into());
        }
        for (side, taps) in [("resnet", &self.resnet_taps), ("inception", &self.inception_taps)] {
            if taps.maps.len() < 2 {
                return bad(format!("{side}: at least two tap maps are needed"));
            }
            if taps.trunk.nodes.is_empty() {
                return bad(format!("{side}: trunk needs at least one node"));
            }
            for s in taps.maps.iter().map(|t| &t.shape).chain([&taps.trunk.shape]) {
                let d = s.dims();
                if d.len() != 3 || d[0] != d[1] {
                    return bad(format!("{side}: tap shape {s} is not a square (W, W, C) map"));
                }
            }
        }
        Ok(())
    }
}

/// Names of the fusion-head nodes on one side.
struct SideNames {
    alias_prefix: &'static str,
    fusion: FusionNames,
    gap: &'static str,
}

fn resnet_names() -> SideNames {
    SideNames {
        alias_prefix: "ResNet_Layer_FM",
        fusion: FusionNames {
            // one name per tap; the second tap is already at the target
            // size so its name goes unused
            pools: [
                "max_pooling2d_36",
                "max_pooling2d_38",
                "max_pooling2d_39",
                "max_pooling2d_37",
            ]
            .map(String::from)
            .to_vec(),
            concat: "concatenate_18".into(),
            concat_trunk: "concatenate_19".into(),
            batch_norm: "batch_norm_112".into(),
            projection: "conv2d_102".into(),
        },
        gap: "global_avg_pool2d_4",
    }
}

fn inception_names() -> SideNames {
    SideNames {
        alias_prefix: "Inception_Layer_FM",
        fusion: FusionNames {
            pools: [
                "max_pooling2d_40",
                "max_pooling2d_41",
                "max_pooling2d_42",
                "max_pooling2d_43",
            ]
            .map(String::from)
            .to_vec(),
            concat: "concatenate_24".into(),
            concat_trunk: "concatenate_25".into(),
            batch_norm: "batch_norm_115".into(),
            projection: "conv2d_105".into(),
        },
        gap: "global_avg_pool2d_7",
    }
}

pub const INPUT_NAME: &str = "input_layer";
pub const FUSION_NODE: &str = "lambda";
pub const FUSION_ALIAS: &str = "lambda (Add_func.)";
pub const RESNET_ALIAS: &str = "Pre-trained ResNet";
pub const INCEPTION_ALIAS: &str = "Pre-trained Inception";

/// A built model plus the bookkeeping the rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub graph: ModelGraph,
    pub variant: Variant,
    pub scale: Scale,
    pub config: FusionConfig,
    /// Nodes added after the backbones, in creation order.
    pub head: Vec<NodeId>,
    /// Node whose activations Grad-CAM weighs: the ResNet-side projection
    /// for M1 and M4, the Inception-side projection for M2, and the ResNet
    /// output for M3.
    pub cam_node: NodeId,
}

impl BuiltModel {
    /// Layer kinds of the head nodes, for structural comparison.
    pub fn head_signature(&self) -> Vec<&'static str> {
        self.head.iter().map(|&id| self.graph.node(id).layer.kind()).collect()
    }
}

pub fn input_shape(scale: Scale) -> Shape {
    match scale {
        Scale::Full => shape![224, 224, 3],
        Scale::Toy => shape![32, 32, 1],
    }
}

/// One backbone on its own, all parameters trainable.
pub fn build_backbone_shape(kind: BackboneKind) -> Result<ModelGraph, ModelError> {
    let mut b = GraphBuilder::new();
    let input = b.input(INPUT_NAME, input_shape(Scale::Full))?;
    let mut namer = Namer::default();
    let out = match kind {
        BackboneKind::Resnet50v2 => backbones::resnet50v2(&mut b, &mut namer, input)?,
        BackboneKind::Inceptionv3 => backbones::inception_v3(&mut b, &mut namer, input)?,
    };
    Ok(b.finish(&[out])?)
}

/// The full multilayer multimodal model (M4).
pub fn build_multifusionnet(cfg: &FusionConfig) -> Result<BuiltModel, ModelError> {
    build_model(Variant::M4, Scale::Full, cfg)
}

/// A full-size subsidiary variant (M1, M2 or M3).
pub fn build_subsidiary(variant: Variant, cfg: &FusionConfig) -> Result<BuiltModel, ModelError> {
    if variant == Variant::M4 {
        return Err(ModelError::Config("M4 is not a subsidiary variant".into()));
    }
    build_model(variant, Scale::Full, cfg)
}

/// Trainable twin of `variant` on 32x32x1 inputs.
pub fn build_toy(variant: Variant, classes: usize) -> Result<BuiltModel, ModelError> {
    build_model(variant, Scale::Toy, &FusionConfig::toy(classes))
}

/// Resolves the configured taps of one side and checks their shapes.
fn resolve_taps(
    b: &mut GraphBuilder,
    side: &'static str,
    taps: &SideTaps,
) -> Result<(Vec<NodeId>, NodeId), ModelError> {
    let lookup = |b: &GraphBuilder, node: &str, expected: &Shape| -> Result<NodeId, ModelError> {
        let id = b.find(node).ok_or_else(|| ModelError::UnknownTap {
            side,
            node: node.to_string(),
        })?;
        if b.shape(id) != expected {
            return Err(ModelError::TapShape {
                node: node.to_string(),
                expected: expected.clone(),
                actual: b.shape(id).clone(),
            });
        }
        Ok(id)
    };
    let maps = taps
        .maps
        .iter()
        .map(|t| lookup(b, &t.node, &t.shape))
        .collect::<Result<Vec<_>, _>>()?;
    let trunk = if let [single] = &taps.trunk.nodes[..] {
        lookup(b, single, &taps.trunk.shape)?
    } else {
        let parts = taps
            .trunk
            .nodes
            .iter()
            .map(|n| {
                b.find(n)
                    .ok_or_else(|| ModelError::UnknownTap { side, node: n.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let name = format!("{side}_trunk");
        let id = b.add(name.clone(), LayerSpec::Concat, &parts)?;
        lookup(b, &name, &taps.trunk.shape)?;
        id
    };
    Ok((maps, trunk))
}

struct Side {
    output: NodeId,
    taps: Option<(Vec<NodeId>, NodeId)>,
}

/// FDSFM fusion of one side followed by global average pooling; returns
/// the pooled vector and the projection conv.
fn fuse_side(
    b: &mut GraphBuilder,
    cfg: &FusionConfig,
    names: &SideNames,
    maps: &[NodeId],
    trunk: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let shapes: Vec<Shape> = maps.iter().map(|&m| b.shape(m).clone()).collect();
    let target = b.shape(trunk).dims()[0];
    let plan = plan_fusion(&shapes, target, cfg.projection_filters)?;
    let nodes = emit_subgraph(&plan, b, maps, Some(trunk), &names.fusion)?;
    let gap = b.add(names.gap, LayerSpec::GlobalAvgPool2D, &[nodes.projection])?;
    Ok((gap, nodes.projection))
}

pub fn build_model(variant: Variant, scale: Scale, cfg: &FusionConfig) -> Result<BuiltModel, ModelError> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let input = b.input(INPUT_NAME, input_shape(scale))?;
    let mut namer = Namer::default();
    let multilayer = variant != Variant::M3;

    b.set_frozen(cfg.freeze_backbones);
    let mut sides: Vec<(SideNames, Side)> = Vec::new();
    if variant.uses_resnet() {
        let output = match scale {
            Scale::Full => backbones::resnet50v2(&mut b, &mut namer, input)?,
            Scale::Toy => backbones::toy_residual(&mut b, input)?,
        };
        b.alias(RESNET_ALIAS, output);
        let taps = if multilayer {
            Some(resolve_taps(&mut b, "resnet", &cfg.resnet_taps)?)
        } else {
            None
        };
        sides.push((resnet_names(), Side { output, taps }));
    }
    if variant.uses_inception() {
        let output = match scale {
            Scale::Full => backbones::inception_v3(&mut b, &mut namer, input)?,
            Scale::Toy => backbones::toy_branch(&mut b, input)?,
        };
        b.alias(INCEPTION_ALIAS, output);
        let taps = if multilayer {
            Some(resolve_taps(&mut b, "inception", &cfg.inception_taps)?)
        } else {
            None
        };
        sides.push((inception_names(), Side { output, taps }));
    }
    b.set_frozen(false);

    let head_start = b.len();
    let mut pooled = Vec::new();
    let mut cam_node = None;
    for (names, side) in &sides {
        match &side.taps {
            Some((maps, trunk)) => {
                for (i, &m) in maps.iter().enumerate() {
                    b.alias(format!("{}{}", names.alias_prefix, i + 1), m);
                }
                let (gap, projection) = fuse_side(&mut b, cfg, names, maps, *trunk)?;
                pooled.push(gap);
                cam_node.get_or_insert(projection);
            }
            None => {
                pooled.push(b.add(names.gap, LayerSpec::GlobalAvgPool2D, &[side.output])?);
                cam_node.get_or_insert(side.output);
            }
        }
    }
    let fused = if let [single] = pooled[..] {
        single
    } else {
        let id = b.add(FUSION_NODE, LayerSpec::Add, &pooled)?;
        b.alias(FUSION_ALIAS, id);
        id
    };
    let x = b.add("dropout", LayerSpec::Dropout { rate: cfg.dropout }, &[fused])?;
    let x = b.add("dense_2", LayerSpec::dense(cfg.dense_units), &[x])?;
    let x = b.add("dense_2_relu", LayerSpec::ReLU, &[x])?;
    let x = b.add("dense_3", LayerSpec::dense(cfg.classes), &[x])?;
    let out = b.add("predictions", LayerSpec::Softmax, &[x])?;
    let head = (head_start..b.len()).map(NodeId).collect();
    let graph = b.finish(&[out])?;
    Ok(BuiltModel {
        graph,
        variant,
        scale,
        config: cfg.clone(),
        head,
        cam_node: cam_node.expect("every variant has a side"),
    })
}
