//! Fusion of different-sized feature maps.
//!
//! Each source map is max-pooled down to a shared `T x T` spatial size, the
//! pooled maps are concatenated along channels (optionally together with a
//! backbone trunk), batch-normalized and projected by a 1x1 convolution.

use serde::{Deserialize, Serialize};

use crate::graph::{GraphBuilder, GraphError, LayerSpec, NodeId, Padding, DEFAULT_BN_EPSILON};
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("cannot upsample: source size {source_size} is smaller than target {target}")]
    Upsample { source_size: usize, target: usize },
    #[error("target size must be >= 1")]
    ZeroTarget,
    #[error("fusion needs at least 2 feature maps, got {0}")]
    TooFewMaps(usize),
    #[error("feature map {0} is not a square (W, W, C) map")]
    NotSquare(Shape),
    #[error("{sources} sources supplied for a plan over {planned} maps")]
    SourceCount { sources: usize, planned: usize },
    #[error("trunk {trunk} does not match the {target}x{target} target")]
    Trunk { trunk: Shape, target: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolChoice {
    Identity,
    Pool { f: usize, s: usize },
}

impl PoolChoice {
    /// Spatial size after applying this choice to a `w`-wide map.
    pub fn apply(self, w: usize) -> usize {
        match self {
            PoolChoice::Identity => w,
            PoolChoice::Pool { f, s } => (w - f) / s + 1,
        }
    }
}

/// Pool window and stride taking a `source`-wide map to exactly `target`.
///
/// Picks `s = floor(W / T)` and `f = W - s * (T - 1)`, so the windows tile
/// the input with no dropped border and `f >= 1` always holds.
pub fn plan_pool(source: usize, target: usize) -> Result<PoolChoice, PlanError> {
    if target == 0 {
        return Err(PlanError::ZeroTarget);
    }
    if source < target {
        return Err(PlanError::Upsample {
            source_size: source,
            target,
        });
    }
    if source == target {
        return Ok(PoolChoice::Identity);
    }
    let s = source / target;
    let f = source - s * (target - 1);
    Ok(PoolChoice::Pool { f, s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedMap {
    pub source: Shape,
    pub pool: PoolChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub target_spatial: usize,
    pub per_map: Vec<PlannedMap>,
    pub concat_channels: usize,
    pub projection_filters: usize,
    pub batch_norm: bool,
}

fn square_side(s: &Shape) -> Result<usize, PlanError> {
    match *s.dims() {
        [w, l, _] if w == l => Ok(w),
        _ => Err(PlanError::NotSquare(s.clone())),
    }
}

pub fn plan_fusion(shapes: &[Shape], target: usize, projection_filters: usize) -> Result<FusionPlan, PlanError> {
    if shapes.len() < 2 {
        return Err(PlanError::TooFewMaps(shapes.len()));
    }
    let per_map = shapes
        .iter()
        .map(|s| {
            Ok(PlannedMap {
                pool: plan_pool(square_side(s)?, target)?,
                source: s.clone(),
            })
        })
        .collect::<Result<Vec<_>, PlanError>>()?;
    Ok(FusionPlan {
        target_spatial: target,
        concat_channels: shapes.iter().map(Shape::channels).sum(),
        per_map,
        projection_filters,
        batch_norm: true,
    })
}

/// Node names used when splicing a plan into a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNames {
    /// One name per source map; only used where a pool is needed.
    pub pools: Vec<String>,
    pub concat: String,
    /// Second concatenation, joining the trunk.
    pub concat_trunk: String,
    pub batch_norm: String,
    pub projection: String,
}

impl FusionNames {
    pub fn generic(prefix: &str, maps: usize) -> FusionNames {
        FusionNames {
            pools: (0..maps).map(|i| format!("{prefix}_pool_{i}")).collect(),
            concat: format!("{prefix}_concat"),
            concat_trunk: format!("{prefix}_concat_trunk"),
            batch_norm: format!("{prefix}_bn"),
            projection: format!("{prefix}_projection"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNodes {
    pub pooled: Vec<NodeId>,
    pub concat: NodeId,
    pub concat_trunk: Option<NodeId>,
    pub batch_norm: Option<NodeId>,
    pub projection: NodeId,
}

/// Appends `pool* -> concat [-> concat(trunk)] -> batch-norm -> 1x1 conv`.
pub fn emit_subgraph(
    plan: &FusionPlan,
    builder: &mut GraphBuilder,
    sources: &[NodeId],
    trunk: Option<NodeId>,
    names: &FusionNames,
) -> Result<FusionNodes, PlanError> {
    if plan.per_map.len() < 2 {
        return Err(PlanError::TooFewMaps(plan.per_map.len()));
    }
    if sources.len() != plan.per_map.len() {
        return Err(PlanError::SourceCount {
            sources: sources.len(),
            planned: plan.per_map.len(),
        });
    }
    let mut pooled = Vec::with_capacity(sources.len());
    for (i, (&src, planned)) in sources.iter().zip(&plan.per_map).enumerate() {
        let id = match planned.pool {
            PoolChoice::Identity => src,
            PoolChoice::Pool { f, s } => {
                let name = names
                    .pools
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("{}_pool_{i}", names.concat));
                builder.add(name, LayerSpec::max_pool(f, s, Padding::Valid), &[src])?
            }
        };
        pooled.push(id);
    }
    let concat = builder.add(names.concat.clone(), LayerSpec::Concat, &pooled)?;
    let mut head = concat;
    let concat_trunk = match trunk {
        Some(t) => {
            let ts = builder.shape(t);
            if ts.dims()[..ts.rank().saturating_sub(1)] != [plan.target_spatial, plan.target_spatial] {
                return Err(PlanError::Trunk {
                    trunk: ts.clone(),
                    target: plan.target_spatial,
                });
            }
            head = builder.add(names.concat_trunk.clone(), LayerSpec::Concat, &[concat, t])?;
            Some(head)
        }
        None => None,
    };
    let batch_norm = if plan.batch_norm {
        head = builder.add(
            names.batch_norm.clone(),
            LayerSpec::BatchNorm {
                scale: true,
                center: true,
                epsilon: DEFAULT_BN_EPSILON,
            },
            &[head],
        )?;
        Some(head)
    } else {
        None
    };
    let projection = builder.add(
        names.projection.clone(),
        LayerSpec::conv(plan.projection_filters, 1, 1, Padding::Valid, true),
        &[head],
    )?;
    Ok(FusionNodes {
        pooled,
        concat,
        concat_trunk,
        batch_norm,
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::summarize;
    use crate::shape;
    use proptest::prelude::*;

    /// Every (f, s) in [1, W]^2 reaching T under the valid-pool formula.
    fn brute_force(w: usize, t: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for f in 1..=w {
            for s in 1..=w {
                if (w - f) / s + 1 == t {
                    out.push((f, s));
                }
            }
        }
        out
    }

    /// Among valid (f, s): windows cover the input end to end with no gaps
    /// between them (f >= s), and the stride is as large as possible.
    fn tie_break(candidates: &[(usize, usize)], w: usize, t: usize) -> (usize, usize) {
        candidates
            .iter()
            .copied()
            .filter(|&(f, s)| s * (t - 1) + f == w && f >= s)
            .max_by_key(|&(_, s)| s)
            .expect("a gap-free tiling always exists")
    }

    #[test]
    fn table_pool_cases() {
        assert_eq!(plan_pool(28, 7).unwrap(), PoolChoice::Pool { f: 4, s: 4 });
        assert_eq!(plan_pool(14, 7).unwrap(), PoolChoice::Pool { f: 2, s: 2 });
        assert_eq!(plan_pool(7, 7).unwrap(), PoolChoice::Identity);
    }

    #[test]
    fn ten_to_three_matches_brute_force_tie_break() {
        let candidates = brute_force(10, 3);
        assert_eq!(tie_break(&candidates, 10, 3), (4, 3));
        assert_eq!(plan_pool(10, 3).unwrap(), PoolChoice::Pool { f: 4, s: 3 });
    }

    #[test]
    fn upsampling_rejected() {
        assert!(matches!(plan_pool(3, 5), Err(PlanError::Upsample { .. })));
        assert!(matches!(plan_pool(3, 0), Err(PlanError::ZeroTarget)));
    }

    #[test]
    fn exhaustive_up_to_64() {
        for w in 1..=64 {
            for t in 1..=w {
                let valid = brute_force(w, t);
                match plan_pool(w, t).unwrap() {
                    PoolChoice::Identity => assert_eq!(w, t),
                    PoolChoice::Pool { f, s } => {
                        assert!(valid.contains(&(f, s)), "W={w} T={t} -> ({f},{s})");
                        assert_eq!(tie_break(&valid, w, t), (f, s));
                        assert_eq!(s * (t - 1) + f, w);
                        assert!((1..=w).contains(&f) && (1..=w).contains(&s));
                    }
                }
            }
        }
    }

    #[test]
    fn resnet_and_inception_plans() {
        let res = plan_fusion(
            &[
                shape![28, 28, 128],
                shape![7, 7, 1024],
                shape![14, 14, 512],
                shape![28, 28, 256],
            ],
            7,
            2048,
        )
        .unwrap();
        assert_eq!(res.concat_channels, 1920);
        let inc = plan_fusion(
            &[
                shape![5, 5, 384],
                shape![5, 5, 448],
                shape![5, 5, 384],
                shape![5, 5, 448],
            ],
            5,
            2048,
        )
        .unwrap();
        assert_eq!(inc.concat_channels, 1664);
        assert!(inc.per_map.iter().all(|m| m.pool == PoolChoice::Identity));
        let twin = plan_fusion(&[shape![4, 4, 8], shape![4, 4, 8]], 4, 3).unwrap();
        assert_eq!(twin.concat_channels, 16);
        assert!(twin.per_map.iter().all(|m| m.pool == PoolChoice::Identity));
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(
            plan_fusion(&[shape![4, 4, 1]], 2, 1),
            Err(PlanError::TooFewMaps(1))
        ));
        assert!(matches!(
            plan_fusion(&[shape![4, 4, 1], shape![4, 5, 1]], 2, 1),
            Err(PlanError::NotSquare(_))
        ));
        assert!(matches!(
            plan_fusion(&[shape![4, 4, 1], shape![2, 2, 1]], 3, 1),
            Err(PlanError::Upsample { .. })
        ));
    }

    #[test]
    fn emitted_fragment_reproduces_resnet_rows() {
        let taps = [
            shape![28, 28, 128],
            shape![7, 7, 1024],
            shape![14, 14, 512],
            shape![28, 28, 256],
        ];
        let plan = plan_fusion(&taps, 7, 2048).unwrap();
        let mut b = GraphBuilder::new();
        let sources: Vec<NodeId> = taps
            .iter()
            .enumerate()
            .map(|(i, s)| b.input(format!("fm{i}"), s.clone()).unwrap())
            .collect();
        let trunk = b.input("trunk", shape![7, 7, 2048]).unwrap();
        let names = FusionNames {
            pools: vec![
                "max_pooling2d_36".into(),
                "unused".into(),
                "max_pooling2d_39".into(),
                "max_pooling2d_37".into(),
            ],
            concat: "concatenate_18".into(),
            concat_trunk: "concatenate_19".into(),
            batch_norm: "batch_norm_112".into(),
            projection: "conv2d_102".into(),
        };
        let nodes = emit_subgraph(&plan, &mut b, &sources, Some(trunk), &names).unwrap();
        assert_eq!(nodes.pooled[1], sources[1]);
        let s = summarize(&b.finish(&[nodes.projection]).unwrap());
        assert_eq!(s.row("concatenate_18").unwrap().output, shape![7, 7, 1920]);
        assert_eq!(s.row("concatenate_19").unwrap().output, shape![7, 7, 3968]);
        assert_eq!(s.row("batch_norm_112").unwrap().params.total(), 15_872);
        assert_eq!(s.row("conv2d_102").unwrap().params.total(), 8_128_512);
        assert_eq!(s.row("max_pooling2d_39").unwrap().layer.window(), Some((2, 2)));
        assert!(s.row("unused").is_none());
    }

    #[test]
    fn emitted_fragment_reproduces_inception_rows() {
        let taps = [
            shape![5, 5, 384],
            shape![5, 5, 448],
            shape![5, 5, 384],
            shape![5, 5, 448],
        ];
        let plan = plan_fusion(&taps, 5, 2048).unwrap();
        let mut b = GraphBuilder::new();
        let sources: Vec<NodeId> = taps
            .iter()
            .enumerate()
            .map(|(i, s)| b.input(format!("fm{i}"), s.clone()).unwrap())
            .collect();
        let trunk = b.input("trunk", shape![5, 5, 1920]).unwrap();
        let mut names = FusionNames::generic("inc", 4);
        names.concat = "concatenate_24".into();
        names.concat_trunk = "concatenate_25".into();
        names.batch_norm = "batch_norm_115".into();
        names.projection = "conv2d_105".into();
        let nodes = emit_subgraph(&plan, &mut b, &sources, Some(trunk), &names).unwrap();
        let s = summarize(&b.finish(&[nodes.projection]).unwrap());
        assert_eq!(s.row("concatenate_24").unwrap().output, shape![5, 5, 1664]);
        assert_eq!(s.row("concatenate_25").unwrap().output, shape![5, 5, 3584]);
        assert_eq!(s.row("batch_norm_115").unwrap().params.total(), 14_336);
        assert_eq!(s.row("conv2d_105").unwrap().params.total(), 7_342_080);
    }

    #[test]
    fn single_source_fragment_is_rejected() {
        let plan = FusionPlan {
            target_spatial: 4,
            per_map: vec![PlannedMap {
                source: shape![4, 4, 2],
                pool: PoolChoice::Identity,
            }],
            concat_channels: 2,
            projection_filters: 2,
            batch_norm: true,
        };
        let mut b = GraphBuilder::new();
        let i = b.input("in", shape![4, 4, 2]).unwrap();
        let err = emit_subgraph(&plan, &mut b, &[i], None, &FusionNames::generic("x", 1)).unwrap_err();
        assert!(matches!(err, PlanError::TooFewMaps(1)));
    }

    proptest! {
        #[test]
        fn concat_channels_permutation_invariant(
            chans in prop::collection::vec(1usize..300, 2..6),
            sizes in prop::collection::vec(4usize..40, 6),
            rot in 0usize..6,
        ) {
            let shapes: Vec<Shape> = chans.iter().zip(&sizes).map(|(&c, &w)| shape![w, w, c]).collect();
            let mut permuted = shapes.clone();
            let k = rot % shapes.len();
            permuted.rotate_left(k);
            let a = plan_fusion(&shapes, 4, 8).unwrap();
            let b = plan_fusion(&permuted, 4, 8).unwrap();
            prop_assert_eq!(a.concat_channels, b.concat_channels);
            let mut rotated = a.per_map.clone();
            rotated.rotate_left(k);
            prop_assert_eq!(rotated, b.per_map);
            for m in &a.per_map {
                prop_assert_eq!(m.pool.apply(m.source.dims()[0]), 4);
            }
        }
    }
}
