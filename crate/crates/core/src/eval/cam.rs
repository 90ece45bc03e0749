//! Gradient-weighted class activation maps.

use crate::exec::{self, ExecError, ForwardMode};
use crate::graph::{LayerSpec, ModelGraph};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CamError {
    #[error("no node named `{0}`")]
    MissingNode(String),
    #[error("node `{0}` is not a spatial (H, W, C) feature map")]
    NotSpatial(String),
    #[error("graph output must be a softmax over logits")]
    NoLogits,
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("{images} images but {classes} target classes")]
    Length { images: usize, classes: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Heatmap of `image` (rank 3) for `class`, taken at the feature map named
/// `node`. See [`grad_cam_batch`].
pub fn grad_cam(
    graph: &ModelGraph,
    params: &ParamStore,
    image: &Tensor,
    class: usize,
    node: &str,
) -> Result<Tensor, CamError> {
    let batch = Tensor::stack(&[image]).map_err(ExecError::from)?;
    Ok(grad_cam_batch(graph, params, &batch, &[class], node)?.remove(0))
}

/// One `(H, W)` heatmap per sample of `batch`.
///
/// The class score is the pre-softmax logit. Channel weights are the spatial
/// means of its gradient with respect to the feature map; the map is
/// `ReLU(sum_c w_c A_c)`, min-max normalized to `[0, 1]`. A constant map
/// becomes all zeros (or all ones when its constant value is positive).
///
/// Runs in inference mode, so samples do not interact and one reverse pass
/// serves the whole batch.
pub fn grad_cam_batch(
    graph: &ModelGraph,
    params: &ParamStore,
    batch: &Tensor,
    classes: &[usize],
    node: &str,
) -> Result<Vec<Tensor>, CamError> {
    let target = graph
        .find(node)
        .ok_or_else(|| CamError::MissingNode(node.to_string()))?;
    let &[h, w, c] = graph.shape(target).dims() else {
        return Err(CamError::NotSpatial(node.to_string()));
    };
    let out = graph.output();
    let logits = match (&graph.node(out).layer, graph.node(out).inputs.as_slice()) {
        (LayerSpec::Softmax, &[l]) => l,
        _ => return Err(CamError::NoLogits),
    };
    let k = graph.shape(logits).dims()[0];
    let n = batch.dims()[0];
    if classes.len() != n {
        return Err(CamError::Length {
            images: n,
            classes: classes.len(),
        });
    }
    if let Some(&class) = classes.iter().find(|&&c| c >= k) {
        return Err(CamError::Class { class, classes: k });
    }

    let tape = exec::forward(graph, params, batch, ForwardMode::INFERENCE)?;
    let mut seed = vec![0.0; n * k];
    for (i, &cl) in classes.iter().enumerate() {
        seed[i * k + cl] = 1.0;
    }
    let seed = Tensor::from_vec(Shape::new(vec![n, k]).map_err(ExecError::from)?, seed).map_err(ExecError::from)?;
    let grads = exec::backprop(graph, params, &tape, vec![(logits, seed)], &[target])?;
    let acts = tape.get(target).expect("feature map precedes the output");
    let hw = h * w;
    let zero = vec![0.0; n * hw * c];
    let dact = grads.nodes.get(&target).map_or(&zero[..], |t| t.data());

    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let a = &acts.data()[i * hw * c..][..hw * c];
        let g = &dact[i * hw * c..][..hw * c];
        let mut weights = vec![0.0; c];
        for px in g.chunks_exact(c) {
            for (wc, v) in weights.iter_mut().zip(px) {
                *wc += v;
            }
        }
        for wc in &mut weights {
            *wc /= hw as f64;
        }
        let raw: Vec<f64> = a
            .chunks_exact(c)
            .map(|px| px.iter().zip(&weights).map(|(x, wc)| x * wc).sum::<f64>().max(0.0))
            .collect();
        maps.push(
            Tensor::from_vec(Shape::new(vec![h, w]).map_err(ExecError::from)?, normalize(raw))
                .map_err(ExecError::from)?,
        );
    }
    Ok(maps)
}

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        raw.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        let v = if hi > 0.0 { 1.0 } else { 0.0 };
        vec![v; raw.len()]
    }
}
