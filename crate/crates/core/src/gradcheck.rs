//! Central-difference verification of [`crate::exec::backward`].
//!
//! ReLU and max pooling are piecewise linear. When a `±h` probe crosses one
//! of their switch points the central difference no longer estimates the
//! derivative at the base point, so such coordinates are re-probed with a
//! halved step until both probes take the same branches as the base
//! evaluation.

use crate::exec::{self, ExecError, ForwardMode, Tape};
use crate::graph::ModelGraph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Step halvings tried before a coordinate is reported as unresolved.
const MAX_HALVINGS: u32 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every checked coordinate.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose `±h` probe crossed a ReLU or max-pool switch and
    /// were evaluated with a smaller step.
    pub refined: usize,
    /// Coordinates still crossing a switch after every halving (the base
    /// point sits on a kink). Their last estimate is included in the max.
    pub unresolved: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks every trainable parameter coordinate. Batch norm uses batch
/// statistics (as in training) and dropout is disabled.
pub fn grad_check(
    graph: &ModelGraph,
    params: &ParamStore,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<GradCheckReport, ExecError> {
    let mode = ForwardMode {
        batch_stats: true,
        dropout_seed: None,
    };
    let base = exec::forward(graph, params, batch, mode)?;
    let grads = exec::backward(graph, params, &base, labels)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        refined: 0,
        unresolved: 0,
    };
    let mut probe = params.clone();
    let mut eval_at = |name: &str, i: usize, value: f64| -> Result<Tape, ExecError> {
        probe.get_mut(name).expect("gradient names are parameters").data_mut()[i] = value;
        exec::forward(graph, &probe, batch, mode)
    };
    for (name, g) in &grads {
        for i in 0..g.len() {
            let orig = params.require(name)?.data()[i];
            let mut step = h;
            let mut halvings = 0;
            let numeric = loop {
                let plus = eval_at(name, i, orig + step)?;
                let minus = eval_at(name, i, orig - step)?;
                let fd =
                    (exec::tape_loss(graph, &plus, labels)? - exec::tape_loss(graph, &minus, labels)?) / (2.0 * step);
                let smooth = exec::same_branches(graph, &base, &plus) && exec::same_branches(graph, &base, &minus);
                if smooth || halvings == MAX_HALVINGS {
                    if halvings > 0 {
                        report.refined += 1;
                    }
                    if !smooth {
                        report.unresolved += 1;
                    }
                    break fd;
                }
                step /= 2.0;
                halvings += 1;
            };
            eval_at(name, i, orig)?;

            let analytic = g.data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
