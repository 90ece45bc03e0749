use std::fmt;

use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// BatchNorm epsilon used when a layer does not override it.
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerSpec {
    Input {
        shape: Shape,
    },
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    MaxPool2D {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    /// Average pooling; with `Same` padding the divisor counts only
    /// positions inside the input.
    AvgPool2D {
        pool: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    /// Zero padding as `(top, bottom, left, right)`.
    ZeroPad2D {
        pad: (usize, usize, usize, usize),
    },
    /// Channels-last batch normalization. `scale`/`center` toggle the
    /// learned gamma/beta; moving mean and variance always exist.
    BatchNorm {
        scale: bool,
        center: bool,
        epsilon: f64,
    },
    Dense {
        units: usize,
        bias: bool,
    },
    GlobalAvgPool2D,
    Concat,
    Add,
    ReLU,
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding, bias: bool) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            bias,
        }
    }

    pub fn max_pool(pool: usize, stride: usize, padding: Padding) -> Self {
        LayerSpec::MaxPool2D {
            pool: (pool, pool),
            stride: (stride, stride),
            padding,
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            scale: true,
            center: true,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, bias: true }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "Input",
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::AvgPool2D { .. } => "AvgPool2D",
            LayerSpec::ZeroPad2D { .. } => "ZeroPad2D",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::GlobalAvgPool2D => "GlobalAvgPool2D",
            LayerSpec::Concat => "Concat",
            LayerSpec::Add => "Add",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Softmax => "Softmax",
        }
    }

    /// Spatial window of a conv or pooling layer.
    pub fn window(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2D { kernel, .. } => Some(kernel),
            LayerSpec::MaxPool2D { pool, .. } | LayerSpec::AvgPool2D { pool, .. } => Some(pool),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: (usize, usize), what: &str| {
            if v.0 == 0 || v.1 == 0 {
                Err(format!("{what} components must be >= 1"))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2D {
                filters,
                kernel,
                stride,
                ..
            } => {
                if filters == 0 {
                    return Err("filters must be >= 1".into());
                }
                pos(kernel, "kernel")?;
                pos(stride, "stride")
            }
            LayerSpec::MaxPool2D { pool, stride, .. } | LayerSpec::AvgPool2D { pool, stride, .. } => {
                pos(pool, "pool")?;
                pos(stride, "stride")
            }
            LayerSpec::Dense { units: 0, .. } => Err("units must be >= 1".into()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerSpec::BatchNorm { epsilon, .. } if epsilon.is_nan() || epsilon <= 0.0 => {
                Err("batch-norm epsilon must be positive".into())
            }
            _ => Ok(()),
        }
    }

    pub fn arity(&self) -> Arity {
        match self {
            LayerSpec::Input { .. } => Arity::None,
            LayerSpec::Concat | LayerSpec::Add => Arity::AtLeastTwo,
            _ => Arity::One,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.window() {
            Some((a, b)) => write!(f, "{} {}x{}", self.kind(), a, b),
            None => f.write_str(self.kind()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    None,
    One,
    AtLeastTwo,
}

/// Output length of a conv/pool window sweep along one axis.
///
/// `Valid`: `floor((w - k) / s) + 1`, requiring `w >= k`.
/// `Same`: `ceil(w / s)`.
pub fn window_output_len(w: usize, k: usize, s: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => (w >= k).then(|| (w - k) / s + 1),
        Padding::Same => Some(w.div_ceil(s)),
    }
}

/// Total padding `(before, after)` along one axis for `Same` padding.
/// The odd unit goes after, matching the usual "same upper" convention.
pub fn same_padding(w: usize, k: usize, s: usize) -> (usize, usize) {
    let out = w.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(w);
    (total / 2, total - total / 2)
}

fn spatial(input: &Shape) -> Result<(usize, usize, usize), String> {
    match *input.dims() {
        [w, l, c] => Ok((w, l, c)),
        _ => Err(format!("expected a (W, L, C) feature map, got {input}")),
    }
}

/// Output shape of `layer` applied to `inputs` (per-sample shapes, no batch axis).
pub fn infer_output_shape(layer: &LayerSpec, inputs: &[Shape]) -> Result<Shape, String> {
    layer.validate()?;
    let arity_ok = match layer.arity() {
        Arity::None => inputs.is_empty(),
        Arity::One => inputs.len() == 1,
        Arity::AtLeastTwo => inputs.len() >= 2,
    };
    if !arity_ok {
        return Err(format!("{} cannot take {} inputs", layer.kind(), inputs.len()));
    }
    let out = |dims: Vec<usize>| Shape::new(dims).map_err(|e| e.to_string());
    match *layer {
        LayerSpec::Input { ref shape } => Ok(shape.clone()),
        LayerSpec::Conv2D {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (w, l, _) = spatial(&inputs[0])?;
            let (ow, ol) = windowed(w, l, kernel, stride, padding)?;
            out(vec![ow, ol, filters])
        }
        LayerSpec::MaxPool2D { pool, stride, padding } | LayerSpec::AvgPool2D { pool, stride, padding } => {
            let (w, l, c) = spatial(&inputs[0])?;
            let (ow, ol) = windowed(w, l, pool, stride, padding)?;
            out(vec![ow, ol, c])
        }
        LayerSpec::ZeroPad2D { pad: (t, b, le, r) } => {
            let (w, l, c) = spatial(&inputs[0])?;
            out(vec![w + t + b, l + le + r, c])
        }
        LayerSpec::Dense { units, .. } => match inputs[0].dims() {
            [_] => out(vec![units]),
            _ => Err(format!("Dense expects a flat input, got {}", inputs[0])),
        },
        LayerSpec::GlobalAvgPool2D => {
            let (_, _, c) = spatial(&inputs[0])?;
            out(vec![c])
        }
        LayerSpec::Concat => {
            let first = inputs[0].dims();
            let lead = &first[..first.len() - 1];
            let mut channels = 0;
            for s in inputs {
                let d = s.dims();
                if d.len() != first.len() || &d[..d.len() - 1] != lead {
                    return Err(format!(
                        "Concat inputs disagree outside the channel axis: {} vs {}",
                        inputs[0], s
                    ));
                }
                channels += s.channels();
            }
            let mut dims = lead.to_vec();
            dims.push(channels);
            out(dims)
        }
        LayerSpec::Add => {
            if let Some(bad) = inputs.iter().find(|s| *s != &inputs[0]) {
                return Err(format!("Add inputs differ: {} vs {}", inputs[0], bad));
            }
            Ok(inputs[0].clone())
        }
        LayerSpec::BatchNorm { .. } | LayerSpec::ReLU | LayerSpec::Dropout { .. } | LayerSpec::Softmax => {
            Ok(inputs[0].clone())
        }
    }
}

fn windowed(
    w: usize,
    l: usize,
    k: (usize, usize),
    s: (usize, usize),
    padding: Padding,
) -> Result<(usize, usize), String> {
    let ow = window_output_len(w, k.0, s.0, padding);
    let ol = window_output_len(l, k.1, s.1, padding);
    match (ow, ol) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(format!("window {}x{} does not fit a {w}x{l} input", k.0, k.1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Kernel => "kernel",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::MovingMean => "moving_mean",
            ParamKind::MovingVariance => "moving_variance",
        }
    }

    /// Moving statistics are updated by forward passes, never by gradients.
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamKind::MovingMean | ParamKind::MovingVariance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Shape,
    pub trainable: bool,
}

/// Parameters owned by a node named `node` with the given input shape.
pub fn param_specs(node: &str, layer: &LayerSpec, input: Option<&Shape>, frozen: bool) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let Some(input) = input else { return specs };
    let mut push = |kind: ParamKind, dims: Vec<usize>| {
        specs.push(ParamSpec {
            name: format!("{node}/{}", kind.suffix()),
            kind,
            shape: Shape::new(dims).expect("parameter dims are positive"),
            trainable: !frozen && !kind.is_statistic(),
        });
    };
    match *layer {
        LayerSpec::Conv2D {
            filters, kernel, bias, ..
        } => {
            push(ParamKind::Kernel, vec![kernel.0, kernel.1, input.channels(), filters]);
            if bias {
                push(ParamKind::Bias, vec![filters]);
            }
        }
        LayerSpec::Dense { units, bias } => {
            push(ParamKind::Kernel, vec![input.channels(), units]);
            if bias {
                push(ParamKind::Bias, vec![units]);
            }
        }
        LayerSpec::BatchNorm { scale, center, .. } => {
            let c = input.channels();
            if scale {
                push(ParamKind::Gamma, vec![c]);
            }
            if center {
                push(ParamKind::Beta, vec![c]);
            }
            push(ParamKind::MovingMean, vec![c]);
            push(ParamKind::MovingVariance, vec![c]);
        }
        _ => {}
    }
    specs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub non_trainable: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.trainable + self.non_trainable
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            trainable: self.trainable + o.trainable,
            non_trainable: self.non_trainable + o.non_trainable,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

pub fn count_params(layer: &LayerSpec, input: &Shape, frozen: bool) -> Result<ParamCount, GraphError> {
    layer.validate().map_err(|reason| GraphError::InvalidLayer {
        node: layer.kind().into(),
        reason,
    })?;
    Ok(param_specs("_", layer, Some(input), frozen)
        .iter()
        .map(|p| {
            let n = p.shape.numel() as u64;
            if p.trainable {
                ParamCount {
                    trainable: n,
                    non_trainable: 0,
                }
            } else {
                ParamCount {
                    trainable: 0,
                    non_trainable: n,
                }
            }
        })
        .sum())
}
