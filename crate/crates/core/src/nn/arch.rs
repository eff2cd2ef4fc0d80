use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom};
use super::{Matrix, ParamVector};
use crate::error::{FedError, Result};
use crate::rng::{rng_for, Stream};

/// One convolution + ReLU + 2x2 max-pool stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub padding: usize,
}

/// Convolutional feature stack applied to inputs viewed as `channels x height x width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ConvLayerSpec>,
}

/// Layer specification of a classifier: optional conv stack, dense ReLU
/// hidden layers, then a linear head producing `classes` logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub conv: Option<ConvStack>,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv(ConvGeom),
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(g) => g.param_count(),
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
        }
    }

    fn output_len(&self) -> usize {
        match self {
            Layer::Conv(g) => g.output_len(),
            Layer::Dense { outputs, .. } => *outputs,
        }
    }
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden,
            classes,
            conv: None,
        }
    }

    /// LeNet-5 style network for single-channel 28x28 images.
    pub fn lenet5(classes: usize) -> Self {
        Architecture {
            input_dim: 28 * 28,
            hidden: vec![120, 84],
            classes,
            conv: Some(ConvStack {
                channels: 1,
                height: 28,
                width: 28,
                layers: vec![
                    ConvLayerSpec {
                        out_channels: 6,
                        kernel: 5,
                        padding: 2,
                    },
                    ConvLayerSpec {
                        out_channels: 16,
                        kernel: 5,
                        padding: 0,
                    },
                ],
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layers().map(|_| ())
    }

    fn layers(&self) -> Result<Vec<Layer>> {
        if self.classes < 2 {
            return Err(FedError::config(
                "model.classes",
                format!("need at least 2 classes, got {}", self.classes),
            ));
        }
        if self.input_dim == 0 {
            return Err(FedError::config("model.input_dim", "must be positive"));
        }
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        if let Some(stack) = &self.conv {
            if stack.channels * stack.height * stack.width != self.input_dim {
                return Err(FedError::config(
                    "model.conv",
                    format!(
                        "{}x{}x{} does not match input_dim {}",
                        stack.channels, stack.height, stack.width, self.input_dim
                    ),
                ));
            }
            let (mut c, mut h, mut w) = (stack.channels, stack.height, stack.width);
            for (i, spec) in stack.layers.iter().enumerate() {
                let g = ConvGeom::new(c, h, w, spec.out_channels, spec.kernel, spec.padding)
                    .ok_or_else(|| {
                        FedError::config(
                            format!("model.conv.layers[{i}]"),
                            format!("layer does not fit a {c}x{h}x{w} input"),
                        )
                    })?;
                layers.push(Layer::Conv(g));
                (c, h, w) = (g.cout, g.ph, g.pw);
            }
            width = c * h * w;
        }
        for (i, &h) in self.hidden.iter().enumerate() {
            if h == 0 {
                return Err(FedError::config(
                    format!("model.hidden[{i}]"),
                    "hidden layer width must be positive",
                ));
            }
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
                relu: true,
            });
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: self.classes,
            relu: false,
        });
        Ok(layers)
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .map(|ls| ls.iter().map(Layer::param_count).sum())
            .unwrap_or(0)
    }

    /// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        let layers = self.layers()?;
        let mut rng = rng_for(seed, Stream::Init, &[]);
        let mut values = Vec::with_capacity(self.param_count());
        for layer in &layers {
            let (fan_in, weights, biases) = match layer {
                Layer::Conv(g) => (g.fan_in(), g.weight_count(), g.cout),
                Layer::Dense {
                    inputs, outputs, ..
                } => (*inputs, inputs * outputs, *outputs),
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .expect("positive standard deviation");
            values.extend((0..weights).map(|_| normal.sample(&mut rng)));
            values.extend(std::iter::repeat_n(0.0, biases));
        }
        Ok(ParamVector(values))
    }

    pub fn forward(&self, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_pass(params, features)?.logits)
    }

    /// Forward pass that keeps the activations needed for backpropagation.
    pub fn forward_pass<'a>(
        &self,
        params: &'a ParamVector,
        features: &Matrix,
    ) -> Result<ForwardPass<'a>> {
        let layers = self.layers()?;
        let expected: usize = layers.iter().map(Layer::param_count).sum();
        if params.len() != expected {
            return Err(FedError::config(
                "params",
                format!(
                    "architecture needs {expected} parameters, got {}",
                    params.len()
                ),
            ));
        }
        if features.cols() != self.input_dim {
            return Err(FedError::config(
                "features",
                format!(
                    "expected {} input columns, got {}",
                    self.input_dim,
                    features.cols()
                ),
            ));
        }
        if features.rows() == 0 {
            return Err(FedError::config("batch", "batch is empty"));
        }

        let n = features.rows();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut conv_aux = Vec::with_capacity(layers.len());
        let mut current = features.clone();
        let mut offset = 0;
        for layer in &layers {
            let p = &params.as_slice()[offset..offset + layer.param_count()];
            offset += layer.param_count();
            let mut out = Matrix::zeros(n, layer.output_len());
            match *layer {
                Layer::Conv(g) => {
                    let mut pre = Matrix::zeros(n, g.pre_len());
                    let mut argmax = vec![0usize; n * g.output_len()];
                    for i in 0..n {
                        conv::forward_sample(
                            &g,
                            p,
                            current.row(i),
                            pre.row_mut(i),
                            out.row_mut(i),
                            &mut argmax[i * g.output_len()..(i + 1) * g.output_len()],
                        );
                    }
                    conv_aux.push(Some((pre, argmax)));
                }
                Layer::Dense {
                    inputs: fan_in,
                    outputs,
                    relu,
                } => {
                    let (weights, bias) = p.split_at(fan_in * outputs);
                    for i in 0..n {
                        let y = out.row_mut(i);
                        y.copy_from_slice(bias);
                        for (j, &xj) in current.row(i).iter().enumerate() {
                            if xj != 0.0 {
                                let wrow = &weights[j * outputs..(j + 1) * outputs];
                                for (yo, wo) in y.iter_mut().zip(wrow) {
                                    *yo += xj * wo;
                                }
                            }
                        }
                        if relu {
                            for yo in y.iter_mut() {
                                *yo = yo.max(0.0);
                            }
                        }
                    }
                    conv_aux.push(None);
                }
            }
            inputs.push(current);
            current = out;
        }
        Ok(ForwardPass {
            layers,
            params,
            inputs,
            conv_aux,
            logits: current,
        })
    }
}

/// Activations of one forward pass, ready for backpropagation.
pub struct ForwardPass<'a> {
    layers: Vec<Layer>,
    params: &'a ParamVector,
    inputs: Vec<Matrix>,
    conv_aux: Vec<Option<(Matrix, Vec<usize>)>>,
    logits: Matrix,
}

impl ForwardPass<'_> {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Gradient of `Σ_i <dlogits_i, logits_i>` with respect to the parameters.
    pub fn backward(&self, dlogits: &Matrix) -> ParamVector {
        assert_eq!(dlogits.rows(), self.logits.rows());
        assert_eq!(dlogits.cols(), self.logits.cols());
        let n = dlogits.rows();
        let mut grad = vec![0.0; self.params.len()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect();

        // Gradient with respect to the output of the current layer.
        let mut upstream = dlogits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let start = offsets[li];
            let p = &self.params.as_slice()[start..start + layer.param_count()];
            let g = &mut grad[start..start + layer.param_count()];
            let x = &self.inputs[li];
            let need_dx = li > 0;
            let mut dx = if need_dx {
                Matrix::zeros(n, x.cols())
            } else {
                Matrix::zeros(0, 0)
            };
            match layer {
                Layer::Conv(geom) => {
                    let (pre, argmax) = self.conv_aux[li].as_ref().expect("conv activations");
                    let ol = geom.output_len();
                    for i in 0..n {
                        conv::backward_sample(
                            &geom,
                            p,
                            x.row(i),
                            pre.row(i),
                            &argmax[i * ol..(i + 1) * ol],
                            upstream.row(i),
                            g,
                            need_dx.then(|| dx.row_mut(i)),
                        );
                    }
                }
                Layer::Dense {
                    inputs: fan_in,
                    outputs,
                    ..
                } => {
                    let (weights, _) = p.split_at(fan_in * outputs);
                    let (gw, gb) = g.split_at_mut(fan_in * outputs);
                    for i in 0..n {
                        let dy = upstream.row(i);
                        for (b, d) in gb.iter_mut().zip(dy) {
                            *b += d;
                        }
                        for (j, &xj) in x.row(i).iter().enumerate() {
                            if xj != 0.0 {
                                let grow = &mut gw[j * outputs..(j + 1) * outputs];
                                for (gr, d) in grow.iter_mut().zip(dy) {
                                    *gr += xj * d;
                                }
                            }
                        }
                        if need_dx {
                            let dxi = dx.row_mut(i);
                            for (j, dxj) in dxi.iter_mut().enumerate() {
                                let wrow = &weights[j * outputs..(j + 1) * outputs];
                                *dxj = wrow.iter().zip(dy).map(|(w, d)| w * d).sum();
                            }
                        }
                    }
                }
            }
            if need_dx {
                // The previous layer's output went through ReLU (dense) or
                // was a pooled post-ReLU map (conv); both gate on positivity.
                let prev_out = &self.inputs[li];
                let prev_is_dense = matches!(self.layers[li - 1], Layer::Dense { .. });
                if prev_is_dense {
                    for i in 0..n {
                        for (d, &a) in dx.row_mut(i).iter_mut().zip(prev_out.row(i)) {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
                upstream = dx;
            }
        }
        ParamVector(grad)
    }
}
