use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{softmax_ce, Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `x (n x in) * weight (in x out) + bias (1 x out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A plain multilayer perceptron; `activations[i]` follows `layers[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activations: Vec<Activation>,
}

/// Classifier parameters. The last layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Mlp);

/// Feature extractor parameters: an MLP without a classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExtractorParams(pub Mlp);

/// Gradient with the same layer structure as the parameters it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

/// Tape handles for the parameters of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "batch shape {:?} does not match input dim {}",
                batch.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut z = h.matmul(&layer.weight)?;
            let c = z.cols();
            let b = layer.bias.data();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + b[i % c]);
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(Error::Numeric { op: "forward" });
        }
        Ok(h)
    }

    /// Registers every weight and bias as a differentiable tape input.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers parameters as constants (frozen network).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let xin = tape.value(x);
        if xin.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "batch with {} columns for input dim {}",
                xin.cols(),
                self.input_dim()
            )));
        }
        let mut h = x;
        for (&(w, b), act) in vars.layers.iter().zip(&self.activations) {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = match act {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Relu => tape.relu(z)?,
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    fn from_dims(dims: &[usize], acts: Vec<Activation>, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Tensor::raw(fan_in, fan_out, data),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Mlp { layers, activations: acts }
    }

    fn apply_update(&self, grad: &Gradient, lr: f64) -> Result<Mlp> {
        if grad.layers.len() != self.layers.len()
            || grad
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weight.shape() != l.weight.shape() || g.bias.shape() != l.bias.shape())
        {
            return Err(Error::dim("gradient is not congruent with parameters"));
        }
        let step = |p: &Tensor, g: &Tensor| {
            let data = p.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect();
            Tensor::raw(p.rows(), p.cols(), data)
        };
        Ok(Mlp {
            layers: self
                .layers
                .iter()
                .zip(&grad.layers)
                .map(|(l, g)| Layer { weight: step(&l.weight, &g.weight), bias: step(&l.bias, &g.bias) })
                .collect(),
            activations: self.activations.clone(),
        })
    }

    /// Single-row forward pass into `trace` (input first, then every layer output).
    fn row_trace_into(&self, x: &[f64], trace: &mut Vec<Vec<f64>>) {
        trace.resize_with(self.layers.len() + 1, Vec::new);
        trace[0].clear();
        trace[0].extend_from_slice(x);
        for (l, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let (head, tail) = trace.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let nout = layer.out_dim();
            let w = layer.weight.data();
            out.clear();
            out.extend_from_slice(layer.bias.data());
            for (i, &xi) in input.iter().enumerate() {
                for (o, wij) in out.iter_mut().zip(&w[i * nout..(i + 1) * nout]) {
                    *o += xi * wij;
                }
            }
            for v in out.iter_mut() {
                *v = act.apply(*v);
            }
        }
    }

    /// `||f(x) - target||^2` for one input row.
    pub(crate) fn row_sq_dist(&self, x: &[f64], target: &[f64], trace: &mut Vec<Vec<f64>>) -> f64 {
        self.row_trace_into(x, trace);
        trace.last().unwrap().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `||f(x) - target||^2` for one input row; its gradient in `x` is
    /// added to `gx`.
    pub(crate) fn row_sq_dist_grad(
        &self,
        x: &[f64],
        target: &[f64],
        trace: &mut Vec<Vec<f64>>,
        gx: &mut [f64],
    ) -> f64 {
        self.row_trace_into(x, trace);
        let out = trace.last().unwrap();
        let loss = out.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut g: Vec<f64> = out.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        for (l, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate().rev() {
            for (gj, &y) in g.iter_mut().zip(&trace[l + 1]) {
                *gj *= act.derivative_at_output(y);
            }
            let nout = layer.out_dim();
            let w = layer.weight.data();
            if l == 0 {
                for (i, a) in gx.iter_mut().enumerate() {
                    *a += w[i * nout..(i + 1) * nout].iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                }
            } else {
                g = (0..layer.in_dim())
                    .map(|i| w[i * nout..(i + 1) * nout].iter().zip(&g).map(|(a, b)| a * b).sum())
                    .collect();
            }
        }
        loss
    }

    pub fn l1_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()))
            .map(|v| v.abs())
            .sum()
    }
}

/// Fan-in scaled uniform init, zero biases, `tanh` hidden layers, linear head.
pub fn init_model(dims: &[usize], seed: u64) -> Result<ModelParams> {
    init_model_with(dims, Activation::Tanh, seed)
}

pub fn init_model_with(dims: &[usize], hidden: Activation, seed: u64) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(Error::dim(format!("need at least input and output dims, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::dim(format!("zero-width layer in {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acts = vec![hidden; dims.len() - 2];
    acts.push(Activation::Identity);
    Ok(ModelParams(Mlp::from_dims(dims, acts, &mut rng)))
}

impl ModelParams {
    pub fn classes(&self) -> usize {
        self.0.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.0.input_dim()];
        d.extend(self.0.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn hidden_activation(&self) -> Activation {
        self.0.activations.first().copied().unwrap_or(Activation::Tanh)
    }

    pub fn param_count(&self) -> usize {
        self.0.param_count()
    }
}

/// Logits for a batch; rows in, rows out.
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    model.0.forward(batch)
}

/// Per-sample `-log softmax(logits_i)[label_i]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!("{} logit rows, {} labels", logits.rows(), labels.len())));
    }
    let c = logits.cols();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= c {
                return Err(Error::Label { label: y, classes: c });
            }
            Ok(softmax_ce(logits.row_slice(i), y).0)
        })
        .collect()
}

/// Exact reverse-mode gradient of `objective` with respect to every
/// parameter of `model`. Returns the objective value alongside.
pub fn grad<F>(model: &ModelParams, objective: F) -> Result<(f64, Gradient)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = model.0.register(&mut tape);
    let out = objective(&mut tape, &vars)?;
    let value = tape.scalar(out);
    let g = tape.backward(out)?;
    let layers = vars
        .layers
        .iter()
        .map(|&(w, b)| Layer { weight: g.wrt(&tape, w), bias: g.wrt(&tape, b) })
        .collect();
    Ok((value, Gradient { layers }))
}

/// Gradient of a scalar function of a flat list of tensors.
pub fn grad_tensors<F>(params: &[Tensor], objective: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = objective(&mut tape, &vars)?;
    let value = tape.scalar(out);
    let g = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| g.wrt(&tape, v)).collect()))
}

/// `params - lr * grad`, elementwise.
pub fn sgd_step(model: &ModelParams, grad: &Gradient, lr: f64) -> Result<ModelParams> {
    Ok(ModelParams(model.0.apply_update(grad, lr)?))
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

/// Default extractor widths after the input layer.
pub const EXTRACTOR_WIDTHS: [usize; 2] = [32, 16];

/// A fresh randomly initialised lightweight extractor (`input -> 32 -> 16`, tanh).
pub fn sample_extractor(input_dim: usize, seed: u64) -> Result<ExtractorParams> {
    let mut dims = vec![input_dim];
    dims.extend(EXTRACTOR_WIDTHS);
    sample_extractor_with(&dims, seed)
}

pub fn sample_extractor_with(dims: &[usize], seed: u64) -> Result<ExtractorParams> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::dim(format!("bad extractor dims {dims:?}")));
    }
    // keep extractor streams apart from classifier streams with the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E87A_C70A_0001);
    let acts = vec![Activation::Tanh; dims.len() - 1];
    Ok(ExtractorParams(Mlp::from_dims(dims, acts, &mut rng)))
}

impl ExtractorParams {
    pub fn feature_dim(&self) -> usize {
        self.0.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.0.param_count()
    }
}

pub fn feature_extract(ext: &ExtractorParams, batch: &Tensor) -> Result<Tensor> {
    ext.0.forward(batch)
}
