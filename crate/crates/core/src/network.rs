//! Dense networks: per-view autoencoders, the shared student head and
//! predictor, and the momentum teacher head.
//!
//! All stacks are plain MLPs with ReLU between layers. Backpropagation is
//! explicit: [`Mlp::forward_cached`] records layer inputs and
//! [`Mlp::backward`] turns an output gradient into parameter gradients plus the
//! gradient with respect to the input.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, final_activation: FinalActivation) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "an MLP needs at least two positive widths, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation: Activation::Relu,
            final_activation,
        })
    }
}

/// A fully connected layer computing `x W + b`; `weight` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Weights uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, biases zero.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..=bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Layer inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub final_activation: FinalActivation,
}

impl Mlp {
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            final_activation: spec.final_activation,
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec.layer_widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            final_activation: spec.final_activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            final_activation: self.final_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            layer_widths: self.widths(),
            activation: Activation::Relu,
            final_activation: self.final_activation,
        }
    }

    /// Same layer shapes, so that one can be averaged into the other.
    pub fn is_congruent(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        if self.final_activation == FinalActivation::Softmax {
            softmax_rows_inplace(&mut h);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                next.mapv_inplace(relu);
            }
            inputs.push(h);
            h = next;
        }
        if self.final_activation == FinalActivation::Softmax {
            softmax_rows_inplace(&mut h);
        }
        Ok(MlpCache { inputs, output: h })
    }

    /// Returns `(parameter gradients, input gradient)` for the output
    /// gradient `grad_out` (taken after the final activation).
    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut g = match self.final_activation {
            FinalActivation::None => grad_out.clone(),
            FinalActivation::Softmax => softmax_backward(&cache.output, grad_out),
        };
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weight = input.t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            g = g.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut g).and(input).for_each(|gi, &a| {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        (
            Mlp {
                layers: grads,
                final_activation: self.final_activation,
            },
            g,
        )
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    softmax_rows_inplace(&mut out);
    out
}

/// Vector-Jacobian product of a row-wise softmax with output `y`.
pub fn softmax_backward(y: &Array2<f64>, grad_y: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_y.clone();
    for ((mut o, yr), gr) in out.rows_mut().into_iter().zip(y.rows()).zip(grad_y.rows()) {
        let dot = yr.dot(&gr);
        Zip::from(&mut o).and(&yr).and(&gr).for_each(|o, &yi, &gi| *o = yi * (gi - dot));
    }
    out
}

/// Encoder `f_v` and decoder `g_v` for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub view_index: usize,
}

impl AutoencoderParams {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            view_index: self.view_index,
        }
    }
}

/// Student head `w_s`, predictor `w_p` and teacher head `w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub student: Mlp,
    pub predictor: Mlp,
    pub teacher: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub autoencoders: Vec<AutoencoderParams>,
    pub heads: HeadParams,
}

/// Layer sizes needed to build a [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub view_dims: Vec<usize>,
    pub k: usize,
    pub latent_dim: usize,
    pub head_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
}

impl ModelShape {
    pub fn encoder_spec(&self, view: usize) -> Result<MlpSpec> {
        let mut w = vec![self.view_dims[view]];
        w.extend(&self.encoder_hidden);
        w.push(self.latent_dim);
        MlpSpec::new(w, FinalActivation::None)
    }

    pub fn decoder_spec(&self, view: usize) -> Result<MlpSpec> {
        let mut w = vec![self.latent_dim];
        w.extend(self.encoder_hidden.iter().rev());
        w.push(self.view_dims[view]);
        MlpSpec::new(w, FinalActivation::None)
    }

    pub fn head_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(vec![self.latent_dim, self.head_hidden, self.head_dim], FinalActivation::None)
    }

    pub fn predictor_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(vec![self.head_dim, self.k], FinalActivation::Softmax)
    }
}

/// Fan-in scaled uniform initialization, seeded.
///
/// The teacher head is a copy of an independently drawn stack with the same
/// shape as the student head.
pub fn init_params(shape: &ModelShape, seed: u64) -> Result<ModelParams> {
    if shape.k < 2 {
        return Err(Error::Config(format!("need k >= 2, got {}", shape.k)));
    }
    let mut rng = seeded(seed);
    let mut autoencoders = Vec::with_capacity(shape.view_dims.len());
    for v in 0..shape.view_dims.len() {
        let encoder = Mlp::init(&shape.encoder_spec(v)?, &mut rng);
        let decoder = Mlp::init(&shape.decoder_spec(v)?, &mut rng);
        autoencoders.push(AutoencoderParams {
            encoder,
            decoder,
            view_index: v,
        });
    }
    let head = shape.head_spec()?;
    let student = Mlp::init(&head, &mut rng);
    let predictor = Mlp::init(&shape.predictor_spec()?, &mut rng);
    let fresh = Mlp::init(&head, &mut rng);
    let teacher = fresh.clone();
    Ok(ModelParams {
        autoencoders,
        heads: HeadParams {
            student,
            predictor,
            teacher,
        },
    })
}

impl ModelParams {
    pub fn n_views(&self) -> usize {
        self.autoencoders.len()
    }

    pub fn k(&self) -> usize {
        self.heads.predictor.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.autoencoders[0].latent_dim()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.autoencoders.iter().map(AutoencoderParams::input_dim).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            autoencoders: self.autoencoders.iter().map(AutoencoderParams::zeros_like).collect(),
            heads: HeadParams {
                student: self.heads.student.zeros_like(),
                predictor: self.heads.predictor.zeros_like(),
                teacher: self.heads.teacher.zeros_like(),
            },
        }
    }

    /// Every stack in declaration order: encoder and decoder per view, then
    /// student, predictor, teacher.
    pub fn stacks(&self) -> Vec<&Mlp> {
        let mut out: Vec<&Mlp> = Vec::new();
        for ae in &self.autoencoders {
            out.push(&ae.encoder);
            out.push(&ae.decoder);
        }
        out.extend([&self.heads.student, &self.heads.predictor, &self.heads.teacher]);
        out
    }

    pub fn stacks_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = Vec::new();
        for ae in &mut self.autoencoders {
            out.push(&mut ae.encoder);
            out.push(&mut ae.decoder);
        }
        let h = &mut self.heads;
        out.extend([&mut h.student, &mut h.predictor, &mut h.teacher]);
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.stacks().into_iter().flat_map(Mlp::tensors).collect()
    }

    pub fn num_params(&self) -> usize {
        self.stacks().iter().map(|m| m.num_params()).sum()
    }

    /// Checks that every stack has the layout the model requires.
    pub fn validate(&self) -> Result<()> {
        if self.autoencoders.is_empty() {
            return Err(Error::Shape("model has no views".into()));
        }
        let latent = self.latent_dim();
        for ae in &self.autoencoders {
            if ae.latent_dim() != latent
                || ae.decoder.input_dim() != latent
                || ae.decoder.output_dim() != ae.input_dim()
            {
                return Err(Error::Shape(format!(
                    "autoencoder {} has inconsistent widths",
                    ae.view_index
                )));
            }
        }
        let h = &self.heads;
        if h.student.input_dim() != latent || h.teacher.input_dim() != latent {
            return Err(Error::Shape("head input width differs from latent width".into()));
        }
        if !h.student.is_congruent(&h.teacher) {
            return Err(Error::Shape("student and teacher heads are not congruent".into()));
        }
        if h.predictor.input_dim() != h.student.output_dim()
            || h.predictor.final_activation != FinalActivation::Softmax
        {
            return Err(Error::Shape("predictor does not match the student head".into()));
        }
        Ok(())
    }
}

pub fn encode(params: &AutoencoderParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.encoder.forward(x)
}

pub fn decode(params: &AutoencoderParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.decoder.forward(z)
}

/// Cluster probabilities `w_p(w_s(Z))`, one softmax row per sample.
pub fn student_probs(heads: &HeadParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let s = heads.student.forward(z)?;
    heads.predictor.forward(s.view())
}

/// Teacher features `w_t(Z)` without any output normalization.
pub fn teacher_features(heads: &HeadParams, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    heads.teacher.forward(z)
}

/// `theta <- mu * theta + (1 - mu) * xi`, elementwise.
pub fn ema_update(theta: &mut Mlp, xi: &Mlp, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {mu}")));
    }
    if !theta.is_congruent(xi) {
        return Err(Error::Shape(format!(
            "EMA between incongruent stacks {:?} and {:?}",
            theta.widths(),
            xi.widths()
        )));
    }
    let keep = 1.0 - mu;
    for (t, s) in theta.tensors_mut().into_iter().zip(xi.tensors()) {
        for (a, &b) in t.iter_mut().zip(s) {
            *a = mu * *a + keep * b;
        }
    }
    Ok(())
}
