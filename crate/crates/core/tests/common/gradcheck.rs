//! Central finite-difference checks of every analytic gradient.
//!
//! Losses defined on probability rows are checked through a softmax on free
//! logits, so perturbations stay on the simplex. Each check returns the worst
//! relative error it saw.

use mvdistill::losses::*;
use mvdistill::network::{init_params, softmax_backward, softmax_rows, ModelParams};
use mvdistill::trainer::{finetune_loss, finetune_objective, pretrain_loss, pretrain_objective, IicSource, TrainConfig};
use ndarray::Array2;
use rand::Rng;

const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = mvdistill::rng::seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.5..1.5))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn worst_input_error(xs: &[Array2<f64>], grads: &[Array2<f64>], f: impl Fn(&[Array2<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for v in 0..xs.len() {
        for idx in 0..xs[v].len() {
            let mut plus = xs.to_vec();
            let mut minus = xs.to_vec();
            plus[v].as_slice_mut().unwrap()[idx] += H;
            minus[v].as_slice_mut().unwrap()[idx] -= H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grads[v].as_slice().unwrap()[idx], numeric));
        }
    }
    worst
}

fn softmaxed(logits: &[Array2<f64>]) -> Vec<Array2<f64>> {
    logits.iter().map(softmax_rows).collect()
}

fn to_logits(probs: &[Array2<f64>], gp: &[Array2<f64>]) -> Vec<Array2<f64>> {
    probs.iter().zip(gp).map(|(p, g)| softmax_backward(p, g)).collect()
}

fn views(n: usize, d: usize, seed: u64) -> Vec<Array2<f64>> {
    vec![random(n, d, seed), random(n, d, seed + 1)]
}

pub fn reconstruction() -> f64 {
    let x = views(4, 3, 1);
    let xhat = views(4, 3, 7);
    let (_, g) = reconstruction_loss_mean_grad(&x, &xhat).unwrap();
    worst_input_error(&xhat, &g, |xh| reconstruction_loss_mean(&x, xh).unwrap())
}

pub fn teacher_contrastive() -> f64 {
    let mut worst = 0.0f64;
    for include_self in [false, true] {
        let t = views(4, 3, 11);
        let (_, g) = teacher_contrastive_loss_grad(&t, 1.0, include_self).unwrap();
        worst = worst.max(worst_input_error(&t, &g, |t| teacher_contrastive_loss(t, 1.0, include_self).unwrap()));
    }
    let three = vec![random(5, 2, 3), random(5, 2, 4), random(5, 2, 5)];
    let (_, g) = contrastive_loss_grad(&three, 0.5, false).unwrap();
    worst.max(worst_input_error(&three, &g, |t| contrastive_loss(t, 0.5, false).unwrap()))
}

pub fn student_contrastive() -> f64 {
    let logits = views(4, 2, 21);
    let y = softmaxed(&logits);
    let (_, gy) = student_contrastive_loss_grad(&y, 0.5, false).unwrap();
    worst_input_error(&logits, &to_logits(&y, &gy), |l| {
        student_contrastive_loss(&softmaxed(l), 0.5, false).unwrap()
    })
}

pub fn entropy() -> f64 {
    let logits = views(5, 3, 31);
    let y = softmaxed(&logits);
    let (_, gy) = entropy_regularizer_grad(&y).unwrap();
    worst_input_error(&logits, &to_logits(&y, &gy), |l| entropy_regularizer(&softmaxed(l)).unwrap())
}

pub fn iic() -> f64 {
    let z = views(6, 4, 41);
    let (_, g) = iic_mi_loss_grad(&z).unwrap();
    let latent = worst_input_error(&z, &g, |z| iic_mi_loss(z).unwrap());
    let logits = views(6, 3, 51);
    let p = softmaxed(&logits);
    let (_, gp) = iic_mi_loss_probs_grad(&p).unwrap();
    latent.max(worst_input_error(&logits, &to_logits(&p, &gp), |l| {
        iic_mi_loss_probs(&softmaxed(l)).unwrap()
    }))
}

pub fn distillation() -> f64 {
    let dark = softmaxed(&views(4, 2, 61));
    let logits = views(4, 2, 71);
    let y = softmaxed(&logits);
    let u = [0.3, 0.7];
    let mut worst = 0.0f64;
    for sign in [KlSign::Forward, KlSign::Literal] {
        let (_, gy) = self_distillation_loss_grad(&dark, &y, 0.1, &u, sign).unwrap();
        worst = worst.max(worst_input_error(&logits, &to_logits(&y, &gy), |l| {
            self_distillation_loss(&dark, &softmaxed(l), 0.1, &u, sign).unwrap()
        }));
    }
    worst
}

/// Tiny models: every layer of the first has at most 8 parameters.
fn tiny_configs(iic_source: IicSource) -> Vec<(TrainConfig, Vec<usize>)> {
    let base = TrainConfig {
        iic_source,
        ..TrainConfig::default()
    };
    vec![
        (
            TrainConfig {
                latent_dim: 2,
                head_dim: 2,
                head_hidden: 2,
                encoder_hidden: vec![2],
                ..base.clone()
            },
            vec![2, 2],
        ),
        (
            TrainConfig {
                latent_dim: 4,
                head_dim: 3,
                head_hidden: 5,
                encoder_hidden: vec![6],
                ..base
            },
            vec![3, 2],
        ),
    ]
}

/// Tiny model with every weight and bias drawn from U(-1, 1), so no ReLU input
/// sits exactly on the kink.
fn dense_random_params(config: &TrainConfig, dims: &[usize], seed: u64) -> ModelParams {
    let mut params = init_params(&config.model_shape(dims, 2), seed).unwrap();
    let mut rng = mvdistill::rng::seeded(seed ^ 0x5eed);
    for stack in params.stacks_mut() {
        for t in stack.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
    params
}

fn worst_param_error(params: &ModelParams, grads: &ModelParams, first_tensor: usize, f: impl Fn(&ModelParams) -> f64) -> f64 {
    let n_tensors = params.tensors().len();
    let mut worst = 0.0f64;
    for t in first_tensor..n_tensors {
        for i in 0..params.tensors()[t].len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut slots: Vec<&mut [f64]> = p.stacks_mut().into_iter().flat_map(|m| m.tensors_mut()).collect();
                slots[t][i] += delta;
                f(&p)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(grads.tensors()[t][i], numeric));
        }
    }
    worst
}

/// Gradient of the summed pretraining loss with respect to every parameter.
pub fn pretrain_parameters() -> f64 {
    let mut worst = 0.0f64;
    for source in [IicSource::Latent, IicSource::Predictor] {
        for (seed, (config, dims)) in tiny_configs(source).into_iter().enumerate() {
            let params = dense_random_params(&config, &dims, 5 + seed as u64);
            let x = vec![random(4, dims[0], 81), random(4, dims[1], 82)];
            let (loss, grads) = pretrain_objective(&params, &x, &config).unwrap();
            assert!((loss.total - pretrain_loss(&params, &x, &config).unwrap().total).abs() < 1e-12);
            worst = worst.max(worst_param_error(&params, &grads, 0, |p| {
                pretrain_loss(p, &x, &config).unwrap().total
            }));
        }
    }
    worst
}

/// Gradient of the distillation loss; with frozen encoders only the student
/// path is compared and every other stack must carry zero gradient.
pub fn finetune_parameters() -> f64 {
    let zero = |m: &mvdistill::network::Mlp| m.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0));
    let mut worst = 0.0f64;
    for encoders in [false, true] {
        for (config, dims) in tiny_configs(IicSource::Latent) {
            let config = TrainConfig {
                finetune_encoders: encoders,
                ..config
            };
            let params = dense_random_params(&config, &dims, 6);
            let x = vec![random(4, dims[0], 91), random(4, dims[1], 92)];
            let dark = softmaxed(&[random(4, 2, 93), random(4, 2, 94)]);
            let u = [0.5, 0.5];
            let (_, grads) = finetune_objective(&params, &x, &dark, &u, &config).unwrap();
            assert!(zero(&grads.heads.teacher));
            assert!(grads.autoencoders.iter().all(|a| zero(&a.decoder)));
            let f = |p: &ModelParams| finetune_loss(p, &x, &dark, &u, &config).unwrap();
            let skip = if encoders {
                0
            } else {
                assert!(grads.autoencoders.iter().all(|a| zero(&a.encoder)));
                params.autoencoders.iter().map(|a| a.encoder.tensors().len() + a.decoder.tensors().len()).sum()
            };
            worst = worst.max(worst_param_error(&params, &grads, skip, f));
        }
    }
    worst
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("reconstruction", reconstruction()),
        ("teacher contrastive", teacher_contrastive()),
        ("student contrastive", student_contrastive()),
        ("entropy", entropy()),
        ("iic", iic()),
        ("self-distillation", distillation()),
        ("pretrain parameters", pretrain_parameters()),
        ("finetune parameters", finetune_parameters()),
    ]
}
