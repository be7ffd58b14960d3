//! Two-stage training and inference.
//!
//! Pretraining minimizes `L_rec + L_stu + L_tea + L_iic` over every
//! parameter. Fine-tuning periodically clusters teacher features into aligned
//! dark-knowledge targets, minimizes the distillation divergence of the student
//! path, and moves the teacher head toward the student head by EMA after every
//! step. Inference averages the per-view cluster probabilities.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, normalize_minmax, BatchPlan, MultiViewDataset};
use crate::error::{Error, Result};
use crate::losses::{
    self, iic_mi_loss, iic_mi_loss_grad, iic_mi_loss_probs, iic_mi_loss_probs_grad, KlSign, LossBreakdown,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{ema_update, init_params, Mlp, MlpCache, ModelParams, ModelShape};
use crate::optim::Adam;
use crate::pseudolabel::{refresh_cluster_state, DarkMode, RefreshParams};
use crate::rng::{epoch_seed, mix64, seeded, sub_seed, SeedStream};

/// Distribution mixed into the distillation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingMode {
    #[default]
    Uniform,
    /// One softmax-normalized standard-normal vector per run.
    Gaussian,
}

/// Which representation the mutual-information loss discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IicSource {
    /// Softmax over latent dimensions of `Z`.
    #[default]
    Latent,
    /// The predictor's cluster probabilities.
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub tau_d: f64,
    pub momentum_mu: f64,
    pub latent_dim: usize,
    pub head_dim: usize,
    pub head_hidden: usize,
    pub encoder_hidden: Vec<usize>,
    pub seed: u64,
    pub u_mode: SmoothingMode,
    pub dark_mode: DarkMode,
    /// Softmax temperature of the dark knowledge; `None` uses `tau_t`.
    pub dark_temp: Option<f64>,
    pub kmeans_refresh_epochs: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub include_self_negatives: bool,
    pub kl_sign: KlSign,
    pub iic_source: IicSource,
    pub finetune_encoders: bool,
    pub normalize: bool,
    pub drop_last: bool,
    /// Evaluate against labels every this many epochs (0: only the last).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            pretrain_epochs: 150,
            finetune_epochs: 50,
            learning_rate: 1e-4,
            tau_s: 0.5,
            tau_t: 1.0,
            tau_d: 0.1,
            momentum_mu: 0.996,
            latent_dim: 512,
            head_dim: 256,
            head_hidden: 512,
            encoder_hidden: vec![512, 1024, 2048, 512],
            seed: 0,
            u_mode: SmoothingMode::Uniform,
            dark_mode: DarkMode::Soft,
            dark_temp: None,
            kmeans_refresh_epochs: 1,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-8,
            include_self_negatives: false,
            kl_sign: KlSign::Forward,
            iic_source: IicSource::Latent,
            finetune_encoders: false,
            normalize: true,
            drop_last: false,
            eval_interval: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, t) in [("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name} must be positive, got {t}"));
            }
        }
        if !(0.0..1.0).contains(&self.tau_d) {
            return bad(format!("tau_d must lie in [0, 1), got {}", self.tau_d));
        }
        if !(0.0..=1.0).contains(&self.momentum_mu) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum_mu));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.latent_dim < 2 || self.head_dim < 1 || self.head_hidden < 1 {
            return bad("latent_dim must be at least 2 and head widths positive".into());
        }
        if self.encoder_hidden.contains(&0) {
            return bad("encoder hidden widths must be positive".into());
        }
        if self.kmeans_refresh_epochs == 0 {
            return bad("kmeans_refresh_epochs must be at least 1".into());
        }
        if let Some(t) = self.dark_temp {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("dark_temp must be positive, got {t}"));
            }
        }
        Ok(())
    }

    pub fn model_shape(&self, view_dims: &[usize], k: usize) -> ModelShape {
        ModelShape {
            view_dims: view_dims.to_vec(),
            k,
            latent_dim: self.latent_dim,
            head_dim: self.head_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            head_hidden: self.head_hidden,
        }
    }

    pub fn dark_temperature(&self) -> f64 {
        self.dark_temp.unwrap_or(self.tau_t)
    }

    /// The smoothing distribution `u` over `k` clusters.
    pub fn smoothing_distribution(&self, k: usize) -> Vec<f64> {
        match self.u_mode {
            SmoothingMode::Uniform => vec![1.0 / k as f64; k],
            SmoothingMode::Gaussian => {
                let mut rng = seeded(sub_seed(self.seed, SeedStream::Smoothing));
                let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = g.iter().map(|x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            }
        }
    }

    fn pretrain_plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.batch_size,
            shuffle_seed: sub_seed(self.seed, SeedStream::Shuffle),
            drop_last: self.drop_last,
        }
    }

    fn finetune_plan(&self) -> BatchPlan {
        BatchPlan {
            shuffle_seed: mix64(sub_seed(self.seed, SeedStream::Shuffle)),
            ..self.pretrain_plan()
        }
    }
}

/// Applies the configured preprocessing.
pub fn prepare_dataset(dataset: &MultiViewDataset, config: &TrainConfig) -> MultiViewDataset {
    if config.normalize {
        normalize_minmax(dataset)
    } else {
        dataset.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub stage: Phase,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub wall_time_s: f64,
}

/// Per-epoch records, optionally streamed as JSON lines.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for TrainLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainLog").field("records", &self.records).finish()
    }
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    fn push(&mut self, rec: TrainLogRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&rec)?;
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

fn view_batches(dataset: &MultiViewDataset, idx: &[usize]) -> Vec<Array2<f64>> {
    (0..dataset.n_views()).map(|v| dataset.select_rows(v, idx)).collect()
}

fn check_compatible(dataset: &MultiViewDataset, params: &ModelParams) -> Result<()> {
    params.validate()?;
    if params.view_dims() != dataset.view_dims() || params.k() != dataset.k() {
        return Err(Error::Shape(format!(
            "model expects views {:?} and k={}, dataset has {:?} and k={}",
            params.view_dims(),
            params.k(),
            dataset.view_dims(),
            dataset.k()
        )));
    }
    Ok(())
}

struct ViewForward {
    enc: MlpCache,
    dec: MlpCache,
    stu: MlpCache,
    pred: MlpCache,
    tea: MlpCache,
}

fn forward_view(params: &ModelParams, v: usize, x: &Array2<f64>) -> Result<ViewForward> {
    let ae = &params.autoencoders[v];
    let h = &params.heads;
    let enc = ae.encoder.forward_cached(x.view())?;
    let z = enc.output();
    let dec = ae.decoder.forward_cached(z.view())?;
    let stu = h.student.forward_cached(z.view())?;
    let pred = h.predictor.forward_cached(stu.output().view())?;
    let tea = h.teacher.forward_cached(z.view())?;
    Ok(ViewForward {
        enc,
        dec,
        stu,
        pred,
        tea,
    })
}

/// Pretraining loss components on one batch (value only).
pub fn pretrain_loss(params: &ModelParams, x_views: &[Array2<f64>], config: &TrainConfig) -> Result<LossBreakdown> {
    let fw = x_views
        .iter()
        .enumerate()
        .map(|(v, x)| forward_view(params, v, x))
        .collect::<Result<Vec<_>>>()?;
    let xhat: Vec<_> = fw.iter().map(|f| f.dec.output().clone()).collect();
    let y: Vec<_> = fw.iter().map(|f| f.pred.output().clone()).collect();
    let t: Vec<_> = fw.iter().map(|f| f.tea.output().clone()).collect();
    let rec = losses::reconstruction_loss_mean(x_views, &xhat)?;
    let stu = losses::student_contrastive_loss(&y, config.tau_s, config.include_self_negatives)?;
    let tea = losses::teacher_contrastive_loss(&t, config.tau_t, config.include_self_negatives)?;
    let iic = match config.iic_source {
        IicSource::Latent => {
            let z: Vec<_> = fw.iter().map(|f| f.enc.output().clone()).collect();
            iic_mi_loss(&z)?
        }
        IicSource::Predictor => iic_mi_loss_probs(&y)?,
    };
    Ok(LossBreakdown::pretrain(rec, stu, tea, iic))
}

/// Pretraining loss components on one batch and the gradient of their sum
/// with respect to every parameter.
pub fn pretrain_objective(
    params: &ModelParams,
    x_views: &[Array2<f64>],
    config: &TrainConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    let fw = x_views
        .iter()
        .enumerate()
        .map(|(v, x)| forward_view(params, v, x))
        .collect::<Result<Vec<_>>>()?;
    let xhat: Vec<_> = fw.iter().map(|f| f.dec.output().clone()).collect();
    let y: Vec<_> = fw.iter().map(|f| f.pred.output().clone()).collect();
    let t: Vec<_> = fw.iter().map(|f| f.tea.output().clone()).collect();

    let (rec, g_xhat) = losses::reconstruction_loss_mean_grad(x_views, &xhat)?;
    let (stu, mut g_y) = losses::student_contrastive_loss_grad(&y, config.tau_s, config.include_self_negatives)?;
    let (tea, g_t) = losses::teacher_contrastive_loss_grad(&t, config.tau_t, config.include_self_negatives)?;
    let (iic, g_z_iic) = match config.iic_source {
        IicSource::Latent => {
            let z: Vec<_> = fw.iter().map(|f| f.enc.output().clone()).collect();
            let (l, g) = iic_mi_loss_grad(&z)?;
            (l, Some(g))
        }
        IicSource::Predictor => {
            let (l, g) = iic_mi_loss_probs_grad(&y)?;
            for (a, b) in g_y.iter_mut().zip(&g) {
                *a += b;
            }
            (l, None)
        }
    };
    let breakdown = LossBreakdown::pretrain(rec, stu, tea, iic);

    let mut grads = params.zeros_like();
    let h = &params.heads;
    for (v, f) in fw.iter().enumerate() {
        let (gp, g_s) = h.predictor.backward(&f.pred, &g_y[v]);
        grads.heads.predictor.add_assign(&gp);
        let (gs, mut g_z) = h.student.backward(&f.stu, &g_s);
        grads.heads.student.add_assign(&gs);
        let (gt, g_z_t) = h.teacher.backward(&f.tea, &g_t[v]);
        grads.heads.teacher.add_assign(&gt);
        let ae = &params.autoencoders[v];
        let (gd, g_z_d) = ae.decoder.backward(&f.dec, &g_xhat[v]);
        grads.autoencoders[v].decoder.add_assign(&gd);
        g_z += &g_z_t;
        g_z += &g_z_d;
        if let Some(gi) = &g_z_iic {
            g_z += &gi[v];
        }
        let (ge, _) = ae.encoder.backward(&f.enc, &g_z);
        grads.autoencoders[v].encoder.add_assign(&ge);
    }
    Ok((breakdown, grads))
}

/// Student-path forward used during fine-tuning.
fn student_forward(params: &ModelParams, z: &Array2<f64>) -> Result<(MlpCache, MlpCache)> {
    let stu = params.heads.student.forward_cached(z.view())?;
    let pred = params.heads.predictor.forward_cached(stu.output().view())?;
    Ok((stu, pred))
}

/// Distillation loss on one batch (value only). `dark` holds the batch rows
/// of each view's targets.
pub fn finetune_loss(
    params: &ModelParams,
    x_views: &[Array2<f64>],
    dark: &[Array2<f64>],
    u: &[f64],
    config: &TrainConfig,
) -> Result<f64> {
    let mut y = Vec::with_capacity(x_views.len());
    for (v, x) in x_views.iter().enumerate() {
        let z = params.autoencoders[v].encoder.forward(x.view())?;
        y.push(crate::network::student_probs(&params.heads, z.view())?);
    }
    losses::self_distillation_loss(dark, &y, config.tau_d, u, config.kl_sign)
}

/// Distillation loss and its gradient. Encoder gradients are produced only
/// when `config.finetune_encoders` is set; teacher gradients are always zero.
pub fn finetune_objective(
    params: &ModelParams,
    x_views: &[Array2<f64>],
    dark: &[Array2<f64>],
    u: &[f64],
    config: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    let mut enc = Vec::with_capacity(x_views.len());
    for (v, x) in x_views.iter().enumerate() {
        enc.push(params.autoencoders[v].encoder.forward_cached(x.view())?);
    }
    let z: Vec<_> = enc.iter().map(|c| c.output().clone()).collect();
    let (value, mut grads) = finetune_objective_latent(params, &z, dark, u, config)?;
    if config.finetune_encoders {
        let h = &params.heads;
        for (v, zv) in z.iter().enumerate() {
            let (stu, pred) = student_forward(params, zv)?;
            let y = pred.output().clone();
            let (_, gy) = losses::self_distillation_loss_grad(
                std::slice::from_ref(&dark[v]),
                std::slice::from_ref(&y),
                config.tau_d,
                u,
                config.kl_sign,
            )?;
            let (_, g_s) = h.predictor.backward(&pred, &gy[0]);
            let (_, g_z) = h.student.backward(&stu, &g_s);
            let (ge, _) = params.autoencoders[v].encoder.backward(&enc[v], &g_z);
            grads.autoencoders[v].encoder.add_assign(&ge);
        }
    }
    Ok((value, grads))
}

/// Head-only part of [`finetune_objective`] given latent codes.
fn finetune_objective_latent(
    params: &ModelParams,
    z_views: &[Array2<f64>],
    dark: &[Array2<f64>],
    u: &[f64],
    config: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    let mut caches = Vec::with_capacity(z_views.len());
    for z in z_views {
        caches.push(student_forward(params, z)?);
    }
    let y: Vec<_> = caches.iter().map(|(_, p)| p.output().clone()).collect();
    let (value, gy) = losses::self_distillation_loss_grad(dark, &y, config.tau_d, u, config.kl_sign)?;
    let mut grads = params.zeros_like();
    let h = &params.heads;
    for ((stu, pred), g) in caches.iter().zip(&gy) {
        let (gp, g_s) = h.predictor.backward(pred, g);
        grads.heads.predictor.add_assign(&gp);
        let (gs, _) = h.student.backward(stu, &g_s);
        grads.heads.student.add_assign(&gs);
    }
    Ok((value, grads))
}

/// Parameter tensors updated by the optimizer in each phase, in a fixed order.
fn trainable_mut<'a>(params: &'a mut ModelParams, phase: Phase, encoders: bool) -> Vec<&'a mut [f64]> {
    let mut stacks: Vec<&mut Mlp> = Vec::new();
    match phase {
        Phase::Pretrain => stacks = params.stacks_mut(),
        Phase::Finetune => {
            if encoders {
                stacks.extend(params.autoencoders.iter_mut().map(|a| &mut a.encoder));
            }
            stacks.push(&mut params.heads.student);
            stacks.push(&mut params.heads.predictor);
        }
    }
    stacks.into_iter().flat_map(Mlp::tensors_mut).collect()
}

fn trainable<'a>(params: &'a ModelParams, phase: Phase, encoders: bool) -> Vec<&'a [f64]> {
    let mut stacks: Vec<&Mlp> = Vec::new();
    match phase {
        Phase::Pretrain => stacks = params.stacks(),
        Phase::Finetune => {
            if encoders {
                stacks.extend(params.autoencoders.iter().map(|a| &a.encoder));
            }
            stacks.push(&params.heads.student);
            stacks.push(&params.heads.predictor);
        }
    }
    stacks.into_iter().flat_map(Mlp::tensors).collect()
}

const EVAL_CHUNK: usize = 1024;

/// Latent codes of the whole dataset, one matrix per view.
pub fn latent_codes(dataset: &MultiViewDataset, params: &ModelParams) -> Result<Vec<Array2<f64>>> {
    (0..dataset.n_views())
        .map(|v| chunked(dataset.view(v), |x| params.autoencoders[v].encoder.forward(x.view())))
        .collect()
}

fn chunked(x: &Array2<f64>, f: impl Fn(Array2<f64>) -> Result<Array2<f64>>) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        parts.push(f(x.slice(s![start..end, ..]).to_owned())?);
        start = end;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn student_probs_all(params: &ModelParams, z_views: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    z_views
        .iter()
        .map(|z| chunked(z, |c| crate::network::student_probs(&params.heads, c.view())))
        .collect()
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Averages per-view probabilities and takes the row-wise argmax.
pub fn combine_views(y_views: &[Array2<f64>]) -> Result<(Vec<usize>, Array2<f64>)> {
    let first = y_views.first().ok_or_else(|| Error::Shape("no views".into()))?;
    let mut probs = Array2::<f64>::zeros(first.dim());
    for y in y_views {
        if y.dim() != first.dim() {
            return Err(Error::Shape("per-view probabilities differ in shape".into()));
        }
        probs += y;
    }
    probs /= y_views.len() as f64;
    Ok((argmax_rows(&probs), probs))
}

/// Cluster labels and view-averaged probabilities for every sample.
pub fn infer_clusters(dataset: &MultiViewDataset, params: &ModelParams) -> Result<(Vec<usize>, Array2<f64>)> {
    check_compatible(dataset, params)?;
    let z = latent_codes(dataset, params)?;
    combine_views(&student_probs_all(params, &z)?)
}

fn maybe_metrics(dataset: &MultiViewDataset, labels: &[usize]) -> Result<Option<MetricsReport>> {
    dataset.labels().map(|t| evaluate(labels, t, dataset.k())).transpose()
}

fn wants_eval(config: &TrainConfig, epoch: usize, last: usize) -> bool {
    epoch == last || (config.eval_interval > 0 && (epoch + 1) % config.eval_interval == 0)
}

/// Initializes parameters from `config.seed` and pretrains them.
pub fn pretrain(dataset: &MultiViewDataset, config: &TrainConfig, log: &mut TrainLog) -> Result<ModelParams> {
    config.validate()?;
    let shape = config.model_shape(&dataset.view_dims(), dataset.k());
    let params = init_params(&shape, sub_seed(config.seed, SeedStream::Init))?;
    pretrain_from(dataset, params, config, log)
}

/// Pretrains the given parameters for `config.pretrain_epochs` epochs.
pub fn pretrain_from(
    dataset: &MultiViewDataset,
    mut params: ModelParams,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<ModelParams> {
    config.validate()?;
    check_compatible(dataset, &params)?;
    let plan = config.pretrain_plan();
    let mut opt = Adam::new(config.learning_rate);
    let n = dataset.n_samples() as f64;
    let start = Instant::now();
    for epoch in 0..config.pretrain_epochs {
        let mut epoch_loss = LossBreakdown::default();
        let mut seen = 0usize;
        for (b, idx) in batch_indices(dataset.n_samples(), &plan, epoch)?.iter().enumerate() {
            let x = view_batches(dataset, idx);
            let (loss, grads) = pretrain_objective(&params, &x, config)?;
            if let Some(component) = loss.non_finite_component() {
                return Err(Error::NonFinite {
                    component,
                    epoch,
                    batch: b,
                });
            }
            opt.step(
                trainable_mut(&mut params, Phase::Pretrain, true),
                trainable(&grads, Phase::Pretrain, true),
            );
            epoch_loss.accumulate(&loss, idx.len() as f64);
            seen += idx.len();
        }
        let mut mean = LossBreakdown::default();
        mean.accumulate(&epoch_loss, 1.0 / seen.max(1) as f64);
        debug_assert!(seen as f64 <= n);
        let metrics = if wants_eval(config, epoch, config.pretrain_epochs - 1) && dataset.labels().is_some() {
            maybe_metrics(dataset, &infer_clusters(dataset, &params)?.0)?
        } else {
            None
        };
        log.push(TrainLogRecord {
            epoch,
            stage: Phase::Pretrain,
            loss: mean,
            metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(params)
}

/// Fine-tunes pretrained parameters by self-distillation.
pub fn finetune(
    dataset: &MultiViewDataset,
    params: ModelParams,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<ModelParams> {
    finetune_observed(dataset, params, config, log, |_| {})
}

/// [`finetune`] that calls `on_step` with the parameters after every
/// optimizer step and teacher update.
pub fn finetune_observed(
    dataset: &MultiViewDataset,
    mut params: ModelParams,
    config: &TrainConfig,
    log: &mut TrainLog,
    mut on_step: impl FnMut(&ModelParams),
) -> Result<ModelParams> {
    config.validate()?;
    check_compatible(dataset, &params)?;
    let plan = config.finetune_plan();
    let k = dataset.k();
    let u = config.smoothing_distribution(k);
    let mut opt = Adam::new(config.learning_rate);
    let kmeans_seed = sub_seed(config.seed, SeedStream::KMeans);
    let start = Instant::now();

    let mut z_all = latent_codes(dataset, &params)?;
    let mut dark: Vec<Array2<f64>> = Vec::new();

    for epoch in 0..config.finetune_epochs {
        if config.finetune_encoders && epoch > 0 {
            z_all = latent_codes(dataset, &params)?;
        }
        if epoch % config.kmeans_refresh_epochs == 0 || dark.is_empty() {
            let t_all: Vec<_> = z_all
                .iter()
                .map(|z| chunked(z, |c| params.heads.teacher.forward(c.view())))
                .collect::<Result<_>>()?;
            let student_labels: Vec<_> = student_probs_all(&params, &z_all)?.iter().map(argmax_rows).collect();
            let state = refresh_cluster_state(
                &t_all,
                &student_labels,
                &RefreshParams {
                    k,
                    seed: epoch_seed(kmeans_seed, epoch),
                    max_iter: config.kmeans_max_iter,
                    tol: config.kmeans_tol,
                    mode: config.dark_mode,
                    temp: config.dark_temperature(),
                },
            )?;
            dark = state.dark_targets;
        }

        let mut total = 0.0;
        let mut seen = 0usize;
        for (b, idx) in batch_indices(dataset.n_samples(), &plan, epoch)?.iter().enumerate() {
            let dark_b: Vec<_> = dark.iter().map(|d| d.select(Axis(0), idx)).collect();
            let (loss, grads) = if config.finetune_encoders {
                finetune_objective(&params, &view_batches(dataset, idx), &dark_b, &u, config)?
            } else {
                let z_b: Vec<_> = z_all.iter().map(|z| z.select(Axis(0), idx)).collect();
                finetune_objective_latent(&params, &z_b, &dark_b, &u, config)?
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    component: "self_distill",
                    epoch,
                    batch: b,
                });
            }
            opt.step(
                trainable_mut(&mut params, Phase::Finetune, config.finetune_encoders),
                trainable(&grads, Phase::Finetune, config.finetune_encoders),
            );
            let heads = &mut params.heads;
            ema_update(&mut heads.teacher, &heads.student, config.momentum_mu)?;
            on_step(&params);
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        let metrics = if wants_eval(config, epoch, config.finetune_epochs - 1) && dataset.labels().is_some() {
            if config.finetune_encoders {
                z_all = latent_codes(dataset, &params)?;
            }
            maybe_metrics(dataset, &combine_views(&student_probs_all(&params, &z_all)?)?.0)?
        } else {
            None
        };
        log.push(TrainLogRecord {
            epoch,
            stage: Phase::Finetune,
            loss: LossBreakdown::finetune(total / seen.max(1) as f64),
            metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(params)
}
