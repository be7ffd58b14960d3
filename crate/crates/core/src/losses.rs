//! Training objectives and their gradients.
//!
//! Every loss comes in two forms: a value function written directly from the
//! definition, and a `*_grad` function that returns the value together with
//! the gradient with respect to each input matrix. The gradient routines work
//! in matrix form and are checked against finite differences of the value
//! functions in the test suite.
//!
//! Probabilities are floored at [`PROB_FLOOR`] inside every logarithm and
//! vector norms at [`NORM_FLOOR`] inside cosine similarities.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{softmax_backward, softmax_rows};

pub const PROB_FLOOR: f64 = 1e-12;
pub const NORM_FLOOR: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-6;

/// Per-component loss values; `total` is their plain sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub stu: f64,
    pub tea: f64,
    pub iic: f64,
    pub self_distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn pretrain(rec: f64, stu: f64, tea: f64, iic: f64) -> Self {
        let mut b = Self {
            rec,
            stu,
            tea,
            iic,
            ..Self::default()
        };
        b.total = b.sum_components();
        b
    }

    pub fn finetune(self_distill: f64) -> Self {
        Self {
            self_distill,
            total: self_distill,
            ..Self::default()
        }
    }

    pub fn sum_components(&self) -> f64 {
        self.rec + self.stu + self.tea + self.iic + self.self_distill
    }

    /// Componentwise accumulation; `total` is recomputed from the parts.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rec += weight * other.rec;
        self.stu += weight * other.stu;
        self.tea += weight * other.tea;
        self.iic += weight * other.iic;
        self.self_distill += weight * other.self_distill;
        self.total = self.sum_components();
    }

    /// First non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("stu", self.stu),
            ("tea", self.tea),
            ("iic", self.iic),
            ("self_distill", self.self_distill),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn flog(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (a, b) = (ArrayView1::from(a), ArrayView1::from(b));
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericGuard("cosine similarity of a zero vector".into()));
    }
    Ok(a.dot(&b) / (na.max(NORM_FLOOR) * nb.max(NORM_FLOOR)))
}

fn check_same_shapes(a: &[Array2<f64>], b: &[Array2<f64>], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} views", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.dim() != y.dim() {
            return Err(Error::Shape(format!(
                "{what}: view {i} has shapes {:?} and {:?}",
                x.dim(),
                y.dim()
            )));
        }
    }
    Ok(())
}

fn check_stochastic(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let s = row.sum();
        if row.iter().any(|&p| !(p >= -STOCHASTIC_TOL)) || (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation(format!("{what}: row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

fn check_views(views: &[Array2<f64>], what: &str) -> Result<()> {
    if views.len() < 2 {
        return Err(Error::Validation(format!("{what} needs at least 2 views, got {}", views.len())));
    }
    let dim = views[0].dim();
    if views.iter().any(|v| v.dim() != dim) {
        return Err(Error::Shape(format!("{what}: views differ in shape")));
    }
    if dim.0 < 2 {
        return Err(Error::NoNegatives(dim.0));
    }
    Ok(())
}

/// `sum_v sum_n ||x_n - xhat_n||^2`.
pub fn reconstruction_loss(x: &[Array2<f64>], xhat: &[Array2<f64>]) -> Result<f64> {
    check_same_shapes(x, xhat, "reconstruction")?;
    Ok(x.iter()
        .zip(xhat)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum())
}

/// Batch mean of [`reconstruction_loss`]: summed over views, averaged over samples.
pub fn reconstruction_loss_mean(x: &[Array2<f64>], xhat: &[Array2<f64>]) -> Result<f64> {
    let n = x.first().map_or(1, |m| m.nrows()).max(1);
    Ok(reconstruction_loss(x, xhat)? / n as f64)
}

/// Value of [`reconstruction_loss_mean`] and its gradient with respect to `xhat`.
pub fn reconstruction_loss_mean_grad(
    x: &[Array2<f64>],
    xhat: &[Array2<f64>],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let value = reconstruction_loss_mean(x, xhat)?;
    let grads = x
        .iter()
        .zip(xhat)
        .map(|(a, b)| (b - a) * (2.0 / a.nrows().max(1) as f64))
        .collect();
    Ok((value, grads))
}

/// `H(Y)`: the entropy of each view's batch-mean cluster distribution, summed over views.
pub fn entropy_regularizer(y_views: &[Array2<f64>]) -> Result<f64> {
    let mut h = 0.0;
    for y in y_views {
        check_stochastic(y, "entropy regularizer")?;
        let mean = y.mean_axis(Axis(0)).ok_or_else(|| Error::Shape("empty batch".into()))?;
        h -= mean.iter().map(|&p| p * flog(p)).sum::<f64>();
    }
    Ok(h)
}

pub fn entropy_regularizer_grad(y_views: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
    let value = entropy_regularizer(y_views)?;
    let grads = y_views
        .iter()
        .map(|y| {
            let n = y.nrows() as f64;
            let mean = y.mean_axis(Axis(0)).expect("checked non-empty");
            let d: Array1<f64> = mean.mapv(|p| -(flog(p) + if p > PROB_FLOOR { 1.0 } else { 0.0 }) / n);
            Array2::from_shape_fn(y.dim(), |(_, j)| d[j])
        })
        .collect();
    Ok((value, grads))
}

/// The cross-view contrastive term shared by the student and teacher losses.
///
/// For each ordered view pair `(v, w)` and anchor `n` the positive is
/// `(x_n^v, x_n^w)`; the denominator holds every cross-view pair `(x_n^v, x_m^w)`
/// and the same-view pairs `(x_n^v, x_m^v)`, `m != n` unless
/// `include_self_negatives`. Each pair contributes `1 / (2N)` times the sum
/// of its anchor terms.
pub fn contrastive_loss(views: &[Array2<f64>], tau: f64, include_self_negatives: bool) -> Result<f64> {
    check_views(views, "contrastive loss")?;
    check_tau(tau)?;
    let n = views[0].nrows();
    let mut total = 0.0;
    for (v, a) in views.iter().enumerate() {
        for (w, b) in views.iter().enumerate() {
            if v == w {
                continue;
            }
            let mut pair = 0.0;
            for i in 0..n {
                let ai = a.row(i);
                let ai = ai.as_slice().expect("standard layout");
                let mut logits = Vec::with_capacity(2 * n);
                for m in 0..n {
                    if m != i || include_self_negatives {
                        logits.push(cosine_similarity(ai, a.row(m).as_slice().unwrap())? / tau);
                    }
                    logits.push(cosine_similarity(ai, b.row(m).as_slice().unwrap())? / tau);
                }
                let pos = cosine_similarity(ai, b.row(i).as_slice().unwrap())? / tau;
                pair += log_sum_exp(&logits) - pos;
            }
            total += pair / (2.0 * n as f64);
        }
    }
    Ok(total)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-normalizes `x`, returning the unit rows and the (floored) norms.
fn unit_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut norms = Array1::zeros(x.nrows());
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let nrm = norm(row.view());
        if nrm == 0.0 {
            return Err(Error::NumericGuard(format!("row {i} has zero norm")));
        }
        let nrm = nrm.max(NORM_FLOOR);
        row /= nrm;
        norms[i] = nrm;
    }
    Ok((out, norms))
}

/// Gradient through `x -> x / max(||x||, floor)` for each row.
fn unit_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let u = unit.row(i);
        let radial = u.dot(&row);
        Zip::from(&mut row).and(&u).for_each(|g, &ui| *g -= radial * ui);
        row /= norms[i];
    }
    out
}

/// Value of [`contrastive_loss`] and its gradient with respect to each view.
pub fn contrastive_loss_grad(
    views: &[Array2<f64>],
    tau: f64,
    include_self_negatives: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_views(views, "contrastive loss")?;
    check_tau(tau)?;
    let n = views[0].nrows();
    let scale = 1.0 / (2.0 * n as f64);
    let units = views.iter().map(unit_rows).collect::<Result<Vec<_>>>()?;
    let mut grad_units: Vec<Array2<f64>> = views.iter().map(|v| Array2::zeros(v.dim())).collect();
    let mut total = 0.0;

    for v in 0..views.len() {
        let a = &units[v].0;
        let s_aa = a.dot(&a.t()) / tau;
        for w in 0..views.len() {
            if v == w {
                continue;
            }
            let b = &units[w].0;
            let s_ab = a.dot(&b.t()) / tau;
            let mut g_aa = Array2::<f64>::zeros((n, n));
            let mut g_ab = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let same = |m: usize| m != i || include_self_negatives;
                let max = (0..n)
                    .filter(|&m| same(m))
                    .map(|m| s_aa[[i, m]])
                    .chain((0..n).map(|m| s_ab[[i, m]]))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for m in 0..n {
                    if same(m) {
                        let e = (s_aa[[i, m]] - max).exp();
                        g_aa[[i, m]] = e;
                        denom += e;
                    }
                    let e = (s_ab[[i, m]] - max).exp();
                    g_ab[[i, m]] = e;
                    denom += e;
                }
                total += scale * (max + denom.ln() - s_ab[[i, i]]);
                for m in 0..n {
                    g_aa[[i, m]] *= scale / denom;
                    g_ab[[i, m]] *= scale / denom;
                }
                g_ab[[i, i]] -= scale;
            }
            let sym = &g_aa + &g_aa.t();
            grad_units[v] += &(sym.dot(a) / tau);
            grad_units[v] += &(g_ab.dot(b) / tau);
            grad_units[w] += &(g_ab.t().dot(a) / tau);
        }
    }
    let grads = grad_units
        .iter()
        .zip(&units)
        .map(|(g, (u, nrm))| unit_rows_backward(u, nrm, g))
        .collect();
    Ok((total, grads))
}

/// `L_stu`: contrastive term on cluster-probability rows minus [`entropy_regularizer`].
pub fn student_contrastive_loss(y_views: &[Array2<f64>], tau_s: f64, include_self_negatives: bool) -> Result<f64> {
    Ok(contrastive_loss(y_views, tau_s, include_self_negatives)? - entropy_regularizer(y_views)?)
}

pub fn student_contrastive_loss_grad(
    y_views: &[Array2<f64>],
    tau_s: f64,
    include_self_negatives: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let (c, mut grads) = contrastive_loss_grad(y_views, tau_s, include_self_negatives)?;
    let (h, hgrads) = entropy_regularizer_grad(y_views)?;
    for (g, hg) in grads.iter_mut().zip(hgrads) {
        *g -= &hg;
    }
    Ok((c - h, grads))
}

/// `L_tea`: the contrastive term on teacher features, no entropy regularizer.
pub fn teacher_contrastive_loss(t_views: &[Array2<f64>], tau_t: f64, include_self_negatives: bool) -> Result<f64> {
    contrastive_loss(t_views, tau_t, include_self_negatives)
}

pub fn teacher_contrastive_loss_grad(
    t_views: &[Array2<f64>],
    tau_t: f64,
    include_self_negatives: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    contrastive_loss_grad(t_views, tau_t, include_self_negatives)
}

/// Symmetrized empirical joint distribution of two row-stochastic matrices.
pub fn iic_joint(pa: &Array2<f64>, pb: &Array2<f64>) -> Result<Array2<f64>> {
    if pa.dim() != pb.dim() {
        return Err(Error::Shape(format!("joint of {:?} and {:?}", pa.dim(), pb.dim())));
    }
    check_stochastic(pa, "iic joint")?;
    check_stochastic(pb, "iic joint")?;
    Ok(joint_parts(pa, pb).0)
}

/// Returns the normalized joint and the normalizer of the symmetrized product.
fn joint_parts(pa: &Array2<f64>, pb: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = pa.nrows() as f64;
    let j = pa.t().dot(pb) / n;
    let sym = (&j + &j.t()) * 0.5;
    let s = sym.sum();
    (sym / s, s)
}

/// `sum_ij J_ij log(J_ij / (r_i c_j))` with `r`, `c` the marginals of `J`.
pub fn mutual_information(joint: &Array2<f64>) -> f64 {
    let r = joint.sum_axis(Axis(1));
    let c = joint.sum_axis(Axis(0));
    joint
        .indexed_iter()
        .map(|((i, j), &p)| p * (flog(p) - flog(r[i]) - flog(c[j])))
        .sum()
}

/// Gradient of `-MI(joint(pa, pb))` with respect to `pa` and `pb`.
fn neg_mi_pair_grad(pa: &Array2<f64>, pb: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let n = pa.nrows() as f64;
    let (joint, s) = joint_parts(pa, pb);
    let r = joint.sum_axis(Axis(1));
    let c = joint.sum_axis(Axis(0));
    let ind = |x: f64| if x > PROB_FLOOR { 1.0 } else { 0.0 };
    let g = Array2::from_shape_fn(joint.dim(), |(i, j)| {
        let p = joint[[i, j]];
        -(flog(p) - flog(r[i]) - flog(c[j]) + ind(p) - ind(r[i]) - ind(c[j]))
    });
    let inner = (&g * &joint).sum();
    let g_sym = (g - inner) / s;
    let g_raw = (&g_sym + &g_sym.t()) * 0.5;
    let grad_a = pb.dot(&g_raw.t()) / n;
    let grad_b = pa.dot(&g_raw) / n;
    (-mutual_information(&joint), grad_a, grad_b)
}

fn check_iic(views: &[Array2<f64>]) -> Result<()> {
    check_views(views, "iic loss")?;
    if views[0].ncols() < 2 {
        return Err(Error::Config("iic needs an alphabet of at least 2 symbols".into()));
    }
    Ok(())
}

/// `-sum MI` over unordered view pairs, with rows already distributions.
pub fn iic_mi_loss_probs(p_views: &[Array2<f64>]) -> Result<f64> {
    check_iic(p_views)?;
    let mut loss = 0.0;
    for v in 0..p_views.len() {
        for w in v + 1..p_views.len() {
            loss -= mutual_information(&iic_joint(&p_views[v], &p_views[w])?);
        }
    }
    Ok(loss)
}

pub fn iic_mi_loss_probs_grad(p_views: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
    check_iic(p_views)?;
    for p in p_views {
        check_stochastic(p, "iic loss")?;
    }
    let mut grads: Vec<Array2<f64>> = p_views.iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut loss = 0.0;
    for v in 0..p_views.len() {
        for w in v + 1..p_views.len() {
            let (l, ga, gb) = neg_mi_pair_grad(&p_views[v], &p_views[w]);
            loss += l;
            grads[v] += &ga;
            grads[w] += &gb;
        }
    }
    Ok((loss, grads))
}

/// IIC on latent codes: each row of `Z` is softmax-normalized over the latent
/// dimensions, which then serve as the discrete alphabet.
pub fn iic_mi_loss(z_views: &[Array2<f64>]) -> Result<f64> {
    check_iic(z_views)?;
    let p: Vec<_> = z_views.iter().map(softmax_rows).collect();
    iic_mi_loss_probs(&p)
}

pub fn iic_mi_loss_grad(z_views: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
    check_iic(z_views)?;
    let p: Vec<_> = z_views.iter().map(softmax_rows).collect();
    let (loss, gp) = iic_mi_loss_probs_grad(&p)?;
    Ok((loss, p.iter().zip(&gp).map(|(pi, gi)| softmax_backward(pi, gi)).collect()))
}

/// Sign applied to the distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlSign {
    /// `+KL(target || student)`, minimized.
    #[default]
    Forward,
    /// The negated divergence, for comparison runs only; unbounded below.
    Literal,
}

/// Smoothed targets `(1 - tau_d) * dark + tau_d * u`.
pub fn distillation_targets(dark: &Array2<f64>, tau_d: f64, u: &[f64]) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&tau_d) {
        return Err(Error::Config(format!("tau_d must lie in [0, 1), got {tau_d}")));
    }
    if u.len() != dark.ncols() {
        return Err(Error::Shape(format!("u has {} entries for {} clusters", u.len(), dark.ncols())));
    }
    let us: f64 = u.iter().sum();
    if u.iter().any(|&x| x < 0.0) || (us - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Validation("u is not a distribution".into()));
    }
    check_stochastic(dark, "dark knowledge")?;
    Ok(Array2::from_shape_fn(dark.dim(), |(i, j)| (1.0 - tau_d) * dark[[i, j]] + tau_d * u[j]))
}

/// Sum over views of the batch-mean `KL(q || y)` with `q` from [`distillation_targets`].
pub fn self_distillation_loss(
    dark: &[Array2<f64>],
    y_views: &[Array2<f64>],
    tau_d: f64,
    u: &[f64],
    sign: KlSign,
) -> Result<f64> {
    check_same_shapes(dark, y_views, "self-distillation")?;
    let mut loss = 0.0;
    for (d, y) in dark.iter().zip(y_views) {
        check_stochastic(y, "student probabilities")?;
        let q = distillation_targets(d, tau_d, u)?;
        let kl: f64 = q.iter().zip(y).map(|(&qi, &yi)| qi * (flog(qi) - flog(yi))).sum();
        loss += kl / y.nrows() as f64;
    }
    Ok(match sign {
        KlSign::Forward => loss,
        KlSign::Literal => -loss,
    })
}

/// Value of [`self_distillation_loss`] and its gradient with respect to `y`.
pub fn self_distillation_loss_grad(
    dark: &[Array2<f64>],
    y_views: &[Array2<f64>],
    tau_d: f64,
    u: &[f64],
    sign: KlSign,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let value = self_distillation_loss(dark, y_views, tau_d, u, sign)?;
    let s = match sign {
        KlSign::Forward => 1.0,
        KlSign::Literal => -1.0,
    };
    let mut grads = Vec::with_capacity(y_views.len());
    for (d, y) in dark.iter().zip(y_views) {
        let q = distillation_targets(d, tau_d, u)?;
        let n = y.nrows() as f64;
        let mut g = Array2::zeros(y.dim());
        Zip::from(&mut g).and(&q).and(y).for_each(|g, &qi, &yi| {
            if yi > PROB_FLOOR {
                *g = -s * qi / (n * yi);
            }
        });
        grads.push(g);
    }
    Ok((value, grads))
}
