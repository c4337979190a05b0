//! Composite objective, its exact gradients through the bounded restorer,
//! and the Adam training loop.

use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade_triplet, sample_recipe, DegradeConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::phantom::PhantomCase;
use crate::restorer::net::{logistic, Heads, Real};
use crate::restorer::{init_params, Architecture, Checkpoint, ModelParams, RestorationOutput};
use crate::stream::{self, domain};

/// Closeness scale of the identity-term gate `exp(-MSE(x_c, y) / theta)`.
pub const IDENTITY_THETA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub restore: f64,
    pub identity: f64,
    pub edit: f64,
    pub smooth: f64,
    pub uncertainty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            restore: 1.0,
            identity: 0.5,
            edit: 0.1,
            smooth: 0.05,
            uncertainty: 0.01,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        restore: 0.0,
        identity: 0.0,
        edit: 0.0,
        smooth: 0.0,
        uncertainty: 0.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.restore, self.identity, self.edit, self.smooth, self.uncertainty]
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            restore: self.restore * k,
            identity: self.identity * k,
            edit: self.edit * k,
            smooth: self.smooth * k,
            uncertainty: self.uncertainty * k,
        }
    }

    /// Only term `i` (in restore, identity, edit, smooth, uncertainty order)
    /// keeps its weight.
    pub fn only(&self, i: usize) -> Self {
        let mut a = [0.0; 5];
        a[i] = self.as_array()[i];
        LossWeights { restore: a[0], identity: a[1], edit: a[2], smooth: a[3], uncertainty: a[4] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

pub const TERM_NAMES: [&str; 5] = ["restore", "identity", "edit", "smooth", "uncertainty"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub restore: f64,
    pub identity: f64,
    pub edit: f64,
    pub smooth: f64,
    pub uncertainty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.restore, self.identity, self.edit, self.smooth, self.uncertainty]
    }

    fn from_terms(t: [f64; 5], w: &LossWeights) -> Result<Self> {
        let total = t.iter().zip(w.as_array()).map(|(t, w)| t * w).sum::<f64>();
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} term is {}", TERM_NAMES[i], t[i])));
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("total loss is {total}")));
        }
        Ok(LossBreakdown { restore: t[0], identity: t[1], edit: t[2], smooth: t[3], uncertainty: t[4], total })
    }

    fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.restore += b.restore / n;
            m.identity += b.identity / n;
            m.edit += b.edit / n;
            m.smooth += b.smooth / n;
            m.uncertainty += b.uncertainty / n;
            m.total += b.total / n;
        }
        m
    }
}

fn f<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_shapes(dims: &[(usize, usize)]) -> Result<()> {
    if dims.windows(2).all(|w| w[0] == w[1]) {
        Ok(())
    } else {
        Err(Error::Shape(format!("loss inputs differ in shape: {dims:?}")))
    }
}

/// `exp(-MSE(x_c, y) / theta)`, one gate per image.
pub fn identity_gate<T: Real>(x_c: ArrayView2<T>, y: ArrayView2<T>) -> f64 {
    let n = x_c.len() as f64;
    let mse = x_c.iter().zip(y.iter()).map(|(&a, &b)| (f(a) - f(b)).powi(2)).sum::<f64>() / n;
    (-mse / IDENTITY_THETA).exp()
}

/// Total variation of `m` with forward differences, divided by the pixel count.
fn smooth_term<T: Real>(m: ArrayView2<T>) -> f64 {
    let (h, w) = m.dim();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                s += (f(m[[y, x + 1]]) - f(m[[y, x]])).abs();
            }
            if y + 1 < h {
                s += (f(m[[y + 1, x]]) - f(m[[y, x]])).abs();
            }
        }
    }
    s / (h * w) as f64
}

pub fn loss_total<T: Real>(
    out: &RestorationOutput<T>,
    x_c: ArrayView2<T>,
    y_clean: ArrayView2<T>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_shapes(&[out.restored.dim(), x_c.dim(), y_clean.dim(), out.edit_map.dim()])?;
    let n = x_c.len() as f64;
    let gate = identity_gate(x_c, y_clean);
    let (mut restore, mut a2, mut edit, mut unc) = (0.0, 0.0, 0.0, 0.0);
    for (((&yh, &y), &a), &u) in out
        .restored
        .iter()
        .zip(y_clean.iter())
        .zip(out.applied_edit.iter())
        .zip(out.uncertainty.iter())
    {
        let e = f(yh) - f(y);
        let (a, u) = (f(a), f(u));
        restore += e.abs();
        a2 += a * a;
        edit += a.abs();
        unc += (-u).exp() * e * e + u;
    }
    let terms = [restore / n, gate * a2 / n, edit / n, smooth_term(out.edit_map.view()), unc / n];
    LossBreakdown::from_terms(terms, w)
}

/// Loss of one sample and its gradient with respect to the raw head planes.
pub fn head_gradient<T: Real>(
    heads: &Heads<T>,
    x_c: ArrayView2<T>,
    y_clean: ArrayView2<T>,
    w: &LossWeights,
    r_max: T,
) -> Result<(LossBreakdown, Array2<T>)> {
    let out = heads.output(x_c, r_max);
    let loss = loss_total(&out, x_c, y_clean, w)?;
    let (h, wd) = x_c.dim();
    let n = h * wd;
    let c = |v: f64| T::from_f64(v).expect("finite");
    let inv_n = c(1.0 / n as f64);
    let (w1, w2, w3, w4, w5) = (c(w.restore), c(w.identity), c(w.edit), c(w.smooth), c(w.uncertainty));
    let gate = c(identity_gate(x_c, y_clean));
    let two = T::one() + T::one();

    let mut dm = Array2::<T>::zeros((h, wd));
    if w.smooth != 0.0 {
        let m = &out.edit_map;
        for y in 0..h {
            for x in 0..wd {
                if x + 1 < wd {
                    let s = sign(m[[y, x + 1]] - m[[y, x]]) * w4 * inv_n;
                    dm[[y, x + 1]] = dm[[y, x + 1]] + s;
                    dm[[y, x]] = dm[[y, x]] - s;
                }
                if y + 1 < h {
                    let s = sign(m[[y + 1, x]] - m[[y, x]]) * w4 * inv_n;
                    dm[[y + 1, x]] = dm[[y + 1, x]] + s;
                    dm[[y, x]] = dm[[y, x]] - s;
                }
            }
        }
    }

    let mut d = Array2::<T>::zeros((3, n));
    for (i, ((yy, xx), &xc)) in x_c.indexed_iter().enumerate() {
        let yc = y_clean[[yy, xx]];
        let yh = out.restored[[yy, xx]];
        let a = out.applied_edit[[yy, xx]];
        let m = out.edit_map[[yy, xx]];
        let u = out.uncertainty[[yy, xx]];
        let e = yh - yc;
        let eu = (-u).exp();
        let raw = xc + a;
        let pass = raw > T::zero() && raw < T::one();

        let d_yh = (w1 * sign(e) + w5 * eu * two * e) * inv_n;
        let mut da = (w2 * gate * two * a + w3 * sign(a)) * inv_n;
        if pass {
            da = da + d_yh;
        }
        let dm_i = dm[[yy, xx]] + da * out.residual[[yy, xx]];
        let dr = da * m;
        let du = w5 * (T::one() - eu * e * e) * inv_n;

        let t = heads.raw[[0, i]].tanh();
        d[[0, i]] = dr * r_max * (T::one() - t * t);
        d[[1, i]] = dm_i * m * (T::one() - m);
        d[[2, i]] = du * logistic(heads.raw[[2, i]]);
    }
    Ok((loss, d))
}

/// One training example: a `(3, h, w)` degraded triplet and its clean center.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Real = f32> {
    pub input: Array3<T>,
    pub clean: Array2<T>,
}

impl<T: Real> Sample<T> {
    pub fn center(&self) -> ArrayView2<'_, T> {
        self.input.index_axis(ndarray::Axis(0), 1)
    }
}

fn sample_grad<T: Real>(p: &ModelParams<T>, s: &Sample<T>, w: &LossWeights) -> Result<(LossBreakdown, Vec<T>)> {
    let (heads, cache) = p.heads_cached(s.input.view())?;
    let (loss, dh) = head_gradient(&heads, s.center(), s.clean.view(), w, p.r_max())?;
    let mut g = vec![T::zero(); p.param_count()];
    p.backward(&cache, &dh, &mut g);
    Ok((loss, g))
}

/// Mean loss over the batch and its exact gradient. Per-sample gradients
/// are reduced in batch order, so `exec` never changes the result.
pub fn gradients<T: Real>(
    p: &ModelParams<T>,
    batch: &[Sample<T>],
    w: &LossWeights,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("gradient batch is empty".into()));
    }
    let parts = exec.try_map(batch.len(), |i| sample_grad(p, &batch[i], w))?;
    let inv_b = T::from_f64(1.0 / batch.len() as f64).expect("finite");
    let mut g = vec![T::zero(); p.param_count()];
    let mut losses = Vec::with_capacity(batch.len());
    for (loss, gi) in parts {
        losses.push(loss);
        for (a, b) in g.iter_mut().zip(gi) {
            *a = *a + b * inv_b;
        }
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok((LossBreakdown::mean_of(&losses), g))
}

/// Mean loss over the batch without gradients.
pub fn batch_loss<T: Real>(p: &ModelParams<T>, batch: &[Sample<T>], w: &LossWeights) -> Result<LossBreakdown> {
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let heads = p.heads(s.input.view())?;
        let out = heads.output(s.center(), p.r_max());
        losses.push(loss_total(&out, s.center(), s.clean.view(), w)?);
    }
    Ok(LossBreakdown::mean_of(&losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: AdamParams, lr: f64, n: usize) -> Self {
        Adam { params, lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f32], grad: &[f32]) {
        let AdamParams { beta1, beta2, epsilon } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i] as f64;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let upd = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
            theta[i] = (theta[i] as f64 - upd) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub seed: u64,
    /// Phantom corpus directory; required by the command line.
    pub corpus: Option<PathBuf>,
    /// Share of corpus cases (taken from the end) held out for validation.
    pub validation_fraction: f64,
    pub validation_every: usize,
    pub architecture: Architecture,
    pub degrade: DegradeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 4,
            learning_rate: 2e-3,
            adam: AdamParams::default(),
            seed: 0,
            corpus: None,
            validation_fraction: 0.1,
            validation_every: 250,
            architecture: Architecture::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.batch_size < 1 || self.validation_every < 1 {
            return Err(Error::InvalidParam("steps, batch_size and validation_every must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::InvalidParam(format!("invalid Adam parameters {a:?}")));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidParam("validation_fraction must lie in [0, 1)".into()));
        }
        self.architecture.validate()?;
        self.degrade.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Batch loss evaluated at the parameters after `step` updates.
    pub train: Option<LossBreakdown>,
    pub validation: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn validation(&self) -> impl Iterator<Item = (usize, &LossBreakdown)> {
        self.rows.iter().filter_map(|r| r.validation.as_ref().map(|v| (r.step, v)))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        for prefix in ["train", "val"] {
            for t in TERM_NAMES.iter().chain(std::iter::once(&"total")) {
                header.push(format!("{prefix}_{t}"));
            }
        }
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string()];
            for part in [&r.train, &r.validation] {
                match part {
                    Some(b) => rec.extend(b.terms().iter().chain(std::iter::once(&b.total)).map(|v| v.to_string())),
                    None => rec.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("training log", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

pub fn sample_from(case: &PhantomCase, recipe_seed: u64, cfg: &DegradeConfig, z: usize) -> Result<Sample<f32>> {
    let recipe = sample_recipe(cfg, recipe_seed)?;
    let t = degrade_triplet(&case.clean, &recipe, z)?;
    Ok(Sample { input: t.stacked(), clean: case.clean.slice(z).to_owned() })
}

/// Cases `[0, n_train)` train; the rest validate on their middle slice
/// with fixed recipes.
pub fn split_counts(n: usize, fraction: f64) -> (usize, usize) {
    let n_val = ((n as f64) * fraction).ceil() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    (n - n_val, n_val)
}

pub fn train_on_cases(
    cfg: &TrainConfig,
    w: &LossWeights,
    cases: &[PhantomCase],
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    if cases.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    let (n_train, n_val) = split_counts(cases.len(), cfg.validation_fraction);
    let val: Vec<Sample<f32>> = (0..n_val)
        .map(|i| {
            let case = &cases[n_train + i];
            let seed = stream::key(&[domain::VALIDATION, cfg.seed, i as u64]);
            sample_from(case, seed, &cfg.degrade, case.clean.depth() / 2)
        })
        .collect::<Result<_>>()?;

    let mut params = init_params(cfg.architecture.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, cfg.learning_rate, params.param_count());
    let mut log = TrainingLog::default();
    let validate = |p: &ModelParams<f32>| -> Result<Option<LossBreakdown>> {
        if val.is_empty() {
            Ok(None)
        } else {
            batch_loss(p, &val, w).map(Some)
        }
    };

    for step in 0..=cfg.steps {
        let validation = if step % cfg.validation_every == 0 || step == cfg.steps {
            validate(&params)?
        } else {
            None
        };
        if step == cfg.steps {
            log.rows.push(LogRow { step, train: None, validation });
            break;
        }
        let batch: Vec<Sample<f32>> = (0..cfg.batch_size)
            .map(|b| {
                let mut rng = stream::rng(stream::key(&[domain::BATCH, cfg.seed, step as u64, b as u64]));
                let case = &cases[rng.random_range(0..n_train)];
                let z = rng.random_range(0..case.clean.depth());
                let recipe_seed = stream::key(&[domain::RECIPE, cfg.seed, step as u64, b as u64]);
                sample_from(case, recipe_seed, &cfg.degrade, z)
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = gradients(&params, &batch, w, exec).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            Error::NonFinite { index } => Error::Numeric(format!("step {step}: non-finite gradient at parameter {index}")),
            other => other,
        })?;
        adam.step(params.flat_mut(), &grad);
        if let Some(i) = params.flat().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("step {step}: parameter {i} diverged")));
        }
        log.rows.push(LogRow { step, train: Some(loss), validation });
    }

    let checkpoint = Checkpoint {
        params,
        train_case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        train_config: Some(serde_json::json!({
            "config": cfg,
            "weights": w,
        })),
    };
    Ok(TrainOutcome { checkpoint, log })
}
