//! ADMM-regularized structured pruning.
//!
//! Each constrained layer `i` carries its live weights `W_i` (in the model),
//! an auxiliary copy `Y_i` that always lies in the structured constraint set,
//! and a scaled dual `U_i`. One iteration is:
//!
//! 1. proximal step: a few epochs of SGD/Adam on
//!    `f(W) + sum_i rho_i/2 * ||W_i - Y_i + U_i||_F^2`
//! 2. projection: `Y_i <- Proj(W_i + U_i)` onto {at most `alpha_f` nonzero
//!    filters (lowered rows)} and {at most `alpha_c` nonzero lowered columns}
//! 3. dual update: `U_i <- U_i + W_i - Y_i`
//!
//! The auxiliary variable of the projection step is the same `Y_i` that
//! appears in the penalty.

use std::collections::BTreeMap;
use std::fmt;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::model::{model_forward, Batch, LossValue};
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use crate::train::{EpochRunner, StepHooks};

/// A budget as written in a config: an absolute count or a density fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Amount {
    Count(usize),
    Fraction(f64),
}

impl Amount {
    /// Resolves against `total` structures; fractions round up.
    pub fn resolve(self, total: usize) -> usize {
        match self {
            Amount::Count(n) => n,
            Amount::Fraction(f) => (f * total as f64).ceil() as usize,
        }
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Amount::Count(n) => write!(f, "{n}"),
            Amount::Fraction(x) => write!(f, "{x:?}"),
        }
    }
}

impl std::str::FromStr for Amount {
    type Err = Error;

    /// Integers are counts; anything with a decimal point or exponent is a
    /// fraction in `(0, 1]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains(['.', 'e', 'E']) {
            let f: f64 = s
                .parse()
                .map_err(|_| Error::Config(format!("bad budget fraction `{s}`")))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("budget fraction {f} outside (0, 1]")));
            }
            Ok(Amount::Fraction(f))
        } else {
            let n: usize = s
                .parse()
                .map_err(|_| Error::Config(format!("bad budget count `{s}`")))?;
            Ok(Amount::Count(n))
        }
    }
}

/// Per-layer budget as configured, before resolution against layer dims.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub filters: Option<Amount>,
    pub columns: Option<Amount>,
}

/// Resolved structured budget: at most `filters` nonzero rows and at most
/// `columns` nonzero columns of the lowered weight matrix. `None` means
/// unconstrained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredBudget {
    pub layer: String,
    pub filters: Option<usize>,
    pub columns: Option<usize>,
}

impl StructuredBudget {
    pub fn unconstrained(layer: &str) -> Self {
        StructuredBudget {
            layer: layer.to_string(),
            filters: None,
            columns: None,
        }
    }

    pub fn resolve(layer: &str, spec: &BudgetSpec, rows: usize, cols: usize) -> Result<Self> {
        let b = StructuredBudget {
            layer: layer.to_string(),
            filters: spec.filters.map(|a| a.resolve(rows)),
            columns: spec.columns.map(|a| a.resolve(cols)),
        };
        b.validate(rows, cols)?;
        Ok(b)
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if let Some(f) = self.filters {
            if f == 0 || f > rows {
                return Err(Error::usage(format!(
                    "layer `{}`: filter budget {f} outside [1, {rows}]",
                    self.layer
                )));
            }
        }
        if let Some(c) = self.columns {
            if c == 0 || c > cols {
                return Err(Error::usage(format!(
                    "layer `{}`: column budget {c} outside [1, {cols}]",
                    self.layer
                )));
            }
        }
        Ok(())
    }

    /// Upper bound on nonzero weights allowed by this budget.
    pub fn max_nonzero(&self, rows: usize, cols: usize) -> usize {
        self.filters.unwrap_or(rows) * self.columns.unwrap_or(cols)
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

pub fn row_sq_norms(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum())
        .collect()
}

pub fn col_sq_norms(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += v * v;
        }
    }
    out
}

/// Euclidean projection of the lowered weight matrix onto the structured
/// budget: keep the `filters` rows of largest squared norm, then, on the
/// surviving matrix, the `columns` columns of largest squared norm. Each
/// single-constraint case is the exact Frobenius projection; the combined
/// case is the sequential rows-then-columns rule.
pub fn project_structured(weights: &Tensor, budget: &StructuredBudget) -> Result<Tensor> {
    let (rows, cols) = weights.lowered_shape();
    budget.validate(rows, cols)?;
    let mut out = weights.clone();
    let m = out.data_mut();
    if let Some(k) = budget.filters {
        let keep = top_k(&row_sq_norms(m, rows, cols), k);
        for (r, kept) in keep.iter().enumerate() {
            if !kept {
                m[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
    }
    if let Some(k) = budget.columns {
        let keep = top_k(&col_sq_norms(m, rows, cols), k);
        for r in 0..rows {
            for (v, kept) in m[r * cols..(r + 1) * cols].iter_mut().zip(&keep) {
                if !kept {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// ADMM variables of one constrained layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmLayer {
    pub budget: StructuredBudget,
    pub y: Tensor,
    pub u: Tensor,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub layers: Vec<AdmmLayer>,
    pub iteration: u64,
}

impl AdmmState {
    pub fn layer(&self, name: &str) -> Option<&AdmmLayer> {
        self.layers.iter().find(|l| l.budget.layer == name)
    }

    pub fn budgets(&self) -> Vec<StructuredBudget> {
        self.layers.iter().map(|l| l.budget.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub layer: String,
    /// `||W - Y||_F / ||W||_F`
    pub primal: f64,
}

/// `Y_i = Proj(W_i)`, `U_i = 0`, `rho_i = rho` for every budgeted layer.
pub fn init_admm(model: &LayerGraph, budgets: &[StructuredBudget], rho: f64) -> Result<AdmmState> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::usage(format!("rho must be positive, got {rho}")));
    }
    if model
        .weighted_ids()
        .iter()
        .all(|&id| model.node(id).weights().count_nonzero() == 0)
    {
        warn!("initializing ADMM on an all-zero (untrained) model");
    }
    let mut layers = Vec::with_capacity(budgets.len());
    for b in budgets {
        let id = model.find_weighted(&b.layer)?;
        let w = model.node(id).weights();
        layers.push(AdmmLayer {
            budget: b.clone(),
            y: project_structured(w, b)?,
            u: Tensor::zeros(w.dims()),
            rho,
        });
    }
    Ok(AdmmState { layers, iteration: 0 })
}

/// Adds `rho/2 ||W - Y + U||^2` to the loss and `rho (W - Y + U)` to each
/// constrained layer's weight gradient. Filters whose row of `Y` is zero also
/// get `rho/2 b^2` on their bias: hard pruning zeroes those biases, so the
/// proximal step should not learn to rely on them.
pub fn add_penalty(model: &LayerGraph, state: &AdmmState, loss: &mut LossValue) -> Result<()> {
    for l in &state.layers {
        let id = model.find_weighted(&l.budget.layer)?;
        let w = model.node(id).weights();
        if !w.same_dims(&l.y) || !w.same_dims(&l.u) {
            return Err(Error::StateCorruption(format!(
                "layer `{}`: W {:?}, Y {:?}, U {:?}",
                l.budget.layer,
                w.dims(),
                l.y.dims(),
                l.u.dims()
            )));
        }
        let grad = loss
            .gradients
            .get_mut(&l.budget.layer)
            .ok_or_else(|| Error::StateCorruption(format!("no gradient for layer `{}`", l.budget.layer)))?;
        let mut penalty = 0.0;
        for (((g, &wv), &yv), &uv) in grad
            .weights
            .data_mut()
            .iter_mut()
            .zip(w.data())
            .zip(l.y.data())
            .zip(l.u.data())
        {
            let d = wv - yv + uv;
            penalty += d * d;
            *g += l.rho * d;
        }
        let (_, cols) = l.y.lowered_shape();
        let bias = model.node(id).bias();
        for (m, row) in l.y.data().chunks(cols).enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                let b = bias.data()[m];
                penalty += b * b;
                grad.bias.data_mut()[m] += l.rho * b;
            }
        }
        loss.value += 0.5 * l.rho * penalty;
    }
    Ok(())
}

/// Loss and gradients of the augmented Lagrangian on one batch.
pub fn augmented_loss_grad(model: &LayerGraph, batch: &Batch, state: &AdmmState) -> Result<LossValue> {
    let (_, mut loss) = model_forward(model, batch)?;
    add_penalty(model, state, &mut loss)?;
    Ok(loss)
}

struct PenaltyHooks<'a> {
    state: &'a AdmmState,
}

impl StepHooks for PenaltyHooks<'_> {
    fn adjust(&mut self, model: &LayerGraph, loss: &mut LossValue) -> Result<()> {
        add_penalty(model, self.state, loss)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProximalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// `U <- U + W - Y`; returns `||W - Y||_F`.
pub fn dual_update(u: &mut Tensor, w: &Tensor, y: &Tensor) -> f64 {
    let mut sq = 0.0;
    for ((uv, &wv), &yv) in u.data_mut().iter_mut().zip(w.data()).zip(y.data()) {
        let d = wv - yv;
        *uv += d;
        sq += d * d;
    }
    sq.sqrt()
}

/// Projection and dual update given the current weights; returns residuals.
pub fn project_and_update_duals(model: &LayerGraph, state: &mut AdmmState) -> Result<Vec<Residual>> {
    let mut residuals = Vec::with_capacity(state.layers.len());
    for l in &mut state.layers {
        let id = model.find_weighted(&l.budget.layer)?;
        let w = model.node(id).weights();
        let mut wu = w.clone();
        wu.axpy(1.0, &l.u);
        l.y = project_structured(&wu, &l.budget)?;
        let primal = dual_update(&mut l.u, w, &l.y);
        let wn = w.norm();
        residuals.push(Residual {
            layer: l.budget.layer.clone(),
            primal: if wn > 0.0 { primal / wn } else { primal },
        });
    }
    state.iteration += 1;
    Ok(residuals)
}

/// One ADMM iteration: proximal epochs, projection, dual update.
pub fn admm_iteration(
    model: &mut LayerGraph,
    data: &Dataset,
    state: &mut AdmmState,
    opt: &mut Optimizer,
    settings: ProximalSettings,
) -> Result<Vec<Residual>> {
    let k = state.iteration;
    let runner = EpochRunner {
        data,
        batch_size: settings.batch_size,
        seed: settings.seed,
        stage: 2,
    };
    for e in 0..settings.epochs {
        let epoch = k * settings.epochs as u64 + e as u64;
        let mut hooks = PenaltyHooks { state };
        let loss = runner.run(model, opt, epoch, &mut hooks).map_err(|err| match err {
            Error::Numeric(msg) => Error::Numeric(format!("ADMM iteration {k}, proximal epoch {e}: {msg}")),
            other => other,
        })?;
        info!("admm iteration {k} epoch {e}: augmented loss {loss:.5}");
    }
    project_and_update_duals(model, state)
}

/// Frozen-support mask for one weighted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub dims: Vec<usize>,
    pub weights: Vec<bool>,
    /// One flag per filter; a filter whose row was pruned keeps a zero bias.
    pub bias: Vec<bool>,
}

impl LayerMask {
    pub fn all(dims: &[usize], value: bool) -> Self {
        let len = dims.iter().product();
        LayerMask {
            dims: dims.to_vec(),
            weights: vec![value; len],
            bias: vec![value; dims[0]],
        }
    }

    pub fn from_support(w: &Tensor) -> Self {
        let (rows, cols) = w.lowered_shape();
        let weights: Vec<bool> = w.data().iter().map(|v| *v != 0.0).collect();
        let bias = (0..rows)
            .map(|r| weights[r * cols..(r + 1) * cols].iter().any(|&b| b))
            .collect();
        LayerMask {
            dims: w.dims().to_vec(),
            weights,
            bias,
        }
    }

    pub fn density(&self) -> f64 {
        self.weights.iter().filter(|&&b| b).count() as f64 / self.weights.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: BTreeMap<String, LayerMask>,
}

impl PruneMask {
    pub fn nonzero(&self) -> usize {
        self.layers
            .values()
            .map(|m| m.weights.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Mask with every parameter trainable.
    pub fn full(model: &LayerGraph) -> Self {
        let layers = model
            .weighted_ids()
            .into_iter()
            .map(|id| {
                (
                    model.node(id).name.clone(),
                    LayerMask::all(model.node(id).weights().dims(), true),
                )
            })
            .collect();
        PruneMask { layers }
    }

    fn check(&self, model: &LayerGraph) -> Result<()> {
        for (name, m) in &self.layers {
            let id = model.find_weighted(name)?;
            let node = model.node(id);
            if node.weights().dims() != m.dims.as_slice() {
                return Err(Error::usage(format!(
                    "mask for `{name}` has dims {:?} but weights are {:?}",
                    m.dims,
                    node.weights().dims()
                )));
            }
            let outside = node
                .weights()
                .data()
                .iter()
                .zip(&m.weights)
                .any(|(v, &keep)| !keep && *v != 0.0)
                || node
                    .bias()
                    .data()
                    .iter()
                    .zip(&m.bias)
                    .any(|(v, &keep)| !keep && *v != 0.0);
            if outside {
                return Err(Error::usage(format!(
                    "layer `{name}` has nonzero weights outside its mask"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, model: &mut LayerGraph) {
        for (name, m) in &self.layers {
            let id = model.find_weighted(name).expect("mask checked against model");
            let (w, b) = model.params_mut(id);
            for (v, &keep) in w.data_mut().iter_mut().zip(&m.weights) {
                if !keep {
                    *v = 0.0;
                }
            }
            for (v, &keep) in b.data_mut().iter_mut().zip(&m.bias) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    fn mask_gradients(&self, loss: &mut LossValue) {
        for (name, m) in &self.layers {
            if let Some(g) = loss.gradients.get_mut(name) {
                for (v, &keep) in g.weights.data_mut().iter_mut().zip(&m.weights) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                for (v, &keep) in g.bias.data_mut().iter_mut().zip(&m.bias) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Projects every budgeted layer exactly onto its constraint set, zeroes the
/// bias of every emptied filter and returns the resulting support as a mask.
/// Layers without a budget get an all-true mask.
pub fn hard_prune(model: &mut LayerGraph, budgets: &[StructuredBudget]) -> Result<PruneMask> {
    let mut mask = PruneMask::full(model);
    for b in budgets {
        let id = model.find_weighted(&b.layer)?;
        let projected = project_structured(model.node(id).weights(), b)?;
        let lm = LayerMask::from_support(&projected);
        let (w, bias) = model.params_mut(id);
        *w = projected;
        for (v, &keep) in bias.data_mut().iter_mut().zip(&lm.bias) {
            if !keep {
                *v = 0.0;
            }
        }
        mask.layers.insert(b.layer.clone(), lm);
    }
    Ok(mask)
}

struct MaskHooks<'a> {
    mask: &'a PruneMask,
}

impl StepHooks for MaskHooks<'_> {
    fn adjust(&mut self, _model: &LayerGraph, loss: &mut LossValue) -> Result<()> {
        self.mask.mask_gradients(loss);
        Ok(())
    }

    fn after_step(&mut self, model: &mut LayerGraph) {
        self.mask.apply(model);
    }
}

/// Retrains with gradients zeroed outside `mask`; masked weights stay exactly
/// zero after every step. Returns the mean loss per epoch.
pub fn masked_retrain(
    model: &mut LayerGraph,
    data: &Dataset,
    mask: &PruneMask,
    opt: &mut Optimizer,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    mask.check(model)?;
    let runner = EpochRunner {
        data,
        batch_size,
        seed,
        stage: 3,
    };
    let mut hooks = MaskHooks { mask };
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let l = runner.run(model, opt, e as u64, &mut hooks)?;
        info!("masked retrain epoch {}/{epochs}: loss {l:.5}", e + 1);
        losses.push(l);
    }
    Ok(losses)
}
