//! Training loops: fine-tuning the base model (θ_o and the gold model),
//! instrumented unlearning (θ_u plus the G-effect log), and UWC parameter
//! mixing.
//!
//! All batch orders derive from the run seed, so a (config, seed, spec)
//! triple reproduces runs bitwise on a single thread.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedExample;
use crate::error::{LabError, Result};
use crate::geffect::{self, GEffectRecord, PGEffectSample};
use crate::model::{FlatGradient, ModelState};
use crate::objectives::{
    self, ObjectiveKind, ObjectiveSpec, RegKind, RunContext, TokenWeightTrace,
};
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    #[default]
    LinearFirstEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamDecoupledWd,
}

fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    5
}
fn default_max_grad_norm() -> f64 {
    1.0
}
fn default_forget_fraction() -> f64 {
    0.05
}
fn default_stride() -> usize {
    1
}
fn default_uwc_max_drop() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub warmup: Warmup,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_forget_fraction")]
    pub forget_fraction: f64,
    #[serde(default = "default_stride")]
    pub geffect_stride: usize,
    #[serde(default = "default_uwc_max_drop")]
    pub uwc_max_drop: f64,
}

/// Learning rates reported for 7B-scale models, recorded for reference; the
/// desk-scale defaults below are what tiny models need.
pub const LARGE_SCALE_LR_FINETUNE: f64 = 1e-5;
pub const LARGE_SCALE_LR_UNLEARN: f64 = 2e-5;

impl RunConfig {
    pub fn finetune_default() -> Self {
        RunConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: 150,
            max_grad_norm: 1.0,
            warmup: Warmup::LinearFirstEpoch,
            optimizer: OptimizerKind::AdamDecoupledWd,
            weight_decay: 0.0,
            seed: 0,
            forget_fraction: 0.05,
            geffect_stride: 1,
            uwc_max_drop: 0.10,
        }
    }

    pub fn unlearn_default() -> Self {
        RunConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 5,
            ..Self::finetune_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(LabError::InvalidArgument("lr must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(LabError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(LabError::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(LabError::InvalidArgument("max_grad_norm must be > 0".into()));
        }
        if self.geffect_stride < 1 {
            return Err(LabError::InvalidArgument("geffect_stride must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.forget_fraction) || !(0.0..=1.0).contains(&self.uwc_max_drop)
        {
            return Err(LabError::InvalidArgument("ratios must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| LabError::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| LabError::Serialization(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments; aligned with the parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn update_step<S: Scalar>(
    params: &mut [S],
    g: &FlatGradient<S>,
    state: &mut AdamState<S>,
    lr: S,
    weight_decay: S,
) {
    debug_assert_eq!(params.len(), g.values.len());
    state.step += 1;
    let t = state.step as i32;
    let b1 = s::<S>(ADAM_BETA1);
    let b2 = s::<S>(ADAM_BETA2);
    let eps = s::<S>(ADAM_EPS);
    let bias1 = S::one() - b1.powi(t);
    let bias2 = S::one() - b2.powi(t);
    for i in 0..params.len() {
        let gi = g.values[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * gi;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * gi * gi;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] = params[i] - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
    }
}

/// Scale the gradient down to max_norm if it exceeds it.
pub fn clip_gradient<S: Scalar>(mut g: FlatGradient<S>, max_norm: S) -> FlatGradient<S> {
    let norm = g.norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    g
}

/// Linear warm-up over the first epoch, constant afterwards.
pub fn lr_at(step: usize, lr: f64, steps_per_epoch: usize) -> f64 {
    if step < steps_per_epoch {
        lr * (step + 1) as f64 / steps_per_epoch as f64
    } else {
        lr
    }
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Train `init` to memorize the given examples by mean answer NLL;
/// produces θ_o (or the gold model when given retain-only data).
pub fn finetune<S: Scalar>(
    init: &ModelState<S>,
    examples: &[EncodedExample],
    cfg: &RunConfig,
) -> Result<(ModelState<S>, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(LabError::InvalidArgument("empty training set".into()));
    }
    let mut model = init.clone();
    let mut opt = AdamState::new(model.n_params());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let spe = steps_per_epoch(examples.len(), cfg.batch_size);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = nll_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(LabError::Numeric(format!(
                    "non-finite fine-tuning loss at step {step}"
                )));
            }
            let grad = clip_gradient(grad, s(cfg.max_grad_norm));
            let lr = lr_at(step, cfg.lr, spe);
            update_step(
                &mut model.params,
                &grad,
                &mut opt,
                s(lr),
                s(cfg.weight_decay),
            );
            log.push(TrainLogRow {
                epoch,
                step,
                lr,
                loss: loss.to_f64().unwrap_or(f64::NAN),
            });
            step += 1;
        }
    }
    Ok((model, log))
}

/// Mean answer NLL and its gradient (the training loss and the risk metric).
pub fn nll_loss_and_grad<S: Scalar>(
    model: &ModelState<S>,
    batch: &[EncodedExample],
) -> Result<(S, FlatGradient<S>)> {
    let grad = geffect::risk_gradient(model, batch)?;
    let mut loss = S::zero();
    for ex in batch {
        loss = loss - model.sequence_log_prob(ex)?;
    }
    Ok((loss / s(batch.len() as f64), grad))
}

pub fn mean_nll<S: Scalar>(model: &ModelState<S>, batch: &[EncodedExample]) -> Result<S> {
    let mut loss = S::zero();
    for ex in batch {
        loss = loss - model.sequence_log_prob(ex)?;
    }
    Ok(loss / s(batch.len() as f64))
}

// ---------------------------------------------------------------------------
// unlearning
// ---------------------------------------------------------------------------

/// Encoded data splits as the unlearner consumes them.
#[derive(Debug, Clone)]
pub struct EncodedSplits {
    pub forget: Vec<(String, EncodedExample)>,
    pub retain_train: Vec<EncodedExample>,
    pub retain_eval: Vec<EncodedExample>,
}

#[derive(Debug)]
pub struct UnlearnOutput<S: Scalar> {
    pub theta_u: ModelState<S>,
    pub records: Vec<GEffectRecord>,
    pub pg_samples: Vec<PGEffectSample>,
    pub weight_traces: Vec<TokenWeightTrace>,
    pub applied_grad_norms: Vec<f64>,
    pub loss_log: Vec<TrainLogRow>,
    /// Set when the run hit non-finite numbers; theta_u is then the last
    /// good parameter state.
    pub diverged_at: Option<usize>,
}

/// Run instrumented unlearning from θ_o. Every `geffect_stride` steps the
/// G-effect is measured at the pre-update parameters on the full forget set;
/// NPO runs additionally log the per-sample PG-effect at those steps. Token
/// weight traces are captured at the start of each epoch.
pub fn unlearn<S: Scalar>(
    theta_o: &ModelState<S>,
    spec: &ObjectiveSpec,
    splits: &EncodedSplits,
    cfg: &RunConfig,
) -> Result<UnlearnOutput<S>> {
    cfg.validate()?;
    spec.validate(theta_o.layout.n_layers)?;
    if splits.forget.is_empty() {
        return Err(LabError::InvalidArgument("empty forget set".into()));
    }
    if spec.regularizer != RegKind::None && splits.retain_train.is_empty() {
        return Err(LabError::InvalidArgument(
            "regularizer needs retain_train data".into(),
        ));
    }

    let ctx = RunContext {
        rmu_u: objectives::rmu_direction(theta_o.layout.d, cfg.seed),
        replacements: Vec::new(),
    };
    // PO replacements must be supplied pre-encoded, aligned with forget order
    let ctx = if spec.name == ObjectiveKind::Po {
        return Err(LabError::InvalidArgument(
            "use unlearn_with_context for po (replacements required)".into(),
        ));
    } else {
        ctx
    };
    unlearn_with_context(theta_o, spec, splits, cfg, ctx)
}

pub fn unlearn_with_context<S: Scalar>(
    theta_o: &ModelState<S>,
    spec: &ObjectiveSpec,
    splits: &EncodedSplits,
    cfg: &RunConfig,
    ctx: RunContext<S>,
) -> Result<UnlearnOutput<S>> {
    cfg.validate()?;
    spec.validate(theta_o.layout.n_layers)?;
    let forget_exs: Vec<EncodedExample> =
        splits.forget.iter().map(|(_, e)| e.clone()).collect();
    let ref_model = theta_o; // the frozen reference is the pre-unlearning model
    let needs_ref = spec.needs_reference();
    let ref_opt = if needs_ref { Some(ref_model) } else { None };

    let mut model = theta_o.clone();
    let mut opt = AdamState::new(model.n_params());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let spe = steps_per_epoch(forget_exs.len(), cfg.batch_size);
    let total_steps = spe * cfg.epochs;

    let mut records: Vec<GEffectRecord> = Vec::new();
    let mut pg_samples = Vec::new();
    let mut weight_traces = Vec::new();
    let mut applied_grad_norms = Vec::new();
    let mut loss_log = Vec::new();
    let mut cumulative = (0.0, 0.0);
    let mut order: Vec<usize> = (0..forget_exs.len()).collect();
    let mut step = 0usize;

    let trace_items = |m: &ModelState<S>, epoch: usize| -> Result<Vec<TokenWeightTrace>> {
        let items: Vec<(&str, &EncodedExample)> = splits
            .forget
            .iter()
            .map(|(id, e)| (id.as_str(), e))
            .collect();
        objectives::token_weight_trace(m, ref_opt, spec, &items, epoch)
    };

    'epochs: for epoch in 1..=cfg.epochs {
        weight_traces.extend(trace_items(&model, epoch)?);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step % cfg.geffect_stride == 0 {
                let rec = geffect::geffect_step(
                    &model,
                    ref_opt,
                    spec,
                    &forget_exs,
                    &splits.retain_eval,
                    &ctx,
                    step,
                    cumulative,
                )?;
                cumulative = (rec.cumulative_e_u, rec.cumulative_e_r);
                if spec.name == ObjectiveKind::Npo {
                    pg_samples.extend(pg_at(&model, ref_model, spec, splits, step)?);
                }
                records.push(rec);
            }

            let forget_batch: Vec<EncodedExample> =
                chunk.iter().map(|&i| forget_exs[i].clone()).collect();
            let retain_batch: Vec<EncodedExample> = if spec.regularizer == RegKind::None {
                Vec::new()
            } else {
                // one retain minibatch per step, same size as the forget batch
                (0..forget_batch.len())
                    .map(|_| {
                        splits.retain_train[rng.gen_range(0..splits.retain_train.len())].clone()
                    })
                    .collect()
            };

            // PO replacements are aligned with forget indices, so the batch
            // context must carry exactly the chunk's replacements
            let step_ctx_storage;
            let step_ctx: &RunContext<S> = if spec.name == ObjectiveKind::Po {
                step_ctx_storage = RunContext {
                    rmu_u: ctx.rmu_u.clone(),
                    replacements: chunk.iter().map(|&i| ctx.replacements[i].clone()).collect(),
                };
                &step_ctx_storage
            } else {
                &ctx
            };
            let step_result = objectives::total_loss_and_grad(
                &model,
                ref_opt,
                spec,
                &forget_batch,
                &retain_batch,
                step_ctx,
            );
            let (loss, grad) = match step_result {
                Ok(pair) => pair,
                Err(LabError::Numeric(_)) => {
                    return Ok(UnlearnOutput {
                        theta_u: model,
                        records,
                        pg_samples,
                        weight_traces,
                        applied_grad_norms,
                        loss_log,
                        diverged_at: Some(step),
                    });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                break 'epochs;
            }
            let grad = clip_gradient(grad, s(cfg.max_grad_norm));
            applied_grad_norms.push(grad.norm().to_f64().unwrap_or(f64::NAN));
            let lr = lr_at(step, cfg.lr, spe);
            update_step(
                &mut model.params,
                &grad,
                &mut opt,
                s(lr),
                s(cfg.weight_decay),
            );
            loss_log.push(TrainLogRow {
                epoch,
                step,
                lr,
                loss: loss.to_f64().unwrap_or(f64::NAN),
            });
            step += 1;
        }
    }

    let diverged_at = if step < total_steps { Some(step) } else { None };
    Ok(UnlearnOutput {
        theta_u: model,
        records,
        pg_samples,
        weight_traces,
        applied_grad_norms,
        loss_log,
        diverged_at,
    })
}

fn pg_at<S: Scalar>(
    model: &ModelState<S>,
    ref_model: &ModelState<S>,
    spec: &ObjectiveSpec,
    splits: &EncodedSplits,
    step: usize,
) -> Result<Vec<PGEffectSample>> {
    geffect::pg_effect(
        model,
        ref_model,
        spec,
        &splits.forget,
        &splits.retain_eval,
        step,
    )
}

// ---------------------------------------------------------------------------
// UWC mixing
// ---------------------------------------------------------------------------

/// Grid-search the largest interpolation λ whose retain metric stays within
/// `max_drop` of θ_o's. λ=0 (pure θ_o) always satisfies the constraint.
pub fn uwc_mix<S: Scalar, F>(
    theta_o: &ModelState<S>,
    theta_u: &ModelState<S>,
    mut retain_metric: F,
    max_drop: f64,
) -> Result<(ModelState<S>, f64)>
where
    F: FnMut(&ModelState<S>) -> Result<f64>,
{
    let base = retain_metric(theta_o)?;
    let floor = (1.0 - max_drop) * base;
    let mut best_lambda = 0.0;
    let mut best_model = theta_o.clone();
    for i in 1..=20 {
        let lam = i as f64 / 20.0;
        let mixed = ModelState::mix(theta_o, theta_u, s(lam))?;
        if retain_metric(&mixed)? >= floor {
            best_lambda = lam;
            best_model = mixed;
        }
    }
    Ok((best_model, best_lambda))
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

/// Hyper-parameter presets mirrored from the source experiments. The `_10`
/// variants are the 10%-forget settings; the base names cover 1%/5%.
pub fn preset(name: &str) -> Option<ObjectiveSpec> {
    let mut spec = match name {
        "ga" => ObjectiveSpec::plain(ObjectiveKind::Ga),
        "po" => ObjectiveSpec::plain(ObjectiveKind::Po),
        "wga" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Wga);
            s.alpha = 5.0;
            s
        }
        "wga_10" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Wga);
            s.alpha = 7.0;
            s
        }
        "npo" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Npo);
            s.beta = 0.5;
            s
        }
        "tnpo" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Tnpo);
            s.beta = 4.0;
            s
        }
        "tnpo_10" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Tnpo);
            s.beta = 5.0;
            s
        }
        "wtnpo" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Wtnpo);
            s.alpha = 1.5;
            s.beta = 5.0;
            s
        }
        "wtnpo_10" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Wtnpo);
            s.alpha = 1.5;
            s.beta = 7.0;
            s
        }
        "rmu" => {
            let mut s = ObjectiveSpec::plain(ObjectiveKind::Rmu);
            s.c = 10.0;
            s.tap_layer = 0; // caller fills the middle layer for its model
            s
        }
        _ => return None,
    };
    if spec.name == ObjectiveKind::Rmu && spec.tap_layer == 0 {
        spec.tap_layer = 1;
    }
    Some(spec)
}

/// α grid used for WGA UWC-tuning sweeps.
pub const WGA_ALPHA_GRID: [f64; 10] =
    [0.05, 0.10, 0.50, 0.70, 1.00, 2.00, 4.00, 5.00, 7.00, 10.00];

pub fn preset_names() -> &'static [&'static str] {
    &[
        "ga", "po", "wga", "wga_10", "npo", "tnpo", "tnpo_10", "wtnpo", "wtnpo_10", "rmu",
    ]
}
