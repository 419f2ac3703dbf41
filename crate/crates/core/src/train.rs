//! Pre-training loop: two-domain batches, one augmented view per epoch,
//! multi-scale embeddings, the contrastive objective with its per-level
//! kernel entropy surrogate, and Adam updates.
//!
//! Score estimation is detached: each step estimates per-domain scores
//! from the current embeddings, then differentiates the objective holding
//! those scores fixed. `objective_frozen_scores` exposes exactly that
//! function of the parameters, which is what the finite-difference
//! checker perturbs. Pre-training runs a fixed number of steps with no
//! early stopping; validation folds only steer the staging phase.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TwoDomainSampler};
use crate::error::{Error, Result};
use crate::losses::{multiscale_loss, BatchEmbeddings, EntropyTerm, LossConfig};
use crate::model::{
    augment, fnv1a, forward_multiscale, init_encoder, AugmentConfig, EncoderSpec,
    MultiscaleForward, OptimConfig, ParamStore,
};
use crate::numerics::{Matrix, Rng};
use crate::stein::{conditional_entropy_surrogate, DomainWeighting, KernelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub kernel: KernelConfig,
    pub weighting: DomainWeighting,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 256,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            kernel: KernelConfig::default(),
            weighting: DomainWeighting::Uniform,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, spec: &EncoderSpec) -> Result<()> {
        spec.validate()?;
        self.loss.validate()?;
        self.kernel.validate()?;
        self.augment.validate()?;
        for &level in &self.loss.levels {
            if !spec.taps.contains(&level) {
                return Err(Error::MissingLevel { level });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    /// Total objective (contrastive - alpha * surrogate, summed over levels).
    pub loss: f64,
    pub contrastive: f64,
    pub surrogate: f64,
    pub skipped_anchors: usize,
    pub used_anchors: usize,
}

struct StepEval {
    value: f64,
    contrastive: f64,
    surrogate: f64,
    skipped_anchors: usize,
    used_anchors: usize,
    grads: Vec<Matrix>,
}

/// Detached per-level embeddings for the levels the loss uses.
fn detach_levels(fwd: &MultiscaleForward, levels: &[usize]) -> BTreeMap<usize, Matrix> {
    let mut z = BTreeMap::new();
    for ln in &fwd.levels {
        if levels.contains(&ln.level) {
            z.insert(ln.level, fwd.tape.value(ln.z).clone());
        }
    }
    z
}

fn eval_with_scores(
    fwd: &MultiscaleForward,
    z: BTreeMap<usize, Matrix>,
    y: &[u8],
    d: &[u16],
    scores: &BTreeMap<usize, Matrix>,
    loss_cfg: &LossConfig,
    weighting: DomainWeighting,
    store: &ParamStore,
) -> Result<StepEval> {
    let batch = BatchEmbeddings::from_parts_unchecked(z, y.to_vec(), d.to_vec())?;
    let terms: BTreeMap<usize, EntropyTerm<'_>> = scores
        .iter()
        .map(|(&level, s)| (level, EntropyTerm { scores: s, weighting }))
        .collect();
    let eval = multiscale_loss(&batch, Some(&terms), loss_cfg)?;

    let mut seeds = Vec::with_capacity(eval.per_level.len());
    let mut contrastive = 0.0;
    let mut surrogate = 0.0;
    let mut skipped = 0;
    let mut used = 0;
    for (level, ev) in &eval.per_level {
        let node = fwd
            .levels
            .iter()
            .find(|ln| ln.level == *level)
            .ok_or(Error::MissingLevel { level: *level })?;
        seeds.push((node.z, ev.grad_z.clone()));
        contrastive += ev.contrastive;
        surrogate += ev.surrogate;
        skipped += ev.skipped_anchors;
        used += ev.used_anchors;
    }
    let grads = fwd.tape.backward_from(&seeds, store)?;
    Ok(StepEval {
        value: eval.value,
        contrastive,
        surrogate,
        skipped_anchors: skipped,
        used_anchors: used,
        grads,
    })
}

fn run_step(
    store: &ParamStore,
    spec: &EncoderSpec,
    signals: &[Matrix],
    y: &[u8],
    d: &[u16],
    cfg: &PretrainConfig,
) -> Result<StepEval> {
    let fwd = forward_multiscale(store, spec, signals)?;
    let z = detach_levels(&fwd, &cfg.loss.levels);
    let mut scores = BTreeMap::new();
    if cfg.loss.alpha > 0.0 {
        for (&level, zl) in &z {
            let est = conditional_entropy_surrogate(zl, d, &cfg.kernel, cfg.weighting)?;
            scores.insert(level, est.scores);
        }
    }
    eval_with_scores(&fwd, z, y, d, &scores, &cfg.loss, cfg.weighting, store)
}

/// Pre-train an encoder on the dataset. Returns the trained parameters
/// and one log row per step.
pub fn pretrain(
    ds: &Dataset,
    spec: &EncoderSpec,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, Vec<StepLog>)> {
    cfg.validate(spec)?;
    let mut store = init_encoder(spec, cfg.seed)?;
    let sampler = TwoDomainSampler::new(ds, cfg.batch_size)?;
    let mut rng = Rng::new(cfg.seed).fork(fnv1a(b"pretrain-loop"));

    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.sample(&mut rng);
        let mut signals = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        let mut d = Vec::with_capacity(idx.len());
        for &i in &idx {
            let e = &ds.epochs[i];
            signals.push(augment(&e.signal, &cfg.augment, &mut rng)?);
            y.push(e.y);
            d.push(e.d);
        }
        let eval = run_step(&store, spec, &signals, &y, &d, cfg)?;
        store.adam_step(&eval.grads, &cfg.optim)?;
        logs.push(StepLog {
            step,
            loss: eval.value,
            contrastive: eval.contrastive,
            surrogate: eval.surrogate,
            skipped_anchors: eval.skipped_anchors,
            used_anchors: eval.used_anchors,
        });
    }
    Ok((store, logs))
}

/// The pre-training objective as a pure function of the parameters, with
/// the score matrices supplied by the caller and held fixed. Returns the
/// value and per-parameter gradients.
pub fn objective_frozen_scores(
    store: &ParamStore,
    spec: &EncoderSpec,
    signals: &[Matrix],
    y: &[u8],
    d: &[u16],
    loss_cfg: &LossConfig,
    scores: &BTreeMap<usize, Matrix>,
    weighting: DomainWeighting,
) -> Result<(f64, Vec<Matrix>)> {
    let fwd = forward_multiscale(store, spec, signals)?;
    let z = detach_levels(&fwd, &loss_cfg.levels);
    let eval = eval_with_scores(&fwd, z, y, d, scores, loss_cfg, weighting, store)?;
    Ok((eval.value, eval.grads))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params_checked: usize,
    pub scalars_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub elapsed_secs: f64,
}

/// Central finite differences over every parameter scalar against the
/// analytic gradients of the full objective, with scores frozen at the
/// initial embeddings. The relative-error denominator is floored at 1e-4
/// of the largest gradient magnitude so noise-level entries are compared
/// at gradient scale rather than against themselves.
pub fn gradient_check(
    spec: &EncoderSpec,
    loss_cfg: &LossConfig,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    loss_cfg.validate()?;
    if n_samples < 4 || n_samples % 2 != 0 {
        return Err(Error::InvalidArg {
            context: "gradient_check",
            detail: format!("need an even sample count >= 4, got {n_samples}"),
        });
    }
    let mut store = init_encoder(spec, seed)?;
    let mut rng = Rng::new(seed).fork(fnv1a(b"gradient-check"));
    let mut signals = Vec::with_capacity(n_samples);
    let mut y = Vec::with_capacity(n_samples);
    let mut d = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut s = Matrix::zeros(spec.in_channels, spec.input_len);
        for v in s.data_mut() {
            *v = rng.normal();
        }
        signals.push(s);
        // Two classes interleaved within two equal domain halves, so every
        // anchor has positives and negatives.
        y.push((i % 2) as u8);
        d.push(if i < n_samples / 2 { 1 } else { 2 });
    }

    // Freeze scores at the starting point when the entropy term is active.
    let fwd = forward_multiscale(&store, spec, &signals)?;
    let z0 = detach_levels(&fwd, &loss_cfg.levels);
    let mut scores = BTreeMap::new();
    if loss_cfg.alpha > 0.0 {
        for (&level, zl) in &z0 {
            let est =
                conditional_entropy_surrogate(zl, &d, &KernelConfig::default(), DomainWeighting::Uniform)?;
            scores.insert(level, est.scores);
        }
    }
    drop(fwd);

    let (_, analytic) = objective_frozen_scores(
        &store,
        spec,
        &signals,
        &y,
        &d,
        loss_cfg,
        &scores,
        DomainWeighting::Uniform,
    )?;

    let g_max = analytic
        .iter()
        .map(|g| g.max_abs())
        .fold(0.0f64, f64::max);
    let floor = 1e-4 * g_max.max(1e-8);
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut scalars = 0usize;
    for p in 0..store.len() {
        for k in 0..store.tensor(p).data().len() {
            let orig = store.tensor(p).data()[k];
            store.tensor_mut(p).data_mut()[k] = orig + h;
            let (up, _) = objective_frozen_scores(
                &store, spec, &signals, &y, &d, loss_cfg, &scores, DomainWeighting::Uniform,
            )?;
            store.tensor_mut(p).data_mut()[k] = orig - h;
            let (down, _) = objective_frozen_scores(
                &store, spec, &signals, &y, &d, loss_cfg, &scores, DomainWeighting::Uniform,
            )?;
            store.tensor_mut(p).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[p].data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", store.name(p), k);
            }
            scalars += 1;
        }
    }

    Ok(GradCheckReport {
        params_checked: store.len(),
        scalars_checked: scalars,
        max_rel_err: max_rel,
        worst_param: worst,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
