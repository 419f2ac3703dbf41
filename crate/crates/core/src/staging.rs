//! Stage-2 sleep staging on a frozen encoder.
//!
//! The encoder from pre-training is never updated here: its per-level
//! pooled features are computed once for every epoch and cached. Each
//! level then gets its own small temporal model over a window of L+1
//! consecutive epochs: input affine to d_model, sinusoidal positional
//! encoding, one residual self-attention block with a residual pointwise
//! feed-forward (a deliberate reduction of a deeper transformer),
//! temporal attention pooling into a single vector, and a linear head to
//! five class logits. Training applies cross-entropy to the softmax of
//! the level-summed logits; prediction takes the argmax of the sum with
//! ties broken toward the lowest class index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{sequence_views, Dataset, FoldPlan, SequenceView, N_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{cohens_kappa, ConfusionMatrix};
use crate::model::{
    fnv1a, forward_multiscale, kaiming_uniform, param_by_name, EncoderSpec, NodeId, OptimConfig,
    ParamStore, Tape,
};
use crate::numerics::{logsumexp, Matrix, Rng};

/// Frozen per-epoch, per-level encoder features for a whole dataset, in
/// dataset epoch order.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    features: BTreeMap<usize, Matrix>,
    /// Fingerprint of the encoder parameters the features came from;
    /// staging never changes it.
    pub encoder_fingerprint: u64,
}

impl FeatureCache {
    pub fn levels(&self) -> Vec<usize> {
        self.features.keys().copied().collect()
    }

    /// (n_epochs, level width) feature matrix.
    pub fn level(&self, level: usize) -> Result<&Matrix> {
        self.features.get(&level).ok_or(Error::MissingLevel { level })
    }

    pub fn epochs(&self) -> usize {
        self.features.values().next().map_or(0, |m| m.rows())
    }
}

/// Run the frozen encoder over every epoch (in batches) and collect the
/// pre-projection pooled features r_j per level. Deterministic, so any
/// epoch's features are identical no matter which sequences it appears in.
pub fn encode_dataset(
    store: &ParamStore,
    spec: &EncoderSpec,
    ds: &Dataset,
    batch: usize,
) -> Result<FeatureCache> {
    if batch == 0 {
        return Err(Error::InvalidArg {
            context: "encode_dataset",
            detail: "batch must be positive".into(),
        });
    }
    let widths: Vec<usize> = spec.taps.iter().map(|&t| spec.conv_channels[t - 1]).collect();
    let mut features: BTreeMap<usize, Matrix> = spec
        .taps
        .iter()
        .zip(&widths)
        .map(|(&t, &w)| (t, Matrix::zeros(ds.len(), w)))
        .collect();

    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let signals: Vec<Matrix> = ds.epochs[start..end]
            .iter()
            .map(|e| e.signal.clone())
            .collect();
        let fwd = forward_multiscale(store, spec, &signals)?;
        for ln in &fwd.levels {
            let r = fwd.tape.value(ln.r);
            let out = features.get_mut(&ln.level).unwrap();
            for (row, i) in (start..end).enumerate() {
                out.row_mut(i).copy_from_slice(r.row(row));
            }
        }
        start = end;
    }

    Ok(FeatureCache {
        features,
        encoder_fingerprint: store.fingerprint(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagingConfig {
    /// Context length: each window holds l+1 consecutive epochs.
    pub l: usize,
    pub d_model: usize,
    /// Feed-forward hidden width.
    pub ff: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Inverse-frequency cross-entropy class weights (off: all ones).
    pub class_weights: bool,
    /// Validation-kappa evaluation period in steps.
    pub val_every: usize,
}

impl Default for StagingConfig {
    fn default() -> Self {
        StagingConfig {
            l: 10,
            d_model: 32,
            ff: 64,
            steps: 300,
            batch_size: 32,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            seed: 0,
            class_weights: false,
            val_every: 25,
        }
    }
}

impl StagingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.ff == 0
            || self.steps == 0
            || self.batch_size == 0
            || self.val_every == 0
        {
            return Err(Error::InvalidArg {
                context: "StagingConfig",
                detail: "d_model, ff, steps, batch_size, val_every must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding: row = position, interleaved
/// sin/cos over a 10^4-spaced frequency ladder.
pub(crate) fn sinusoidal_pe(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(pos, i, v);
        }
    }
    pe
}

/// Initialize all per-level staging parameters. Tensor streams are forked
/// by name from the seed, exactly like the encoder init.
pub fn init_staging(cache: &FeatureCache, cfg: &StagingConfig) -> Result<ParamStore> {
    cfg.validate()?;
    if cache.levels().is_empty() {
        return Err(Error::InvalidArg {
            context: "init_staging",
            detail: "feature cache has no levels".into(),
        });
    }
    let root = Rng::new(cfg.seed);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let add = |store: &mut ParamStore, name: String, rows, cols, fan_in| -> Result<()> {
        let mut rng = root.fork(fnv1a(name.as_bytes()));
        let t = kaiming_uniform(&mut rng, rows, cols, fan_in);
        store.add(&name, t)?;
        Ok(())
    };
    for level in cache.levels() {
        let c = cache.level(level)?.cols();
        let p = format!("lv{level}");
        add(&mut store, format!("{p}.in.w"), d, c, c)?;
        store.add(&format!("{p}.in.b"), Matrix::zeros(1, d))?;
        for name in ["wq", "wk", "wv", "wo"] {
            add(&mut store, format!("{p}.attn.{name}"), d, d, d)?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.add(&format!("{p}.attn.{name}"), Matrix::zeros(1, d))?;
        }
        add(&mut store, format!("{p}.ff.w1"), cfg.ff, d, d)?;
        store.add(&format!("{p}.ff.b1"), Matrix::zeros(1, cfg.ff))?;
        add(&mut store, format!("{p}.ff.w2"), d, cfg.ff, cfg.ff)?;
        store.add(&format!("{p}.ff.b2"), Matrix::zeros(1, d))?;
        add(&mut store, format!("{p}.pool.w"), 1, d, d)?;
        store.add(&format!("{p}.pool.b"), Matrix::zeros(1, 1))?;
        add(&mut store, format!("{p}.head.w"), N_CLASSES, d, d)?;
        store.add(&format!("{p}.head.b"), Matrix::zeros(1, N_CLASSES))?;
    }
    Ok(store)
}

/// Tape nodes of one level tower; everything but `logits` exists for the
/// structural tests.
#[cfg_attr(not(test), allow(dead_code))]
struct TowerNodes {
    /// (L+1, L+1) attention weights.
    attn: NodeId,
    /// (L+1, d) hidden states after the feed-forward residual.
    hidden: NodeId,
    /// (1, L+1) pooling weights.
    pool_weights: NodeId,
    /// (1, d) pooled vector.
    pooled: NodeId,
    /// (1, 5) level logits.
    logits: NodeId,
}

fn level_tower(
    tape: &mut Tape,
    store: &ParamStore,
    level: usize,
    seq: Matrix,
    pe: &Matrix,
) -> Result<TowerNodes> {
    let p = format!("lv{level}");
    let get = |tape: &mut Tape, name: &str| param_by_name(tape, store, &format!("{p}.{name}"));

    let x = tape.constant(seq);
    let w_in = get(tape, "in.w")?;
    let b_in = get(tape, "in.b")?;
    let h0 = tape.affine(x, w_in, b_in)?;
    let pe_node = tape.constant(pe.clone());
    let h = tape.add(h0, pe_node)?;

    let wq = get(tape, "attn.wq")?;
    let bq = get(tape, "attn.bq")?;
    let wk = get(tape, "attn.wk")?;
    let bk = get(tape, "attn.bk")?;
    let wv = get(tape, "attn.wv")?;
    let bv = get(tape, "attn.bv")?;
    let wo = get(tape, "attn.wo")?;
    let bo = get(tape, "attn.bo")?;
    let q = tape.affine(h, wq, bq)?;
    let k = tape.affine(h, wk, bk)?;
    let v = tape.affine(h, wv, bv)?;
    let scores = tape.matmul_transb(q, k)?;
    let d = tape.value(q).cols();
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    let ctx = tape.matmul(attn, v)?;
    let out = tape.affine(ctx, wo, bo)?;
    let h2 = tape.add(h, out)?;

    let w1 = get(tape, "ff.w1")?;
    let b1 = get(tape, "ff.b1")?;
    let w2 = get(tape, "ff.w2")?;
    let b2 = get(tape, "ff.b2")?;
    let f1 = tape.affine(h2, w1, b1)?;
    let f1r = tape.relu(f1);
    let f2 = tape.affine(f1r, w2, b2)?;
    let hidden = tape.add(h2, f2)?;

    let pw = get(tape, "pool.w")?;
    let pb = get(tape, "pool.b")?;
    let sc = tape.affine(hidden, pw, pb)?;
    let sc_t = tape.transpose(sc);
    let pool_weights = tape.row_softmax(sc_t);
    let pooled = tape.matmul(pool_weights, hidden)?;

    let hw = get(tape, "head.w")?;
    let hb = get(tape, "head.b")?;
    let logits = tape.affine(pooled, hw, hb)?;

    Ok(TowerNodes {
        attn,
        hidden,
        pool_weights,
        pooled,
        logits,
    })
}

fn view_sequence(cache: &FeatureCache, level: usize, view: &SequenceView) -> Result<Matrix> {
    let feats = cache.level(level)?;
    let mut seq = Matrix::zeros(view.indices.len(), feats.cols());
    for (r, &i) in view.indices.iter().enumerate() {
        seq.row_mut(r).copy_from_slice(feats.row(i));
    }
    Ok(seq)
}

/// Per-view level towers plus the level-summed logits node, batched by
/// row-concatenation into one (n_views, 5) node.
fn batch_graph(
    tape: &mut Tape,
    store: &ParamStore,
    cache: &FeatureCache,
    views: &[SequenceView],
    pe: &Matrix,
) -> Result<NodeId> {
    let levels = cache.levels();
    let mut per_view = Vec::with_capacity(views.len());
    for view in views {
        let mut sum: Option<NodeId> = None;
        for &level in &levels {
            let seq = view_sequence(cache, level, view)?;
            let tower = level_tower(tape, store, level, seq, pe)?;
            sum = Some(match sum {
                None => tower.logits,
                Some(acc) => tape.add(acc, tower.logits)?,
            });
        }
        per_view.push(sum.expect("cache has at least one level"));
    }
    tape.concat_rows(&per_view)
}

/// Mean weighted cross-entropy of softmax(logits) and its gradient with
/// respect to the logits. Weights are per-class; the mean is weighted.
fn weighted_ce(logits: &Matrix, targets: &[u8], weights: &[f64; N_CLASSES]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::LengthMismatch {
            context: "weighted_ce",
            left: logits.rows(),
            right: targets.len(),
        });
    }
    let mut w_sum = 0.0;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let y = targets[i] as usize;
        if y >= N_CLASSES {
            return Err(Error::LabelOutOfRange {
                kind: "class",
                value: y as u32,
                max: N_CLASSES as u32 - 1,
            });
        }
        let w = weights[y];
        let row = logits.row(i);
        let lse = logsumexp(row);
        value += w * (lse - row[y]);
        w_sum += w;
        for c in 0..logits.cols() {
            let p = (row[c] - lse).exp();
            let delta = if c == y { 1.0 } else { 0.0 };
            grad.set(i, c, w * (p - delta));
        }
    }
    if w_sum <= 0.0 {
        return Err(Error::InvalidArg {
            context: "weighted_ce",
            detail: "all class weights for this batch are zero".into(),
        });
    }
    value /= w_sum;
    for g in grad.data_mut() {
        *g /= w_sum;
    }
    Ok((value, grad))
}

/// Inverse-frequency class weights: n / (5 * count_c), zero for classes
/// absent from the targets.
pub fn inverse_frequency_weights(targets: &[u8]) -> [f64; N_CLASSES] {
    let mut counts = [0usize; N_CLASSES];
    for &y in targets {
        if (y as usize) < N_CLASSES {
            counts[y as usize] += 1;
        }
    }
    let n = targets.len() as f64;
    let mut w = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        if counts[c] > 0 {
            w[c] = n / (N_CLASSES as f64 * counts[c] as f64);
        }
    }
    w
}

/// Sum per-level logits and take the argmax, ties broken toward the
/// lowest class index.
pub fn aggregate_predict(per_level: &[Vec<f64>]) -> Result<(Vec<f64>, u8)> {
    let first = per_level.first().ok_or(Error::InvalidArg {
        context: "aggregate_predict",
        detail: "no level logits".into(),
    })?;
    let mut sum = vec![0.0; first.len()];
    for logits in per_level {
        if logits.len() != sum.len() {
            return Err(Error::LengthMismatch {
                context: "aggregate_predict",
                left: sum.len(),
                right: logits.len(),
            });
        }
        for (s, &v) in sum.iter_mut().zip(logits) {
            *s += v;
        }
    }
    let mut best = 0usize;
    for (c, &v) in sum.iter().enumerate() {
        if v > sum[best] {
            best = c;
        }
    }
    Ok((sum, best as u8))
}

/// Per-level and aggregate logits with the prediction for one window.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub per_level: Vec<(usize, Vec<f64>)>,
    pub aggregate: Vec<f64>,
    pub prediction: u8,
}

/// Forward one window through every level tower (no training side
/// effects) and aggregate.
pub fn stage_outputs(
    store: &ParamStore,
    cache: &FeatureCache,
    view: &SequenceView,
    cfg: &StagingConfig,
) -> Result<StageOutputs> {
    let pe = sinusoidal_pe(view.indices.len(), cfg.d_model);
    let mut tape = Tape::new();
    let mut per_level = Vec::new();
    for level in cache.levels() {
        let seq = view_sequence(cache, level, view)?;
        let tower = level_tower(&mut tape, store, level, seq, &pe)?;
        per_level.push((level, tape.value(tower.logits).row(0).to_vec()));
    }
    let logits: Vec<Vec<f64>> = per_level.iter().map(|(_, l)| l.clone()).collect();
    let (aggregate, prediction) = aggregate_predict(&logits)?;
    Ok(StageOutputs {
        per_level,
        aggregate,
        prediction,
    })
}

/// Predict every view; rows are (target epoch index in the dataset, true
/// label, predicted label), in view order.
pub fn predict_all(
    store: &ParamStore,
    cache: &FeatureCache,
    views: &[SequenceView],
    cfg: &StagingConfig,
) -> Result<Vec<(usize, u8, u8)>> {
    let mut out = Vec::with_capacity(views.len());
    // Chunked so tape memory stays bounded on big view sets.
    for chunk in views.chunks(64) {
        let pe = sinusoidal_pe(cfg.l + 1, cfg.d_model);
        let mut tape = Tape::new();
        for view in chunk {
            let mut logits = Vec::new();
            for level in cache.levels() {
                let seq = view_sequence(cache, level, view)?;
                let tower = level_tower(&mut tape, store, level, seq, &pe)?;
                logits.push(tape.value(tower.logits).row(0).to_vec());
            }
            let (_, pred) = aggregate_predict(&logits)?;
            out.push((*view.indices.last().unwrap(), view.target, pred));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStepLog {
    pub step: usize,
    pub loss: f64,
    /// Present on steps where validation ran.
    pub val_kappa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StagingOutcome {
    /// Parameters from the best validation-kappa step (final parameters
    /// when there are no validation views).
    pub params: ParamStore,
    pub best_val_kappa: f64,
    pub best_step: usize,
    pub logs: Vec<StageStepLog>,
    pub class_weights: [f64; N_CLASSES],
}

fn kappa_of(store: &ParamStore, cache: &FeatureCache, views: &[SequenceView], cfg: &StagingConfig) -> Result<f64> {
    let preds = predict_all(store, cache, views, cfg)?;
    let truth: Vec<u8> = preds.iter().map(|&(_, t, _)| t).collect();
    let guess: Vec<u8> = preds.iter().map(|&(_, _, p)| p).collect();
    let cm = ConfusionMatrix::from_pairs(&truth, &guess, N_CLASSES)?;
    cohens_kappa(&cm)
}

/// Train the staging heads on the plan's train domains, tracking
/// validation kappa on the val domains and keeping the best parameters.
/// The encoder is represented only by its frozen feature cache, so it
/// cannot change here by construction.
pub fn train_staging(
    ds: &Dataset,
    cache: &FeatureCache,
    plan: &FoldPlan,
    cfg: &StagingConfig,
) -> Result<StagingOutcome> {
    cfg.validate()?;
    if cache.epochs() != ds.len() {
        return Err(Error::LengthMismatch {
            context: "train_staging",
            left: cache.epochs(),
            right: ds.len(),
        });
    }
    let views = sequence_views(ds, cfg.l);
    let train_views: Vec<SequenceView> = views
        .iter()
        .filter(|v| plan.train.contains(&v.domain))
        .cloned()
        .collect();
    let val_views: Vec<SequenceView> = views
        .iter()
        .filter(|v| plan.val.contains(&v.domain))
        .cloned()
        .collect();
    if train_views.is_empty() {
        return Err(Error::InsufficientSamples {
            context: "train_staging",
            need: 1,
            got: 0,
        });
    }

    let targets: Vec<u8> = train_views.iter().map(|v| v.target).collect();
    let class_weights = if cfg.class_weights {
        inverse_frequency_weights(&targets)
    } else {
        [1.0; N_CLASSES]
    };

    let mut store = init_staging(cache, cfg)?;
    let pe = sinusoidal_pe(cfg.l + 1, cfg.d_model);
    let mut rng = Rng::new(cfg.seed).fork(fnv1a(b"staging-loop"));

    let mut best: Option<(ParamStore, f64, usize)> = None;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<SequenceView> = (0..cfg.batch_size)
            .map(|_| train_views[rng.usize_below(train_views.len())].clone())
            .collect();
        let batch_targets: Vec<u8> = batch.iter().map(|v| v.target).collect();

        let mut tape = Tape::new();
        let logits_node = batch_graph(&mut tape, &store, cache, &batch, &pe)?;
        let (loss, grad) = weighted_ce(tape.value(logits_node), &batch_targets, &class_weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "train_staging",
            });
        }
        let grads = tape.backward_from(&[(logits_node, grad)], &store)?;
        store.adam_step(&grads, &cfg.optim)?;

        let mut val_kappa = None;
        let evaluate = !val_views.is_empty()
            && ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps);
        if evaluate {
            let kappa = kappa_of(&store, cache, &val_views, cfg)?;
            val_kappa = Some(kappa);
            let improved = best.as_ref().map_or(true, |(_, k, _)| kappa > *k);
            if improved {
                best = Some((store.clone(), kappa, step));
            }
        }
        logs.push(StageStepLog {
            step,
            loss,
            val_kappa,
        });
    }

    let (params, best_val_kappa, best_step) = match best {
        Some((p, k, s)) => (p, k, s),
        None => {
            let s = cfg.steps - 1;
            (store, f64::NAN, s)
        }
    };
    Ok(StagingOutcome {
        params,
        best_val_kappa,
        best_step,
        logs,
        class_weights,
    })
}
