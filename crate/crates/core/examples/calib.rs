//! Scratch calibration harness for the synthetic benchmark. Not part of
//! the library surface; run with
//!   cargo run -p measure-core --example calib -- <steps> <batch> [stage]

use std::collections::BTreeMap;

use measure_core::model::{augment, forward_multiscale};
use measure_core::{
    cohens_kappa, encode_dataset, info_report, kfold_split, pretrain, sequence_views,
    synth_generate, train_staging, AugmentConfig, BatchEmbeddings, ConfusionMatrix, Dataset,
    EncoderSpec, EntropyTerm, LossConfig, Matrix, ParamStore, PretrainConfig, Rng,
    StagingConfig, SynthConfig, N_CLASSES,
};
use measure_core::losses::multiscale_loss;
use measure_core::predict_all;
use measure_core::stein::conditional_entropy_surrogate;

fn embed_level(
    store: &ParamStore,
    spec: &EncoderSpec,
    signals: &[Matrix],
    level: usize,
) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for chunk in signals.chunks(128) {
        let fwd = forward_multiscale(store, spec, chunk).unwrap();
        let node = fwd.levels.iter().find(|l| l.level == level).unwrap();
        let z = fwd.tape.value(node.z);
        for r in 0..z.rows() {
            rows.push(z.row(r).to_vec());
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

/// Clean anchors, augmented positives, strided subsample.
fn diagnose(
    store: &ParamStore,
    spec: &EncoderSpec,
    ds: &Dataset,
    aug: &AugmentConfig,
    level: usize,
    cap: usize,
) -> (f64, f64) {
    let n = ds.len();
    let stride = n.div_ceil(cap.min(n)).max(1);
    let mut rng = Rng::new(0).fork(0x696e_666f);
    let mut clean = Vec::new();
    let mut pos = Vec::new();
    let mut dom = Vec::new();
    for i in (0..n).step_by(stride) {
        let e = &ds.epochs[i];
        clean.push(e.signal.clone());
        pos.push(augment(&e.signal, aug, &mut rng).unwrap());
        dom.push(e.d);
    }
    let za = embed_level(store, spec, &clean, level);
    let zb = embed_level(store, spec, &pos, level);
    let rep = info_report(&za, &zb, &dom, 10.0, 5).unwrap();
    (rep.i_zd, rep.superfluous_proxy)
}

/// Ratio of the entropy-term gradient norm to the contrastive gradient
/// norm at the deepest level, on one two-domain batch of the dataset.
fn grad_ratio(store: &ParamStore, spec: &EncoderSpec, ds: &Dataset, cfg: &PretrainConfig) -> f64 {
    use measure_core::TwoDomainSampler;
    let sampler = TwoDomainSampler::new(ds, cfg.batch_size).unwrap();
    let mut rng = Rng::new(99).fork(1);
    let idx = sampler.sample(&mut rng);
    let mut signals = Vec::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    for &i in &idx {
        let e = &ds.epochs[i];
        signals.push(augment(&e.signal, &cfg.augment, &mut rng).unwrap());
        y.push(e.y);
        d.push(e.d);
    }
    let fwd = forward_multiscale(store, spec, &signals).unwrap();
    let mut z = BTreeMap::new();
    for ln in &fwd.levels {
        z.insert(ln.level, fwd.tape.value(ln.z).clone());
    }
    let deepest = *cfg.loss.levels.iter().max().unwrap();
    let batch = BatchEmbeddings::new(z, y, d).unwrap();

    let alpha_cfg = LossConfig {
        levels: vec![deepest],
        ..cfg.loss.clone()
    };
    let scores = conditional_entropy_surrogate(
        batch.level(deepest).unwrap(),
        batch.domains(),
        &cfg.kernel,
        cfg.weighting,
    )
    .unwrap();
    let mut terms: BTreeMap<usize, EntropyTerm> = BTreeMap::new();
    terms.insert(
        deepest,
        EntropyTerm {
            scores: &scores.scores,
            weighting: cfg.weighting,
        },
    );
    let with = multiscale_loss(&batch, Some(&terms), &alpha_cfg).unwrap();
    let without = multiscale_loss(
        &batch,
        None,
        &LossConfig {
            alpha: 0.0,
            ..alpha_cfg.clone()
        },
    )
    .unwrap();
    let gw = &with.per_level[0].1.grad_z;
    let go = &without.per_level[0].1.grad_z;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in gw.data().iter().zip(go.data()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if std::env::var("SCALES").is_ok() {
        let z = batch.level(deepest).unwrap();
        let mut d2 = Vec::new();
        for i in 0..z.rows() {
            for j in (i + 1)..z.rows() {
                let s: f64 = z
                    .row(i)
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.push(s.sqrt());
            }
        }
        d2.sort_by(f64::total_cmp);
        let med = d2[d2.len() / 2];
        let snorm = (scores.scores.data().iter().map(|v| v * v).sum::<f64>()).sqrt();
        println!(
            "  scales: median dist {med:.4} ||scores||_F {snorm:.3} ||g_c||_F {:.3}",
            den.sqrt()
        );
    }
    (num / den).sqrt()
}

fn stage_kappa(
    ds: &Dataset,
    spec: &EncoderSpec,
    store: &ParamStore,
    scfg: &StagingConfig,
    folds: usize,
    fold: usize,
) -> f64 {
    let restarts = env_f("RESTARTS", 1.0) as u64;
    let plan = kfold_split(&ds.header.domains, folds, fold, 0).unwrap();
    let cache = encode_dataset(store, spec, ds, 128).unwrap();
    let mut best: Option<measure_core::StagingOutcome> = None;
    for r in 0..restarts {
        let mut sc = scfg.clone();
        sc.seed = scfg.seed.wrapping_add(r.wrapping_mul(0x9e37_79b9));
        let outcome = train_staging(ds, &cache, &plan, &sc).unwrap();
        let better = best
            .as_ref()
            .map_or(true, |b| outcome.best_val_kappa > b.best_val_kappa);
        if better {
            best = Some(outcome);
        }
    }
    let outcome = best.unwrap();
    let views = sequence_views(ds, scfg.l);
    let test: Vec<_> = views
        .iter()
        .filter(|v| plan.test.contains(&v.domain))
        .cloned()
        .collect();
    let preds = predict_all(&outcome.params, &cache, &test, scfg).unwrap();
    let truth: Vec<u8> = preds.iter().map(|&(_, t, _)| t).collect();
    let guess: Vec<u8> = preds.iter().map(|&(_, _, p)| p).collect();
    let cm = ConfusionMatrix::from_pairs(&truth, &guess, N_CLASSES).unwrap();
    let k = cohens_kappa(&cm).unwrap();
    if std::env::var("VALK").is_ok() {
        println!(
            "    val {:.4} (step {}) -> test {k:.4}",
            outcome.best_val_kappa, outcome.best_step
        );
    }
    k
}

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name)
        .ok()
        .map(|v| v.parse().unwrap())
        .unwrap_or(default)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let do_stage = args.iter().any(|a| a == "stage");
    let seeds: Vec<u64> = if args.iter().any(|a| a == "seeds3") {
        vec![0, 1, 2]
    } else {
        vec![0]
    };

    // knobs under calibration
    let synth = SynthConfig {
        tilt: (-env_f("TILT", 0.3), env_f("TILT", 0.3)),
        snr_db: (env_f("SNRLO", 10.0), env_f("SNRHI", 30.0)),
        gain: (env_f("GAINLO", 0.5), env_f("GAINHI", 2.0)),
        ..SynthConfig::default()
    };
    let tau = env_f("TAU", 0.07);
    let denominator = if std::env::var("DENOM").as_deref() == Ok("all") {
        measure_core::DenominatorMode::AllOthers
    } else {
        measure_core::DenominatorMode::NegativesOnly
    };
    let kernel = measure_core::stein::KernelConfig {
        bandwidth: measure_core::stein::Bandwidth::MedianTimes(env_f("BWF", 2.0)),
        ridge: env_f("RIDGE", 1e-2),
    };
    let aug = AugmentConfig {
        ..AugmentConfig::default()
    };
    let ds = synth_generate(&synth).unwrap();
    let spec = EncoderSpec::default();
    let scfg = StagingConfig {
        steps: env_f("STSTEPS", 300.0) as usize,
        batch_size: env_f("STBATCH", 32.0) as usize,
        l: env_f("STL", 10.0) as usize,
        class_weights: std::env::var("STCW").is_ok(),
        optim: measure_core::OptimConfig {
            lr: env_f("STLR", 1e-3),
            ..measure_core::OptimConfig::default()
        },
        ..StagingConfig::default()
    };

    if std::env::var("RAW").is_ok() {
        let store = measure_core::model::init_encoder(&spec, 0).unwrap();
        for level in [3, 4, 5] {
            let (izd, proxy) = diagnose(&store, &spec, &ds, &aug, level, 2048);
            println!("untrained level {level}: I_zd {izd:+.4} proxy {proxy:+.5}");
        }
    }

    let sweep = std::env::var("ALPHAS").ok();
    let named: Vec<(String, f64, Vec<usize>)> = match sweep {
        Some(list) => list
            .split(',')
            .map(|a| {
                let alpha: f64 = a.parse().unwrap();
                (format!("alpha={a}"), alpha, vec![3, 4, 5])
            })
            .collect(),
        None => vec![
            ("a".into(), 0.0, vec![5]),
            ("b".into(), 0.0, vec![3, 4, 5]),
            ("c".into(), 1e-3, vec![5]),
            ("d".into(), 1e-3, vec![3, 4, 5]),
        ],
    };
    for (name, alpha, levels) in named.iter() {
        for &seed in &seeds {
            let cfg = PretrainConfig {
                steps,
                batch_size: batch,
                loss: LossConfig {
                    alpha: *alpha,
                    levels: levels.clone(),
                    tau,
                    denominator,
                    ..LossConfig::default()
                },
                kernel,
                augment: aug,
                seed,
                ..PretrainConfig::default()
            };
            let t0 = std::time::Instant::now();
            let (store, logs) = pretrain(&ds, &spec, &cfg).unwrap();
            let t_pre = t0.elapsed().as_secs_f64();
            let (izd, proxy) = diagnose(&store, &spec, &ds, &aug, 5, 2048);
            let ratio = grad_ratio(&store, &spec, &ds, &cfg);
            let last = logs.last().unwrap();
            let kappa = if do_stage {
                let n_stage = env_f("STAGESEEDS", 1.0) as u64;
                let folds: Vec<usize> = if std::env::var("TWOFOLD").is_ok() {
                    vec![0, 2]
                } else {
                    vec![0]
                };
                let mut ks = Vec::new();
                for ss in 0..n_stage {
                    let mut sc = scfg.clone();
                    sc.seed = seed * 100 + ss;
                    let mut k = 0.0;
                    for &f in &folds {
                        k += stage_kappa(&ds, &spec, &store, &sc, 4, f);
                    }
                    ks.push(k / folds.len() as f64);
                }
                if ks.len() > 1 {
                    let shown: Vec<String> = ks.iter().map(|k| format!("{k:.4}")).collect();
                    println!("  stage seeds: {}", shown.join(" "));
                }
                ks.iter().sum::<f64>() / ks.len() as f64
            } else {
                f64::NAN
            };
            println!(
                "{name} seed {seed}: I_zd {izd:+.4} proxy {proxy:+.5} grad-ratio {ratio:.2e} \
                 loss {:.1} kappa {kappa:.4} ({t_pre:.0}s)",
                last.loss
            );
        }
    }
}
