//! Stage functions and the end-to-end driver:
//! train, ADMM, hard prune + masked retrain, purify, compact, evaluate, report.
//!
//! Every stage consumes and produces a [`Checkpoint`]. The driver caches
//! stage outputs under `<output_dir>/cache`, keyed by a fingerprint of the
//! config keys the stage (and everything before it) depends on, so reruns
//! and runs that share a prefix of settings resume where they can.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

use crate::admm::{admm_iteration, hard_prune, init_admm, masked_retrain, LayerMask, ProximalSettings, PruneMask};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ModelKind, RunConfig};
use crate::data::{load_cifar10, load_mnist, Splits};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::metrics::{
    compression_stats, emit_report, evaluate, BaselineCounts, CompressionReport, Evaluation, ReportFormat,
};
use crate::optim::Optimizer;
use crate::purify::{compact, purify};
use crate::train::{train, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Train,
    Admm,
    Retrain,
    Purify,
    Compact,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Train, Stage::Admm, Stage::Retrain, Stage::Purify, Stage::Compact];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "baseline",
            Stage::Admm => "admm",
            Stage::Retrain => "retrained",
            Stage::Purify => "purified",
            Stage::Compact => "compacted",
        }
    }

    /// Whether config `key` can change this stage's output.
    fn depends_on(self, key: &str) -> bool {
        let train = matches!(
            key,
            "model"
                | "dataset"
                | "seed"
                | "train_limit"
                | "optimizer"
                | "lr"
                | "beta1"
                | "beta2"
                | "eps"
                | "batch_size"
        ) || key.starts_with("train.");
        let admm = key.starts_with("admm.") || key.starts_with("budget.");
        let retrain = key.starts_with("retrain.");
        let purify = matches!(key, "th1" | "th2" | "th3" | "th4") || key.starts_with("purify.");
        match self {
            Stage::Train => train,
            Stage::Admm => train || admm,
            Stage::Retrain => train || admm || retrain,
            Stage::Purify | Stage::Compact => train || admm || retrain || purify,
        }
    }
}

/// FNV-1a over the stage-relevant config lines.
pub fn fingerprint(cfg: &RunConfig, stage: Stage) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in cfg.echo().iter().filter(|(k, _)| stage.depends_on(k)) {
        for b in k.bytes().chain(*b"=").chain(v.bytes()).chain(*b"\n") {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Loads the dataset the configured model expects; CIFAR images are pooled
/// to 16x16 for the tiny residual network.
pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let splits = match cfg.model {
        ModelKind::Lenet5 => load_mnist(&cfg.dataset)?,
        ModelKind::TinyResnet => {
            let s = load_cifar10(&cfg.dataset)?;
            Splits {
                train: s.train.avg_pool2(),
                test: s.test.avg_pool2(),
            }
        }
    };
    Ok(Splits {
        train: splits.train.head(cfg.train_limit),
        test: splits.test.head(cfg.test_limit),
    })
}

fn stamp(ck: &mut Checkpoint, cfg: &RunConfig) {
    ck.config = cfg.echo();
}

fn record(ck: &mut Checkpoint, key: &str, e: &Evaluation) {
    ck.history.insert(format!("{key}.accuracy"), e.accuracy);
    ck.history.insert(format!("{key}.loss"), e.mean_loss);
}

pub fn stage_train(cfg: &RunConfig, data: &Splits) -> Result<Checkpoint> {
    let mut model = cfg.model.build();
    model.init_weights(cfg.seed);
    let schedule = Schedule {
        hyper: cfg.optimizer,
        batch_size: cfg.batch_size,
        epochs: cfg.train_epochs,
        lr_decay: cfg.train_lr_decay,
        seed: cfg.seed,
    };
    let losses = train(&mut model, &data.train, schedule)?;
    let eval = evaluate(&model, &data.test)?;
    info!("baseline: accuracy {:.4}, loss {:.5}", eval.accuracy, eval.mean_loss);
    let mut ck = Checkpoint::new(model);
    stamp(&mut ck, cfg);
    if let Some(l) = losses.last() {
        ck.history.insert("baseline.train_loss".into(), *l);
    }
    record(&mut ck, "baseline", &eval);
    Ok(ck)
}

/// ADMM iterations on the budgeted layers. The output keeps the unprojected
/// weights together with the ADMM state.
pub fn stage_admm(cfg: &RunConfig, data: &Splits, input: &Checkpoint) -> Result<Checkpoint> {
    let mut model = input.model.clone();
    let budgets = cfg.resolve_budgets(&model)?;
    if budgets.is_empty() {
        return Err(Error::Config("no `budget.<layer>.*` keys: nothing to prune".into()));
    }
    let mut state = match &input.admm {
        Some(s) if s.budgets() == budgets => s.clone(),
        _ => init_admm(&model, &budgets, cfg.rho)?,
    };
    let mut opt = Optimizer::new(cfg.proximal_hyper());
    opt.hyper.lr *= cfg.admm_lr_decay.powi(state.iteration as i32);
    let settings = ProximalSettings {
        epochs: cfg.epochs_per_proximal,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let mut ck = Checkpoint::new(model.clone());
    ck.history = input.history.clone();
    while (state.iteration as usize) < cfg.admm_iterations {
        let residuals = admm_iteration(&mut model, &data.train, &mut state, &mut opt, settings)?;
        for r in &residuals {
            info!(
                "admm iteration {}: {} residual {:.3e}",
                state.iteration, r.layer, r.primal
            );
            ck.history.insert(format!("admm.residual.{}", r.layer), r.primal);
        }
        opt.hyper.lr *= cfg.admm_lr_decay;
        if cfg.rho_growth != 1.0 && (state.iteration as usize) < cfg.admm_iterations {
            // scaled duals: U = lambda / rho, so U shrinks as rho grows
            for l in &mut state.layers {
                l.rho *= cfg.rho_growth;
                l.u.data_mut().iter_mut().for_each(|v| *v /= cfg.rho_growth);
            }
        }
    }
    let eval = evaluate(&model, &data.test)?;
    info!("after admm: accuracy {:.4}", eval.accuracy);
    ck.model = model;
    ck.admm = Some(state);
    stamp(&mut ck, cfg);
    record(&mut ck, "admm", &eval);
    Ok(ck)
}

/// Hard prune onto the budgets, then retrain with the support frozen.
pub fn stage_retrain(cfg: &RunConfig, data: &Splits, input: &Checkpoint) -> Result<Checkpoint> {
    let mut model = input.model.clone();
    let budgets = match &input.admm {
        Some(s) => s.budgets(),
        None => cfg.resolve_budgets(&model)?,
    };
    let mask = hard_prune(&mut model, &budgets)?;
    let pruned = evaluate(&model, &data.test)?;
    info!("after hard prune: accuracy {:.4}", pruned.accuracy);
    let mut opt = Optimizer::new(cfg.retrain_hyper());
    masked_retrain(
        &mut model,
        &data.train,
        &mask,
        &mut opt,
        cfg.retrain_epochs,
        cfg.batch_size,
        cfg.seed,
    )?;
    let eval = evaluate(&model, &data.test)?;
    info!("after masked retrain: accuracy {:.4}", eval.accuracy);
    let mut ck = Checkpoint::new(model);
    ck.history = input.history.clone();
    ck.mask = Some(mask);
    stamp(&mut ck, cfg);
    record(&mut ck, "hard_prune", &pruned);
    record(&mut ck, "retrained", &eval);
    Ok(ck)
}

fn support_mask(model: &LayerGraph) -> PruneMask {
    let layers = model
        .weighted_ids()
        .into_iter()
        .map(|id| {
            (
                model.node(id).name.clone(),
                LayerMask::from_support(model.node(id).weights()),
            )
        })
        .collect();
    PruneMask { layers }
}

/// Threshold purification and unused path removal, without retraining.
pub fn stage_purify(cfg: &RunConfig, input: &Checkpoint) -> Result<Checkpoint> {
    let (model, log) = purify(&input.model, &cfg.threshold_set())?;
    info!(
        "purify: {} channels and {} filters pruned in {} passes",
        log.channels_pruned(),
        log.filters_pruned(),
        log.passes
    );
    let mut ck = Checkpoint::new(model);
    ck.history = input.history.clone();
    ck.mask = Some(support_mask(&ck.model));
    ck.purify_log = Some(log);
    stamp(&mut ck, cfg);
    Ok(ck)
}

pub fn stage_compact(cfg: &RunConfig, input: &Checkpoint) -> Result<Checkpoint> {
    let model = compact(&input.model)?;
    let mut ck = Checkpoint::new(model);
    ck.history = input.history.clone();
    ck.purify_log = input.purify_log.clone();
    ck.mask = Some(support_mask(&ck.model));
    stamp(&mut ck, cfg);
    Ok(ck)
}

/// Report for `model` against the unpruned network of the configured kind.
pub fn build_report(
    cfg: &RunConfig,
    model: &LayerGraph,
    before: Option<Evaluation>,
    after: Option<Evaluation>,
    nonzero_rate_before: Option<f64>,
) -> Result<CompressionReport> {
    let baseline = BaselineCounts::of(&cfg.model.build());
    let mut report = compression_stats(model, &baseline)?;
    report.before = before;
    report.after = after;
    report.nonzero_rate_before = nonzero_rate_before;
    report.config = cfg.echo();
    Ok(report)
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub baseline: Evaluation,
    /// Masked-retrained model, before purification.
    pub retrained: Evaluation,
    pub retrained_report: CompressionReport,
    pub final_eval: Evaluation,
    pub report: CompressionReport,
    pub checkpoints: BTreeMap<&'static str, PathBuf>,
}

pub fn cache_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.cache_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("cache"))
        .join(format!("{}-{}.ckpt", stage.name(), fingerprint(cfg, stage)))
}

fn cached(cfg: &RunConfig, stage: Stage, resume: bool, run: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
    let path = cache_path(cfg, stage);
    if resume && path.exists() {
        info!("{}: reusing {}", stage.name(), path.display());
        return load_checkpoint(&path);
    }
    let ck = run()?;
    save_checkpoint(&path, &ck)?;
    Ok(ck)
}

fn history_eval(ck: &Checkpoint, key: &str) -> Option<Evaluation> {
    Some(Evaluation {
        accuracy: *ck.history.get(&format!("{key}.accuracy"))?,
        mean_loss: *ck.history.get(&format!("{key}.loss"))?,
    })
}

/// Runs every stage, reusing cached stage outputs when `resume` is set, and
/// writes `<stage>.ckpt`, `report.txt` and `report.csv` to the output dir.
pub fn run_pipeline(cfg: &RunConfig, data: &Splits, resume: bool) -> Result<PipelineResult> {
    cfg.check_layers(&cfg.model.build())?;
    let base = cached(cfg, Stage::Train, resume, || stage_train(cfg, data))?;
    let admm = cached(cfg, Stage::Admm, resume, || stage_admm(cfg, data, &base))?;
    let retrained = cached(cfg, Stage::Retrain, resume, || stage_retrain(cfg, data, &admm))?;
    let purified = cached(cfg, Stage::Purify, resume, || stage_purify(cfg, &retrained))?;
    let compacted = cached(cfg, Stage::Compact, resume, || stage_compact(cfg, &purified))?;

    let out = &cfg.output_dir;
    let mut checkpoints = BTreeMap::new();
    for (stage, ck) in Stage::ALL.iter().zip([&base, &admm, &retrained, &purified, &compacted]) {
        let p = out.join(format!("{}.ckpt", stage.name()));
        save_checkpoint(&p, ck)?;
        checkpoints.insert(stage.name(), p);
    }

    let baseline = match history_eval(&base, "baseline") {
        Some(e) if cfg.test_limit == 0 => e,
        _ => evaluate(&base.model, &data.test)?,
    };
    let before = evaluate(&retrained.model, &data.test)?;
    let after = evaluate(&compacted.model, &data.test)?;
    let retrained_report = build_report(cfg, &retrained.model, None, Some(before), None)?;
    let report = build_report(
        cfg,
        &compacted.model,
        Some(before),
        Some(after),
        Some(retrained_report.nonzero_rate),
    )?;
    write_reports(out, &report)?;
    info!(
        "nonzero rate {:.2}x -> structural rate {:.2}x; accuracy {:.4} -> {:.4}",
        retrained_report.nonzero_rate, report.structural_rate, before.accuracy, after.accuracy
    );
    Ok(PipelineResult {
        baseline,
        retrained: before,
        retrained_report,
        final_eval: after,
        report,
        checkpoints,
    })
}

pub fn write_reports(dir: &Path, report: &CompressionReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, format) in [("report.txt", ReportFormat::Table), ("report.csv", ReportFormat::Csv)] {
        let p = dir.join(name);
        std::fs::write(&p, emit_report(report, format)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Sizes the global worker pool. Results do not depend on the thread count;
/// this only bounds parallelism. Can be called once per process.
pub fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_track_dependencies() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("th2", "0.5").unwrap();
        b.set("output_dir", "elsewhere").unwrap();
        assert_eq!(fingerprint(&a, Stage::Retrain), fingerprint(&b, Stage::Retrain));
        assert_ne!(fingerprint(&a, Stage::Purify), fingerprint(&b, Stage::Purify));
        b.set("budget.conv1.filters", "5").unwrap();
        assert_eq!(fingerprint(&a, Stage::Train), fingerprint(&b, Stage::Train));
        assert_ne!(fingerprint(&a, Stage::Admm), fingerprint(&b, Stage::Admm));
    }
}
