//! The iterative prune / rewind / retrain loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, RewindMode, StopRule};
use super::records::{write_records, Manifest, PruneRoundRecord, RunStatus, MANIFEST_FILE, RECORDS_FILE};
use super::trainer::{pin_masked, TrainState, Trainer};
use crate::datasets::{augment, stats_batch, DatasetPair};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, count_params, stability, svg_chart};
use crate::models::{LayerMask, Model};
use crate::numerics::Tensor;
use crate::pruning::{
    aiap_select, collect_activation_stats, iap_select, ilp_select, AiapState, MaskRegistry, Policy,
    PruneDecision,
};
use crate::rng::{derive_seed, Purpose};

/// Environment variable consulted for the data root when the config has none.
pub const DATA_DIR_ENV: &str = "STRUCTPRUNE_DATA_DIR";

/// Data root: config value, then [`DATA_DIR_ENV`], then `./data`.
pub fn data_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the configured dataset and applies the subset limits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<DatasetPair> {
    let mut d = cfg.dataset().load(&data_root(cfg))?;
    if let Some(n) = cfg.experiment.train_subset {
        d.train.truncate(n);
    }
    if let Some(n) = cfg.experiment.test_subset {
        d.test.truncate(n);
    }
    let input = crate::models::ModelSpec::build(cfg.experiment.model, 0).input;
    if cfg.dataset().image_shape() != input {
        return Err(Error::Config(format!(
            "model {:?} does not take {:?} images",
            cfg.experiment.model,
            cfg.dataset()
        )));
    }
    Ok(d)
}

/// Checkpoint file name for epoch `e`.
pub fn checkpoint_name(e: u32) -> String {
    format!("ckpt_epoch{e}.iprc")
}

/// Result of training the dense network to completion.
#[derive(Debug, Clone)]
pub struct Baseline {
    /// State after the last epoch (`W_T^0`).
    pub state: TrainState,
    /// Checkpoints taken right after each requested epoch.
    pub checkpoints: BTreeMap<u32, Checkpoint>,
    pub record: PruneRoundRecord,
}

impl Baseline {
    pub fn checkpoint(&self, epoch: u32) -> Result<&Checkpoint> {
        self.checkpoints
            .get(&epoch)
            .ok_or_else(|| Error::Usage(format!("no checkpoint saved at epoch {epoch}")))
    }
}

fn round_record(
    cfg: &ExperimentConfig,
    masks: &MaskRegistry,
    round: usize,
    acc: f64,
    threshold: Option<f64>,
    wall_s: f64,
) -> Result<PruneRoundRecord> {
    let spec = crate::models::ModelSpec::build(cfg.experiment.model, cfg.experiment.seed);
    let fp = count_params(&spec, masks)?;
    let flops = count_flops(&spec, masks, spec.input)?;
    Ok(PruneRoundRecord {
        round,
        remaining_params: fp.remaining,
        remaining_pct: fp.remaining_pct(),
        flops: flops.total(),
        top1_acc: acc,
        threshold,
        wall_s,
    })
}

/// Trains for `T` epochs from a fresh initialization, checkpointing after
/// epoch `k`, after every sweep epoch, and (epoch 0) before training.
pub fn train_to_completion(cfg: &ExperimentConfig, data: &DatasetPair) -> Result<Baseline> {
    let t0 = Instant::now();
    let trainer = Trainer::new(cfg, data)?;
    let mut st = TrainState::fresh(cfg)?;
    let mut wanted: Vec<u32> = cfg.rewind.sweep_epochs.clone();
    wanted.push(cfg.rewind_epoch());
    let mut checkpoints = BTreeMap::new();
    if wanted.contains(&0) {
        checkpoints.insert(0, st.checkpoint());
    }
    for e in 0..cfg.epochs() {
        let loss = trainer.train_epoch(&mut st, None)?;
        log::info!("baseline epoch {}/{} loss {loss:.4}", e + 1, cfg.epochs());
        if wanted.contains(&(e + 1)) {
            checkpoints.insert(e + 1, st.checkpoint());
        }
    }
    let acc = trainer.evaluate(&st.model, None)?;
    log::info!("baseline accuracy {acc:.2}%");
    let masks = MaskRegistry::new(&st.model.spec, cfg.pruning.cascade);
    let record = round_record(cfg, &masks, 0, acc, None, t0.elapsed().as_secs_f64())?;
    Ok(Baseline {
        state: st,
        checkpoints,
        record,
    })
}

/// Puts `st` back at the rewind point for the current masks.
///
/// `WeightsLr`: weights, optimizer state, schedule and RNG from the
/// checkpoint. `LrOnly`: weights kept, optimizer zeroed, schedule and RNG
/// from the checkpoint. Masked weights are forced to 0 either way.
pub fn rewind(st: &mut TrainState, ckpt: &Checkpoint, mode: RewindMode, masks: &MaskRegistry) -> Result<()> {
    match mode {
        RewindMode::WeightsLr => st.restore(ckpt)?,
        RewindMode::LrOnly => st.restore_position(ckpt)?,
    }
    let em = masks.element_masks(&st.model.spec)?;
    pin_masked(&mut st.model.params, &em);
    // Stale moments of pruned entries would only decay towards subnormals.
    pin_masked(&mut st.optimizer.first, &em);
    if !st.optimizer.second.is_empty() {
        pin_masked(&mut st.optimizer.second, &em);
    }
    Ok(())
}

/// State carried from round to round.
pub struct RoundState<'a> {
    pub cfg: &'a ExperimentConfig,
    pub trainer: Trainer<'a>,
    pub rewind_ckpt: Checkpoint,
    /// Model at the end of the previous round (`W_T^{r-1}`).
    pub state: TrainState,
    pub masks: MaskRegistry,
    pub aiap: Option<AiapState>,
    pub records: Vec<PruneRoundRecord>,
    stats_batch: Tensor,
}

/// What [`prune_round`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    Pruned(PruneRoundRecord),
    Saturated,
}

impl<'a> RoundState<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a DatasetPair, baseline: &Baseline) -> Result<Self> {
        let model = &baseline.state.model;
        if model.spec.id != cfg.experiment.model {
            return Err(Error::Usage("baseline was trained for a different model".into()));
        }
        let masks = MaskRegistry::new(&model.spec, cfg.pruning.cascade);
        let aiap = match cfg.pruning.policy {
            Policy::Aiap => Some(AiapState::new(
                cfg.pruning.lambda,
                masks.prunable_params(&model.spec)?,
            )?),
            _ => None,
        };
        let seed = cfg
            .pruning
            .stats_seed
            .unwrap_or_else(|| derive_seed(cfg.experiment.seed, Purpose::StatsBatch));
        let (mut stats, _) = stats_batch(&data.train, cfg.pruning.stats_batch_size, seed)?;
        if cfg.pruning.stats_augmented {
            let mut rng = crate::rng::stream(seed, Purpose::Augment);
            stats = augment(&stats, &mut rng)?;
        }
        // recounted: the baseline may have been trained under another config
        let b = &baseline.record;
        let record = round_record(cfg, &masks, 0, b.top1_acc, None, b.wall_s)?;
        Ok(Self {
            cfg,
            trainer: Trainer::new(cfg, data)?,
            rewind_ckpt: baseline.checkpoint(cfg.rewind_epoch())?.clone(),
            state: baseline.state.clone(),
            masks,
            aiap,
            records: vec![record],
            stats_batch: stats,
        })
    }

    pub fn baseline_acc(&self) -> f64 {
        self.records[0].top1_acc
    }

    fn element_masks(&self) -> Result<Vec<LayerMask>> {
        self.masks.element_masks(&self.state.model.spec)
    }
}

/// Chooses the units to drop from `W_T^{r-1}`.
pub fn decide(rs: &mut RoundState, round: usize) -> Result<(PruneDecision, Option<f64>)> {
    let cfg = rs.cfg;
    let model = &rs.state.model;
    let stats = || collect_activation_stats(model, &rs.masks, &rs.stats_batch, cfg.pruning.mean_mode);
    Ok(match cfg.pruning.policy {
        Policy::Ilp => (ilp_select(model, &rs.masks, cfg.rates(), round)?, None),
        Policy::Iap => (
            iap_select(&stats()?, &model.spec, &rs.masks, cfg.rates(), round)?,
            None,
        ),
        Policy::Aiap => {
            let s = stats()?;
            let aiap = rs.aiap.as_mut().expect("AIAP state");
            let t = aiap.update_threshold(round)?;
            (aiap_select(&s, &model.spec, &rs.masks, t, round)?, Some(t))
        }
    })
}

/// One prune, rewind, retrain, evaluate cycle.
pub fn prune_round(rs: &mut RoundState, round: usize) -> Result<RoundOutcome> {
    let t0 = Instant::now();
    let cfg = rs.cfg;
    if round != rs.records.len() {
        return Err(Error::Usage(format!(
            "round {round} requested after {} records",
            rs.records.len()
        )));
    }
    let (decision, threshold) = decide(rs, round)?;
    let saturated = match cfg.pruning.policy {
        Policy::Aiap => decision.is_empty() && rs.masks.exhausted(),
        _ => decision.is_empty(),
    };
    if saturated {
        return Ok(RoundOutcome::Saturated);
    }
    log::info!(
        "round {round}: pruning {} units{}",
        decision.units.len(),
        threshold.map_or(String::new(), |t| format!(" (T = {t:.3})"))
    );
    let acc = if decision.is_empty() && cfg.rewind.mode == RewindMode::WeightsLr {
        // Same masks, same rewind point, same data order: retraining would
        // reproduce the previous round exactly.
        rs.records.last().expect("round 0 present").top1_acc
    } else {
        rs.masks.apply_decision(&decision)?;
        rewind(&mut rs.state, &rs.rewind_ckpt, cfg.rewind.mode, &rs.masks)?;
        let em = rs.element_masks()?;
        for _ in cfg.rewind_epoch()..cfg.epochs() {
            rs.trainer.train_epoch(&mut rs.state, Some(&em))?;
        }
        rs.trainer.evaluate(&rs.state.model, Some(&em))?
    };
    let spec = &rs.state.model.spec;
    if let Some(a) = rs.aiap.as_mut() {
        a.record_remaining(rs.masks.prunable_params(spec)?);
    }
    let rec = round_record(cfg, &rs.masks, round, acc, threshold, t0.elapsed().as_secs_f64())?;
    log::info!(
        "round {round}: {:.2}% remaining, accuracy {acc:.2}%",
        rec.remaining_pct
    );
    rs.records.push(rec.clone());
    Ok(RoundOutcome::Pruned(rec))
}

/// Records and artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<PruneRoundRecord>,
    pub status: RunStatus,
    pub masks: MaskRegistry,
    pub model: Model,
}

fn stop_after(rule: StopRule, rec: &PruneRoundRecord, baseline_acc: f64, original: usize) -> bool {
    match rule {
        StopRule::MaxRounds(n) => rec.round >= n,
        StopRule::TargetDrop(d) => rec.round > 0 && rec.top1_acc < baseline_acc - d,
        StopRule::TargetCompression(c) => original as f64 / rec.remaining_params as f64 >= c,
    }
}

/// Runs rounds from an existing baseline until the stopping rule fires, the
/// policy saturates or the round cap is hit. Writes artifacts when `out` is
/// given.
pub fn run_from_baseline(
    cfg: &ExperimentConfig,
    data: &DatasetPair,
    baseline: &Baseline,
    out: Option<&Path>,
) -> Result<RunResult> {
    let rule = cfg.stop_rule()?;
    let mut rs = RoundState::new(cfg, data, baseline)?;
    let original = rs.records[0].remaining_params;
    let base_acc = rs.baseline_acc();
    let dense_flops = rs.records[0].flops;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (e, c) in &baseline.checkpoints {
            c.save(&dir.join(checkpoint_name(*e)))?;
        }
    }
    let write = |rs: &RoundState, status: RunStatus| -> Result<()> {
        let Some(dir) = out else { return Ok(()) };
        write_records(&dir.join(RECORDS_FILE), &rs.records)?;
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            status,
            rounds: rs.records.len() - 1,
            original_params: original,
            baseline_acc: base_acc,
            dense_flops,
        }
        .write(&dir.join(MANIFEST_FILE))?;
        let title = format!("{} ({})", cfg.experiment.name, cfg.pruning.policy.name());
        let svg = svg_chart(&title, &[(cfg.pruning.policy.name(), &rs.records)]);
        std::fs::write(dir.join("accuracy.svg"), svg).map_err(|e| Error::io(dir, e))
    };
    write(&rs, RunStatus::RoundLimit)?;
    let mut status = RunStatus::Completed;
    if !stop_after(rule, &rs.records[0], base_acc, original) {
        status = RunStatus::RoundLimit;
        for r in 1..=cfg.stop.round_limit {
            match prune_round(&mut rs, r)? {
                RoundOutcome::Saturated => {
                    log::info!("round {r}: policy saturated");
                    status = RunStatus::Saturated;
                    break;
                }
                RoundOutcome::Pruned(rec) => {
                    write(&rs, RunStatus::RoundLimit)?;
                    if stop_after(rule, &rec, base_acc, original) {
                        status = RunStatus::Completed;
                        break;
                    }
                }
            }
        }
    }
    write(&rs, status)?;
    if let Some(dir) = out {
        rs.state.checkpoint().save(&dir.join("final.iprc"))?;
    }
    Ok(RunResult {
        records: rs.records,
        status,
        masks: rs.masks,
        model: rs.state.model,
    })
}

/// Full run: baseline training followed by pruning rounds.
pub fn run_experiment(cfg: &ExperimentConfig, data: &DatasetPair, out: Option<&Path>) -> Result<RunResult> {
    let baseline = train_to_completion(cfg, data)?;
    run_from_baseline(cfg, data, &baseline, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rewind_epoch: u32,
    pub top1_acc: f64,
    pub stability: f64,
    pub remaining_pct: f64,
}

/// One pruning decision (the configured policy, round 1) on `W_T^0`, then
/// for every epoch `e`: rewind to `e`, retrain `T - e` epochs, evaluate and
/// measure the distance to `W_T^0`. Every `e` must have a checkpoint in
/// `baseline`; `e = T` means no retraining at all.
pub fn sweep_rewind(
    cfg: &ExperimentConfig,
    data: &DatasetPair,
    baseline: &Baseline,
    epochs: &[u32],
) -> Result<Vec<SweepRow>> {
    let total = cfg.epochs();
    if let Some(&e) = epochs.iter().find(|&&e| e > total) {
        return Err(Error::Usage(format!("rewind epoch {e} beyond T = {total}")));
    }
    let mut rs = RoundState::new(cfg, data, baseline)?;
    let (decision, _) = decide(&mut rs, 1)?;
    rs.masks.apply_decision(&decision)?;
    let em = rs.element_masks()?;
    let original = &baseline.state.model;
    let remaining_pct = count_params(&original.spec, &rs.masks)?.remaining_pct();
    let mut rows = Vec::new();
    for &e in epochs {
        let mut st = baseline.state.clone();
        if e < total {
            rewind(&mut st, baseline.checkpoint(e)?, RewindMode::WeightsLr, &rs.masks)?;
            for _ in e..total {
                rs.trainer.train_epoch(&mut st, Some(&em))?;
            }
        } else {
            rs.masks.apply_to(&mut st.model)?;
        }
        let acc = rs.trainer.evaluate(&st.model, Some(&em))?;
        let stab = stability(&st.model, original, &rs.masks)?.l2;
        log::info!("rewind to epoch {e}: accuracy {acc:.2}%, L2 {stab:.4}");
        rows.push(SweepRow {
            rewind_epoch: e,
            top1_acc: acc,
            stability: stab,
            remaining_pct,
        });
    }
    Ok(rows)
}

/// Baseline config for a sweep: the requested epochs are checkpointed too.
pub fn with_sweep_epochs(cfg: &ExperimentConfig, epochs: &[u32]) -> ExperimentConfig {
    let mut c = cfg.clone();
    let total = c.epochs();
    c.rewind.sweep_epochs = epochs.iter().copied().filter(|&e| e < total).collect();
    c
}
