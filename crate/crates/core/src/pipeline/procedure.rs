//! The end-to-end procedure: head replacement, decomposition, training,
//! basis pruning, double pruning, with retraining after each prune.

use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::save_checkpoint;
use super::config::{PruneStage, RunConfig};
use super::train::{evaluate, recompute_bn_stats, train_stage, EpochStats, TrainConfig};
use crate::data::{Batch, Dataset};
use crate::decomposition::decompose_all;
use crate::error::{Error, IoAt, Result};
use crate::graph::{build_architecture, count_flops, replace_head, NetGraph, WeightInit};
use crate::importance::{compute_scores, global_threshold, ImportanceTable, Method, Target};
use crate::pruner::{basis_prune, double_prune, merge_protected, pruning_ratio, PruneMask};
use crate::scalar::Scalar;

/// One line of the stage table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: String,
    /// Test accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub params: u64,
    pub flops: u64,
    /// Relative to the decomposed, untrained model.
    pub param_pr: f64,
    pub flop_pr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageArtifacts {
    pub stage: String,
    pub history: Vec<EpochStats>,
    pub importance: Option<ImportanceTable>,
    pub mask: Option<PruneMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<StageRow>,
    pub stages: Vec<StageArtifacts>,
    /// Parameters and FLOPs of the model before decomposition.
    pub original_params: u64,
    pub original_flops: u64,
}

impl RunReport {
    pub fn row(&self, stage: &str) -> Option<&StageRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// `stage,accuracy,val_accuracy,params,flops,param_pr,flop_pr`; accuracy is
    /// measured on the test split.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,accuracy,val_accuracy,params,flops,param_pr,flop_pr\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{:.6},{:.6}",
                r.stage, r.accuracy, r.val_accuracy, r.params, r.flops, r.param_pr, r.flop_pr
            );
        }
        s
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("stage,epoch,loss,train_accuracy,val_accuracy\n");
        for st in &self.stages {
            for e in &st.history {
                let val = e.val_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{val}",
                    st.stage, e.epoch, e.loss, e.train_accuracy
                );
            }
        }
        s
    }
}

/// Data splits used by a run.
#[derive(Debug, Clone)]
pub struct RunData<T: Scalar = f32> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> RunData<T> {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (full, test) = cfg.load_data::<T>()?;
        let (train, val) = full.split_train_val(cfg.val_fraction, cfg.seed)?;
        Ok(Self { train, val, test })
    }

    fn val_batches(&self, batch_size: usize) -> Result<Vec<Batch<T>>> {
        if self.val.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        Ok(self.val.batches(batch_size))
    }
}

/// Writes stage outputs when an output directory is set.
struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn stage<T: Scalar>(&self, g: &NetGraph<T>, art: &StageArtifacts) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        save_checkpoint(g, dir.join(format!("{}.bsp", art.stage)))?;
        if let Some(m) = &art.mask {
            m.save(dir.join(format!("{}_mask.json", art.stage)))?;
        }
        if let Some(t) = &art.importance {
            let f = std::fs::File::create(dir.join(format!("{}_importance.csv", art.stage)))?;
            t.write_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

struct Runner<'a, T: Scalar> {
    cfg: &'a RunConfig,
    data: &'a RunData<T>,
    sink: Sink<'a>,
    reference: (u64, u64),
    input: (usize, usize),
    report: RunReport,
}

impl<T: Scalar> Runner<'_, T> {
    fn train_cfg(&self, epochs: usize, stage_index: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.cfg.batch_size,
            optimizer: self.cfg.optimizer.clone(),
            augment: self.cfg.augment.clone(),
            dropout: self.cfg.dropout,
            seed: self.cfg.seed.wrapping_add(stage_index.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        }
    }

    fn record(&mut self, g: &NetGraph<T>, art: StageArtifacts) -> Result<()> {
        let c = count_flops(g, Some(self.input))?;
        let bs = self.cfg.batch_size;
        let accuracy = evaluate(g, &self.data.test, bs, self.cfg.dropout)?;
        let val_accuracy = if self.data.val.is_empty() {
            f64::NAN
        } else {
            evaluate(g, &self.data.val, bs, self.cfg.dropout)?
        };
        self.report.rows.push(StageRow {
            stage: art.stage.clone(),
            accuracy,
            val_accuracy,
            params: c.total_params,
            flops: c.total_flops,
            param_pr: pruning_ratio(self.reference.0, c.total_params),
            flop_pr: pruning_ratio(self.reference.1, c.total_flops),
        });
        self.sink.stage(g, &art)?;
        self.report.stages.push(art);
        Ok(())
    }

    fn prune_stages(&mut self, mut g: NetGraph<T>, target: Target, stage: &PruneStage, base: &str) -> Result<NetGraph<T>> {
        if stage.remove_fraction == 0.0 {
            return Ok(g);
        }
        for it in 0..stage.iterations {
            let name = if stage.iterations == 1 {
                base.to_string()
            } else {
                format!("{base}_{}", it + 1)
            };
            let index = self.report.stages.len() as u64;
            let step = || -> Result<(NetGraph<T>, StageArtifacts)> {
                let batches = self.data.val_batches(self.cfg.batch_size)?;
                let table = compute_scores(&g, stage.method, target, &batches)?;
                let (pruned, mut mask) = match target {
                    Target::Basis => {
                        let th = global_threshold(&table, stage.remove_fraction)?;
                        basis_prune(&g, &table, th, self.cfg.seed.wrapping_add(index))?
                    }
                    Target::Channel => {
                        let pool = table.without(&merge_protected(&g).into_iter().collect());
                        let th = if pool.is_empty() {
                            f64::NEG_INFINITY
                        } else {
                            global_threshold(&pool, stage.remove_fraction)?
                        };
                        double_prune(&g, &table, th)?
                    }
                };
                mask.fraction = stage.remove_fraction;
                let pruned = if self.cfg.recompute_bn {
                    recompute_bn_stats(pruned, &self.data.train, self.cfg.batch_size)?
                } else {
                    pruned
                };
                let (trained, history) = train_stage(
                    pruned,
                    &self.data.train,
                    Some(&self.data.val),
                    &self.train_cfg(stage.epochs, index),
                )?;
                Ok((
                    trained,
                    StageArtifacts {
                        stage: name.clone(),
                        history,
                        importance: Some(table),
                        mask: Some(mask),
                    },
                ))
            };
            let (next, art) = step().map_err(|e| e.in_stage(&name))?;
            self.record(&next, art).map_err(|e| e.in_stage(&name))?;
            g = next;
        }
        Ok(g)
    }
}

/// Steps 1 and 2: the model with its new head, and its decomposition.
pub fn prepare_model<T: Scalar>(cfg: &RunConfig, data: &RunData<T>) -> Result<(NetGraph<T>, NetGraph<T>)> {
    let mut arch = cfg.architecture()?;
    let shape = data.train.image_shape();
    match arch.input {
        Some(input) if input != shape => {
            return Err(Error::InvalidArgument(format!(
                "architecture input {input:?} does not match dataset images {shape:?}"
            )))
        }
        _ => arch.input = Some(shape),
    }
    let g: NetGraph<T> = build_architecture(&arch, WeightInit::HeNormal { seed: cfg.seed })?;
    let headed = replace_head(&g, data.train.num_classes, cfg.seed)?;
    let decomposed = decompose_all(&headed, T::from_f64(crate::decomposition::S_INIT))?;
    Ok((headed, decomposed))
}

fn runner<'a, T: Scalar>(
    cfg: &'a RunConfig,
    data: &'a RunData<T>,
    headed: &NetGraph<T>,
    reference: &NetGraph<T>,
    out_dir: Option<&'a Path>,
) -> Result<Runner<'a, T>> {
    let (h, w, _) = reference.input_extent();
    let original = count_flops(headed, Some((h, w)))?;
    let base = count_flops(reference, Some((h, w)))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).at(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    }
    Ok(Runner {
        cfg,
        data,
        sink: Sink { dir: out_dir },
        reference: (base.total_params, base.total_flops),
        input: (h, w),
        report: RunReport {
            rows: Vec::new(),
            stages: Vec::new(),
            original_params: original.total_params,
            original_flops: original.total_flops,
        },
    })
}

fn initial_stages<T: Scalar>(r: &mut Runner<'_, T>, decomposed: NetGraph<T>) -> Result<NetGraph<T>> {
    r.record(
        &decomposed,
        StageArtifacts {
            stage: "baseline".into(),
            history: Vec::new(),
            importance: None,
            mask: None,
        },
    )
    .map_err(|e| e.in_stage("baseline"))?;
    let (trained, history) = train_stage(
        decomposed,
        &r.data.train,
        Some(&r.data.val),
        &r.train_cfg(r.cfg.train_epochs, 1),
    )
    .map_err(|e| e.in_stage("trained"))?;
    r.record(
        &trained,
        StageArtifacts {
            stage: "trained".into(),
            history,
            importance: None,
            mask: None,
        },
    )
    .map_err(|e| e.in_stage("trained"))?;
    Ok(trained)
}

/// Steps 1 to 3.
pub fn train_procedure<T: Scalar>(
    cfg: &RunConfig,
    data: &RunData<T>,
    out_dir: Option<&Path>,
) -> Result<(NetGraph<T>, RunReport)> {
    let (headed, decomposed) = prepare_model(cfg, data).map_err(|e| e.in_stage("prepare"))?;
    let mut r = runner(cfg, data, &headed, &decomposed, out_dir)?;
    let trained = initial_stages(&mut r, decomposed)?;
    finish(r, trained)
}

/// Steps 4 and 5 on an already trained, decomposed model. Ratios are taken
/// against `reference`.
pub fn prune_procedure<T: Scalar>(
    cfg: &RunConfig,
    data: &RunData<T>,
    trained: NetGraph<T>,
    reference: &NetGraph<T>,
    out_dir: Option<&Path>,
) -> Result<(NetGraph<T>, RunReport)> {
    if !trained.is_decomposed() {
        return Err(Error::InvalidArgument("pruning needs a decomposed model".into()));
    }
    let mut r = runner(cfg, data, reference, reference, out_dir)?;
    let g = r.prune_stages(trained, Target::Basis, &cfg.basis, "basis_pruned")?;
    let g = r.prune_stages(g, Target::Channel, &cfg.channel, "double_pruned")?;
    finish(r, g)
}

/// Steps 1 to 5, writing checkpoints, masks, importance dumps, and the
/// report tables to `out_dir` when given.
pub fn run_procedure<T: Scalar>(
    cfg: &RunConfig,
    data: &RunData<T>,
    out_dir: Option<&Path>,
) -> Result<(NetGraph<T>, RunReport)> {
    let (headed, decomposed) = prepare_model(cfg, data).map_err(|e| e.in_stage("prepare"))?;
    let mut r = runner(cfg, data, &headed, &decomposed, out_dir)?;
    let trained = initial_stages(&mut r, decomposed)?;
    let g = r.prune_stages(trained, Target::Basis, &cfg.basis, "basis_pruned")?;
    let g = r.prune_stages(g, Target::Channel, &cfg.channel, "double_pruned")?;
    finish(r, g)
}

fn finish<T: Scalar>(r: Runner<'_, T>, g: NetGraph<T>) -> Result<(NetGraph<T>, RunReport)> {
    if let Some(dir) = r.sink.dir {
        emit_report(&r.report, dir)?;
    }
    Ok((g, r.report))
}

/// Writes `report.csv` and `history.csv`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("history.csv"), report.history_csv())?;
    Ok(())
}

/// Test accuracy after basis pruning `trained` by each method, without
/// retraining or refreshing batch-norm statistics.
pub fn ablate<T: Scalar>(
    trained: &NetGraph<T>,
    data: &RunData<T>,
    methods: &[Method],
    remove_fraction: f64,
    batch_size: usize,
    head_seed: u64,
) -> Result<Vec<(Method, f64)>> {
    let batches = data.val_batches(batch_size)?;
    methods
        .iter()
        .map(|&m| {
            let table = compute_scores(trained, m, Target::Basis, &batches)?;
            let th = global_threshold(&table, remove_fraction)?;
            let (pruned, _) = basis_prune(trained, &table, th, head_seed)?;
            Ok((m, evaluate(&pruned, &data.test, batch_size, 0.0)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(basis: f64, channel: f64) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"format": 1,
                "architecture": {{"format": 1, "template": "tiny_vgg", "num_classes": 2}},
                "dataset": {{"kind": "synthetic", "n": 80, "test_n": 40, "h": 8, "w": 8, "num_classes": 2}},
                "seed": 3, "batch_size": 16, "train_epochs": 1,
                "basis": {{"remove_fraction": {basis}, "epochs": 1}},
                "channel": {{"remove_fraction": {channel}, "epochs": 1}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn no_prune_run_has_two_rows_without_reduction() {
        let c = cfg(0.0, 0.0);
        let data: RunData<f64> = RunData::load(&c).unwrap();
        let (_, r) = run_procedure(&c, &data, None).unwrap();
        let stages: Vec<&str> = r.rows.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(stages, ["baseline", "trained"]);
        assert!(r.rows.iter().all(|r| r.param_pr == 0.0 && r.flop_pr == 0.0));
        assert!(r.original_params < r.rows[0].params);
    }

    #[test]
    fn standard_run_writes_every_artifact() {
        let c = cfg(0.5, 0.25);
        let data: RunData<f64> = RunData::load(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (g, r) = run_procedure(&c, &data, Some(dir.path())).unwrap();
        assert_eq!(r.rows.len(), 4);
        for row in &r.rows[2..] {
            assert!(row.param_pr > 0.0 && row.param_pr < 1.0);
            assert!(row.flop_pr > 0.0 && row.flop_pr < 1.0);
        }
        let last = r.rows.last().unwrap();
        assert_eq!(count_flops(&g, None).unwrap().total_params, last.params);
        for f in [
            "config.json",
            "report.csv",
            "history.csv",
            "baseline.bsp",
            "trained.bsp",
            "basis_pruned.bsp",
            "basis_pruned_mask.json",
            "basis_pruned_importance.csv",
            "double_pruned.bsp",
            "double_pruned_mask.json",
            "double_pruned_importance.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv, r.to_csv());
        assert!(csv.starts_with("stage,accuracy,val_accuracy,params,flops,param_pr,flop_pr\n"));
    }

    #[test]
    fn iterations_number_the_stages() {
        let mut c = cfg(0.3, 0.0);
        c.basis.iterations = 2;
        let data: RunData<f64> = RunData::load(&c).unwrap();
        let (_, r) = run_procedure(&c, &data, None).unwrap();
        let stages: Vec<&str> = r.rows.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(stages, ["baseline", "trained", "basis_pruned_1", "basis_pruned_2"]);
        assert!(r.rows[3].params <= r.rows[2].params);
    }

    #[test]
    fn errors_name_their_stage() {
        let mut c = cfg(0.0, 0.0);
        c.architecture = crate::pipeline::ArchSource::Inline(crate::graph::ArchConfig::template(
            "tiny_vgg",
            Some([12, 12, 1]),
            2,
        ));
        let data: RunData<f64> = RunData::load(&c).unwrap();
        let err = run_procedure(&c, &data, None).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }));
        assert!(err.to_string().contains("prepare"), "{err}");
    }
}
