//! The incremental outer loop: transfer initialization, then for every
//! arriving increment a drift test per hospital followed by a fixed number
//! of federated rounds in which only drifted hospitals train.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    inject_drift, load_csv, schedule_increments, synthesize_cohort, CohortSpec, DatasetShard,
    DriftInjection, Sample,
};
use crate::driftwatch::{DriftDetector, DriftMode, DriftSettings, DriftVerdict};
use crate::error::{Error, Result};
use crate::fedcore::{
    run_round, ClientPolicy, ClientState, DriftReference, MergePolicy, RoundContext, RoundReport,
    ServerState,
};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::nnkernel::{HyperParams, Mlp};
use crate::seed;
use crate::transfer::{
    build_head_and_init_global, pretrain_backbone, GlobalModel, PretrainedWeights,
    DEFAULT_BACKBONE_HIDDEN, DEFAULT_HEAD_HIDDEN,
};

pub const RUN_LOG_VERSION: u32 = 1;

/// Flat run configuration. Every key can be overridden from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cl3Config {
    pub increments: usize,
    pub rounds_per_increment: usize,

    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pretrain_epochs: usize,

    pub backbone_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub momentum: f64,

    pub accuracy_drop_threshold: f64,
    pub mean_shift_z_threshold: f64,
    pub drift_mode: DriftMode,
    pub drift_reference: DriftReference,
    pub merge_policy: MergePolicy,

    pub data_seed: u64,
    pub model_seed: u64,
    pub schedule_seed: u64,

    /// Synthetic cohort; its own `seed` is replaced by `data_seed`.
    pub cohort: CohortSpec,
    /// Directory holding `hospital_<id>.csv`, `public.csv` and `test.csv`.
    /// When set, the cohort generator is not used.
    pub data_dir: Option<PathBuf>,
}

impl Default for Cl3Config {
    fn default() -> Self {
        let h = HyperParams::default();
        let d = DriftSettings::default();
        Cl3Config {
            increments: 6,
            rounds_per_increment: 6,
            learning_rate: h.learning_rate,
            l2: h.l2,
            batch_size: h.batch_size,
            epochs: h.epochs,
            adam_beta1: h.adam_beta1,
            adam_beta2: h.adam_beta2,
            adam_eps: h.adam_eps,
            pretrain_epochs: h.epochs,
            backbone_hidden: DEFAULT_BACKBONE_HIDDEN.to_vec(),
            head_hidden: DEFAULT_HEAD_HIDDEN.to_vec(),
            momentum: 1.0,
            accuracy_drop_threshold: d.accuracy_drop_threshold,
            mean_shift_z_threshold: d.mean_shift_z_threshold,
            drift_mode: d.mode,
            drift_reference: DriftReference::default(),
            merge_policy: MergePolicy::default(),
            data_seed: 42,
            model_seed: 42,
            schedule_seed: 42,
            cohort: CohortSpec::default(),
            data_dir: None,
        }
    }
}

const STREAM_PRETRAIN: u64 = 0x9E7;
const STREAM_HEAD: u64 = 0x4EAD;

impl Cl3Config {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the data, model and schedule seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.model_seed = seed;
        self.schedule_seed = seed;
        self
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            learning_rate: self.learning_rate,
            l2: self.l2,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.model_seed,
        }
    }

    pub fn pretrain_hyper(&self) -> HyperParams {
        HyperParams {
            epochs: self.pretrain_epochs,
            seed: seed::derive(self.model_seed, &[STREAM_PRETRAIN]),
            ..self.hyper()
        }
    }

    pub fn drift_settings(&self) -> DriftSettings {
        DriftSettings {
            accuracy_drop_threshold: self.accuracy_drop_threshold,
            mean_shift_z_threshold: self.mean_shift_z_threshold,
            mode: self.drift_mode,
        }
    }

    pub fn client_policy(&self) -> ClientPolicy {
        ClientPolicy {
            drift_reference: self.drift_reference,
            merge: self.merge_policy,
        }
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            seed: self.data_seed,
            ..self.cohort.clone()
        }
    }

    pub fn head_dims(&self, backbone_out: usize) -> Vec<usize> {
        let mut dims = vec![backbone_out];
        dims.extend_from_slice(&self.head_hidden);
        dims.push(2);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.increments < 1 {
            return Err(Error::Config("increments must be at least 1".into()));
        }
        if self.rounds_per_increment < 1 {
            return Err(Error::Config(
                "rounds_per_increment must be at least 1".into(),
            ));
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            return Err(Error::Config(
                "backbone_hidden needs positive widths".into(),
            ));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden widths must be positive".into()));
        }
        if self.increments > u16::MAX as usize || self.rounds_per_increment > u16::MAX as usize {
            return Err(Error::Config(
                "increment and round counts must fit in 16 bits".into(),
            ));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum {} must lie in (0, 1]",
                self.momentum
            )));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.hyper().validate().map_err(wrap)?;
        self.drift_settings().validate().map_err(wrap)?;
        if self.data_dir.is_none() {
            self.cohort_spec().validate().map_err(wrap)?;
        }
        Ok(())
    }
}

/// Everything a run needs before the first increment.
#[derive(Debug, Clone)]
pub struct Cl3Data {
    pub hospitals: Vec<DatasetShard>,
    pub public: DatasetShard,
    pub test: DatasetShard,
    pub drift: Option<(DriftInjection, Vec<f64>)>,
}

pub fn prepare_data(config: &Cl3Config) -> Result<Cl3Data> {
    match &config.data_dir {
        None => {
            let spec = config.cohort_spec();
            let cohort = synthesize_cohort(&spec)?;
            Ok(Cl3Data {
                hospitals: cohort.hospitals,
                public: cohort.public,
                test: cohort.test,
                drift: spec.drift.map(|d| (d, cohort.direction)),
            })
        }
        Some(dir) => {
            let mut hospitals = Vec::new();
            for id in 1u16.. {
                let path = dir.join(format!("hospital_{id}.csv"));
                if !path.exists() {
                    break;
                }
                hospitals.push(load_csv(&path, id)?);
            }
            if hospitals.is_empty() {
                return Err(Error::Config(format!(
                    "no hospital_<id>.csv files in {}",
                    dir.display()
                )));
            }
            Ok(Cl3Data {
                hospitals,
                public: load_csv(&dir.join("public.csv"), 0)?,
                test: load_csv(&dir.join("test.csv"), 0)?,
                drift: None,
            })
        }
    }
}

/// The increments one hospital receives, with any configured drift applied
/// from its starting increment onward.
pub fn hospital_increments(
    config: &Cl3Config,
    shard: &DatasetShard,
    drift: Option<&(DriftInjection, Vec<f64>)>,
) -> Result<Vec<Vec<Sample>>> {
    let seed = seed::derive(config.schedule_seed, &[shard.hospital_id as u64]);
    let schedule = schedule_increments(shard.len(), config.increments, seed)?;
    let mut parts = schedule.materialize(shard);
    if let Some((d, direction)) = drift {
        if d.hospital_id == shard.hospital_id {
            for part in parts.iter_mut().skip(d.increment.saturating_sub(1)) {
                inject_drift(part, direction, d.kappa, d.flip_labels);
            }
        }
    }
    Ok(parts)
}

pub fn initial_global(
    config: &Cl3Config,
    public: &DatasetShard,
) -> Result<(PretrainedWeights, GlobalModel)> {
    let pretrained = pretrain_backbone(public, &config.backbone_hidden, &config.pretrain_hyper())?;
    let global = global_from_pretrained(config, &pretrained)?;
    Ok((pretrained, global))
}

/// Seeds the configured head on an existing backbone.
pub fn global_from_pretrained(
    config: &Cl3Config,
    pretrained: &PretrainedWeights,
) -> Result<GlobalModel> {
    build_head_and_init_global(
        pretrained,
        &config.head_dims(pretrained.backbone_out_dim()),
        seed::derive(config.model_seed, &[STREAM_HEAD]),
    )
}

pub fn evaluate_global(global: &GlobalModel, test_set: &DatasetShard) -> Result<ConfusionMatrix> {
    metrics::evaluate(&global.model, &test_set.samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    RunHeader {
        format_version: u32,
        config: Box<Cl3Config>,
    },
    DriftVerdict {
        increment: u32,
        hospital_id: u16,
        #[serde(flatten)]
        verdict: DriftVerdict,
    },
    RoundReport(RoundReport),
    IncrementSummary {
        increment: u32,
        participants: Vec<u16>,
        global_accuracy: f64,
        confusion: ConfusionMatrix,
        metrics: MetricsReport,
        elapsed_ms: u64,
    },
    RunSummary {
        final_accuracy: f64,
        confusion: ConfusionMatrix,
        pretrain_elapsed_ms: u64,
        total_elapsed_ms: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cl3RunLog {
    pub records: Vec<LogRecord>,
}

impl Cl3RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: PathBuf::from("<run log>"),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Cl3RunLog { records })
    }

    pub fn round_reports(&self) -> impl Iterator<Item = &RoundReport> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::RoundReport(rep) => Some(rep),
            _ => None,
        })
    }

    pub fn verdicts(&self) -> impl Iterator<Item = (u32, u16, &DriftVerdict)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::DriftVerdict {
                increment,
                hospital_id,
                verdict,
            } => Some((*increment, *hospital_id, verdict)),
            _ => None,
        })
    }

    /// `(increment, global accuracy, participants)` per increment.
    pub fn increment_accuracies(&self) -> Vec<(u32, f64, Vec<u16>)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::IncrementSummary {
                    increment,
                    global_accuracy,
                    participants,
                    ..
                } => Some((*increment, *global_accuracy, participants.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::RunSummary { final_accuracy, .. } => Some(*final_accuracy),
            _ => None,
        })
    }

    /// Increment number against global test accuracy after that
    /// increment's last round.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>13} | {:>12} | Drifted hospitals",
            "Increment No.", "Accuracy (%)"
        );
        let _ = writeln!(out, "{}", "-".repeat(50));
        for (inc, acc, parts) in self.increment_accuracies() {
            let ids: Vec<String> = parts.iter().map(u16::to_string).collect();
            let ids = if ids.is_empty() {
                "-".to_string()
            } else {
                ids.join(",")
            };
            let _ = writeln!(out, "{:>13} | {:>12.2} | {}", inc, acc * 100.0, ids);
        }
        out
    }
}

/// Runs the full loop on data derived from `config`.
pub fn run_cl3(config: &Cl3Config) -> Result<Cl3RunLog> {
    Ok(run_cl3_observed(config, |_, _| {})?.0)
}

/// [`run_cl3`] that also hands every round report and the resulting global
/// model to `observe`, and returns the final global model.
pub fn run_cl3_observed(
    config: &Cl3Config,
    observe: impl FnMut(&RoundReport, &Mlp),
) -> Result<(Cl3RunLog, GlobalModel)> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_cl3_on(config, &data, observe)
}

pub fn run_cl3_on(
    config: &Cl3Config,
    data: &Cl3Data,
    mut observe: impl FnMut(&RoundReport, &Mlp),
) -> Result<(Cl3RunLog, GlobalModel)> {
    config.validate()?;
    let started = Instant::now();
    let mut log = Cl3RunLog::default();
    log.records.push(LogRecord::RunHeader {
        format_version: RUN_LOG_VERSION,
        config: Box::new(config.clone()),
    });

    let (_, global) = initial_global(config, &data.public)?;
    let pretrain_elapsed_ms = started.elapsed().as_millis() as u64;
    let mut server = ServerState::new(global, config.momentum)?;

    let mut schedules = Vec::with_capacity(data.hospitals.len());
    let mut clients = Vec::with_capacity(data.hospitals.len());
    for shard in &data.hospitals {
        schedules.push(hospital_increments(config, shard, data.drift.as_ref())?);
        clients.push(ClientState::new(
            shard.hospital_id,
            DriftDetector::new(config.drift_settings())?,
            config.client_policy(),
        ));
    }

    let hyper = config.hyper();
    let mut last_confusion = evaluate_global(&server.global, &data.test)?;
    for increment in 1..=config.increments as u32 {
        let inc_started = Instant::now();
        let mut participants = Vec::new();
        for (client, parts) in clients.iter_mut().zip(schedules.iter_mut()) {
            let delivered = std::mem::take(&mut parts[increment as usize - 1]);
            let hospital = client.hospital_id();
            let verdict = client
                .begin_increment(delivered, &server.global.model)
                .map_err(|e| Error::Context {
                    increment: increment as usize,
                    round: 0,
                    hospital,
                    source: Box::new(e),
                })?;
            if verdict.drifted {
                participants.push(hospital);
            }
            log.records.push(LogRecord::DriftVerdict {
                increment,
                hospital_id: hospital,
                verdict,
            });
        }

        for r in 0..config.rounds_per_increment as u32 {
            let ctx = RoundContext {
                increment,
                round_in_increment: r + 1,
                model_seed: config.model_seed,
            };
            let (next, report) = run_round(
                &server,
                &mut clients,
                &participants,
                &hyper,
                &data.test,
                ctx,
            )?;
            server = next;
            observe(&report, &server.global.model);
            last_confusion = report.global_confusion;
            log.records.push(LogRecord::RoundReport(report));
        }
        for c in clients.iter_mut() {
            let hospital = c.hospital_id();
            c.end_increment().map_err(|e| Error::Context {
                increment: increment as usize,
                round: config.rounds_per_increment,
                hospital,
                source: Box::new(e),
            })?;
        }
        log.records.push(LogRecord::IncrementSummary {
            increment,
            participants,
            global_accuracy: last_confusion.accuracy(),
            confusion: last_confusion,
            metrics: metrics::scores(&last_confusion)?,
            elapsed_ms: inc_started.elapsed().as_millis() as u64,
        });
    }
    log.records.push(LogRecord::RunSummary {
        final_accuracy: last_confusion.accuracy(),
        confusion: last_confusion,
        pretrain_elapsed_ms,
        total_elapsed_ms: started.elapsed().as_millis() as u64,
    });
    Ok((log, server.global))
}

/// Drops every `*_ms` field so logs from different runs can be compared.
pub fn strip_timing(jsonl: &str) -> String {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                map.retain(|k, _| !k.ends_with("_ms"));
                map.values_mut().for_each(strip);
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    jsonl
        .lines()
        .map(
            |line| match serde_json::from_str::<serde_json::Value>(line) {
                Ok(mut v) => {
                    strip(&mut v);
                    v.to_string()
                }
                Err(_) => line.to_string(),
            },
        )
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ClassCounts;
    use crate::driftwatch::DriftReason;

    fn tiny_config() -> Cl3Config {
        Cl3Config {
            increments: 1,
            rounds_per_increment: 1,
            epochs: 2,
            pretrain_epochs: 2,
            cohort: CohortSpec {
                hospitals: vec![ClassCounts {
                    healthy: 20,
                    covid: 20,
                }],
                public_size: 60,
                ..CohortSpec::default()
            },
            ..Cl3Config::default()
        }
    }

    #[test]
    fn minimal_run_structure() {
        let log = run_cl3(&tiny_config()).unwrap();
        assert_eq!(log.round_reports().count(), 1);
        let verdicts: Vec<_> = log.verdicts().collect();
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].2.reason, DriftReason::FirstIncrement);
        assert!(log.final_accuracy().is_some());
        assert!(matches!(log.records[0], LogRecord::RunHeader { .. }));
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let log = run_cl3(&tiny_config()).unwrap();
        let text = log.to_jsonl();
        assert_eq!(Cl3RunLog::from_jsonl(&text).unwrap(), log);
        assert!(text.contains("\"event\":\"drift_verdict\""));
        assert!(text.contains("\"event\":\"round_report\""));
        assert!(text.contains("\"event\":\"increment_summary\""));
    }

    #[test]
    fn config_validation() {
        let bad = Cl3Config {
            increments: 0,
            ..Cl3Config::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = Cl3Config {
            momentum: 0.0,
            ..Cl3Config::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<Cl3Config>(r#"{"bogus": 1}"#).is_err());
        let c: Cl3Config =
            serde_json::from_str(r#"{"epochs": 3, "drift_mode": "either"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.drift_mode, DriftMode::Either);
    }

    #[test]
    fn evaluate_counts_every_test_sample() {
        let config = tiny_config();
        let data = prepare_data(&config).unwrap();
        let (_, global) = initial_global(&config, &data.public).unwrap();
        let cm = evaluate_global(&global, &data.test).unwrap();
        assert_eq!(cm.total(), data.test.len() as u64);
    }

    #[test]
    fn strip_timing_removes_ms_fields() {
        let s = strip_timing(r#"{"a":1,"elapsed_ms":5,"b":{"total_elapsed_ms":3}}"#);
        assert_eq!(s, r#"{"a":1,"b":{}}"#);
    }
}
