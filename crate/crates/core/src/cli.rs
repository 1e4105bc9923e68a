//! Command-line front end. Exit codes: 0 success, 1 validation error
//! (bad flags, config, input files), 2 runtime or protocol failure.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::cl3loop::{
    global_from_pretrained, initial_global, prepare_data, run_cl3_observed, Cl3Config, Cl3RunLog,
};
use crate::dataio::{load_csv, synthesize_cohort, write_csv, CohortSpec, DriftInjection};
use crate::driftwatch::DriftMode;
use crate::error::{Error, Result};
use crate::fedcore::{DriftReference, MergePolicy};
use crate::fedwire::{run_client, CentralOptions, CentralServer, DEFAULT_PORT};
use crate::metrics::{self, render_hospital_table};
use crate::nnkernel::{decode_cl3w, encode_cl3w};
use crate::transfer::{pretrain_backbone, PretrainedWeights};

#[derive(Debug, Parser)]
#[command(
    name = "cl3",
    version,
    about = "Drift-gated incremental federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort as CSV files.
    SynthData {
        /// `default` or a cohort spec JSON file.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
    /// Pretrain the backbone on the public shard and write it as CL3W.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "backbone.cl3w")]
        out: PathBuf,
    },
    /// Run the whole loop in one process.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Receives run_log.jsonl, summary.txt and global.cl3w.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Serve as the central aggregator.
    Central {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = SocketAddr::from(([0, 0, 0, 0], DEFAULT_PORT)))]
        bind: SocketAddr,
        /// Number of hospitals to wait for.
        #[arg(long)]
        clients: usize,
        /// Start from this backbone instead of pretraining one.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        round_timeout_secs: u64,
        #[arg(long, default_value_t = 60)]
        join_timeout_secs: u64,
        /// Binary capture of every frame.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Join a central server as one hospital.
    Client {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        server: String,
        #[arg(long)]
        hospital_id: u16,
        /// Hospital CSV; without it the hospital's shard of the configured cohort is used.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a CL3W network on a CSV file.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-hospital metrics and the per-increment table from a run log.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
}

/// A config file plus one flag per config key; flags win.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets data, model and schedule seeds together.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    increments: Option<usize>,
    #[arg(long)]
    rounds_per_increment: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    backbone_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    head_hidden: Option<Vec<usize>>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    accuracy_drop_threshold: Option<f64>,
    #[arg(long)]
    mean_shift_z_threshold: Option<f64>,
    /// accuracy, feature_shift or either
    #[arg(long, value_parser = serde_enum::<DriftMode>)]
    drift_mode: Option<DriftMode>,
    /// local or global
    #[arg(long, value_parser = serde_enum::<DriftReference>)]
    drift_reference: Option<DriftReference>,
    /// always or drift_only
    #[arg(long, value_parser = serde_enum::<MergePolicy>)]
    merge_policy: Option<MergePolicy>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    schedule_seed: Option<u64>,
    /// Cohort spec JSON replacing the configured cohort.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Hospital whose data shifts.
    #[arg(long, requires = "drift_increment")]
    drift_hospital: Option<u16>,
    /// First increment carrying the shift.
    #[arg(long, requires = "drift_hospital")]
    drift_increment: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    drift_kappa: f64,
    #[arg(long)]
    drift_flip_labels: bool,
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Cl3Config> {
        let mut c = match &self.config {
            Some(path) => Cl3Config::from_json_file(path)?,
            None => Cl3Config::default(),
        };
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        set!(
            increments,
            rounds_per_increment,
            learning_rate,
            l2,
            batch_size,
            epochs,
            adam_beta1,
            adam_beta2,
            adam_eps,
            pretrain_epochs,
            backbone_hidden,
            head_hidden,
            momentum,
            accuracy_drop_threshold,
            mean_shift_z_threshold,
            drift_mode,
            drift_reference,
            merge_policy,
            data_seed,
            model_seed,
            schedule_seed
        );
        if let Some(path) = &self.cohort {
            c.cohort = CohortSpec::from_json_file(path)?;
        }
        if let Some(dir) = &self.data_dir {
            c.data_dir = Some(dir.clone());
        }
        if let (Some(hospital_id), Some(increment)) = (self.drift_hospital, self.drift_increment) {
            c.cohort.drift = Some(DriftInjection {
                hospital_id,
                increment,
                kappa: self.drift_kappa,
                flip_labels: self.drift_flip_labels,
            });
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            spec,
            seed,
            out_dir,
        } => {
            let mut spec = match spec.as_str() {
                "default" => CohortSpec::default(),
                path => CohortSpec::from_json_file(Path::new(path))?,
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let cohort = synthesize_cohort(&spec)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for h in &cohort.hospitals {
                let path = out_dir.join(format!("hospital_{}.csv", h.hospital_id));
                write_csv(&path, h)?;
                let [healthy, covid] = h.class_counts();
                println!("{}: {healthy} healthy, {covid} covid", path.display());
            }
            write_csv(&out_dir.join("public.csv"), &cohort.public)?;
            write_csv(&out_dir.join("test.csv"), &cohort.test)?;
            println!(
                "public.csv: {} rows, test.csv: {} rows",
                cohort.public.len(),
                cohort.test.len()
            );
            let json = serde_json::to_string_pretty(&spec).expect("spec serializes");
            write_file(&out_dir.join("cohort.json"), json)
        }
        Command::Pretrain { config, out } => {
            let config = config.resolve()?;
            let data = prepare_data(&config)?;
            let pretrained = pretrain_backbone(
                &data.public,
                &config.backbone_hidden,
                &config.pretrain_hyper(),
            )?;
            write_file(&out, pretrained.to_cl3w())?;
            println!(
                "backbone {:?} written to {}",
                pretrained.backbone().layer_dims(),
                out.display()
            );
            Ok(())
        }
        Command::Simulate { config, out_dir } => {
            let config = config.resolve()?;
            let (log, global) = run_cl3_observed(&config, |_, _| {})?;
            write_outputs(&out_dir, &log, &encode_cl3w(&global.model))
        }
        Command::Central {
            config,
            bind,
            clients,
            backbone,
            round_timeout_secs,
            join_timeout_secs,
            transcript,
            out_dir,
        } => {
            let config = config.resolve()?;
            let data = prepare_data(&config)?;
            let initial = match &backbone {
                Some(path) => global_from_pretrained(&config, &PretrainedWeights::read(path)?)?,
                None => initial_global(&config, &data.public)?.1,
            };
            let options = CentralOptions {
                expected_clients: clients,
                round_timeout: Duration::from_secs(round_timeout_secs),
                join_timeout: Duration::from_secs(join_timeout_secs),
                transcript,
            };
            let server = CentralServer::bind(bind)?;
            eprintln!(
                "listening on {}, waiting for {clients} hospitals",
                server.local_addr()?
            );
            let outcome = server.serve(&config, &options, initial, &data.test, |r, _| {
                eprintln!(
                    "round {} (increment {}): participants {:?}, global accuracy {:.4}",
                    r.round, r.increment, r.participants, r.global_accuracy
                )
            })?;
            write_outputs(&out_dir, &outcome.log, &encode_cl3w(&outcome.global.model))
        }
        Command::Client {
            config,
            server,
            hospital_id,
            data,
        } => {
            let config = config.resolve()?;
            let (shard, drift) = match &data {
                Some(path) => (load_csv(path, hospital_id)?, None),
                None => {
                    let mut d = prepare_data(&config)?;
                    let idx = d
                        .hospitals
                        .iter()
                        .position(|h| h.hospital_id == hospital_id)
                        .ok_or(Error::UnknownHospital(hospital_id))?;
                    (d.hospitals.swap_remove(idx), d.drift)
                }
            };
            let outcome = run_client(server.as_str(), &shard, &config, drift.as_ref())?;
            for (inc, v) in &outcome.verdicts {
                println!(
                    "increment {inc}: drifted={} reason={} accuracy={:.4}",
                    v.drifted,
                    serde_json::to_string(&v.reason)
                        .expect("reason serializes")
                        .trim_matches('"'),
                    v.observed_accuracy
                );
            }
            println!(
                "hospital {hospital_id}: {} updates, {} idle rounds",
                outcome.updates_sent, outcome.completes_sent
            );
            Ok(())
        }
        Command::Evaluate { weights, data } => {
            let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
            let model = decode_cl3w(&bytes)?;
            let shard = load_csv(&data, 0)?;
            let cm = metrics::evaluate(&model, &shard.samples)?;
            let m = metrics::scores(&cm)?;
            println!("samples: {}", cm.total());
            println!(
                "confusion: tn={} fp={} fn={} tp={}",
                cm.tn, cm.fp, cm.fn_, cm.tp
            );
            println!(
                "CA={:.4} PRE={:.4} REC={:.4} F1={:.4}",
                m.ca, m.pre, m.rec, m.f1
            );
            Ok(())
        }
        Command::Report { log } => {
            let text = std::fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
            let run = Cl3RunLog::from_jsonl(&text).map_err(|e| match e {
                Error::Parse { line, message, .. } => Error::Parse {
                    path: log.clone(),
                    line,
                    message,
                },
                other => other,
            })?;
            print!("{}", hospital_report(&run)?);
            println!();
            print!("{}", run.summary_table());
            Ok(())
        }
    }
}

fn write_outputs(out_dir: &Path, log: &Cl3RunLog, global: &[u8]) -> Result<()> {
    write_file(&out_dir.join("run_log.jsonl"), log.to_jsonl())?;
    let table = log.summary_table();
    write_file(&out_dir.join("summary.txt"), &table)?;
    write_file(&out_dir.join("global.cl3w"), global)?;
    print!("{table}");
    if let Some(acc) = log.final_accuracy() {
        println!("final global accuracy: {:.2}%", acc * 100.0);
    }
    Ok(())
}

/// Latest local score of each hospital, as a metrics table.
fn hospital_report(run: &Cl3RunLog) -> Result<String> {
    let mut latest = std::collections::BTreeMap::new();
    for r in run.round_reports() {
        for s in &r.local {
            latest.insert(s.hospital_id, s.confusion);
        }
    }
    if latest.is_empty() {
        return Err(Error::Empty("run log has no local updates"));
    }
    let rows = latest
        .into_iter()
        .map(|(id, cm)| Ok((id, metrics::scores(&cm)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(render_hospital_table(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("cl3").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_defaults() {
        let Command::Simulate { config, .. } = parse(&[
            "simulate",
            "--seed",
            "7",
            "--model-seed",
            "9",
            "--epochs",
            "3",
            "--head-hidden",
            "8,4",
            "--drift-mode",
            "either",
            "--merge-policy",
            "drift_only",
        ]) else {
            panic!("wrong subcommand")
        };
        let c = config.resolve().unwrap();
        assert_eq!((c.data_seed, c.model_seed, c.schedule_seed), (7, 9, 7));
        assert_eq!(c.epochs, 3);
        assert_eq!(c.head_hidden, vec![8, 4]);
        assert_eq!(c.drift_mode, DriftMode::Either);
        assert_eq!(c.merge_policy, MergePolicy::DriftOnly);
    }

    #[test]
    fn drift_flags_fill_the_cohort() {
        let Command::Simulate { config, .. } = parse(&[
            "simulate",
            "--drift-hospital",
            "2",
            "--drift-increment",
            "4",
        ]) else {
            panic!("wrong subcommand")
        };
        let d = config.resolve().unwrap().cohort.drift.unwrap();
        assert_eq!((d.hospital_id, d.increment, d.kappa), (2, 4, 3.0));
    }

    #[test]
    fn bad_input_is_a_validation_error() {
        assert_eq!(run_cli(["cl3", "simulate", "--bogus"]), 1);
        assert_eq!(run_cli(["cl3", "simulate", "--drift-mode", "sometimes"]), 1);
        assert_eq!(run_cli(["cl3", "simulate", "--increments", "0"]), 1);
        assert_eq!(run_cli(["cl3", "--help"]), 0);
    }
}
