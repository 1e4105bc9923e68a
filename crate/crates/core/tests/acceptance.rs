//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::process::Command;
use std::time::{Duration, Instant};

use cl3::cl3loop::{hospital_increments, initial_global, prepare_data, strip_timing, Cl3Config};
use cl3::dataio::split_holdout;
use cl3::driftwatch::DriftReason;
use cl3::fedcore::{aggregate, LocalUpdate, ServerState};
use cl3::fedwire::{decode_frame, encode_frame, Message, RoundBegin, WeightBlob};
use cl3::metrics::{confusion, scores, ConfusionMatrix};
use cl3::nnkernel::Mlp;
use cl3::seed;
use cl3::transfer::{epochs_to_reach, GlobalModel};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_dims(rng: &mut seed::Rng) -> Vec<usize> {
    match rng.random_range(0..2) {
        0 => vec![rng.random_range(1..=8), 2],
        _ => vec![rng.random_range(1..=8), rng.random_range(1..=5), 2],
    }
}

/// Plain weighted mean, parameter by parameter, in its own loop order.
fn weighted_mean_oracle(updates: &[LocalUpdate]) -> Vec<f64> {
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let params: Vec<Vec<f64>> = updates.iter().map(|u| flat_params(&u.head)).collect();
    (0..params[0].len())
        .map(|p| {
            let mut acc = 0.0;
            for (u, v) in updates.iter().zip(&params) {
                acc += u.sample_count as f64 * v[p];
            }
            acc / total
        })
        .collect()
}

fn flat_params(m: &Mlp) -> Vec<f64> {
    let mut v = Vec::new();
    for w in m.weights() {
        v.extend(w.iter());
    }
    for b in m.biases() {
        v.extend(b.iter());
    }
    v
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for set in 0..1000u64 {
        let mut rng = seed::rng(seed::derive(0xA66, &[set]));
        let dims = random_dims(&mut rng);
        let k = rng.random_range(1..=10);
        let updates: Vec<LocalUpdate> = (0..k)
            .map(|i| LocalUpdate {
                hospital_id: i as u16 + 1,
                head: Mlp::init(&dims, rng.random()).unwrap(),
                sample_count: rng.random_range(1..=10_000),
                local_confusion: ConfusionMatrix::default(),
            })
            .collect();
        let server = ServerState::new(
            GlobalModel {
                model: Mlp::init(&dims, rng.random()).unwrap(),
                round: 0,
                increment: 0,
            },
            1.0,
        )
        .unwrap();
        let got = aggregate(&updates, &server).unwrap();
        let oracle = weighted_mean_oracle(&updates);
        for (a, b) in flat_params(&got.global.model).iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut rng);
        let again = aggregate(&shuffled, &server).unwrap();
        order_ok &= again.global.model == got.global.model;
    }
    let elapsed = started.elapsed();
    check(
        worst <= 1e-12 && order_ok && elapsed < Duration::from_secs(10),
        format!("max deviation {worst:e}, order invariant {order_ok}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut redraws = 0;
    for s in 0..100 {
        let (inst, discarded) = common::gradcheck::instance(seed::derive(0x6AD, &[s]));
        redraws += discarded;
        worst = worst.max(common::gradcheck::max_rel_error(&inst));
    }
    let elapsed = started.elapsed();
    check(
        worst < 1e-5 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:e} over 100 instances ({redraws} near-kink redraws), {elapsed:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let mut mismatches = 0;
    let mut identity_checked = 0;
    let mut identity_worst = 0.0f64;
    for v in 0..1000u64 {
        let mut rng = seed::rng(seed::derive(0x3E7, &[v]));
        let n = rng.random_range(1..=200);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();

        let tally = |p: usize, y: usize| {
            preds
                .iter()
                .zip(&labels)
                .filter(|&(&a, &b)| a == p && b == y)
                .count() as u64
        };
        let (tp, fp, tn, fn_) = (tally(1, 1), tally(1, 0), tally(0, 0), tally(0, 1));
        let cm = confusion(&preds, &labels).unwrap();
        if cm != (ConfusionMatrix { tp, fp, tn, fn_ }) {
            mismatches += 1;
            continue;
        }
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let ca = div(tp + tn, n as u64);
        let pre = div(tp, tp + fp);
        let rec = div(tp, tp + fn_);
        let f1 = if pre + rec == 0.0 {
            0.0
        } else {
            2.0 * pre * rec / (pre + rec)
        };
        let m = scores(&cm).unwrap();
        if (m.ca, m.pre, m.rec, m.f1) != (ca, pre, rec, f1) {
            mismatches += 1;
        }
        if pre > 0.0 && rec > 0.0 {
            identity_checked += 1;
            identity_worst = identity_worst.max((m.f1 - 2.0 / (1.0 / pre + 1.0 / rec)).abs());
        }
    }
    check(
        mismatches == 0 && identity_worst <= 1e-15,
        format!(
            "{mismatches} mismatches in 1000 vectors, harmonic-mean deviation {identity_worst:e} over {identity_checked}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let config = Cl3Config::default();
    let log = cl3::cl3loop::run_cl3(&config).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let table = log.summary_table();
    for line in table.lines() {
        println!("    {line}");
    }
    let final_acc = log.final_accuracy().unwrap_or(0.0);
    let rows = log.increment_accuracies().len();
    check(
        final_acc >= 0.85 && rows == 6 && elapsed < Duration::from_secs(120),
        format!(
            "final global accuracy {:.4} (>= 0.85), {rows} increments tabulated, {elapsed:.2?}",
            final_acc
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for s in 1..=5 {
        let log = cl3::cl3loop::run_cl3(&common::drift_config(s)).map_err(|e| e.to_string())?;
        let hit = log
            .verdicts()
            .find(|(inc, h, _)| *inc == 4 && *h == 2)
            .map(|(_, _, v)| v.drifted && v.reason == DriftReason::AccuracyDrop)
            .unwrap_or(false);
        let quiet = log
            .verdicts()
            .filter(|(inc, h, _)| *inc >= 2 && *h != 2)
            .any(|(_, _, v)| !v.drifted);
        ok &= hit && quiet;
        details.push(format!("seed {s}: affected={hit} stationary-quiet={quiet}"));
    }
    check(ok, details.join("; "))
}

fn criterion_6() -> Outcome {
    const TARGET: f64 = 0.8;
    let mut pre_total = 0.0;
    let mut rand_total = 0.0;
    let mut unreached = 0;
    for s in 0..10u64 {
        let config = Cl3Config::default().with_seed(s);
        let data = prepare_data(&config).map_err(|e| e.to_string())?;
        let (train, holdout) =
            split_holdout(&data.hospitals[0], 0.3, seed::derive(s, &[0x5D1])).unwrap();
        let (_, global) = initial_global(&config, &data.public).unwrap();
        let random = Mlp::init(global.model.layer_dims(), seed::derive(s, &[0x4A4D])).unwrap();
        let hyper = config.hyper().with_seed(seed::derive(s, &[0x7A1]));
        let mut run = |init: &Mlp| {
            epochs_to_reach(init, &train, &holdout, &hyper, TARGET)
                .unwrap()
                .unwrap_or_else(|| {
                    unreached += 1;
                    hyper.epochs as f64
                })
        };
        pre_total += run(&global.model);
        rand_total += run(&random);
    }
    let (pre, rnd) = (pre_total / 10.0, rand_total / 10.0);
    check(
        pre < rnd,
        format!(
            "mean epochs to 80%: pretrained {pre:.4}, random {rnd:.4} ({unreached} runs capped)"
        ),
    )
}

fn criterion_7() -> Outcome {
    let config = common::drift_config(42);
    let net = common::networked(&config);
    let sim = common::simulate(&config);
    if net.rounds.len() != sim.rounds.len() {
        return Err(format!(
            "{} networked rounds vs {} simulated",
            net.rounds.len(),
            sim.rounds.len()
        ));
    }
    let mut worst = 0.0f64;
    let mut same_sets = true;
    for ((nr, nm), (sr, sm)) in net.rounds.iter().zip(&sim.rounds) {
        same_sets &= nr.participants == sr.participants;
        worst = worst.max(common::max_param_diff(nm, sm));
    }
    let result = check(
        same_sets && worst <= 1e-9,
        format!(
            "{} rounds, identical participation {same_sets}, max weight difference {worst:e}",
            net.rounds.len()
        ),
    );
    NETWORK_RUN.with(|cell| *cell.borrow_mut() = Some(net));
    result
}

thread_local! {
    static NETWORK_RUN: std::cell::RefCell<Option<common::Networked>> = const { std::cell::RefCell::new(None) };
}

fn random_message(rng: &mut seed::Rng) -> Message {
    let blob = |rng: &mut seed::Rng| {
        let dims = random_dims(rng);
        let mut model = Mlp::init(&dims, rng.random()).unwrap();
        if dims.len() > 2 && rng.random_bool(0.5) {
            model.set_frozen_prefix(1).unwrap();
        }
        WeightBlob {
            model,
            sample_count: rng.random(),
            hospital_id: rng.random(),
            round: rng.random(),
        }
    };
    match rng.random_range(0..7) {
        0 => Message::Join {
            version: rng.random(),
            hospital_id: rng.random(),
        },
        1 => Message::GlobalWeights(blob(rng)),
        2 => Message::LocalUpdate {
            blob: blob(rng),
            confusion: ConfusionMatrix {
                tp: rng.random::<u32>() as u64,
                fp: rng.random::<u32>() as u64,
                tn: rng.random::<u32>() as u64,
                fn_: rng.random::<u32>() as u64,
            },
        },
        3 => Message::RoundBegin(RoundBegin {
            round: rng.random(),
            increment: rng.random(),
            round_in_increment: rng.random(),
            rounds_per_increment: rng.random(),
        }),
        4 => Message::RoundComplete,
        5 => Message::Shutdown,
        _ => {
            let len = rng.random_range(0..40);
            Message::Error((0..len).map(|_| rng.random::<char>()).collect())
        }
    }
}

fn criterion_8() -> Outcome {
    let mut rng = seed::rng(0xF7A);
    let mut round_trip_failures = 0;
    let mut undetected = 0;
    let mut corruptions = 0u64;
    let mut per_type: Vec<Vec<u8>> = Vec::new();
    for _ in 0..1000 {
        let m = random_message(&mut rng);
        let bytes = encode_frame(&m).unwrap();
        match decode_frame(&bytes) {
            Ok(back) if back == m && encode_frame(&back).unwrap() == bytes => {}
            _ => round_trip_failures += 1,
        }
        // one random single-byte corruption per random frame
        let mut bad = bytes.clone();
        let at = rng.random_range(0..bad.len());
        bad[at] ^= rng.random_range(1..=255u8);
        corruptions += 1;
        undetected += decode_frame(&bad).is_ok() as u64;
        if !per_type.iter().any(|f| f[4] == bytes[4]) {
            per_type.push(bytes);
        }
    }
    // exhaustive single-byte corruption of one frame of every type
    for frame in &per_type {
        for at in 0..frame.len() {
            for delta in 1..=255u8 {
                let mut bad = frame.clone();
                bad[at] ^= delta;
                corruptions += 1;
                undetected += decode_frame(&bad).is_ok() as u64;
            }
        }
    }

    // privacy scan of the networked run's transcript
    let config = common::drift_config(42);
    let data = prepare_data(&config).unwrap();
    let mut needles: HashSet<[u8; 8]> = HashSet::new();
    for shard in &data.hospitals {
        let delivered = hospital_increments(&config, shard, data.drift.as_ref()).unwrap();
        for s in shard.samples.iter().chain(delivered.iter().flatten()) {
            for f in &s.features {
                needles.insert(f.to_le_bytes());
                needles.insert(f.to_be_bytes());
            }
        }
    }
    let scan = |haystack: &[u8]| {
        haystack
            .windows(8)
            .any(|w| needles.contains(<&[u8; 8]>::try_from(w).unwrap()))
    };
    // the scanner must see raw data when it is there
    let probe = data.hospitals[0].samples[0].features[0].to_le_bytes();
    let self_test = scan(&[&[1u8, 2, 3][..], &probe[..], &[9u8][..]].concat());

    let transcript =
        NETWORK_RUN.with(|cell| cell.borrow().as_ref().map(|n| n.central.transcript.clone()));
    let transcript = match transcript {
        Some(t) => t,
        None => common::networked(&config).central.transcript,
    };
    let bytes: usize = transcript.iter().map(|e| e.frame.len()).sum();
    let leaks = transcript.iter().filter(|e| scan(&e.frame)).count();

    check(
        round_trip_failures == 0 && undetected == 0 && self_test && leaks == 0,
        format!(
            "{round_trip_failures} round-trip failures in 1000; {undetected} of {corruptions} corruptions accepted; \
             {leaks} of {} transcript frames ({bytes} bytes) contain feature bytes; scanner self-test {self_test}",
            transcript.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = Command::new(env!("CARGO_BIN_EXE_cl3"))
            .args(["simulate", "--seed", "42", "--out-dir"])
            .arg(d.path())
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
    }
    let la = std::fs::read_to_string(a.path().join("run_log.jsonl")).unwrap();
    let lb = std::fs::read_to_string(b.path().join("run_log.jsonl")).unwrap();
    let (sa, sb) = (strip_timing(&la), strip_timing(&lb));
    check(
        sa == sb,
        format!(
            "{} log lines, identical without timing fields: {}",
            sa.lines().count(),
            sa == sb
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("aggregation oracle", criterion_1),
        ("gradient correctness", criterion_2),
        ("metrics oracle", criterion_3),
        ("end-to-end accuracy", criterion_4),
        ("drift gating", criterion_5),
        ("transfer benefit", criterion_6),
        ("dual-mode equivalence", criterion_7),
        ("protocol robustness", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!(
            "criterion {} {name}: {tag} ({detail}) [{:.2?}]",
            i + 1,
            started.elapsed()
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
