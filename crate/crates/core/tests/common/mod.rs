#![allow(dead_code)]

use std::thread;

use cl3::cl3loop::{initial_global, prepare_data, run_cl3_observed, Cl3Config, Cl3RunLog};
use cl3::dataio::DriftInjection;
use cl3::fedcore::RoundReport;
use cl3::fedwire::{run_client, CentralOptions, CentralOutcome, CentralServer, ClientOutcome};
use cl3::nnkernel::Mlp;

pub struct Simulated {
    pub log: Cl3RunLog,
    pub rounds: Vec<(RoundReport, Mlp)>,
}

pub fn simulate(config: &Cl3Config) -> Simulated {
    let mut rounds = Vec::new();
    let (log, _) = run_cl3_observed(config, |r, m| rounds.push((r.clone(), m.clone()))).unwrap();
    Simulated { log, rounds }
}

pub struct Networked {
    pub central: CentralOutcome,
    pub rounds: Vec<(RoundReport, Mlp)>,
    pub clients: Vec<ClientOutcome>,
}

/// Central server plus one thread per hospital over loopback.
pub fn networked(config: &Cl3Config) -> Networked {
    let data = prepare_data(config).unwrap();
    let (_, initial) = initial_global(config, &data.public).unwrap();
    let server = CentralServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();

    let handles: Vec<_> = data
        .hospitals
        .iter()
        .cloned()
        .map(|shard| {
            let config = config.clone();
            let drift = data.drift.clone();
            thread::spawn(move || run_client(addr, &shard, &config, drift.as_ref()).unwrap())
        })
        .collect();

    let mut rounds = Vec::new();
    let central = server
        .serve(
            config,
            &CentralOptions::new(data.hospitals.len()),
            initial,
            &data.test,
            |r, m| rounds.push((r.clone(), m.clone())),
        )
        .unwrap();
    let clients = handles.into_iter().map(|h| h.join().unwrap()).collect();
    Networked {
        central,
        rounds,
        clients,
    }
}

pub fn max_param_diff(a: &Mlp, b: &Mlp) -> f64 {
    assert_eq!(a.layer_dims(), b.layer_dims());
    let mut worst = 0.0f64;
    for (wa, wb) in a.weights().iter().zip(b.weights()) {
        for (x, y) in wa.iter().zip(wb) {
            worst = worst.max((x - y).abs());
        }
    }
    for (ba, bb) in a.biases().iter().zip(b.biases()) {
        for (x, y) in ba.iter().zip(bb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn drift_config(seed: u64) -> Cl3Config {
    let mut c = Cl3Config::default().with_seed(seed);
    c.cohort.drift = Some(DriftInjection {
        hospital_id: 2,
        increment: 4,
        kappa: 3.0,
        flip_labels: false,
    });
    c
}

pub mod gradcheck {
    use cl3::nnkernel::{loss_and_grads, Mlp};
    use cl3::seed;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    pub const STEP: f64 = 1e-5;
    /// Hidden pre-activations closer than this to zero are too near a ReLU
    /// kink for a finite difference of `STEP` to be meaningful.
    pub const KINK_MARGIN: f64 = 1e-3;
    /// Denominator floor of the relative error, so parameters whose true
    /// gradient is ~0 are judged on absolute error.
    pub const REL_FLOOR: f64 = 1e-6;

    pub struct Instance {
        pub net: Mlp,
        pub x: Array2<f64>,
        pub y: Vec<usize>,
        pub l2: f64,
    }

    fn hidden_margin(net: &Mlp, x: &Array2<f64>) -> f64 {
        let mut a = x.clone();
        let mut margin = f64::INFINITY;
        let last = net.num_layers() - 1;
        for (i, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            let z = a.dot(w) + b;
            if i < last {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            a = z.mapv(|v| v.max(0.0));
        }
        margin
    }

    /// A random net and batch whose hidden units all sit away from the kink.
    /// Returns the instance and how many draws were discarded.
    pub fn instance(seed: u64) -> (Instance, usize) {
        for attempt in 0.. {
            let mut rng = seed::rng(seed::derive(seed, &[attempt]));
            let depth = rng.random_range(1..=3);
            let mut dims = vec![rng.random_range(1..=5)];
            for _ in 1..depth {
                dims.push(rng.random_range(1..=6));
            }
            let classes = 2;
            dims.push(classes);
            let net = Mlp::init(&dims, rng.random()).unwrap();
            // nonzero biases so the bias gradients are exercised off zero
            let biases: Vec<Array1<f64>> = net
                .biases()
                .iter()
                .map(|b| b.mapv(|_| rng.random_range(-0.5..0.5)))
                .collect();
            let net = Mlp::from_parts(net.weights().to_vec(), biases, 0).unwrap();
            let n = rng.random_range(1..=8);
            let x = Array2::from_shape_fn((n, dims[0]), |_| rng.random_range(-2.0..2.0));
            let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let l2 = rng.random_range(0.0..1e-2);
            if hidden_margin(&net, &x) > KINK_MARGIN {
                return (Instance { net, x, y, l2 }, attempt as usize);
            }
        }
        unreachable!()
    }

    fn loss(net: &Mlp, inst: &Instance) -> f64 {
        loss_and_grads(net, inst.x.view(), &inst.y, inst.l2)
            .unwrap()
            .0
    }

    /// Worst relative error between analytic and central-difference
    /// gradients over every weight and bias.
    pub fn max_rel_error(inst: &Instance) -> f64 {
        let (_, grads) = loss_and_grads(&inst.net, inst.x.view(), &inst.y, inst.l2).unwrap();
        let w0 = inst.net.weights().to_vec();
        let b0 = inst.net.biases().to_vec();
        let rebuild = |w: Vec<Array2<f64>>, b: Vec<Array1<f64>>| Mlp::from_parts(w, b, 0).unwrap();
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        let mut worst = 0.0f64;
        for l in 0..w0.len() {
            for idx in ndarray::indices_of(&w0[l]) {
                let mut plus = w0.clone();
                plus[l][idx] += STEP;
                let mut minus = w0.clone();
                minus[l][idx] -= STEP;
                let numeric = (loss(&rebuild(plus, b0.clone()), inst)
                    - loss(&rebuild(minus, b0.clone()), inst))
                    / (2.0 * STEP);
                worst = worst.max(rel(grads.weights[l][idx], numeric));
            }
            for j in 0..b0[l].len() {
                let mut plus = b0.clone();
                plus[l][j] += STEP;
                let mut minus = b0.clone();
                minus[l][j] -= STEP;
                let numeric = (loss(&rebuild(w0.clone(), plus), inst)
                    - loss(&rebuild(w0.clone(), minus), inst))
                    / (2.0 * STEP);
                worst = worst.max(rel(grads.biases[l][j], numeric));
            }
        }
        worst
    }
}
