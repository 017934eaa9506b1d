//! Fits a model to a recorded run log and prints the discovered structure:
//! per-mode dynamics, gate weights, label balance, and the objective trace.
//! Usage: fit_probe <run_log.csv> [num_modes] [em_rounds] [max_episodes]

use modeplan::config::FitConfig;
use modeplan::rslds::init::initialize;
use modeplan::rslds::learning::{fit, MniwPrior};
use modeplan::rslds::{Sequence, TrajectoryBatch};
use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: fit_probe <run_log.csv> [k] [rounds]");
    let k: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(5);
    let rounds: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(3);
    let max_seqs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(usize::MAX);

    let text = std::fs::read_to_string(&path).expect("readable run log");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (c_ep, c_p, c_v, c_u) = (col("episode"), col("position"), col("velocity"), col("control"));

    let mut sequences = Vec::new();
    let mut obs: Vec<DVector<f64>> = Vec::new();
    let mut controls: Vec<DVector<f64>> = Vec::new();
    let mut episode = String::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[c_ep] != episode {
            if obs.len() >= 2 {
                let mut ctl = controls.clone();
                ctl.pop();
                sequences.push(Sequence::new(obs.clone(), ctl));
            }
            obs.clear();
            controls.clear();
            episode = f[c_ep].to_string();
        }
        obs.push(DVector::from_row_slice(&[
            f[c_p].parse().unwrap(),
            f[c_v].parse().unwrap(),
        ]));
        controls.push(DVector::from_row_slice(&[f[c_u].parse().unwrap()]));
    }
    if obs.len() >= 2 {
        let mut ctl = controls;
        ctl.pop();
        sequences.push(Sequence::new(obs, ctl));
    }
    sequences.truncate(max_seqs);
    let batch = TrajectoryBatch::new(sequences);
    println!(
        "batch: {} sequences, {} transitions",
        batch.sequences().len(),
        batch.total_transitions()
    );

    let mut cfg = FitConfig::default();
    cfg.em_rounds = rounds;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init = initialize(&batch, k, &cfg, &mut rng).expect("init");
    let mut counts = vec![0usize; k];
    for labels in &init.labels {
        for &l in labels {
            counts[l] += 1;
        }
    }
    println!("init label counts: {counts:?}");
    for w in &init.warnings {
        println!("init warning: {w}");
    }

    let prior = MniwPrior::scaled_to(&batch, 2, 1, &cfg);
    let report = fit(init.params, &prior, &batch, &cfg).expect("fit");
    println!("objective trace: {:?}", report.objective_trace);
    let p = &report.params;
    for (i, mode) in p.modes.iter().enumerate() {
        println!(
            "mode {i}: A={:?} B={:?} c={:?} Qdiag=[{:.2e}, {:.2e}]",
            mode.transition.as_slice(),
            mode.control.as_slice(),
            mode.offset.as_slice(),
            mode.noise_cov[(0, 0)],
            mode.noise_cov[(1, 1)]
        );
    }
    println!(
        "gate wstate={:?} wctl={:?} bias={:?}",
        p.recurrence.state_weights.as_slice(),
        p.recurrence.control_weights.as_slice(),
        p.recurrence.bias.as_slice()
    );
    let mut post_counts = vec![0usize; k];
    for mp in &report.mode_posts {
        for probs in &mp.probs {
            post_counts[probs.imax()] += 1;
        }
    }
    println!("posterior label counts: {post_counts:?}");

    println!("region argmax map (rows v=+0.06..-0.06, cols p=-1.2..0.6):");
    for vi in 0..5 {
        let vel = 0.06 - 0.03 * vi as f64;
        let mut row = String::new();
        for pi in 0..46 {
            let pos = -1.2 + 1.8 * pi as f64 / 45.0;
            let x = DVector::from_row_slice(&[pos, vel]);
            let logits = &p.recurrence.state_weights * &x + &p.recurrence.bias;
            row.push(char::from(b'0' + logits.imax() as u8));
        }
        println!("  v={vel:+.2} {row}");
    }
}
