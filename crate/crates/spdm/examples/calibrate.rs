//! Calibration harness (temporary): measures linear-baseline difficulty of
//! the synthetic corpus and trains a quick model to probe whether recovery
//! beats the baseline. Not part of the deliverable surface.

use ndarray::Array2;
use spdm::condition::EmbedderRegistry;
use spdm::eval::{baseline_linear, evaluate_corpus};
use spdm::sample::{recover, SamplerKind, SamplerSpec};
use spdm::traj::{sparsify, synth_generate, NormStats, RecoveryTask, Trajectory};
use spdm::train::{train, TrainConfig};

fn build_tasks(
    set: &[Trajectory],
    sparsity: f64,
    norm: NormStats,
    seed: u64,
) -> (Vec<RecoveryTask>, Vec<Trajectory>, Vec<Vec<bool>>) {
    let mut tasks = Vec::new();
    let mut truths = Vec::new();
    let mut masks = Vec::new();
    for (i, dense) in set.iter().enumerate() {
        let (sparse, query, _) = sparsify(dense, sparsity, seed + i as u64).unwrap();
        let mask: Vec<bool> = dense
            .points()
            .iter()
            .map(|p| query.times().contains(&p.time))
            .collect();
        tasks.push(RecoveryTask::new(sparse, query, vec![], norm).unwrap());
        truths.push(dense.clone());
        masks.push(mask);
    }
    (tasks, truths, masks)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let n_train: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let n_eval: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let mode: String = args.get(5).cloned().unwrap_or_else(|| "uniform".into());

    let train_set = synth_generate(n_train, 64, 1).unwrap();
    let norm = NormStats::from_trajectories(&train_set).unwrap();
    let eval_set = synth_generate(n_eval, 64, 9001).unwrap();
    let (tasks, truths, masks) = build_tasks(&eval_set, 0.5, norm, 777);

    // Linear baseline difficulty.
    let recovered: Vec<Trajectory> = tasks.iter().map(|t| baseline_linear(t).unwrap()).collect();
    let (mse, ndtw, jsd) = evaluate_corpus(&recovered, &truths, &masks, &norm).unwrap();
    println!("baseline linear: mse {mse:.3e} ndtw {ndtw:.3e} jsd {jsd:.3e}");

    // Displacement sanity (p99 vs diag/10).
    let mut disps = Vec::new();
    for t in &train_set {
        for w in t.points().windows(2) {
            disps.push(((w[1].lng - w[0].lng).powi(2) + (w[1].lat - w[0].lat).powi(2)).sqrt());
        }
    }
    disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p99 = disps[(disps.len() as f64 * 0.99) as usize];
    let diag = (0.3f64 * 0.3 + 0.3 * 0.3).sqrt();
    println!("p99 displacement {p99:.4} vs diag/10 {:.4}", diag / 10.0);

    if iters == 0 {
        return;
    }

    let mut config = TrainConfig::desk_default();
    config.max_iters = iters;
    config.learning_rate = lr;
    config.seed = 42;
    config.batch_mode = mode.parse().unwrap();
    let t0 = std::time::Instant::now();
    let (model, log) = train(train_set, config, EmbedderRegistry::new()).unwrap();
    println!(
        "trained {iters} iters in {:.1}s; loss first/mid/last: {:.3} / {:.3} / {:.3}",
        t0.elapsed().as_secs_f64(),
        log.first().unwrap().mean_loss,
        log[log.len() / 2].mean_loss,
        log.last().unwrap().mean_loss
    );
    let tail: f64 =
        log[log.len().saturating_sub(50)..].iter().map(|r| r.mean_loss).sum::<f64>() / 50.0;
    println!("tail-50 mean loss: {tail:.4}");

    // Teacher-forced diagnostics: per-step eps error and implied x0 error
    // versus the prior's own x0 error.
    {
        use spdm::condition::build_condition;
        use spdm::diffusion::{build_noise_chain, forward_jump};
        use spdm::net::PropagationState;
        let sched = model.build_schedule().unwrap();
        let registry = EmbedderRegistry::new();
        println!("teacher-forced probe (zero state):");
        println!("  t    eps_mse    x0_mae    prior_mae");
        for &t in &[490usize, 400, 300, 200, 100, 50, 20, 5] {
            let (mut eps_mse, mut x0_mae, mut prior_mae, mut n) = (0.0, 0.0, 0.0, 0.0);
            for (ti, task) in tasks.iter().enumerate() {
                let truth = &truths[ti];
                let m = task.query.len();
                let mut x0 = Array2::zeros((m, 2));
                for (j, &qt) in task.query.times().iter().enumerate() {
                    let p = truth.points().iter().find(|p| p.time == qt).unwrap();
                    x0[[j, 0]] = norm.norm_lng(p.lng);
                    x0[[j, 1]] = norm.norm_lat(p.lat);
                }
                let chain = build_noise_chain(m, 2, &sched, 33 + ti as u64).unwrap();
                let x_t = forward_jump(&x0, t, chain.multi(t), &sched).unwrap();
                let cond = build_condition(task, &registry, &x_t, t).unwrap();
                let state = PropagationState::zeros(model.config(), cond.data().nrows());
                let (eps, _) = model
                    .denoiser
                    .denoise_forward(&model.params, &cond, t, &state)
                    .unwrap();
                let abar = sched.alpha_bar(t);
                for (j, &row) in cond.query_rows().iter().enumerate() {
                    for c in 0..2 {
                        let e_hat = eps.values[[row, c]];
                        let e_true = chain.multi(t)[[j, c]];
                        eps_mse += (e_hat - e_true).powi(2);
                        let x0_hat = (x_t[[j, c]] - (1.0 - abar).sqrt() * e_hat) / abar.sqrt();
                        x0_mae += (x0_hat - x0[[j, c]]).abs();
                        let prior_val = cond.data()[[row, 2 + c]];
                        prior_mae += (prior_val - x0[[j, c]]).abs();
                        n += 1.0;
                    }
                }
            }
            println!(
                "  {t:>3}  {:9.4}  {:8.4}  {:8.4}",
                eps_mse / n,
                x0_mae / n,
                prior_mae / n
            );
        }
    }

    let registry = EmbedderRegistry::new();
    for (kind, steps) in [
        (SamplerKind::SpDdim, 500),
        (SamplerKind::Ddim, 500),
        (SamplerKind::SpDdim, 51),
        (SamplerKind::SpDdim, 21),
        (SamplerKind::Ddim, 51),
        (SamplerKind::Ddim, 21),
    ] {
        let spec = SamplerSpec { kind, steps, seed: 5 };
        let t0 = std::time::Instant::now();
        let rec: Vec<Trajectory> = tasks
            .iter()
            .map(|t| recover(t, &model, &registry, &spec).unwrap().trajectory)
            .collect();
        let (mse, ndtw, _) = evaluate_corpus(&rec, &truths, &masks, &norm).unwrap();
        println!(
            "{kind} @{steps}: mse {mse:.3e} ndtw {ndtw:.3e}  ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        let _ = Array2::<f64>::zeros((1, 1));
    }
}
