//! Manual calibration experiments (ignored by default; run with
//! `cargo test -p qam-core --test lab -- --ignored --nocapture`).

use ndarray::Array2;
use qam_core::agents::{Agent, AgentConfig, AgentKind};
use qam_core::env::{gen_dataset, BehaviorSpec, EnvSpec, SamplePool};
use qam_core::nn::SeededRng;

fn bandit_dataset(b: Vec<f64>, c: Vec<f64>, n: usize, seed: u64) -> qam_core::env::Dataset {
    let spec = EnvSpec::GaussBandit { dim: 2, mu: vec![], var: vec![], b, c };
    let behavior = BehaviorSpec::Gaussian { mu: vec![0.0, 0.0], sigma: vec![1.0, 1.0] };
    gen_dataset(&spec, &behavior, n, seed).unwrap()
}

fn policy_moments(agent: &Agent, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let s = Array2::zeros((n, 1));
    let mut rng = SeededRng::named(10_101, "lab/moments");
    let samples = agent.sample_policy_terminals(&s, &mut rng);
    let dim = samples.ncols();
    let mut mean = vec![0.0; dim];
    for j in 0..dim {
        mean[j] = samples.column(j).mean().unwrap();
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (samples[[r, i]] - mean[i]) * (samples[[r, j]] - mean[j]);
            }
            cov[i][j] = acc / n as f64;
        }
    }
    (mean, cov)
}

#[test]
#[ignore]
fn lab_qam_linear_bandit() {
    for (width, batch, k, steps) in [(32usize, 128usize, 10usize, 4000usize), (32, 128, 10, 8000)] {
        let ds = bandit_dataset(vec![1.0, 0.0], vec![0.0, 0.0], 20_000, 1);
        let pool = SamplePool::from_dataset(&ds, 0);
        let mut cfg = AgentConfig::new(1, 2);
        cfg.width = width;
        cfg.critic_k = k;
        cfg.tau = 1.0;
        cfg.seed = 7;
        let mut agent = Agent::new(AgentKind::Qam, cfg).unwrap();
        let mut rng = SeededRng::named(7, "lab/sample");
        let t0 = std::time::Instant::now();
        for step in 0..steps {
            let b = pool.sample(batch, &mut rng).unwrap();
            let m = agent.update(&b).unwrap();
            if step % 1000 == 0 {
                println!(
                    "step {step}: td {:.4} am {:.4} fm {:.4}",
                    m.get("td_loss").unwrap(),
                    m.get("policy_loss").unwrap(),
                    m.get("fm_loss").unwrap()
                );
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        let (mean, cov) = policy_moments(&agent, 4096);
        println!(
            "width {width} batch {batch} K {k} steps {steps}: {:.1}s ({:.2} ms/step)",
            secs,
            1000.0 * secs / steps as f64
        );
        println!("  mean {:?} (target [1, 0])", mean);
        println!("  cov {:?} (target I)", cov);
        println!("  dropped {} skipped {}", agent.dropped_trajectories, agent.skipped_updates);
    }
}

#[test]
#[ignore]
fn lab_behavior_fm_quality() {
    use qam_core::flow::{fm_loss, sde_sample, FieldRole, GaussianFlowField, TimeGrid, Velocity, VelocityField};
    use qam_core::nn::AdamState;
    use ndarray::Array1;

    let ds = bandit_dataset(vec![1.0, 0.0], vec![0.0, 0.0], 20_000, 1);
    let pool = SamplePool::from_dataset(&ds, 0);

    for (width, batch, lr, steps) in [
        (32usize, 128usize, 3e-4, 8000usize),
        (64, 256, 3e-4, 8000),
        (64, 256, 1e-3, 8000),
        (64, 256, 1e-3, 20000),
    ] {
        let mut rng = SeededRng::named(3, "lab/beta");
        let mut beta = VelocityField::new(1, 2, width, 2, FieldRole::BehaviorBeta, &mut rng);
        let mut opt = AdamState::new(&beta.params, lr);
        let mut srng = SeededRng::named(3, "lab/beta-sample");
        let mut frng = SeededRng::named(3, "lab/beta-fm");
        let t0 = std::time::Instant::now();
        let mut last_fm = 0.0;
        for _ in 0..steps {
            let b = pool.sample(batch, &mut srng).unwrap();
            let (v, g) = fm_loss(&beta, &b.s, &b.a, None, &mut frng).unwrap();
            opt.apply(&mut beta.params, &g, None);
            last_fm = v;
        }
        let secs = t0.elapsed().as_secs_f64();

        // SDE terminal moments under the learned field.
        let s = Array2::zeros((8192, 1));
        let grid = TimeGrid::new(10).unwrap();
        let mut mrng = SeededRng::named(5, "lab/beta-moments");
        let traj = sde_sample(&beta, &s, grid, &mut mrng);
        let term = traj.terminal();
        let m0 = term.column(0).mean().unwrap();
        let v0 = term.column(0).mapv(|v| (v - m0) * (v - m0)).mean().unwrap();
        let m1 = term.column(1).mean().unwrap();
        let v1 = term.column(1).mapv(|v| (v - m1) * (v - m1)).mean().unwrap();

        // MSE against the analytic optimal field over the data-weighted region.
        let oracle = GaussianFlowField::new(Array1::zeros(2), Array1::from_elem(2, 1.0));
        let mut erng = SeededRng::named(7, "lab/beta-mse");
        let n_eval = 4096;
        let mut mse = 0.0;
        for _ in 0..n_eval {
            let t = erng.uniform();
            let z = erng.normal_mat(1, 2);
            let a = erng.normal_mat(1, 2);
            let x = &z * (1.0 - t) + &a * t;
            let s1 = Array2::zeros((1, 1));
            let f_net = beta.velocity(&s1, &x, t);
            let f_star = oracle.velocity(&s1, &x, t);
            mse += (&f_net - &f_star).mapv(|d| d * d).mean().unwrap();
        }
        mse /= n_eval as f64;

        println!(
            "w{width} b{batch} lr{lr} steps{steps}: {:.0}s fm {last_fm:.4} | sde mean ({m0:.3},{m1:.3}) var ({v0:.3},{v1:.3}) | field mse {mse:.5}",
            secs
        );
    }
}

#[test]
#[ignore]
fn lab_qam_lr_sweep() {
    for (lr, width, batch, k, steps) in [
        (1e-3f64, 32usize, 128usize, 10usize, 6000usize),
        (1e-3, 32, 128, 5, 6000),
        (1e-3, 32, 128, 10, 10000),
        (1e-3, 64, 128, 10, 6000),
    ] {
        let ds = bandit_dataset(vec![1.0, 0.0], vec![0.0, 0.0], 20_000, 1);
        let pool = SamplePool::from_dataset(&ds, 0);
        let mut cfg = AgentConfig::new(1, 2);
        cfg.width = width;
        cfg.critic_k = k;
        cfg.tau = 1.0;
        cfg.lr = lr;
        cfg.seed = 7;
        let mut agent = Agent::new(AgentKind::Qam, cfg).unwrap();
        let mut rng = SeededRng::named(7, "lab/sample");
        let t0 = std::time::Instant::now();
        for _ in 0..steps {
            let b = pool.sample(batch, &mut rng).unwrap();
            agent.update(&b).unwrap();
        }
        let secs = t0.elapsed().as_secs_f64();
        let (mean, cov) = policy_moments(&agent, 4096);
        println!(
            "lr{lr} w{width} b{batch} K{k} s{steps}: {:.0}s ({:.1} ms) mean ({:.3},{:.3}) covd ({:.3},{:.3}) off {:.3}",
            secs,
            1000.0 * secs / steps as f64,
            mean[0], mean[1], cov[0][0], cov[1][1], cov[0][1]
        );
    }
}

fn sde_var(field: &qam_core::flow::VelocityField, n: usize) -> (f64, f64, f64, f64) {
    use qam_core::flow::{sde_sample, TimeGrid};
    let s = Array2::zeros((n, 1));
    let grid = TimeGrid::new(10).unwrap();
    let mut rng = SeededRng::named(999, "lab/fieldvar");
    let traj = sde_sample(field, &s, grid, &mut rng);
    let t = traj.terminal();
    let m0 = t.column(0).mean().unwrap();
    let v0 = t.column(0).mapv(|v| (v - m0) * (v - m0)).mean().unwrap();
    let m1 = t.column(1).mean().unwrap();
    let v1 = t.column(1).mapv(|v| (v - m1) * (v - m1)).mean().unwrap();
    (m0, m1, v0, v1)
}

#[test]
#[ignore]
fn lab_qam_variance_diagnosis() {
    for (label, tau, clip_boundary, lr1, lr2) in [
        ("tau0", 0.0f64, true, 1e-3f64, 1e-3f64),
        ("tau1-noclip", 1.0, false, 1e-3, 1e-3),
        ("tau1-sched", 1.0, true, 1e-3, 3e-4),
        ("tau1-sched-noclip", 1.0, false, 1e-3, 3e-4),
    ] {
        let ds = bandit_dataset(vec![1.0, 0.0], vec![0.0, 0.0], 20_000, 1);
        let pool = SamplePool::from_dataset(&ds, 0);
        let mut cfg = AgentConfig::new(1, 2);
        cfg.width = 32;
        cfg.critic_k = 10;
        cfg.tau = tau;
        cfg.lr = lr1;
        cfg.clip_boundary = clip_boundary;
        cfg.seed = 7;
        let mut agent = Agent::new(AgentKind::Qam, cfg).unwrap();
        let mut rng = SeededRng::named(7, "lab/sample");
        for step in 0..8000 {
            if step == 5000 {
                // crude schedule: swap lr on every optimizer
                if let qam_core::agents::PolicyNets::AdjointFlow { opt_beta, opt_theta, .. } =
                    &mut agent.policy
                {
                    opt_beta.lr = lr2;
                    opt_theta.lr = lr2;
                }
                for o in &mut agent.critic_opts_mut().iter_mut() {
                    o.lr = lr2;
                }
            }
            let b = pool.sample(128, &mut rng).unwrap();
            agent.update(&b).unwrap();
        }
        let (mean, cov) = policy_moments(&agent, 4096);
        let beta_stats = match &agent.policy {
            qam_core::agents::PolicyNets::AdjointFlow { beta, .. } => sde_var(beta, 4096),
            _ => unreachable!(),
        };
        println!(
            "{label}: theta mean ({:.3},{:.3}) var ({:.3},{:.3}) | beta mean ({:.3},{:.3}) var ({:.3},{:.3})",
            mean[0], mean[1], cov[0][0], cov[1][1],
            beta_stats.0, beta_stats.1, beta_stats.2, beta_stats.3
        );
    }
}

fn run_qam(
    b: Vec<f64>, c: Vec<f64>, tau: f64, t_steps: usize, batch: usize, k: usize,
    steps: usize, lr1: f64, lr2: f64, lr_switch: usize, seed: u64,
) -> (Vec<f64>, Vec<Vec<f64>>, f64) {
    let ds = bandit_dataset(b, c, 20_000, seed.wrapping_add(100));
    let pool = SamplePool::from_dataset(&ds, 0);
    let mut cfg = AgentConfig::new(1, 2);
    cfg.width = 32;
    cfg.critic_k = k;
    cfg.tau = tau;
    cfg.lr = lr1;
    cfg.flow_steps = t_steps;
    cfg.seed = seed;
    let mut agent = Agent::new(AgentKind::Qam, cfg).unwrap();
    let mut rng = SeededRng::named(seed, "lab/sample");
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        if step == lr_switch {
            if let qam_core::agents::PolicyNets::AdjointFlow { opt_beta, opt_theta, .. } =
                &mut agent.policy
            {
                opt_beta.lr = lr2;
                opt_theta.lr = lr2;
            }
            for o in agent.critic_opts_mut() {
                o.lr = lr2;
            }
        }
        let b = pool.sample(batch, &mut rng).unwrap();
        agent.update(&b).unwrap();
    }
    let secs = t0.elapsed().as_secs_f64();
    let (mean, cov) = policy_moments(&agent, 4096);
    (mean, cov, secs)
}

#[test]
#[ignore]
fn lab_qam_budget_configs() {
    println!("--- linear b=(1,0) tau=1, T=20 b64 K4 lr 2e-3->5e-4 ---");
    for seed in [0u64, 1, 2] {
        let (mean, cov, secs) = run_qam(
            vec![1.0, 0.0], vec![0.0, 0.0], 1.0, 20, 64, 4, 5000, 2e-3, 5e-4, 3500, seed,
        );
        println!(
            "seed {seed}: {:.0}s mean ({:.3},{:.3}) var ({:.3},{:.3}) off {:.3}",
            secs, mean[0], mean[1], cov[0][0], cov[1][1], cov[0][1]
        );
    }
    println!("--- quadratic C=I tau=1 (target var 0.5) ---");
    for seed in [0u64, 1] {
        let (mean, cov, secs) = run_qam(
            vec![0.0, 0.0], vec![1.0, 1.0], 1.0, 20, 64, 4, 5000, 2e-3, 5e-4, 3500, seed,
        );
        println!(
            "seed {seed}: {:.0}s mean ({:.3},{:.3}) var ({:.3},{:.3})",
            secs, mean[0], mean[1], cov[0][0], cov[1][1]
        );
    }
    println!("--- tau=2, T=32 (target mean 2.0) ---");
    let (mean, cov, secs) = run_qam(
        vec![1.0, 0.0], vec![0.0, 0.0], 2.0, 32, 64, 4, 5000, 2e-3, 5e-4, 3500, 0,
    );
    println!(
        "{:.0}s mean ({:.3},{:.3}) var ({:.3},{:.3})",
        secs, mean[0], mean[1], cov[0][0], cov[1][1]
    );
}

fn run_qam_beta_boost(
    b: Vec<f64>, c: Vec<f64>, tau: f64, t_steps: usize, batch: usize, k: usize,
    steps: usize, lr_beta: f64, lr_main: f64, lr2: f64, lr_switch: usize, seed: u64,
    clip_boundary: bool,
) -> (Vec<f64>, Vec<Vec<f64>>, f64) {
    let ds = bandit_dataset(b, c, 20_000, seed.wrapping_add(100));
    let pool = SamplePool::from_dataset(&ds, 0);
    let mut cfg = AgentConfig::new(1, 2);
    cfg.width = 32;
    cfg.critic_k = k;
    cfg.tau = tau;
    cfg.lr = lr_main;
    cfg.flow_steps = t_steps;
    cfg.seed = seed;
    cfg.clip_boundary = clip_boundary;
    let mut agent = Agent::new(AgentKind::Qam, cfg).unwrap();
    if let qam_core::agents::PolicyNets::AdjointFlow { opt_beta, .. } = &mut agent.policy {
        opt_beta.lr = lr_beta;
    }
    let mut rng = SeededRng::named(seed, "lab/sample");
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        if step == lr_switch {
            if let qam_core::agents::PolicyNets::AdjointFlow { opt_beta, opt_theta, .. } =
                &mut agent.policy
            {
                opt_beta.lr = lr2;
                opt_theta.lr = lr2;
            }
            for o in agent.critic_opts_mut() {
                o.lr = lr2;
            }
        }
        let b = pool.sample(batch, &mut rng).unwrap();
        agent.update(&b).unwrap();
    }
    let secs = t0.elapsed().as_secs_f64();
    let (mean, cov) = policy_moments(&agent, 4096);
    (mean, cov, secs)
}

#[test]
#[ignore]
fn lab_qam_beta_boost() {
    println!("--- linear tau=1 T=20 b64 K4 beta-lr 3e-3, main 1e-3 -> 3e-4@4500, 6000 steps ---");
    for seed in [0u64, 1, 2, 3] {
        let (mean, cov, secs) = run_qam_beta_boost(
            vec![1.0, 0.0], vec![0.0, 0.0], 1.0, 20, 64, 4, 6000, 3e-3, 1e-3, 3e-4, 4500, seed, true,
        );
        println!(
            "seed {seed}: {:.0}s mean ({:.3},{:.3}) var ({:.3},{:.3})",
            secs, mean[0], mean[1], cov[0][0], cov[1][1]
        );
    }
    println!("--- tau=2 T=32 no boundary clip ---");
    let (mean, cov, secs) = run_qam_beta_boost(
        vec![1.0, 0.0], vec![0.0, 0.0], 2.0, 32, 64, 4, 6000, 3e-3, 1e-3, 3e-4, 4500, 0, false,
    );
    println!(
        "{:.0}s mean ({:.3},{:.3}) var ({:.3},{:.3})",
        secs, mean[0], mean[1], cov[0][0], cov[1][1]
    );
}
