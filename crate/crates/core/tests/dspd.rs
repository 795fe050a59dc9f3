mod common;

use common::*;
use dspd::dspd::{run_dspd, Dspd, DspdConfig, LearningRateMode, THETA_BATCH_OFFSET};
use dspd::graph::{DirectedGraph, TimeVaryingSchedule};
use dspd::model::{sample_categorical, CmarlModel, TableModel, TableModelSpec};
use dspd::rng::BatchStreams;
use dspd::sampling::draw_horizon;

fn single_agent() -> TableModel {
    TableModel::from_json_str(
        r#"{
        "name": "single",
        "states": [2], "actions": [2], "env_edges": [],
        "gamma": 0.8, "thresholds": [-3.0],
        "reward_bounds": {"f": 1.0, "g": 1.0},
        "initial": [0.7, 0.3],
        "kernels": [[[[0.9, 0.1], [0.2, 0.8]], [[0.6, 0.4], [0.05, 0.95]]]],
        "f": [[[0.0, 0.3], [1.0, 0.6]]],
        "g": [[[-0.2, -0.9], [-0.8, -0.1]]]
    }"#,
    )
    .unwrap()
}

fn solo_schedule() -> TimeVaryingSchedule {
    TimeVaryingSchedule::fixed(DirectedGraph::new(1, []).unwrap()).unwrap()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Single-agent projected primal-dual learner written from the update rules
/// alone: REINFORCE with geometric horizons, logits `0.9 θ[s]`.
struct Reference<'a> {
    model: &'a TableModel,
    cfg: DspdConfig,
    theta: Vec<f64>,
    mu: f64,
}

impl Reference<'_> {
    fn probs(&self, s: usize) -> Vec<f64> {
        softmax(&[0.9 * self.theta[2 * s], 0.9 * self.theta[2 * s + 1]])
    }

    /// `(s_t, a_t, f_t, g_t)` for `t = 0..=horizon`.
    fn rollout(&self, horizon: usize, st: &mut BatchStreams) -> Vec<(usize, usize, f64, f64)> {
        let spec = self.model.spec();
        let mut s = self.model.sample_initial(&mut st.transitions)[0];
        let mut out = Vec::new();
        for t in 0..=horizon {
            let a = sample_categorical(&self.probs(s), &mut st.policy);
            out.push((s, a, spec.f[0][s][a], spec.g[0][s][a]));
            if t < horizon {
                s = sample_categorical(&spec.kernels[0][s][a], &mut st.transitions);
            }
        }
        out
    }

    fn step(&mut self, m: usize) {
        let (c_theta, c_mu) = match self.cfg.learning_rate {
            LearningRateMode::Constant { eta_theta, eta_mu } => (eta_theta, eta_mu),
            _ => unreachable!(),
        };
        let gamma = self.model.gamma();
        let root = gamma.sqrt();
        let c = self.model.thresholds()[0];
        let seed = self.cfg.seed;

        let mut h_sum = 0.0;
        for k in 0..self.cfg.k_mu as u64 {
            let mut st = BatchStreams::new(seed, m as u64, k);
            let t1 = draw_horizon(1.0 - root, &mut st.horizons).unwrap();
            let traj = self.rollout(t1, &mut st);
            let disc: f64 = traj.iter().enumerate().map(|(t, x)| root.powi(t as i32) * x.3).sum();
            h_sum += disc - c;
        }
        let h = h_sum / self.cfg.k_mu as f64;
        self.mu = (self.mu - c_mu * h).clamp(0.0, self.cfg.mu_max);

        let mut g = [0.0; 4];
        for k in 0..self.cfg.k_theta as u64 {
            let mut st = BatchStreams::new(seed, m as u64, THETA_BATCH_OFFSET + k);
            let t2 = draw_horizon(1.0 - gamma, &mut st.horizons).unwrap();
            let t3 = draw_horizon(1.0 - root, &mut st.horizons).unwrap();
            let traj = self.rollout(t2 + t3, &mut st);
            let q: f64 = traj[t2..]
                .iter()
                .enumerate()
                .map(|(t, x)| root.powi(t as i32) * (x.2 + self.mu * x.3))
                .sum();
            let (s, a, _, _) = traj[t2];
            let p = self.probs(s);
            for b in 0..2 {
                let ind = if b == a { 1.0 } else { 0.0 };
                g[2 * s + b] += q / (1.0 - gamma) * 0.9 * (ind - p[b]);
            }
        }
        for (th, gk) in self.theta.iter_mut().zip(g) {
            *th = (*th + c_theta * gk / self.cfg.k_theta as f64).clamp(self.cfg.theta_lo, self.cfg.theta_hi);
        }
    }
}

#[test]
fn single_agent_matches_reference_step_for_step() {
    let model = single_agent();
    let sched = solo_schedule();
    let cfg = DspdConfig {
        iterations: 30,
        k_mu: 8,
        k_theta: 8,
        kappa: 0,
        kappa_p: 1,
        mu_max: 4.0,
        learning_rate: LearningRateMode::Constant {
            eta_theta: 0.05,
            eta_mu: 0.3,
        },
        horizon_cap_factor: 1e9,
        eval_episodes: 0,
        seed: 17,
        ..DspdConfig::default()
    };
    let mut learner = Dspd::new(cfg.clone(), &model, &sched).unwrap();
    let mut reference = Reference {
        model: &model,
        cfg,
        theta: vec![0.0; 4],
        mu: 0.0,
    };
    let mut moved = false;
    for m in 1..=30 {
        learner.step().unwrap();
        reference.step(m);
        let tol = 1e-9;
        assert!((learner.mu()[0] - reference.mu).abs() < tol, "mu at {m}");
        assert!(max_abs_diff(&learner.theta()[0], &reference.theta) < tol, "theta at {m}");
        moved |= reference.mu > 0.0 && reference.theta.iter().any(|x| x.abs() > 1e-3);
    }
    assert!(moved, "reference never left the origin");
}

#[test]
fn one_iteration_on_a_zero_reward_model() {
    let mut spec: TableModelSpec = fixture("chain2x3").spec().clone();
    for table in spec.f.iter_mut().chain(spec.g.iter_mut()) {
        table.iter_mut().flatten().for_each(|x| *x = 0.0);
    }
    spec.thresholds = vec![0.5, -2.0];
    let model = TableModel::from_spec(spec).unwrap();
    let sched = TimeVaryingSchedule::fixed(DirectedGraph::complete(2)).unwrap();
    let eta = 0.4;
    let cfg = DspdConfig {
        iterations: 1,
        k_mu: 3,
        k_theta: 3,
        learning_rate: LearningRateMode::Constant {
            eta_theta: 1.0,
            eta_mu: eta,
        },
        ..DspdConfig::default()
    };
    let run = run_dspd(&cfg, &model, &sched).unwrap();
    assert_eq!(run.records.len(), 1);
    assert!(run.theta.iter().flatten().all(|&x| x == 0.0));
    // ĥ_i = −c_i / N, so μ_i = clamp(η c_i / N).
    let n = 2.0;
    assert!((run.mu[0] - eta * 0.5 / n).abs() < 1e-15);
    assert_eq!(run.mu[1], 0.0);
    assert!((run.records[0].h_bar[0] + 0.5 / n).abs() < 1e-15);
    assert_eq!(run.records[0].g_bar_norm, 0.0);
}

#[test]
fn iterates_stay_in_their_boxes_and_rates_decrease() {
    let model = fixture("chain3x2");
    let sched = TimeVaryingSchedule::cyclic(
        vec![
            DirectedGraph::parse_edge_list(3, "1 2\n2 3").unwrap(),
            DirectedGraph::parse_edge_list(3, "3 1").unwrap(),
        ],
        2,
    )
    .unwrap();
    let cfg = DspdConfig {
        iterations: 40,
        k_mu: 4,
        k_theta: 4,
        mu_max: 0.7,
        theta_lo: -0.05,
        theta_hi: 0.08,
        learning_rate: LearningRateMode::Harmonic {
            c_theta: 5.0,
            c_mu: 20.0,
            offset: 0.0,
        },
        eval_episodes: 4,
        ..DspdConfig::default()
    };
    let run = run_dspd(&cfg, &model, &sched).unwrap();
    assert!(run.warnings.is_empty(), "{:?}", run.warnings);
    assert!(run.failure.is_none());
    let mut hit_top = false;
    for r in &run.records {
        assert!(r.mu.iter().all(|&m| (0.0..=0.7).contains(&m)));
        assert!(r.theta.iter().flatten().all(|&x| (-0.05..=0.08).contains(&x)));
        hit_top |= r.theta.iter().flatten().any(|&x| x == 0.08 || x == -0.05);
    }
    assert!(hit_top, "box never active; test is not exercising the projection");
    for w in run.records.windows(2) {
        assert!(w[1].eta_theta < w[0].eta_theta);
        assert!(w[1].eta_mu < w[0].eta_mu);
        assert_eq!(w[1].m, w[0].m + 1);
    }
}

#[test]
fn same_seed_same_records() {
    let model = fixture("chain3x2");
    let sched = TimeVaryingSchedule::fixed(DirectedGraph::bidirectional_chain(3)).unwrap();
    let cfg = DspdConfig {
        iterations: 15,
        k_mu: 5,
        k_theta: 5,
        eval_episodes: 3,
        seed: 99,
        ..DspdConfig::default()
    };
    let a = run_dspd(&cfg, &model, &sched).unwrap();
    let b = run_dspd(&cfg, &model, &sched).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.bank, b.bank);
    let c = run_dspd(&DspdConfig { seed: 100, ..cfg }, &model, &sched).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn weak_schedule_warns_but_runs() {
    let model = fixture("chain2x3");
    let sched = TimeVaryingSchedule::fixed(DirectedGraph::new(2, [(0, 1)]).unwrap()).unwrap();
    let cfg = DspdConfig {
        iterations: 2,
        k_mu: 2,
        k_theta: 2,
        eval_episodes: 0,
        ..DspdConfig::default()
    };
    let run = run_dspd(&cfg, &model, &sched).unwrap();
    assert_eq!(run.records.len(), 2);
    assert_eq!(run.warnings.len(), 1);
}

#[test]
fn bad_configs_are_rejected() {
    let model = fixture("chain2x3");
    let sched = solo_schedule();
    let err = Dspd::new(DspdConfig::default(), &model, &sched).err().unwrap();
    assert!(matches!(err, dspd::Error::Config(_)));
    let cfg = DspdConfig {
        k_mu: 0,
        kappa_p: 0,
        ..DspdConfig::default()
    };
    let errs = cfg.validate();
    assert_eq!(errs.len(), 2, "{errs:?}");
}

