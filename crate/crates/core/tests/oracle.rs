mod common;

use common::*;
use dspd::model::{verify_factorization, CmarlModel, InitialSpec, TableModel, TableModelSpec};
use dspd::oracle::{
    box_ball_linmax, gradient_error_bound, FospBoxes, Oracle, DEFAULT_MU_MAX, DEFAULT_SIZE_CAP,
};
use dspd::policy::CoupledSoftmax;
use dspd::Error;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn setup(name: &str, kappa_p: usize) -> (TableModel, CoupledSoftmax) {
    let m = fixture(name);
    let p = CoupledSoftmax::for_model(&m, kappa_p).unwrap();
    (m, p)
}

#[test]
fn fixtures_factorize() {
    for name in FIXTURES {
        assert!(verify_factorization(&fixture(name), DEFAULT_SIZE_CAP).unwrap());
    }
}

#[test]
fn visitation_matches_power_series() {
    let mut r = rng(1);
    for name in FIXTURES {
        let (m, p) = setup(name, 1);
        let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
        let theta = random_theta(&mut r, m.num_agents(), p.dim(), 1.0);
        let sol = o.solve(&theta, &vec![0.0; m.num_agents()]).unwrap();
        assert!(sol.residual < 1e-12);
        let series = o.visitation_power_series(&theta, 200).unwrap();
        // Tail of the series is γ^201 ≈ 6e-10.
        assert!(max_abs_diff(&sol.d, &series) < 1e-9);
        assert!((sol.d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((sol.xi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Bellman iteration on the joint model, independent of the linear solve.
fn q_by_iteration(o: &Oracle, pi: &[f64], r: &dyn Fn(usize) -> f64, gamma: f64) -> Vec<f64> {
    let na = o.actions().size();
    let ns = o.states().size();
    let mut q = vec![0.0; ns * na];
    for _ in 0..600 {
        let v: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| pi[s * na + a] * q[s * na + a]).sum())
            .collect();
        q = (0..ns * na)
            .map(|sa| r(sa) + gamma * o.kernel_row(sa).iter().zip(&v).map(|(k, x)| k * x).sum::<f64>())
            .collect();
    }
    q
}

#[test]
fn q_tables_agree_with_bellman_iteration_and_average() {
    let mut r = rng(2);
    for name in FIXTURES {
        let (m, p) = setup(name, 1);
        let n = m.num_agents();
        let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
        let theta = random_theta(&mut r, n, p.dim(), 1.0);
        let mu = random_mu(&mut r, n, 3.0);
        let sol = o.solve(&theta, &mu).unwrap();
        let na = o.actions().size();
        for i in 0..n {
            let reward = |sa: usize| {
                let s = o.states().decode(sa / na);
                let a = o.actions().decode(sa % na);
                let rp = m.rewards(&s, &a);
                rp.f[i] + mu[i] * rp.g[i]
            };
            let q = q_by_iteration(&o, &sol.pi, &reward, m.gamma());
            assert!(max_abs_diff(&q, &sol.q_i[i]) < 1e-9, "{name} agent {i}");
        }
        let avg: Vec<f64> = (0..o.num_pairs())
            .map(|sa| (0..n).map(|i| sol.q_i[i][sa]).sum::<f64>() / n as f64)
            .collect();
        assert!(max_abs_diff(&avg, &sol.q) < 1e-12);
    }
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let h = 1e-5;
    for name in FIXTURES {
        for kappa_p in [1, 2] {
            let (m, p) = setup(name, kappa_p);
            let n = m.num_agents();
            let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
            let theta = random_theta(&mut r, n, p.dim(), 1.0);
            let mu = random_mu(&mut r, n, 3.0);
            let sol = o.solve(&theta, &mu).unwrap();
            for i in 0..n {
                let grad = o.exact_policy_gradient(&sol, i).unwrap();
                let fd: Vec<f64> = (0..p.dim())
                    .map(|k| {
                        let mut plus = theta.clone();
                        plus[i][k] += h;
                        let mut minus = theta.clone();
                        minus[i][k] -= h;
                        let lp = o.lagrangian(&o.solve(&plus, &mu).unwrap());
                        let lm = o.lagrangian(&o.solve(&minus, &mu).unwrap());
                        (lp - lm) / (2.0 * h)
                    })
                    .collect();
                let scale = grad.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
                assert!(max_abs_diff(&grad, &fd) <= 1e-6 * scale, "{name} κp={kappa_p} agent {i}");
            }
            for i in 0..n {
                let mut up = mu.clone();
                up[i] += 0.5;
                let slope = (o.lagrangian(&o.solve(&theta, &up).unwrap()) - o.lagrangian(&sol)) / 0.5;
                assert!((slope - o.exact_dual_gradient(&sol, i)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn truncated_q_weights_are_conditional() {
    let mut r = rng(4);
    let (m, p) = setup("chain3x2", 1);
    let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
    let sol = o
        .solve(&random_theta(&mut r, 3, p.dim(), 1.0), &random_mu(&mut r, 3, 2.0))
        .unwrap();
    for kappa in 0..3 {
        for i in 0..3 {
            let t = o.truncated_q(&sol, i, kappa).unwrap();
            for w in &t.weight_sums {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }
    // With every agent in the neighborhood the truncation is the identity.
    let t = o.truncated_q(&sol, 1, 1).unwrap();
    assert_eq!(t.agents, vec![0, 1, 2]);
    let na = o.actions().size();
    for sa in 0..o.num_pairs() {
        let s = o.states().decode(sa / na);
        let a = o.actions().decode(sa % na);
        assert!((t.value_at(&s, &a) - sol.q_i[1][sa]).abs() < 1e-9);
    }
}

#[test]
fn approximate_equals_truncated_when_neighborhoods_cover_everything() {
    let mut r = rng(5);
    for name in FIXTURES {
        let (m, p) = setup(name, 2);
        let n = m.num_agents();
        let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
        let sol = o
            .solve(&random_theta(&mut r, n, p.dim(), 1.0), &random_mu(&mut r, n, 2.0))
            .unwrap();
        let kappa = n - 1;
        for i in 0..n {
            let app = o.approx_gradient_exact(&sol, i, kappa).unwrap();
            let tru = o.truncated_gradient_exact(&sol, i, kappa).unwrap();
            assert!(max_abs_diff(&app, &tru) <= 1e-10, "{name} agent {i}");
            // Every reward is in range, so g_app is the exact gradient.
            let exact = o.exact_policy_gradient(&sol, i).unwrap();
            assert!(max_abs_diff(&app, &exact) <= 1e-10);
        }
    }
}

#[test]
fn gradient_error_bound_holds() {
    let mut r = rng(6);
    for name in FIXTURES {
        for kappa_p in [1, 2] {
            let (m, p) = setup(name, kappa_p);
            let n = m.num_agents();
            let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
            let (r_f, r_g) = m.reward_bounds();
            for _ in 0..3 {
                let sol = o
                    .solve(&random_theta(&mut r, n, p.dim(), 2.0), &random_mu(&mut r, n, DEFAULT_MU_MAX))
                    .unwrap();
                for kappa in 0..3 {
                    let bound = gradient_error_bound(
                        r_f, r_g, DEFAULT_MU_MAX, p.grad_bound(), n, m.gamma(), kappa, kappa_p,
                    )
                    .unwrap();
                    for i in 0..n {
                        let app = o.approx_gradient_exact(&sol, i, kappa).unwrap();
                        let exact = o.exact_policy_gradient(&sol, i).unwrap();
                        let diff: Vec<f64> = app.iter().zip(&exact).map(|(a, b)| a - b).collect();
                        assert!(norm(&diff) <= bound);
                    }
                }
            }
        }
    }
}

#[test]
fn decay_gap_is_bounded_and_shrinks() {
    let mut r = rng(7);
    let (m, p) = setup("chain3x2", 1);
    let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
    for _ in 0..5 {
        let sol = o
            .solve(&random_theta(&mut r, 3, p.dim(), 2.0), &random_mu(&mut r, 3, DEFAULT_MU_MAX))
            .unwrap();
        for i in 0..3 {
            let gaps: Vec<_> = (0..3)
                .map(|k| o.decay_gap(&sol, i, k, DEFAULT_MU_MAX).unwrap())
                .collect();
            assert!(gaps.iter().all(|g| g.holds));
            assert!(gaps.windows(2).all(|w| w[1].gap <= w[0].gap + 1e-12));
            assert!(gaps[2].gap.abs() < 1e-12);
        }
    }
}

#[test]
fn fosp_residual_cases() {
    let (m, p) = setup("chain2x3", 1);
    let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
    let theta = vec![vec![0.0; p.dim()]; 2];
    let mu = vec![3.0, 4.0];
    let sol = o.solve(&theta, &mu).unwrap();
    let boxes = FospBoxes {
        mu_max: 10.0,
        theta_lo: -1e6,
        theta_hi: 1e6,
    };
    let f = o.fosp_residual(&sol, boxes).unwrap();
    let gmu: Vec<f64> = (0..2).map(|i| o.exact_dual_gradient(&sol, i)).collect();
    assert!((f.x - norm(&gmu)).abs() < 1e-9);
    let gth: Vec<f64> = (0..2).flat_map(|i| o.exact_policy_gradient(&sol, i).unwrap()).collect();
    assert!((f.y - norm(&gth)).abs() < 1e-9);
    assert!((f.e - f.x * f.x - f.y * f.y).abs() < 1e-12);
}

#[test]
fn linmax_matches_dense_sampling() {
    let mut r = rng(8);
    for trial in 0..6 {
        let d = 2 + trial % 2;
        let g: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let lo: Vec<f64> = (0..d).map(|_| r.random_range(-0.8..-0.05)).collect();
        let hi: Vec<f64> = (0..d).map(|_| r.random_range(0.05..0.8)).collect();
        let center = vec![0.0; d];
        let best = box_ball_linmax(&g, &center, &lo, &hi, 1.0).unwrap();
        let mut sampled = f64::NEG_INFINITY;
        // Clamped points of the unit sphere are feasible (the box holds the
        // center) and cover the sphere, the faces and the corners.
        for _ in 0..1_000_000 {
            let u: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let len = norm(&u);
            let x: Vec<f64> = (0..d).map(|k| (u[k] / len).clamp(lo[k], hi[k])).collect();
            assert!(norm(&x) <= 1.0 + 1e-12);
            sampled = sampled.max(g.iter().zip(&x).map(|(a, b)| a * b).sum());
        }
        assert!(sampled <= best + 1e-12);
        assert!(best - sampled < 1e-3, "trial {trial}: {best} vs {sampled}");
    }
}

#[test]
fn size_cap_and_zero_visitation_refusals() {
    let (m, p) = setup("chain3x2", 1);
    assert!(matches!(Oracle::new(&m, &p, 4), Err(Error::Refused(_))));

    // A single agent pinned to state 0 never visits state 1.
    let spec = TableModelSpec {
        name: "pinned".into(),
        states: vec![2],
        actions: vec![2],
        env_edges: vec![],
        gamma: 0.9,
        thresholds: vec![0.0],
        reward_bounds: None,
        initial: InitialSpec::Table(vec![1.0, 0.0]),
        kernels: vec![vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]; 2]],
        f: vec![vec![vec![1.0, 0.0], vec![0.0, 0.0]]],
        g: vec![vec![vec![0.0; 2]; 2]],
    };
    let m = TableModel::from_spec(spec).unwrap();
    let p = CoupledSoftmax::for_model(&m, 1).unwrap();
    let o = Oracle::new(&m, &p, DEFAULT_SIZE_CAP).unwrap();
    let sol = o.solve(&[vec![0.0; p.dim()]], &[0.0]).unwrap();
    assert!(matches!(o.truncated_q(&sol, 0, 0), Err(Error::Refused(_))));
}
