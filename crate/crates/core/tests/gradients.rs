//! Reverse-mode gradients against central finite differences.

use bsde_core::market::{sample_paths, Measure, ModelSpec, PayoffKind};
use bsde_core::neuralnet::{init_subnet, Mode, NetConfig};
use bsde_core::solver::{
    loss_and_gradient, rollout, BsdeProblem, DriverKind, ReflectionSign, RolloutConfig, SolverParams, Variant,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn subnet_gradients_match_differences() {
    let cfg = NetConfig::default();
    let (d, batch) = (2, 4);
    for head in [false, true] {
        let net = init_subnet(d, head, &cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..batch * d).map(|_| rng.random_range(80.0..120.0)).collect();
        let up: Vec<f64> = (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up_head: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();

        let objective = |weights: &[f64], x: &[f64]| {
            let mut n = net.clone();
            n.weights.copy_from_slice(weights);
            let (out, _) = n.forward(x, batch, Mode::Train, &cfg).unwrap();
            let mut s: f64 = out.z.iter().zip(&up).map(|(a, b)| a * b).sum();
            if let Some(h) = out.head {
                s += h.iter().zip(&up_head).map(|(a, b)| a * b).sum::<f64>();
            }
            s
        };

        let mut n = net.clone();
        let (_, cache) = n.forward(&x, batch, Mode::Train, &cfg).unwrap();
        let grads = net.backward(&cache, &up, head.then_some(up_head.as_slice())).unwrap();

        let eps = 1e-4;
        for k in 0..net.weights.len() {
            let mut wp = net.weights.clone();
            let mut wm = net.weights.clone();
            wp[k] += eps;
            wm[k] -= eps;
            let fd = (objective(&wp, &x) - objective(&wm, &x)) / (2.0 * eps);
            assert!(
                rel_err(fd, grads.params[k]) < 1e-4 || (fd - grads.params[k]).abs() < 1e-9,
                "head={head} param {k}: fd {fd} vs {}",
                grads.params[k]
            );
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (objective(&net.weights, &xp) - objective(&net.weights, &xm)) / (2.0 * eps);
            assert!(
                rel_err(fd, grads.input[k]) < 1e-4 || (fd - grads.input[k]).abs() < 1e-9,
                "input {k}: fd {fd} vs {}",
                grads.input[k]
            );
        }
    }
}

#[test]
fn affine_subnet_input_gradient_is_weight_product() {
    let cfg = NetConfig::default();
    let d = 3;
    let mut net = init_subnet(d, false, &cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for layer in 0..3 {
        net.dense_weights_mut(layer).iter_mut().for_each(|w| *w = rng.random_range(0.1..1.0));
    }
    for layer in 0..4 {
        let (g, b) = net.bn_affine_mut(layer);
        g.fill(1.0);
        b.fill(0.0);
    }
    for m in &mut net.moving {
        m.mean.fill(0.0);
        m.var.fill(1.0 - cfg.bn_epsilon);
    }
    // positive inputs and weights keep every relu in its linear regime
    let batch = 3;
    let x: Vec<f64> = (0..batch * d).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut n = net.clone();
    let (_, cache) = n.forward(&x, batch, Mode::Infer, &cfg).unwrap();
    let grads = net.backward(&cache, &vec![1.0; batch * d], None).unwrap();

    let [d0, d1, d2, d3] = net.layout.dims;
    let (w1, w2, w3) = (net.dense_weights(0), net.dense_weights(1), net.dense_weights(2));
    let mut expect = vec![0.0; d0];
    for (i, e) in expect.iter_mut().enumerate() {
        for a in 0..d1 {
            for b in 0..d2 {
                for c in 0..d3 {
                    *e += w1[i * d1 + a] * w2[a * d2 + b] * w3[b * d3 + c];
                }
            }
        }
    }
    for row in grads.input.chunks_exact(d0) {
        for (g, e) in row.iter().zip(&expect) {
            assert!(rel_err(*g, *e) < 1e-12, "{g} vs {e}");
        }
    }
}

struct Instance {
    config: RolloutConfig,
    problem: BsdeProblem,
}

fn tiny(variant: Variant, driver: DriverKind, use_ae: bool) -> Instance {
    let (model, payoff, prior_rate) = match driver {
        DriverKind::Bergman => {
            let mut m = ModelSpec::uniform(1, 0.05, 0.3, 100.0, 0.5);
            m.lending_rate = 0.01;
            m.borrowing_rate = 0.06;
            m.strikes = vec![103.0];
            (m, PayoffKind::CallPortfolio, 0.01)
        }
        DriverKind::ReflectedLinear => {
            let mut m = ModelSpec::uniform(1, 0.02, 0.2, 110.0, 0.5);
            m.lending_rate = 0.03;
            m.dividend_yield = vec![0.07];
            m.strikes = vec![100.0];
            (m, PayoffKind::CallPortfolio, 0.03)
        }
        DriverKind::QuadraticGrowth => {
            let mut m = ModelSpec::uniform(1, 0.0, 0.2, 100.0, 0.25);
            m.quad_coeff = 1.0;
            m.strikes = vec![95.0, 105.0];
            (m, PayoffKind::CappedSpreadAvg, 0.0)
        }
    };
    let problem = BsdeProblem::new(model, payoff, prior_rate).unwrap();
    let mut config = RolloutConfig::new(variant, driver, 3, problem.model.maturity);
    config.batch_size = 4;
    config.use_ae = use_ae;
    config.yini = [8.0, 12.0];
    config.penalty_epsilon = 0.5;
    Instance { config, problem }
}

/// Central differences on `n_checks` random parameters of the full rollout
/// loss, each within 1e-3 relative.
fn check_rollout(inst: &Instance, seed: u64, n_checks: usize) {
    let Instance { config, problem } = inst;
    let params = SolverParams::init(problem, config);
    let batch = sample_paths(&problem.model, &problem.root, Measure::Physical, 4, 3, seed);
    let mut p = params.clone();
    let (out, grads) = loss_and_gradient(config, problem, &mut p, &batch).unwrap();
    if config.variant != Variant::Plain {
        assert!(out.diagnostics.barrier_touch_fraction > 0.0, "instance never touches the barrier");
    }
    let analytic = grads.flatten();
    let base = params.flatten();
    assert_eq!(analytic.len(), base.len());

    let loss_at = |flat: &[f64]| {
        let mut q = params.clone();
        q.assign_flat(flat).unwrap();
        rollout(config, problem, &mut q, &batch, Mode::Train).unwrap().0.loss
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, base.len(), n_checks.min(base.len()));
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for k in picks.iter().chain([0usize, 1]) {
        let mut fp = base.clone();
        let mut fm = base.clone();
        fp[k] += eps * base[k].abs().max(1.0);
        fm[k] -= eps * base[k].abs().max(1.0);
        let fd = (loss_at(&fp) - loss_at(&fm)) / (fp[k] - fm[k]);
        let err = if (fd - analytic[k]).abs() < 1e-7 { 0.0 } else { rel_err(fd, analytic[k]) };
        worst = worst.max(err);
        assert!(
            err < 1e-3,
            "{:?}/{:?} ae={} param {k}: fd {fd} vs analytic {}",
            config.variant,
            config.driver,
            config.use_ae,
            analytic[k]
        );
    }
    assert!(worst.is_finite());
}

#[test]
fn rollout_gradient_plain_bergman() {
    for ae in [true, false] {
        check_rollout(&tiny(Variant::Plain, DriverKind::Bergman, ae), 3, 60);
    }
}

#[test]
fn rollout_gradient_qg() {
    check_rollout(&tiny(Variant::Plain, DriverKind::QuadraticGrowth, true), 4, 60);
}

#[test]
fn rollout_gradient_reflected() {
    for ae in [true, false] {
        let mut inst = tiny(Variant::Reflected, DriverKind::ReflectedLinear, ae);
        check_rollout(&inst, 5, 60);
        inst.config.lateral_after_reflection = true;
        check_rollout(&inst, 6, 60);
        inst.config.reflection_sign = ReflectionSign::Add;
        check_rollout(&inst, 7, 60);
    }
}

#[test]
fn rollout_gradient_penalized() {
    let inst = tiny(Variant::Penalized, DriverKind::ReflectedLinear, true);
    check_rollout(&inst, 8, 60);
}
