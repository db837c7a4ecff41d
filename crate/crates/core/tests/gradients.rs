//! Central-difference checks of the composed actor and critic losses.

use svmix_core::rng::{self, Stream};
use svmix_core::traffic::{ScenarioConfig, World};
use svmix_core::trainer::{collect_batch, Batch, BootstrapDiscount, LossInput, Model, ModelConfig, Shifts};

fn setup(steps: usize, terminal: bool) -> (Model, Batch) {
    let mut scenario = ScenarioConfig::figure_eight_lite();
    scenario.episode_len = if terminal { steps } else { steps + 10 };
    let mut cfg = ModelConfig::default();
    cfg.sgnn.filters = 3;
    cfg.sgnn.order = 2;
    cfg.mixer.width = 4;
    cfg.mixer.hyper_hidden = 6;
    cfg.nets.hidden = [6, 5];
    let model = Model::new(&cfg, &scenario, 17).unwrap();

    let mut world = World::new(scenario, 4).unwrap();
    let mut rng = rng::stream(5, Stream::Policy, 0);
    let mut batch = collect_batch(&model, &mut world, &mut rng, steps).unwrap();
    // Vary rewards so the advantages are not all of one sign.
    for (j, s) in batch.samples.iter_mut().enumerate() {
        s.reward += if j % 2 == 0 { 0.7 } else { -0.4 };
    }
    (model, batch)
}

fn check(terminal: bool) {
    let (model, batch) = setup(5, terminal);
    assert_eq!(batch.done, terminal);
    let mut params = model.store().values().to_vec();
    // Shift the actor away from θ_old so ratios differ from 1 but stay inside the clip band.
    for r in model.actor_ranges() {
        for x in &mut params[r.clone()] {
            *x *= 1.01;
        }
    }
    let logp_old: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.logp.clone()).collect();
    let mut rng = rng::stream(99, Stream::Sgnn, 0);
    let shifts: Vec<Shifts> = (0..=batch.len()).map(|_| model.sample_shifts(&mut rng)).collect();
    let input = LossInput {
        batch: &batch,
        logp_old: &logp_old,
        gamma: 0.9,
        epsilon: 0.2,
        discount: BootstrapDiscount::AsWritten,
        actor_advantages: None,
    };
    let mut grads = vec![0.0; params.len()];
    let base = model.losses(&params, &input, shifts.clone(), Some(&mut grads)).unwrap();
    for r in &base.ratios {
        assert!((r - 1.0).abs() < 0.2, "ratio {r} outside the clip band");
    }
    let actor_adv = base.advantages.clone();

    let sgnn = model.sgnn_range();
    let mixer = model.mixer_range();
    let mut probes: Vec<(usize, bool)> = Vec::new();
    // h_f0, h_f1, h_f2 of filter 1, then READOUT weights.
    for k in 0..3 {
        probes.push((sgnn.start + 3 + k, false));
    }
    probes.push((sgnn.end - 1, false));
    probes.push((sgnn.end - 5, false));
    for i in [0, mixer.len() / 2, mixer.len() - 1] {
        probes.push((mixer.start + i, false));
    }
    for r in model.critic_stack_ranges().iter().take(model.agents()) {
        probes.push((r.start, false));
        probes.push((r.end - 1, false));
    }
    for r in model.actor_ranges() {
        probes.push((r.start + 1, true));
        probes.push((r.end - 1, true));
    }

    let h = 1e-6;
    for (idx, actor) in probes {
        let eval = |x: f64| {
            let mut p = params.clone();
            p[idx] = x;
            // The actor loss holds the advantage fixed.
            let frozen = LossInput {
                actor_advantages: Some(&actor_adv),
                ..input
            };
            let rep = model.losses(&p, &frozen, shifts.clone(), None).unwrap();
            if actor {
                rep.actor_loss
            } else {
                rep.critic_loss
            }
        };
        let fd = (eval(params[idx] + h) - eval(params[idx] - h)) / (2.0 * h);
        let g = grads[idx];
        assert!(
            (fd - g).abs() <= 1e-5 * (1.0 + fd.abs()),
            "param {idx} (actor: {actor}): analytic {g}, numeric {fd}"
        );
    }
}

#[test]
fn composed_losses_match_finite_differences_with_bootstrap() {
    check(false);
}

#[test]
fn composed_losses_match_finite_differences_at_termination() {
    check(true);
}
