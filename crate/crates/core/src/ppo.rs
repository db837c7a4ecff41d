//! Gaussian-policy actors, state-value critics, and the clipped surrogate
//! pieces shared by every agent.

#[cfg(test)]
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, InitScheme, MlpSpec, Tape};
use crate::rng::SimRng;

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
pub const STD_FLOOR: f64 = 1e-3;
/// Bound on `|Σ log-ratio|` before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub mean: f64,
    pub std: f64,
}

impl PolicyOutput {
    pub fn log_prob(&self, a: f64) -> f64 {
        gaussian_log_prob(self.mean, self.std, a)
    }
}

pub fn gaussian_log_prob(mean: f64, std: f64, a: f64) -> f64 {
    let z = (a - mean) / std;
    -std.ln() - HALF_LN_2PI - 0.5 * z * z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: [usize; 2],
    pub activation: Activation,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            hidden: [64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Shapes of one agent's actor and critic. Every agent has its own
/// parameters but they all share these shapes.
///
/// Actor parameter slice: the mean MLP followed by one raw log-std entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    obs_dim: usize,
    actor: MlpSpec,
    critic: MlpSpec,
    init_std: f64,
}

impl AgentNets {
    pub fn new(obs_dim: usize, shape: NetShape, init_std: f64) -> Result<Self> {
        if !(init_std > STD_FLOOR) {
            return Err(Error::param("init_std", "must exceed the std floor"));
        }
        let gain = match shape.activation {
            Activation::Relu | Activation::Elu => core::f64::consts::SQRT_2,
            _ => 1.0,
        };
        let actor = MlpSpec::new(obs_dim, &shape.hidden, shape.activation, 1).with_init(InitScheme {
            hidden_gain: gain,
            output_gain: 0.01,
        });
        let critic = MlpSpec::new(obs_dim, &shape.hidden, shape.activation, 1).with_init(InitScheme {
            hidden_gain: gain,
            output_gain: 1.0,
        });
        actor.validate()?;
        Ok(AgentNets {
            obs_dim,
            actor,
            critic,
            init_std,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn actor_param_count(&self) -> usize {
        self.actor.param_count() + 1
    }

    pub fn critic_param_count(&self) -> usize {
        self.critic.param_count()
    }

    pub fn critic_spec(&self) -> &MlpSpec {
        &self.critic
    }

    pub fn init_actor(&self, params: &mut [f64], rng: &mut SimRng) {
        let m = self.actor.param_count();
        self.actor.init_params(&mut params[..m], rng);
        params[m] = self.init_std.ln();
    }

    pub fn init_critic(&self, params: &mut [f64], rng: &mut SimRng) {
        self.critic.init_params(params, rng);
    }

    fn split<'a>(&self, actor_params: &'a [f64]) -> (&'a [f64], f64) {
        let m = self.actor.param_count();
        (&actor_params[..m], actor_params[m])
    }

    pub fn policy(&self, actor_params: &[f64], o: &[f64]) -> Result<PolicyOutput> {
        self.policy_forward(actor_params, o).map(|(p, _)| p)
    }

    pub fn policy_forward(&self, actor_params: &[f64], o: &[f64]) -> Result<(PolicyOutput, Tape)> {
        let (mlp, raw_std) = self.split(actor_params);
        let (y, tape) = nn::mlp_forward(&self.actor, mlp, o)?;
        let mean = y[0];
        let std = raw_std.exp().max(STD_FLOOR);
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::NonFinite("policy output".into()));
        }
        Ok((PolicyOutput { mean, std }, tape))
    }

    /// Accumulates `upstream · ∂ log π(a|o)/∂θ` for one agent.
    pub fn log_prob_backward(
        &self,
        actor_params: &[f64],
        out: PolicyOutput,
        tape: Tape,
        a: f64,
        upstream: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        let m = self.actor.param_count();
        let (mlp, raw_std) = self.split(actor_params);
        let z = (a - out.mean) / out.std;
        let d_mean = upstream * z / out.std;
        nn::backward(&self.actor, mlp, tape, &[d_mean], &mut grads[..m])?;
        if raw_std.exp() > STD_FLOOR {
            grads[m] += upstream * (z * z - 1.0);
        }
        Ok(())
    }

    pub fn value(&self, critic_params: &[f64], o: &[f64]) -> Result<f64> {
        nn::mlp_eval(&self.critic, critic_params, o).map(|y| y[0])
    }

    pub fn value_forward(&self, critic_params: &[f64], o: &[f64]) -> Result<(f64, Tape)> {
        nn::mlp_forward(&self.critic, critic_params, o).map(|(y, t)| (y[0], t))
    }
}

/// Samples `a ~ N(μ, σ²)`, or returns `μ` in deterministic mode, together
/// with `log π(a|o)`.
pub fn act(nets: &AgentNets, actor_params: &[f64], o: &[f64], rng: &mut SimRng, deterministic: bool) -> Result<(f64, f64)> {
    if o.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    let pi = nets.policy(actor_params, o)?;
    let a = if deterministic {
        pi.mean
    } else {
        let eps: f64 = rng.sample(StandardNormal);
        pi.mean + pi.std * eps
    };
    Ok((a, pi.log_prob(a)))
}

/// Clamped log of the joint probability ratio.
fn joint_log_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<(f64, bool)> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::dim("joint ratio", logp_old.len(), logp_new.len()));
    }
    let s: f64 = logp_new.iter().zip(logp_old).map(|(n, o)| n - o).sum();
    let clamped = s.abs() > LOG_RATIO_CLAMP;
    Ok((s.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP), clamped))
}

/// `ρ = Π_i π_i(a_i|o_i; θ) / π_i(a_i|o_i; θ_old)`, computed in log space.
pub fn joint_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<f64> {
    joint_log_ratio(logp_new, logp_old).map(|(s, _)| s.exp())
}

/// `ρ` and `∂ρ/∂(Σ log π_new)`; the derivative vanishes once the log-sum
/// is clamped.
pub fn joint_ratio_with_grad(logp_new: &[f64], logp_old: &[f64]) -> Result<(f64, f64)> {
    let (s, clamped) = joint_log_ratio(logp_new, logp_old)?;
    let rho = s.exp();
    Ok((rho, if clamped { 0.0 } else { rho }))
}

pub fn clip(rho: f64, eps: f64) -> f64 {
    rho.clamp(1.0 - eps, 1.0 + eps)
}

/// Per-sample clipped surrogate `−min(ρA, clip(ρ)A)`.
pub fn actor_loss(rho: f64, advantage: f64, eps: f64) -> f64 {
    -(rho * advantage).min(clip(rho, eps) * advantage)
}

/// `∂ actor_loss / ∂ρ`: `−A` where the unclipped term is the minimum,
/// zero where the clipped constant wins.
pub fn actor_loss_grad(rho: f64, advantage: f64, eps: f64) -> f64 {
    if rho * advantage <= clip(rho, eps) * advantage {
        -advantage
    } else {
        0.0
    }
}

pub fn critic_loss(advantage: f64) -> f64 {
    0.5 * advantage * advantage
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn standard_normal_density_at_mean() {
        assert_abs_diff_eq!(gaussian_log_prob(0.0, 1.0, 0.0), -0.918_938_533_204_672_7, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_density_oracle() {
        // ln N(2; 1, 0.25) = -ln 0.5 - ½ ln 2π - (1/0.5)²/2
        let want = -(0.5f64).ln() - 0.5 * (2.0 * core::f64::consts::PI).ln() - 2.0;
        assert_abs_diff_eq!(gaussian_log_prob(1.0, 0.5, 2.0), want, epsilon = 1e-14);
        assert_abs_diff_eq!(gaussian_log_prob(1.0, 0.5, 2.0), -2.225_791_352_644_727, epsilon = 1e-12);
    }

    fn nets() -> (AgentNets, Vec<f64>) {
        let nets = AgentNets::new(6, NetShape::default(), 1.5).unwrap();
        let mut p = vec![0.0; nets.actor_param_count()];
        nets.init_actor(&mut p, &mut SimRng::seed_from_u64(2));
        (nets, p)
    }

    #[test]
    fn deterministic_act_returns_mean() {
        let (nets, p) = nets();
        let o = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let pi = nets.policy(&p, &o).unwrap();
        let (a, logp) = act(&nets, &p, &o, &mut SimRng::seed_from_u64(0), true).unwrap();
        assert_eq!(a, pi.mean);
        assert_eq!(logp, pi.log_prob(pi.mean));
        assert_abs_diff_eq!(pi.std, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn stochastic_act_reproducible() {
        let (nets, p) = nets();
        let o = [0.0; 6];
        let a = act(&nets, &p, &o, &mut SimRng::seed_from_u64(5), false).unwrap();
        let b = act(&nets, &p, &o, &mut SimRng::seed_from_u64(5), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_observation_rejected() {
        let (nets, p) = nets();
        let o = [f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(act(&nets, &p, &o, &mut SimRng::seed_from_u64(5), false).is_err());
    }

    #[test]
    fn std_floor_applies() {
        let (nets, mut p) = nets();
        let last = p.len() - 1;
        p[last] = -50.0;
        assert_eq!(nets.policy(&p, &[0.0; 6]).unwrap().std, STD_FLOOR);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(joint_ratio(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(joint_ratio(&[0.1, -0.1], &[0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(joint_ratio(&[0.2, 0.3], &[0.0, 0.0]).unwrap(), 0.5f64.exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(joint_ratio(&[0.2, 0.3], &[0.0, 0.0]).unwrap(), 1.648_721_270_700_128, epsilon = 1e-12);
        assert_eq!(joint_ratio(&[100.0], &[0.0]).unwrap(), 30f64.exp());
        assert!(joint_ratio(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn clipped_surrogate_examples() {
        assert_eq!(actor_loss(1.0, 2.0, 0.2), -2.0);
        assert_abs_diff_eq!(actor_loss(1.5, 1.0, 0.2), -1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(actor_loss(0.5, -1.0, 0.2), 0.8, epsilon = 1e-15);
        assert_eq!(actor_loss_grad(1.5, 1.0, 0.2), 0.0);
        assert_eq!(actor_loss_grad(0.5, -1.0, 0.2), 0.0);
        assert_eq!(actor_loss_grad(1.1, 3.0, 0.2), -3.0);
        assert_eq!(actor_loss_grad(1.5, -1.0, 0.2), 1.0);
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss(0.0), 0.0);
        assert_eq!(critic_loss(2.0), 2.0);
        assert_eq!(critic_loss(-3.0), 4.5);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let (nets, p) = nets();
        let o = [0.3, -0.2, 0.8, 0.1, -0.5, 0.4];
        let a = 0.7;
        let (pi, tape) = nets.policy_forward(&p, &o).unwrap();
        let mut grads = vec![0.0; p.len()];
        nets.log_prob_backward(&p, pi, tape, a, 1.0, &mut grads).unwrap();
        let h = 1e-6;
        for i in (0..p.len()).step_by(37).chain([p.len() - 1, p.len() - 2]) {
            let mut q = p.clone();
            q[i] += h;
            let fp = nets.policy(&q, &o).unwrap().log_prob(a);
            q[i] -= 2.0 * h;
            let fm = nets.policy(&q, &o).unwrap().log_prob(a);
            assert_abs_diff_eq!(grads[i], (fp - fm) / (2.0 * h), epsilon = 1e-7);
        }
    }
}
