//! The training loop: rollouts, batch advantages, the actor and critic-stack
//! updates, deterministic evaluation and communication-overhead accounting.
//!
//! The value path for one joint observation is
//! `o → V⁽ⁱ⁾(o⁽ⁱ⁾) per agent → SGNN → v_agg → mixer(v_agg, s) → V_tot`.
//! The actor loss treats the advantage as a constant; the critic loss
//! `½A²` differentiates through every `V_tot` that appears in `A`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSpec, Probability, ShiftVariant};
use crate::linalg::Matrix;
use crate::nn::{self, Adam, AdamConfig, ParamStore, Tape};
use crate::ppo::{self, AgentNets, NetShape, PolicyOutput};
use crate::rng::{self, derive_seed, SimRng, Stream};
use crate::sgnn::{self, FilterBank, Readout, SgnnOutput};
use crate::traffic::{ScenarioConfig, World};
use crate::vmix::{MixForward, Mixer, MixerShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnnConfig {
    /// Filter count `F`.
    pub filters: usize,
    /// Filter order `K`.
    pub order: usize,
    /// RES keep probability.
    pub p: Probability,
    pub variant: ShiftVariant,
    pub readout: Readout,
}

impl Default for SgnnConfig {
    fn default() -> Self {
        SgnnConfig {
            filters: 32,
            order: 3,
            p: Probability::new(0.7).expect("0.7 is a probability"),
            variant: ShiftVariant::AdjacencyPlusIdentity,
            readout: Readout::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    /// Mixing width `C`.
    pub width: usize,
    pub hyper_hidden: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            width: 32,
            hyper_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sgnn: SgnnConfig,
    pub mixer: MixerConfig,
    pub nets: NetShape,
    /// Communication graph over the agents; the complete graph when absent.
    pub graph: Option<GraphSpec>,
}

/// How the bootstrap value is discounted in the batch advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapDiscount {
    /// `γ^{|B|−j}`: the last sample adds `V_tot(o_{|B|+1})` undiscounted.
    #[default]
    AsWritten,
    /// `γ^{|B|−j+1}`: the usual one-step-shifted n-step return.
    OneStepShifted,
}

impl BootstrapDiscount {
    /// Exponent for sample `j` (0-based) of a batch of `len` samples.
    fn exponent(self, j: usize, len: usize) -> i32 {
        let base = (len - 1 - j) as i32;
        match self {
            BootstrapDiscount::AsWritten => base,
            BootstrapDiscount::OneStepShifted => base + 1,
        }
    }
}

/// Advantage used by the actor loss in epochs after the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Recomputed every epoch from freshly sampled `V_tot`.
    #[default]
    Recompute,
    /// Computed once per update round and reused.
    Freeze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_episode: usize,
    pub n_batch: usize,
    pub n_epoch: usize,
    pub gamma: f64,
    /// Clip constant `ε`.
    pub epsilon: f64,
    pub seed: u64,
    /// Evaluate after every this many episodes; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub advantages: AdvantageMode,
    pub bootstrap: BootstrapDiscount,
    /// Federated averaging period, used only for overhead reporting.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_episode: 300,
            n_batch: 256,
            n_epoch: 4,
            gamma: 0.99,
            epsilon: 0.2,
            seed: 0,
            eval_every: 10,
            eval_episodes: 5,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            advantages: AdvantageMode::Recompute,
            bootstrap: BootstrapDiscount::AsWritten,
            tau: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("epsilon", format!("must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.n_batch == 0 {
            return Err(Error::param("n_batch", "must be positive"));
        }
        if self.n_epoch == 0 {
            return Err(Error::param("n_epoch", "must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.actor_lr.is_finite()) {
            return Err(Error::param("actor_lr", "must be positive"));
        }
        if !(self.critic_lr > 0.0 && self.critic_lr.is_finite()) {
            return Err(Error::param("critic_lr", "must be positive"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::param("eval_episodes", "must be positive when evaluation is enabled"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        Ok(())
    }
}

/// Shift sequences for one SGNN evaluation: per filter, `K` matrices.
pub type Shifts = Vec<Vec<Matrix>>;

/// Actors, critics, SGNN and mixer with all parameters in one store.
///
/// Store groups: `actor/i` and `critic/i` for each agent, then `sgnn` and
/// `mixer`.
#[derive(Debug, Clone)]
pub struct Model {
    agents: usize,
    nets: AgentNets,
    bank: FilterBank,
    mixer: Mixer,
    graph: Graph,
    store: ParamStore,
    actors: Vec<Range<usize>>,
    critics: Vec<Range<usize>>,
    sgnn: Range<usize>,
    mix: Range<usize>,
}

/// Recorded value path for one joint observation.
struct ValueTrace {
    v_tot: f64,
    critic_tapes: Vec<Tape>,
    sgnn: SgnnOutput,
    mix: MixForward,
}

impl Model {
    /// Builds a model for the scenario and initializes its parameters from
    /// the root seed.
    pub fn new(cfg: &ModelConfig, scenario: &ScenarioConfig, seed: u64) -> Result<Self> {
        let mut model = Self::empty(cfg, scenario)?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut values = model.store.values().to_vec();
        for r in &model.actors {
            model.nets.init_actor(&mut values[r.clone()], &mut rng);
        }
        for r in &model.critics {
            model.nets.init_critic(&mut values[r.clone()], &mut rng);
        }
        model.bank.init_params(&mut values[model.sgnn.clone()], &model.graph, &mut rng);
        model.mixer.init_params(&mut values[model.mix.clone()], &mut rng);
        model.store.values_mut().copy_from_slice(&values);
        Ok(model)
    }

    /// Rebuilds a model around stored parameters, checking the layout.
    pub fn with_store(cfg: &ModelConfig, scenario: &ScenarioConfig, mut store: ParamStore) -> Result<Self> {
        let mut model = Self::empty(cfg, scenario)?;
        store.finish_load()?;
        if store.layout() != model.store.layout() {
            return Err(Error::param("checkpoint", "parameter layout does not match the model configuration"));
        }
        model.store = store;
        Ok(model)
    }

    fn empty(cfg: &ModelConfig, scenario: &ScenarioConfig) -> Result<Self> {
        scenario.validate()?;
        let agents = scenario.agents;
        if agents == 0 {
            return Err(Error::param("agents", "a model needs at least one agent"));
        }
        let graph = match &cfg.graph {
            Some(spec) => Graph::from_spec(spec)?,
            None => Graph::complete(agents)?,
        };
        if graph.n_vertices() != agents {
            return Err(Error::dim("graph vertices", agents, graph.n_vertices()));
        }
        let half_range = 0.5 * (scenario.accel_max - scenario.accel_min);
        let nets = AgentNets::new(scenario.obs_dim(), cfg.nets, 0.5 * half_range)?;
        let s = &cfg.sgnn;
        let bank = FilterBank::new(s.filters, s.order, s.variant, s.p, s.readout)?;
        let mixer = Mixer::new(MixerShape {
            state_dim: scenario.state_dim(),
            agents,
            width: cfg.mixer.width,
            hyper_hidden: cfg.mixer.hyper_hidden,
        })?;
        let mut store = ParamStore::new();
        let actors = (0..agents)
            .map(|i| store.add_group(format!("actor/{i}"), nets.actor_param_count()))
            .collect();
        let critics = (0..agents)
            .map(|i| store.add_group(format!("critic/{i}"), nets.critic_param_count()))
            .collect();
        let sgnn = store.add_group("sgnn", bank.param_count());
        let mix = store.add_group("mixer", mixer.param_count());
        Ok(Model {
            agents,
            nets,
            bank,
            mixer,
            graph,
            store,
            actors,
            critics,
            sgnn,
            mix,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn nets(&self) -> &AgentNets {
        &self.nets
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters held by one agent: its actor plus its critic.
    pub fn n_para(&self) -> usize {
        self.nets.actor_param_count() + self.nets.critic_param_count()
    }

    pub fn actor_ranges(&self) -> &[Range<usize>] {
        &self.actors
    }

    /// Critics, SGNN and mixer: everything the critic loss trains.
    pub fn critic_stack_ranges(&self) -> Vec<Range<usize>> {
        let mut r = self.critics.clone();
        r.push(self.sgnn.clone());
        r.push(self.mix.clone());
        r
    }

    pub fn sgnn_range(&self) -> Range<usize> {
        self.sgnn.clone()
    }

    pub fn mixer_range(&self) -> Range<usize> {
        self.mix.clone()
    }

    /// Actions and log-probabilities for every slot.
    pub fn act(&self, obs: &[Vec<f64>], rng: &mut SimRng, deterministic: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        self.act_with(self.store.values(), obs, rng, deterministic)
    }

    fn act_with(&self, params: &[f64], obs: &[Vec<f64>], rng: &mut SimRng, deterministic: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.agents {
            return Err(Error::dim("joint observation", self.agents, obs.len()));
        }
        let mut actions = Vec::with_capacity(self.agents);
        let mut logps = Vec::with_capacity(self.agents);
        for (i, o) in obs.iter().enumerate() {
            let (a, lp) = ppo::act(&self.nets, &params[self.actors[i].clone()], o, rng, deterministic)?;
            actions.push(a);
            logps.push(lp);
        }
        Ok((actions, logps))
    }

    /// Per-agent log-probabilities of the given actions under `params`.
    pub fn log_probs(&self, params: &[f64], obs: &[Vec<f64>], actions: &[f64]) -> Result<Vec<f64>> {
        obs.iter()
            .zip(actions)
            .enumerate()
            .map(|(i, (o, &a))| Ok(self.nets.policy(&params[self.actors[i].clone()], o)?.log_prob(a)))
            .collect()
    }

    /// Individual critic values `V⁽ⁱ⁾(o⁽ⁱ⁾)`.
    pub fn individual_values(&self, params: &[f64], obs: &[Vec<f64>]) -> Result<Vec<f64>> {
        obs.iter()
            .enumerate()
            .map(|(i, o)| self.nets.value(&params[self.critics[i].clone()], o))
            .collect()
    }

    pub fn sample_shifts(&self, rng: &mut SimRng) -> Shifts {
        self.bank.sample_shifts(&self.graph, rng)
    }

    /// `V_tot` for one joint observation with freshly sampled shifts.
    pub fn total_value(&self, obs: &[Vec<f64>], state: &[f64], rng: &mut SimRng) -> Result<f64> {
        let shifts = self.sample_shifts(rng);
        self.value_trace(self.store.values(), obs, state, shifts).map(|t| t.v_tot)
    }

    fn value_trace(&self, params: &[f64], obs: &[Vec<f64>], state: &[f64], shifts: Shifts) -> Result<ValueTrace> {
        if obs.len() != self.agents {
            return Err(Error::dim("joint observation", self.agents, obs.len()));
        }
        let mut v = Vec::with_capacity(self.agents);
        let mut critic_tapes = Vec::with_capacity(self.agents);
        for (i, o) in obs.iter().enumerate() {
            let (value, tape) = self.nets.value_forward(&params[self.critics[i].clone()], o)?;
            v.push(value);
            critic_tapes.push(tape);
        }
        let sgnn = sgnn::sgnn_forward_with_shifts(&self.bank, &params[self.sgnn.clone()], &v, shifts)?;
        let mix = self.mixer.forward(&params[self.mix.clone()], &sgnn.v_agg, state)?;
        Ok(ValueTrace {
            v_tot: mix.v_tot,
            critic_tapes,
            sgnn,
            mix,
        })
    }

    fn value_backward(&self, params: &[f64], trace: ValueTrace, upstream: f64, grads: &mut [f64]) -> Result<()> {
        let dv_agg = self
            .mixer
            .backward(&params[self.mix.clone()], trace.mix, upstream, &mut grads[self.mix.clone()])?;
        let dv = sgnn::sgnn_backward(
            &self.bank,
            &params[self.sgnn.clone()],
            trace.sgnn,
            &dv_agg,
            &mut grads[self.sgnn.clone()],
        )?;
        for (i, tape) in trace.critic_tapes.into_iter().enumerate() {
            let r = self.critics[i].clone();
            nn::backward(self.nets.critic_spec(), &params[r.clone()], tape, &[dv[i]], &mut grads[r])?;
        }
        Ok(())
    }

    /// Both losses of one epoch pass for fixed shifts.
    ///
    /// `shifts` holds one draw per sample plus one for the bootstrap
    /// observation (ignored when the batch terminated). When `grads` is
    /// given, `∂L_actor/∂θ` (advantages held constant) and
    /// `∂L_critic/∂(φ, η, ω)` are accumulated into it; the two land in
    /// disjoint ranges.
    pub fn losses(&self, params: &[f64], input: &LossInput<'_>, shifts: Vec<Shifts>, grads: Option<&mut [f64]>) -> Result<LossReport> {
        let batch = input.batch;
        let len = batch.samples.len();
        if len == 0 {
            return Err(Error::EmptyBatch);
        }
        if shifts.len() != len + 1 {
            return Err(Error::dim("epoch shift draws", len + 1, shifts.len()));
        }
        if input.logp_old.len() != len {
            return Err(Error::dim("old log-probabilities", len, input.logp_old.len()));
        }
        let mut shifts = shifts.into_iter();
        let mut traces = Vec::with_capacity(len);
        for sample in &batch.samples {
            let draw = shifts.next().expect("length checked");
            traces.push(self.value_trace(params, &sample.obs, &sample.state, draw)?);
        }
        let boot = if batch.done {
            None
        } else {
            let next = batch.next.as_ref().ok_or(Error::MissingBootstrap)?;
            let draw = shifts.next().expect("length checked");
            Some(self.value_trace(params, &next.obs, &next.state, draw)?)
        };
        let v_tot: Vec<f64> = traces.iter().map(|t| t.v_tot).collect();
        let rewards: Vec<f64> = batch.samples.iter().map(|s| s.reward).collect();
        let advantages = compute_advantages(
            &rewards,
            &v_tot,
            boot.as_ref().map(|b| b.v_tot),
            input.gamma,
            batch.done,
            input.discount,
        )?;
        let actor_adv = match input.actor_advantages {
            Some(a) if a.len() != len => return Err(Error::dim("frozen advantages", len, a.len())),
            Some(a) => a,
            None => &advantages[..],
        };
        let scale = 1.0 / len as f64;

        let mut actor_loss = 0.0;
        let mut ratios = Vec::with_capacity(len);
        let mut policy_traces: Vec<Vec<Option<(PolicyOutput, Tape)>>> = Vec::with_capacity(len);
        for (j, sample) in batch.samples.iter().enumerate() {
            let mut new = Vec::new();
            let mut old = Vec::new();
            let mut row = Vec::with_capacity(self.agents);
            for i in 0..self.agents {
                if !sample.active[i] {
                    row.push(None);
                    continue;
                }
                let (pi, tape) = self.nets.policy_forward(&params[self.actors[i].clone()], &sample.obs[i])?;
                new.push(pi.log_prob(sample.actions[i]));
                old.push(input.logp_old[j][i]);
                row.push(Some((pi, tape)));
            }
            let (rho, d_rho) = ppo::joint_ratio_with_grad(&new, &old)?;
            actor_loss += ppo::actor_loss(rho, actor_adv[j], input.epsilon) * scale;
            ratios.push((rho, d_rho));
            policy_traces.push(row);
        }
        let critic_loss: f64 = advantages.iter().map(|&a| ppo::critic_loss(a)).sum::<f64>() * scale;
        if !actor_loss.is_finite() || !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss (actor {actor_loss}, critic {critic_loss})"
            )));
        }

        if let Some(grads) = grads {
            if grads.len() != params.len() {
                return Err(Error::dim("gradient buffer", params.len(), grads.len()));
            }
            for (j, row) in policy_traces.into_iter().enumerate() {
                let (rho, d_rho) = ratios[j];
                let up = ppo::actor_loss_grad(rho, actor_adv[j], input.epsilon) * d_rho * scale;
                if up == 0.0 {
                    continue;
                }
                for (i, slot) in row.into_iter().enumerate() {
                    if let Some((pi, tape)) = slot {
                        let r = self.actors[i].clone();
                        let a = batch.samples[j].actions[i];
                        self.nets
                            .log_prob_backward(&params[r.clone()], pi, tape, a, up, &mut grads[r])?;
                    }
                }
            }
            let mut boot_up = 0.0;
            for (j, trace) in traces.into_iter().enumerate() {
                let a = advantages[j];
                self.value_backward(params, trace, -a * scale, grads)?;
                boot_up += a * input.gamma.powi(input.discount.exponent(j, len)) * scale;
            }
            if let Some(b) = boot {
                self.value_backward(params, b, boot_up, grads)?;
            }
        }
        Ok(LossReport {
            actor_loss,
            critic_loss,
            advantages,
            v_tot,
            ratios: ratios.into_iter().map(|(r, _)| r).collect(),
        })
    }
}

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub actions: Vec<f64>,
    /// Behaviour log-probabilities at collection time.
    pub logp: Vec<f64>,
    /// Slots occupied by a vehicle; empty slots are left out of the ratio.
    pub active: Vec<bool>,
    pub reward: f64,
}

/// Observation following the last sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NextObservation {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
}

/// Time-ordered transitions of one update round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub samples: Vec<Transition>,
    pub next: Option<NextObservation>,
    /// The episode ended with the last sample.
    pub done: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Steps `world` with stochastic actions until `max_len` transitions are
/// stored or the episode ends.
pub fn collect_batch(model: &Model, world: &mut World, rng: &mut SimRng, max_len: usize) -> Result<Batch> {
    let mut batch = Batch::default();
    if world.is_done() {
        return Ok(batch);
    }
    let mut obs = world.observations();
    let mut state = world.global_state();
    while batch.len() < max_len && !world.is_done() {
        let active = world.active_slots();
        let (actions, logp) = model.act(&obs, rng, false)?;
        let r = world.step(&actions)?;
        batch.samples.push(Transition {
            obs: core::mem::replace(&mut obs, r.observations),
            state: core::mem::replace(&mut state, r.state),
            actions,
            logp,
            active,
            reward: r.reward,
        });
        batch.done = r.done;
    }
    if !batch.done {
        batch.next = Some(NextObservation { obs, state });
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub batch: &'a Batch,
    /// `log π_θold` per sample and agent.
    pub logp_old: &'a [Vec<f64>],
    pub gamma: f64,
    pub epsilon: f64,
    pub discount: BootstrapDiscount,
    /// Advantages for the actor loss in place of the freshly computed ones.
    pub actor_advantages: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub advantages: Vec<f64>,
    pub v_tot: Vec<f64>,
    pub ratios: Vec<f64>,
}

/// `A_j = Σ_{k≥j} γ^{k−j} r_k + (1−done)·γ^e·V_tot(o_{|B|+1}) − V_tot(o_j)`
/// with `e` chosen by `discount`.
pub fn compute_advantages(
    rewards: &[f64],
    v_tot: &[f64],
    bootstrap: Option<f64>,
    gamma: f64,
    done: bool,
    discount: BootstrapDiscount,
) -> Result<Vec<f64>> {
    let len = rewards.len();
    if len == 0 {
        return Err(Error::EmptyBatch);
    }
    if v_tot.len() != len {
        return Err(Error::dim("V_tot values", len, v_tot.len()));
    }
    let boot = if done {
        0.0
    } else {
        bootstrap.ok_or(Error::MissingBootstrap)?
    };
    let mut out = vec![0.0; len];
    let mut ret = 0.0;
    for j in (0..len).rev() {
        ret = rewards[j] + gamma * ret;
        let tail = if done { 0.0 } else { gamma.powi(discount.exponent(j, len)) * boot };
        out[j] = ret + tail - v_tot[j];
    }
    Ok(out)
}

/// `U = (1/L) Σ r_t`, dividing by the episode cap even after an early end.
pub fn utility(rewards: &[f64], episode_len: usize) -> f64 {
    rewards.iter().sum::<f64>() / episode_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverheadMethod {
    Svmix,
    Firl,
}

/// Values transmitted per update round: `N·N_para/τ` for federated
/// averaging, `N·N_epoch·N_batch` for SVMIX.
pub fn comm_overhead(method: OverheadMethod, n: usize, n_para: usize, n_epoch: usize, n_batch: usize, tau: f64) -> f64 {
    match method {
        OverheadMethod::Firl => (n * n_para) as f64 / tau,
        OverheadMethod::Svmix => (n * n_epoch * n_batch) as f64,
    }
}

/// Reference trigger trace: for each episode, the steps (1-based) at which
/// an update round fires given how long each episode lasted.
pub fn update_schedule(episode_lengths: &[usize], n_batch: usize) -> Vec<Vec<usize>> {
    episode_lengths
        .iter()
        .map(|&len| {
            let mut fired = Vec::new();
            let mut counter = 0;
            for t in 1..=len {
                counter += 1;
                if counter == n_batch || t == len {
                    fired.push(t);
                    counter = 0;
                }
            }
            fired
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub collisions: usize,
}

impl EvalStats {
    fn from_utilities(u: &[f64], collisions: usize) -> Self {
        let n = u.len() as f64;
        let mean = u.iter().sum::<f64>() / n;
        let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        EvalStats {
            mean,
            std: var.sqrt(),
            episodes: u.len(),
            collisions,
        }
    }
}

/// Runs one episode with `policy` choosing the joint action and returns its
/// rewards and whether it ended in a collision.
fn rollout(
    scenario: &ScenarioConfig,
    env_seed: u64,
    mut policy: impl FnMut(&World, &[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, bool)> {
    let mut world = World::new(scenario.clone(), env_seed)?;
    let mut obs = world.observations();
    let mut rewards = Vec::with_capacity(scenario.episode_len);
    while !world.is_done() {
        let actions = policy(&world, &obs)?;
        let r = world.step(&actions)?;
        rewards.push(r.reward);
        obs = r.observations;
    }
    Ok((rewards, world.collided()))
}

/// Deterministic-policy utility over `episodes` evaluation episodes.
/// Evaluation episode `k` always uses the same environment seed.
pub fn evaluate(model: &Model, scenario: &ScenarioConfig, episodes: usize, seed: u64) -> Result<EvalStats> {
    let mut rng = rng::stream(seed, Stream::Eval, 0);
    let mut u = Vec::with_capacity(episodes);
    let mut collisions = 0;
    for k in 0..episodes {
        let env_seed = derive_seed(seed, Stream::Eval, k as u64 + 1);
        let (rewards, crashed) = rollout(scenario, env_seed, |_, obs| model.act(obs, &mut rng, true).map(|(a, _)| a))?;
        collisions += crashed as usize;
        u.push(utility(&rewards, scenario.episode_len));
    }
    Ok(EvalStats::from_utilities(&u, collisions))
}

/// Utility of uniformly random accelerations, on the evaluation seeds.
pub fn evaluate_random(scenario: &ScenarioConfig, episodes: usize, seed: u64) -> Result<EvalStats> {
    let mut rng = rng::stream(seed, Stream::Policy, 1);
    let (lo, hi) = (scenario.accel_min, scenario.accel_max);
    let mut u = Vec::with_capacity(episodes);
    let mut collisions = 0;
    for k in 0..episodes {
        let env_seed = derive_seed(seed, Stream::Eval, k as u64 + 1);
        let (rewards, crashed) = rollout(scenario, env_seed, |_, obs| {
            Ok(obs.iter().map(|_| rng.random_range(lo..=hi)).collect())
        })?;
        collisions += crashed as usize;
        u.push(utility(&rewards, scenario.episode_len));
    }
    Ok(EvalStats::from_utilities(&u, collisions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based.
    pub episode: usize,
    pub train_return: f64,
    pub steps: usize,
    pub collided: bool,
    pub eval: Option<EvalStats>,
    /// Mean over this episode's epoch passes.
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub updates: usize,
    /// Steps at which update rounds fired.
    pub update_steps: Vec<usize>,
    pub clamped_actions: u64,
}

/// Hooks for the caller to persist progress.
pub trait Observer {
    fn episode(&mut self, _metrics: &EpisodeMetrics, _model: &Model) -> Result<()> {
        Ok(())
    }

    /// Called once when training stops on an error, before it is returned.
    fn abort(&mut self, _model: &Model, _error: &Error) {}
}

impl Observer for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub episodes: Vec<EpisodeMetrics>,
    pub updates: usize,
}

#[derive(Debug, Clone, Default)]
struct LossTotals {
    actor: f64,
    critic: f64,
    passes: usize,
}

pub struct Trainer {
    scenario: ScenarioConfig,
    cfg: TrainConfig,
    model: Model,
    actor_opt: Adam,
    critic_opt: Adam,
    policy_rng: SimRng,
    sgnn_rng: SimRng,
    updates: usize,
    episode: usize,
}

impl Trainer {
    pub fn new(scenario: ScenarioConfig, model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, &scenario, cfg.seed)?;
        Ok(Self::with_model(scenario, model, cfg))
    }

    pub fn with_model(scenario: ScenarioConfig, model: Model, cfg: TrainConfig) -> Self {
        let adam = |lr| AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        Trainer {
            actor_opt: Adam::new(adam(cfg.actor_lr), model.actor_ranges().to_vec()),
            critic_opt: Adam::new(adam(cfg.critic_lr), model.critic_stack_ranges()),
            policy_rng: rng::stream(cfg.seed, Stream::Policy, 0),
            sgnn_rng: rng::stream(cfg.seed, Stream::Sgnn, 0),
            updates: 0,
            episode: 0,
            scenario,
            cfg,
            model,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Runs the remaining episodes up to `n_episode`.
    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<TrainSummary> {
        let mut episodes = Vec::new();
        while self.episode < self.cfg.n_episode {
            let m = match self.run_episode() {
                Ok(m) => m,
                Err(e) => {
                    observer.abort(&self.model, &e);
                    return Err(e);
                }
            };
            observer.episode(&m, &self.model)?;
            episodes.push(m);
        }
        Ok(TrainSummary {
            episodes,
            updates: self.updates,
        })
    }

    /// One training episode, with evaluation when the period is reached.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        self.episode += 1;
        let episode = self.episode;
        let env_seed = derive_seed(self.cfg.seed, Stream::Env, episode as u64);
        let mut world = World::new(self.scenario.clone(), env_seed)?;
        let mut totals = LossTotals::default();
        let mut update_steps = Vec::new();
        let mut train_return = 0.0;
        while !world.is_done() {
            let batch = collect_batch(&self.model, &mut world, &mut self.policy_rng, self.cfg.n_batch)?;
            train_return += batch.samples.iter().map(|s| s.reward).sum::<f64>();
            self.update(&batch, &mut totals)
                .map_err(|e| annotate(e, episode, world.time()))?;
            update_steps.push(world.time());
        }
        let eval = if self.cfg.eval_every > 0 && episode % self.cfg.eval_every == 0 {
            Some(evaluate(&self.model, &self.scenario, self.cfg.eval_episodes, self.cfg.seed)?)
        } else {
            None
        };
        let mean = |x: f64| (totals.passes > 0).then(|| x / totals.passes as f64);
        Ok(EpisodeMetrics {
            episode,
            train_return,
            steps: world.time(),
            collided: world.collided(),
            eval,
            actor_loss: mean(totals.actor),
            critic_loss: mean(totals.critic),
            updates: update_steps.len(),
            update_steps,
            clamped_actions: world.clamped_actions(),
        })
    }

    /// One update round: `N_epoch` passes, each with fresh RES draws, one
    /// actor step and one critic-stack step.
    fn update(&mut self, batch: &Batch, totals: &mut LossTotals) -> Result<()> {
        let theta_old = self.model.store.values().to_vec();
        let logp_old: Vec<Vec<f64>> = batch
            .samples
            .iter()
            .map(|s| self.model.log_probs(&theta_old, &s.obs, &s.actions))
            .collect::<Result<_>>()?;
        let mut frozen: Option<Vec<f64>> = None;
        for _ in 0..self.cfg.n_epoch {
            let shifts: Vec<Shifts> = (0..=batch.len())
                .map(|_| self.model.sample_shifts(&mut self.sgnn_rng))
                .collect();
            let input = LossInput {
                batch,
                logp_old: &logp_old,
                gamma: self.cfg.gamma,
                epsilon: self.cfg.epsilon,
                discount: self.cfg.bootstrap,
                actor_advantages: frozen.as_deref(),
            };
            self.model.store.zero_grad();
            let params = self.model.store.values().to_vec();
            let mut g = vec![0.0; params.len()];
            let report = self.model.losses(&params, &input, shifts, Some(&mut g))?;
            self.model.store.grads_mut().copy_from_slice(&g);
            self.actor_opt.step(&mut self.model.store)?;
            self.critic_opt.step(&mut self.model.store)?;
            totals.actor += report.actor_loss;
            totals.critic += report.critic_loss;
            totals.passes += 1;
            if self.cfg.advantages == AdvantageMode::Freeze && frozen.is_none() {
                frozen = Some(report.advantages);
            }
        }
        self.updates += 1;
        Ok(())
    }
}

fn annotate(e: Error, episode: usize, t: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at episode {episode}, step {t}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 1.0], &[2.0, 1.0], None, 1.0, true, BootstrapDiscount::AsWritten).unwrap();
        assert_abs_diff_eq!(a[0], 0.0, epsilon = 1e-15);
        let a = compute_advantages(&[0.0], &[0.0], None, 0.99, true, BootstrapDiscount::AsWritten).unwrap();
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn bootstrap_exponent_variants() {
        let r = [1.0, 1.0];
        let v = [0.5, 0.0];
        let a = compute_advantages(&r, &v, Some(2.0), 0.99, false, BootstrapDiscount::AsWritten).unwrap();
        assert_abs_diff_eq!(a[0], 1.0 + 0.99 + 0.99 * 2.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 1.0 + 2.0, epsilon = 1e-12);
        let a = compute_advantages(&r, &v, Some(2.0), 0.99, false, BootstrapDiscount::OneStepShifted).unwrap();
        assert_abs_diff_eq!(a[0], 1.0 + 0.99 + 0.99 * 0.99 * 2.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a[0], 3.45019, epsilon = 1e-4);
    }

    #[test]
    fn advantage_errors() {
        assert_eq!(
            compute_advantages(&[1.0], &[0.0], None, 0.9, false, BootstrapDiscount::AsWritten),
            Err(Error::MissingBootstrap)
        );
        assert_eq!(
            compute_advantages(&[], &[], None, 0.9, true, BootstrapDiscount::AsWritten),
            Err(Error::EmptyBatch)
        );
    }

    #[test]
    fn utility_divides_by_cap() {
        assert_abs_diff_eq!(utility(&[0.2; 10], 10), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(utility(&[0.4; 5], 10), 0.2, epsilon = 1e-15);
        assert_eq!(utility(&[0.0], 1500), 0.0);
    }

    #[test]
    fn overhead_table() {
        assert_abs_diff_eq!(comm_overhead(OverheadMethod::Firl, 7, 11653, 4, 256, 10.0), 8157.1, epsilon = 1e-9);
        assert_eq!(comm_overhead(OverheadMethod::Svmix, 7, 11653, 4, 256, 10.0), 7168.0);
        assert_eq!(comm_overhead(OverheadMethod::Svmix, 1, 1, 1, 1, 10.0), 1.0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(update_schedule(&[5], 10), vec![vec![5]]);
        assert_eq!(update_schedule(&[20], 8), vec![vec![8, 16, 20]]);
    }

    fn tiny_scenario(len: usize) -> ScenarioConfig {
        let mut s = ScenarioConfig::figure_eight_lite();
        s.episode_len = len;
        s
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            sgnn: SgnnConfig {
                filters: 3,
                order: 2,
                ..SgnnConfig::default()
            },
            mixer: MixerConfig {
                width: 4,
                hyper_hidden: 8,
            },
            nets: NetShape {
                hidden: [8, 8],
                ..NetShape::default()
            },
            graph: None,
        }
    }

    #[test]
    fn update_triggers_follow_counter() {
        let cfg = TrainConfig {
            n_episode: 1,
            n_batch: 8,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_scenario(20), &tiny_model(), cfg).unwrap();
        let m = t.run_episode().unwrap();
        assert_eq!(m.update_steps, vec![8, 16, 20]);

        let cfg = TrainConfig {
            n_episode: 1,
            n_batch: 10,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_scenario(5), &tiny_model(), cfg).unwrap();
        let s = t.run(&mut ()).unwrap();
        assert_eq!(s.updates, 1);
    }

    #[test]
    fn first_pass_ratio_is_one() {
        let scenario = tiny_scenario(6);
        let model = Model::new(&tiny_model(), &scenario, 3).unwrap();
        let batch = collect(&model, &scenario, 6);
        let logp_old: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.logp.clone()).collect();
        let mut rng = rng::stream(1, Stream::Sgnn, 0);
        let shifts = (0..=batch.len()).map(|_| model.sample_shifts(&mut rng)).collect();
        let input = LossInput {
            batch: &batch,
            logp_old: &logp_old,
            gamma: 0.99,
            epsilon: 0.2,
            discount: BootstrapDiscount::AsWritten,
            actor_advantages: None,
        };
        let rep = model.losses(model.store().values(), &input, shifts, None).unwrap();
        for r in rep.ratios {
            assert_eq!(r, 1.0);
        }
    }

    fn collect(model: &Model, scenario: &ScenarioConfig, steps: usize) -> Batch {
        let mut world = World::new(scenario.clone(), 5).unwrap();
        let mut rng = rng::stream(2, Stream::Policy, 0);
        collect_batch(model, &mut world, &mut rng, steps).unwrap()
    }

    #[test]
    fn zero_critic_stack_is_a_fixed_point() {
        let scenario = tiny_scenario(4);
        let mut model = Model::new(&tiny_model(), &scenario, 3).unwrap();
        let critic_ranges = model.critic_stack_ranges();
        for r in &critic_ranges {
            model.store_mut().values_mut()[r.clone()].fill(0.0);
        }
        let mut batch = collect(&model, &scenario, 4);
        for s in &mut batch.samples {
            s.reward = 0.0;
        }
        let logp_old: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.logp.clone()).collect();
        let mut rng = rng::stream(1, Stream::Sgnn, 0);
        let shifts = (0..=batch.len()).map(|_| model.sample_shifts(&mut rng)).collect();
        let input = LossInput {
            batch: &batch,
            logp_old: &logp_old,
            gamma: 0.99,
            epsilon: 0.2,
            discount: BootstrapDiscount::AsWritten,
            actor_advantages: None,
        };
        let params = model.store().values().to_vec();
        let mut g = vec![0.0; params.len()];
        let rep = model.losses(&params, &input, shifts, Some(&mut g)).unwrap();
        assert_eq!(rep.critic_loss, 0.0);
        let before = model.store().values().to_vec();
        model.store_mut().grads_mut().copy_from_slice(&g);
        let mut opt = Adam::new(AdamConfig::default(), critic_ranges.clone());
        opt.step(model.store_mut()).unwrap();
        for r in critic_ranges {
            assert_eq!(&model.store().values()[r.clone()], &before[r]);
        }
    }

    #[test]
    fn updates_touch_only_their_groups() {
        let scenario = tiny_scenario(6);
        let cfg = TrainConfig {
            n_episode: 1,
            n_batch: 6,
            n_epoch: 1,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(scenario, &tiny_model(), cfg).unwrap();
        let before = t.model().store().values().to_vec();
        let actor = t.model().actor_ranges().to_vec();
        let mut store = t.model.store.clone();
        let batch = {
            let m = t.model.clone();
            collect(&m, &t.scenario.clone(), 6)
        };
        let logp_old: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.logp.clone()).collect();
        let mut rng = rng::stream(9, Stream::Sgnn, 0);
        let shifts = (0..=batch.len()).map(|_| t.model.sample_shifts(&mut rng)).collect();
        let input = LossInput {
            batch: &batch,
            logp_old: &logp_old,
            gamma: 0.99,
            epsilon: 0.2,
            discount: BootstrapDiscount::AsWritten,
            actor_advantages: None,
        };
        let mut g = vec![0.0; before.len()];
        t.model.losses(&before, &input, shifts, Some(&mut g)).unwrap();
        store.grads_mut().copy_from_slice(&g);
        t.actor_opt.step(&mut store).unwrap();
        for r in t.model.critic_stack_ranges() {
            assert_eq!(&store.values()[r.clone()], &before[r]);
        }
        let moved = actor.iter().any(|r| store.values()[r.clone()] != before[r.clone()]);
        assert!(moved);
        let after_actor = store.values().to_vec();
        t.critic_opt.step(&mut store).unwrap();
        for r in actor {
            assert_eq!(&store.values()[r.clone()], &after_actor[r]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            n_episode: 2,
            n_batch: 16,
            eval_every: 1,
            eval_episodes: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || Trainer::new(tiny_scenario(30), &tiny_model(), cfg.clone()).unwrap().run(&mut ()).unwrap();
        assert_eq!(run(), run());
    }
}
