//! Deterministic single-lane mixed-autonomy traffic.
//!
//! Two scenarios share one engine:
//!
//! * **Figure eight**: a closed loop of `loop_length` metres whose two lobes
//!   cross at one physical point, reached at arc positions `crossing[0]` and
//!   `crossing[1]`. Two vehicles straddling the two arc positions at the same
//!   time collide.
//! * **Merge**: an open trunk road with an on-ramp joining at
//!   `merge_position`. Ramp vehicles are tracked in trunk coordinates
//!   (`z = merge_position - ramp_length + distance travelled on the ramp`).
//!   Vehicles arrive at fixed headways and leave past `trunk_length`.
//!
//! Manned vehicles follow IDM; the figure-eight ones also yield at the
//! crossing. Every vehicle brakes at the minimum acceleration when it can no
//! longer stop behind its hazard.
//!
//! Observation layout (6 values per agent, all scaled):
//! `[v_ahead, z_ahead - z, v, z, v_behind, z_behind - z]` with speeds divided
//! by `speed_limit`, relative offsets by `obs_distance_scale` and `z` by the
//! route length. A missing neighbour contributes zeros; an empty merge slot
//! is all zeros.
//!
//! Figure-eight global state: `[v, z]` per vehicle in id order, scaled the
//! same way. Merge global state: the concatenated agent observations.

mod idm;

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng, Stream};

pub use idm::{idm_accel, IdmParams};

pub const OBS_DIM: usize = 6;

/// `x` reduced into `[0, l)`.
fn wrap(x: f64, l: f64) -> f64 {
    let r = x % l;
    let r = if r < 0.0 { r + l } else { r };
    if r >= l {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    FigureEight,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureEightGeometry {
    pub loop_length: f64,
    /// Arc positions at which the loop passes the shared crossing point.
    pub crossing: [f64; 2],
    /// Total vehicles `M`; `agents` of them are DRL-driven, interleaved.
    pub vehicles: usize,
    /// Uniform jitter (m) applied to the evenly spaced start positions.
    pub init_jitter: f64,
    /// Distance within which vehicles join the crossing order; vehicles
    /// that could not stop in time join earlier.
    pub yield_lookahead: f64,
}

impl Default for FigureEightGeometry {
    fn default() -> Self {
        // Even spacing is 400/14 m; the crossing offset sits half a spacing
        // away from a multiple of it so a uniform platoon never conflicts.
        FigureEightGeometry {
            loop_length: 400.0,
            crossing: [100.0, 100.0 + 200.0 + 200.0 / 14.0],
            vehicles: 14,
            init_jitter: 0.5,
            yield_lookahead: 80.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeGeometry {
    pub trunk_length: f64,
    pub ramp_length: f64,
    pub merge_position: f64,
    /// Length of the approach region before the merge point in which
    /// vehicles from both branches see each other.
    pub merge_zone: f64,
    /// Vehicles per hour entering the trunk.
    pub trunk_inflow: f64,
    /// Vehicles per hour entering the ramp.
    pub ramp_inflow: f64,
    /// Share of trunk arrivals designated DRL-driven.
    pub drl_fraction: f64,
    pub inflow_speed: f64,
}

impl Default for MergeGeometry {
    fn default() -> Self {
        MergeGeometry {
            trunk_length: 600.0,
            ramp_length: 150.0,
            merge_position: 400.0,
            merge_zone: 60.0,
            trunk_inflow: 2000.0,
            ramp_inflow: 100.0,
            drl_fraction: 0.25,
            inflow_speed: 10.0,
        }
    }
}

pub const MAX_TOTAL_INFLOW: f64 = 2100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Seconds per step.
    pub dt: f64,
    /// Maximum episode length `L` in steps.
    pub episode_len: usize,
    /// DRL slots `N`.
    pub agents: usize,
    pub desired_speed: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub speed_limit: f64,
    /// Safety coefficient on the following-distance penalty.
    pub alpha: f64,
    pub c1: f64,
    /// Desired following distance used by the penalty.
    pub c2: f64,
    pub vehicle_length: f64,
    /// A bumper gap below this is a collision.
    pub gap_min: f64,
    pub obs_distance_scale: f64,
    pub idm: IdmParams,
    pub figure_eight: FigureEightGeometry,
    pub merge: MergeGeometry,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::figure_eight()
    }
}

impl ScenarioConfig {
    /// 14 vehicles, 7 of them DRL-driven, 0.1 s steps, 1500-step episodes.
    pub fn figure_eight() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::FigureEight,
            dt: 0.1,
            episode_len: 1500,
            agents: 7,
            desired_speed: 20.0,
            accel_min: -3.0,
            accel_max: 3.0,
            speed_limit: 30.0,
            alpha: 0.0,
            c1: 1e-3,
            c2: 10.0,
            vehicle_length: 5.0,
            gap_min: 0.0,
            obs_distance_scale: 100.0,
            idm: IdmParams::default(),
            figure_eight: FigureEightGeometry::default(),
            merge: MergeGeometry::default(),
        }
    }

    /// A smaller loop of 8 vehicles with 4 DRL slots and 300-step episodes.
    pub fn figure_eight_lite() -> Self {
        let mut cfg = Self::figure_eight();
        cfg.agents = 4;
        cfg.episode_len = 300;
        cfg.figure_eight.vehicles = 8;
        cfg.figure_eight.loop_length = 240.0;
        cfg.figure_eight.crossing = [60.0, 60.0 + 120.0 + 15.0];
        cfg
    }

    /// 13 DRL slots, 1 s steps, 750-step episodes, inflow 2000 + 100 veh/h.
    pub fn merge() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Merge,
            dt: 1.0,
            episode_len: 750,
            agents: 13,
            accel_min: -1.5,
            accel_max: 1.5,
            alpha: 0.1,
            idm: IdmParams {
                b: 1.0,
                max_decel: 1.5,
                ..IdmParams::default()
            },
            ..Self::figure_eight()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("desired_speed", self.desired_speed),
            ("accel_max", self.accel_max),
            ("speed_limit", self.speed_limit),
            ("c1", self.c1),
            ("vehicle_length", self.vehicle_length),
            ("obs_distance_scale", self.obs_distance_scale),
            ("idm.a_max", self.idm.a_max),
            ("idm.b", self.idm.b),
            ("idm.v0", self.idm.v0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, alloc::format!("must be positive, got {v}")));
            }
        }
        if !(self.accel_min < 0.0) {
            return Err(Error::param("accel_min", "must be negative"));
        }
        if self.alpha < 0.0 || self.c2 < 0.0 {
            return Err(Error::param("alpha", "alpha and c2 must be non-negative"));
        }
        if self.episode_len == 0 {
            return Err(Error::param("episode_len", "must be positive"));
        }
        match self.kind {
            ScenarioKind::FigureEight => {
                let g = &self.figure_eight;
                if g.vehicles == 0 || self.agents > g.vehicles {
                    return Err(Error::param("figure_eight.vehicles", "need 0 < agents <= vehicles"));
                }
                if !(g.loop_length > g.vehicles as f64 * self.vehicle_length) {
                    return Err(Error::param("figure_eight.loop_length", "loop too short for its vehicles"));
                }
                let d = wrap(g.crossing[1] - g.crossing[0], g.loop_length);
                if d <= self.vehicle_length || g.loop_length - d <= self.vehicle_length {
                    return Err(Error::param("figure_eight.crossing", "crossing positions too close"));
                }
            }
            ScenarioKind::Merge => {
                let m = &self.merge;
                if self.agents == 0 {
                    return Err(Error::param("agents", "merge needs at least one DRL slot"));
                }
                if m.trunk_inflow < 0.0 || m.ramp_inflow < 0.0 || m.trunk_inflow + m.ramp_inflow > MAX_TOTAL_INFLOW {
                    return Err(Error::param("merge.inflow", "inflows must be non-negative and total at most 2100/h"));
                }
                if !(0.0..=1.0).contains(&m.drl_fraction) {
                    return Err(Error::param("merge.drl_fraction", "must lie in [0, 1]"));
                }
                if !(m.merge_position < m.trunk_length && m.ramp_length > 0.0 && m.merge_position > 0.0) {
                    return Err(Error::param("merge.merge_position", "must lie inside the trunk"));
                }
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ScenarioKind::FigureEight => 2 * self.figure_eight.vehicles,
            ScenarioKind::Merge => OBS_DIM * self.agents,
        }
    }

    fn route_length(&self) -> f64 {
        match self.kind {
            ScenarioKind::FigureEight => self.figure_eight.loop_length,
            ScenarioKind::Merge => self.merge.trunk_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Drl(usize),
    Idm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Loop,
    Trunk,
    Ramp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: u64,
    /// Front-bumper position along the route (trunk coordinates on a merge).
    pub z: f64,
    pub v: f64,
    pub controller: Controller,
    pub route: Route,
    /// Merge arrivals picked for DRL control; they take a slot when one is free.
    pub designated_drl: bool,
    /// Total distance travelled.
    pub odometer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hazard {
    gap: f64,
    speed: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: ScenarioConfig,
    vehicles: Vec<Vehicle>,
    slots: Vec<Option<u64>>,
    t: usize,
    next_id: u64,
    collided: bool,
    rng: SimRng,
    next_trunk_arrival: f64,
    next_ramp_arrival: f64,
    pending_trunk: usize,
    pending_ramp: usize,
    trunk_arrivals: u64,
    clamped_actions: u64,
    crossing_queue: Vec<(u64, usize)>,
    merge_grants: Vec<u64>,
}

impl World {
    /// Builds the initial world. The seed only drives start-position jitter
    /// (figure eight) and arrival offsets (merge).
    pub fn new(cfg: ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut world = World {
            slots: vec![None; cfg.agents],
            vehicles: Vec::new(),
            t: 0,
            next_id: 0,
            collided: false,
            rng: rng::stream(seed, Stream::Env, 0),
            next_trunk_arrival: f64::INFINITY,
            next_ramp_arrival: f64::INFINITY,
            pending_trunk: 0,
            pending_ramp: 0,
            trunk_arrivals: 0,
            clamped_actions: 0,
            crossing_queue: Vec::new(),
            merge_grants: Vec::new(),
            cfg,
        };
        match world.cfg.kind {
            ScenarioKind::FigureEight => world.place_loop(),
            ScenarioKind::Merge => {
                let mut inflow = rng::stream(seed, Stream::Inflow, 0);
                let m = &world.cfg.merge;
                if m.trunk_inflow > 0.0 {
                    world.next_trunk_arrival = inflow.random_range(0.0..1.0) * 3600.0 / m.trunk_inflow;
                }
                if m.ramp_inflow > 0.0 {
                    world.next_ramp_arrival = inflow.random_range(0.0..1.0) * 3600.0 / m.ramp_inflow;
                }
            }
        }
        Ok(world)
    }

    fn place_loop(&mut self) {
        let g = self.cfg.figure_eight.clone();
        let m = g.vehicles;
        let n = self.cfg.agents;
        let spacing = g.loop_length / m as f64;
        for k in 0..m {
            // vehicle k is DRL-driven when the running share of DRL slots ticks over
            let is_drl = (k + 1) * n / m > k * n / m;
            let jitter = if g.init_jitter > 0.0 {
                self.rng.random_range(-g.init_jitter..g.init_jitter)
            } else {
                0.0
            };
            let controller = if is_drl {
                let slot = k * n / m;
                self.slots[slot] = Some(self.next_id);
                Controller::Drl(slot)
            } else {
                Controller::Idm
            };
            self.vehicles.push(Vehicle {
                id: self.next_id,
                z: wrap(k as f64 * spacing + jitter, g.loop_length),
                v: 0.0,
                controller,
                route: Route::Loop,
                designated_drl: is_drl,
                odometer: 0.0,
            });
            self.next_id += 1;
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    /// Direct access for scripted set-ups in tests and tools.
    pub fn vehicles_mut(&mut self) -> &mut Vec<Vehicle> {
        &mut self.vehicles
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn is_done(&self) -> bool {
        self.collided || self.t >= self.cfg.episode_len
    }

    pub fn clamped_actions(&self) -> u64 {
        self.clamped_actions
    }

    /// Slot → vehicle id.
    pub fn slots(&self) -> &[Option<u64>] {
        &self.slots
    }

    pub fn active_slots(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.vehicles.iter().map(|v| v.z).collect()
    }

    pub fn velocities(&self) -> Vec<f64> {
        self.vehicles.iter().map(|v| v.v).collect()
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    // ---- topology ------------------------------------------------------

    fn loop_ahead(&self, from: f64, to: f64) -> f64 {
        wrap(to - from, self.cfg.figure_eight.loop_length)
    }

    /// Physical leader and follower on the vehicle's lane, with front-to-front
    /// distances (positive).
    fn neighbours(&self, i: usize) -> (Option<(usize, f64)>, Option<(usize, f64)>) {
        let me = &self.vehicles[i];
        match self.cfg.kind {
            ScenarioKind::FigureEight => {
                let l = self.cfg.figure_eight.loop_length;
                let mut ahead: Option<(usize, f64)> = None;
                let mut behind: Option<(usize, f64)> = None;
                for (j, other) in self.vehicles.iter().enumerate() {
                    let (da, db) = if j == i {
                        (l, l)
                    } else {
                        let d = self.loop_ahead(me.z, other.z);
                        // coincident vehicles: lower id counts as ahead
                        let d = if d == 0.0 && other.id > me.id { l } else { d };
                        (d, if d == l { 0.0 } else { l - d })
                    };
                    let db = if j != i && db == 0.0 { l } else { db };
                    if ahead.is_none_or(|(_, best)| da < best) {
                        ahead = Some((j, da));
                    }
                    if behind.is_none_or(|(_, best)| db < best) {
                        behind = Some((j, db));
                    }
                }
                (ahead, behind)
            }
            ScenarioKind::Merge => {
                let mp = self.cfg.merge.merge_position;
                let lane = |v: &Vehicle| v.route == Route::Ramp && v.z < mp;
                let mut ahead: Option<(usize, f64)> = None;
                let mut behind: Option<(usize, f64)> = None;
                for (j, other) in self.vehicles.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let d = other.z - me.z;
                    let in_front = d > 0.0 || (d == 0.0 && other.id < me.id);
                    let same_lane = lane(me) == lane(other);
                    if in_front && same_lane {
                        if ahead.is_none_or(|(_, best)| d < best) {
                            ahead = Some((j, d));
                        }
                    } else if !in_front && same_lane && behind.is_none_or(|(_, best)| -d < best) {
                        behind = Some((j, -d));
                    }
                }
                (ahead, behind)
            }
        }
    }

    /// Vehicles a driver reacts to, as (index, front-to-front distance).
    /// On a merge this adds, next to the lane leader, the nearest trunk
    /// vehicle seen from the ramp inside the merge zone, and the nearest
    /// ramp vehicle seen from the trunk when it holds a merge grant or the
    /// trunk driver can still stop comfortably behind it.
    fn control_leaders(&self, i: usize) -> Vec<(usize, f64)> {
        let ahead = if self.vehicles.len() < 2 { None } else { self.neighbours(i).0 };
        let mut leaders: Vec<(usize, f64)> = ahead.into_iter().collect();
        if self.cfg.kind != ScenarioKind::Merge {
            return leaders;
        }
        let m = &self.cfg.merge;
        let zone_start = m.merge_position - m.merge_zone;
        let me = &self.vehicles[i];
        if me.z < zone_start || me.z >= m.merge_position {
            return leaders;
        }
        let mine = self.on_ramp(me);
        let mut best: Option<(usize, f64)> = None;
        for (j, other) in self.vehicles.iter().enumerate() {
            if j == i || self.on_ramp(other) == mine || other.z < zone_start {
                continue;
            }
            let d = other.z - me.z;
            let in_front = d > 0.0 || (d == 0.0 && other.id < me.id);
            let visible = if mine {
                true
            } else {
                self.merge_granted(other) || d - self.cfg.vehicle_length >= self.stopping_distance(me.v)
            };
            if in_front && visible && best.is_none_or(|(_, b)| d < b) {
                best = Some((j, d));
            }
        }
        leaders.extend(best);
        leaders
    }

    /// Distance from the front bumper to the next crossing arc position and
    /// which of the two it is.
    fn next_crossing(&self, z: f64) -> (usize, f64) {
        let c = self.cfg.figure_eight.crossing;
        let d0 = self.loop_ahead(z, c[0]);
        let d1 = self.loop_ahead(z, c[1]);
        if d0 <= d1 {
            (0, d0)
        } else {
            (1, d1)
        }
    }

    /// Which crossing arc position (if any) the vehicle body straddles.
    fn occupies_crossing(&self, z: f64) -> Option<usize> {
        let c = self.cfg.figure_eight.crossing;
        let len = self.cfg.vehicle_length;
        (0..2).find(|&k| self.loop_ahead(c[k], z) <= len)
    }

    fn occupies_merge_point(&self, z: f64) -> bool {
        let mp = self.cfg.merge.merge_position;
        z >= mp && z - self.cfg.vehicle_length < mp
    }

    // ---- control -------------------------------------------------------

    fn stopping_distance(&self, v: f64) -> f64 {
        v * v / (2.0 * -self.cfg.accel_min)
    }

    /// Crossing branch a vehicle is approaching or occupying, if it is
    /// close enough to take part in the crossing order.
    fn crossing_claim(&self, z: f64, v: f64) -> Option<usize> {
        if let Some(b) = self.occupies_crossing(z) {
            return Some(b);
        }
        let (b, d) = self.next_crossing(z);
        let reach = self.cfg.figure_eight.yield_lookahead.max(self.stopping_distance(v) + v * self.cfg.dt);
        (d <= reach).then_some(b)
    }

    /// Crossings are served first come, first served. A vehicle keeps its
    /// place while it approaches or straddles the same arc position;
    /// newcomers join in order of arrival time, then id.
    fn update_crossing_queue(&mut self) {
        if self.cfg.kind != ScenarioKind::FigureEight {
            return;
        }
        let claims: Vec<(u64, Option<usize>, f64)> = self
            .vehicles
            .iter()
            .map(|v| {
                let eta = self.next_crossing(v.z).1 / v.v.max(1.0);
                (v.id, self.crossing_claim(v.z, v.v), eta)
            })
            .collect();
        self.crossing_queue
            .retain(|&(id, b)| claims.iter().any(|&(cid, cb, _)| cid == id && cb == Some(b)));
        let mut fresh: Vec<(u64, usize, f64)> = claims
            .iter()
            .filter_map(|&(id, b, eta)| b.map(|b| (id, b, eta)))
            .filter(|&(id, _, _)| !self.crossing_queue.iter().any(|&(q, _)| q == id))
            .collect();
        fresh.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        self.crossing_queue.extend(fresh.into_iter().map(|(id, b, _)| (id, b)));
    }

    /// The crossing point as a stopped obstacle while it is occupied from the
    /// other branch or an earlier claim from the other branch is pending.
    fn crossing_hazard(&self, i: usize) -> Option<Hazard> {
        if self.cfg.kind != ScenarioKind::FigureEight {
            return None;
        }
        let me = &self.vehicles[i];
        if self.occupies_crossing(me.z).is_some() {
            return None;
        }
        let (branch, d) = self.next_crossing(me.z);
        let other_branch = 1 - branch;
        let blocked = self
            .vehicles
            .iter()
            .any(|o| o.id != me.id && self.occupies_crossing(o.z) == Some(other_branch));
        let waiting = self
                .crossing_queue
                .iter()
                .take_while(|&&(id, _)| id != me.id)
                .any(|&(_, b)| b == other_branch)
            && self.crossing_queue.iter().any(|&(id, _)| id == me.id);
        (blocked || waiting).then_some(Hazard { gap: d, speed: 0.0 })
    }

    fn on_ramp(&self, v: &Vehicle) -> bool {
        v.route == Route::Ramp && v.z < self.cfg.merge.merge_position
    }

    /// Whether a ramp vehicle can enter the trunk now without cutting off a
    /// trunk vehicle or tailgating one.
    fn merge_is_safe(&self, i: usize) -> bool {
        let me = &self.vehicles[i];
        let len = self.cfg.vehicle_length;
        let dt = self.cfg.dt;
        let s0 = self.cfg.idm.s0;
        self.vehicles.iter().all(|o| {
            if o.id == me.id || self.on_ramp(o) {
                return true;
            }
            let d = me.z - o.z;
            let (lead, follow) = if d >= 0.0 { (me, o) } else { (o, me) };
            let room = d.abs() - len;
            room > 0.0 && room > follow.v * dt + self.stopping_distance(follow.v) - self.stopping_distance(lead.v) + s0
        })
    }

    /// Ramp vehicles wait at the end of the ramp until granted a merge. A
    /// grant is kept until the vehicle reaches the trunk, and is forced once
    /// the vehicle can no longer stop.
    fn update_merge_grants(&mut self) {
        if self.cfg.kind != ScenarioKind::Merge {
            return;
        }
        let m = &self.cfg.merge;
        self.merge_grants
            .retain(|&id| self.vehicles.iter().any(|v| v.id == id && v.route == Route::Ramp && v.z < m.merge_position));
        let mut fresh = Vec::new();
        for (i, me) in self.vehicles.iter().enumerate() {
            if !self.on_ramp(me) || self.merge_grants.contains(&me.id) {
                continue;
            }
            let gap = m.merge_position - me.z;
            let sd = self.stopping_distance(me.v);
            let reach = m.merge_zone.max(sd + me.v * self.cfg.dt + self.cfg.idm.s0);
            let cannot_stop = self.about_to_crash(i, self.cfg.accel_min, Hazard { gap, speed: 0.0 });
            if cannot_stop || (gap <= reach && self.merge_is_safe(i)) {
                fresh.push(me.id);
            }
        }
        self.merge_grants.extend(fresh);
    }

    fn merge_granted(&self, v: &Vehicle) -> bool {
        self.merge_grants.contains(&v.id)
    }

    /// End of the ramp as a stopped obstacle for ramp vehicles without a
    /// merge grant.
    fn merge_gate_hazard(&self, i: usize) -> Option<Hazard> {
        let me = &self.vehicles[i];
        if self.cfg.kind != ScenarioKind::Merge || !self.on_ramp(me) || self.merge_granted(me) {
            return None;
        }
        Some(Hazard {
            gap: self.cfg.merge.merge_position - me.z,
            speed: 0.0,
        })
    }

    fn leader_hazards(&self, i: usize) -> Vec<Hazard> {
        self.control_leaders(i)
            .into_iter()
            .map(|(j, d)| Hazard {
                gap: d - self.cfg.vehicle_length,
                speed: self.vehicles[j].v,
            })
            .collect()
    }

    /// IDM against the most restrictive hazard.
    fn idm_control(&self, i: usize) -> f64 {
        let v = self.vehicles[i].v;
        let mut hazards = self.leader_hazards(i);
        hazards.extend(self.crossing_hazard(i));
        hazards.extend(self.merge_gate_hazard(i));
        hazards
            .iter()
            .map(|h| idm_accel(&self.cfg.idm, v, h.speed, h.gap))
            .fold(idm_accel(&self.cfg.idm, v, v, f64::INFINITY), f64::min)
    }

    /// True when applying `u` leaves the vehicle unable to stop behind the
    /// hazard, assuming the hazard itself brakes as hard as allowed.
    fn about_to_crash(&self, i: usize, u: f64, h: Hazard) -> bool {
        let dt = self.cfg.dt;
        let v = self.vehicles[i].v;
        let v_next = (v + u * dt).clamp(0.0, self.cfg.speed_limit);
        let lead_next = (h.speed + self.cfg.accel_min * dt).max(0.0);
        let gap_next = h.gap + lead_next * dt - v_next * dt - self.cfg.gap_min;
        gap_next <= self.stopping_distance(v_next) - self.stopping_distance(lead_next)
    }

    fn emergency_override(&self, i: usize, u: f64) -> f64 {
        let mut hazards = self.leader_hazards(i);
        hazards.extend(self.crossing_hazard(i));
        hazards.extend(self.merge_gate_hazard(i));
        if hazards.iter().any(|&h| self.about_to_crash(i, u, h)) {
            self.cfg.accel_min
        } else {
            u
        }
    }

    // ---- merge bookkeeping ------------------------------------------------

    fn spawn(&mut self, route: Route, designated: bool) -> bool {
        let m = &self.cfg.merge;
        let z0 = match route {
            Route::Ramp => m.merge_position - m.ramp_length,
            _ => 0.0,
        };
        let leader = self
            .vehicles
            .iter()
            .filter(|o| o.route == route && o.z >= z0)
            .min_by(|a, b| a.z.total_cmp(&b.z));
        let mut v = m.inflow_speed.min(self.cfg.speed_limit);
        if let Some(l) = leader {
            v = v.min(l.v);
            let headway = self.cfg.idm.time_headway.max(self.cfg.dt);
            if l.z - z0 - self.cfg.vehicle_length < self.cfg.idm.s0 + headway * v {
                return false;
            }
        }
        self.vehicles.push(Vehicle {
            id: self.next_id,
            z: z0,
            v,
            controller: Controller::Idm,
            route,
            designated_drl: designated,
            odometer: 0.0,
        });
        self.next_id += 1;
        true
    }

    fn merge_flows(&mut self) {
        let now = self.t as f64 * self.cfg.dt;
        let m = self.cfg.merge.clone();
        while self.next_trunk_arrival <= now {
            self.pending_trunk += 1;
            self.next_trunk_arrival += 3600.0 / m.trunk_inflow;
        }
        while self.next_ramp_arrival <= now {
            self.pending_ramp += 1;
            self.next_ramp_arrival += 3600.0 / m.ramp_inflow;
        }
        if self.pending_trunk > 0 {
            let k = self.trunk_arrivals;
            let share = |k: u64| (k as f64 * m.drl_fraction + 1e-9).floor();
            let designated = share(k + 1) > share(k);
            if self.spawn(Route::Trunk, designated) {
                self.pending_trunk -= 1;
                self.trunk_arrivals += 1;
            }
        }
        if self.pending_ramp > 0 && self.spawn(Route::Ramp, false) {
            self.pending_ramp -= 1;
        }
    }

    /// Keeps slot assignments stable: a vehicle holds its slot until it
    /// leaves, and free slots go to the earliest designated vehicle without
    /// one. Designated vehicles beyond the slot count drive as IDM.
    pub fn assign_drl_slots(&mut self) {
        for slot in self.slots.iter_mut() {
            if let Some(id) = *slot {
                if !self.vehicles.iter().any(|v| v.id == id) {
                    *slot = None;
                }
            }
        }
        let mut waiting: Vec<u64> = self
            .vehicles
            .iter()
            .filter(|v| v.designated_drl && !self.slots.contains(&Some(v.id)))
            .map(|v| v.id)
            .collect();
        waiting.sort_unstable();
        let mut waiting = waiting.into_iter();
        for slot in self.slots.iter_mut().filter(|s| s.is_none()) {
            match waiting.next() {
                Some(id) => *slot = Some(id),
                None => break,
            }
        }
        for v in self.vehicles.iter_mut() {
            v.controller = Controller::Idm;
        }
        for (s, id) in self.slots.iter().enumerate() {
            if let Some(id) = id {
                if let Some(v) = self.vehicles.iter_mut().find(|v| v.id == *id) {
                    v.controller = Controller::Drl(s);
                }
            }
        }
    }

    // ---- dynamics ----------------------------------------------------------

    /// Advances one step. Actions for empty slots are ignored; out-of-range
    /// actions are clamped to the acceleration range.
    pub fn step(&mut self, joint_action: &[f64]) -> Result<StepResult> {
        if joint_action.len() != self.cfg.agents {
            return Err(Error::dim("joint action", self.cfg.agents, joint_action.len()));
        }
        let dt = self.cfg.dt;
        self.update_crossing_queue();
        self.update_merge_grants();
        let accels: Vec<f64> = (0..self.vehicles.len())
            .map(|i| {
                let raw = match self.vehicles[i].controller {
                    Controller::Drl(s) => {
                        let a = joint_action[s];
                        let a = if a.is_finite() { a } else { 0.0 };
                        a
                    }
                    Controller::Idm => self.idm_control(i),
                };
                let u = raw.clamp(self.cfg.accel_min, self.cfg.accel_max);
                if u != raw && matches!(self.vehicles[i].controller, Controller::Drl(_)) {
                    self.clamped_actions += 1;
                }
                self.emergency_override(i, u)
            })
            .collect();
        let limit = self.cfg.speed_limit;
        let loop_len = self.cfg.figure_eight.loop_length;
        for (veh, u) in self.vehicles.iter_mut().zip(accels) {
            veh.v = (veh.v + u * dt).clamp(0.0, limit);
            let dz = veh.v * dt;
            veh.odometer += dz;
            veh.z += dz;
            if veh.route == Route::Loop {
                veh.z = wrap(veh.z, loop_len);
            }
        }
        self.t += 1;
        if self.cfg.kind == ScenarioKind::Merge {
            // collision is judged before vehicles leave the network
            self.collided |= self.detect_collision();
            let end = self.cfg.merge.trunk_length;
            self.vehicles.retain(|v| v.z <= end);
            self.merge_flows();
            self.assign_drl_slots();
        } else {
            self.collided |= self.detect_collision();
        }
        Ok(self.result())
    }

    fn result(&self) -> StepResult {
        StepResult {
            state: self.global_state(),
            observations: (0..self.cfg.agents).map(|i| self.observe(i)).collect(),
            reward: self.reward(),
            done: self.is_done(),
            collision: self.collided,
        }
    }

    /// Re-evaluates collisions on the current configuration, e.g. after a
    /// scripted placement.
    pub fn detect_collision(&self) -> bool {
        let len = self.cfg.vehicle_length;
        let n = self.vehicles.len();
        match self.cfg.kind {
            ScenarioKind::FigureEight => {
                if n >= 2 {
                    for i in 0..n {
                        if let (Some((_, d)), _) = self.neighbours(i) {
                            if d - len < self.cfg.gap_min {
                                return true;
                            }
                        }
                    }
                }
                let mut seen = [false; 2];
                for v in &self.vehicles {
                    if let Some(k) = self.occupies_crossing(v.z) {
                        seen[k] = true;
                    }
                }
                seen[0] && seen[1]
            }
            ScenarioKind::Merge => {
                for i in 0..n {
                    if let (Some((_, d)), _) = self.neighbours(i) {
                        if d - len < self.cfg.gap_min {
                            return true;
                        }
                    }
                }
                let mut trunk = false;
                let mut ramp = false;
                for v in &self.vehicles {
                    if self.occupies_merge_point(v.z) {
                        match v.route {
                            Route::Ramp => ramp = true,
                            _ => trunk = true,
                        }
                    }
                }
                trunk && ramp
            }
        }
    }

    /// Marks the world as collided; used when a scripted set-up overlaps.
    pub fn refresh_collision(&mut self) -> bool {
        self.collided |= self.detect_collision();
        self.collided
    }

    /// Global reward over every vehicle present, zero after a collision.
    pub fn reward(&self) -> f64 {
        if self.collided {
            return 0.0;
        }
        let vd = self.cfg.desired_speed;
        let m = self.vehicles.len() as f64;
        let v_total = (m * vd * vd).sqrt();
        let dev: f64 = self
            .vehicles
            .iter()
            .map(|v| (vd - v.v) * (vd - v.v))
            .sum::<f64>()
            .sqrt();
        let base = (v_total - dev) / (v_total + self.cfg.c1);
        if self.cfg.alpha == 0.0 {
            return base;
        }
        let penalty: f64 = (0..self.vehicles.len())
            .filter_map(|i| self.neighbours(i).0)
            .map(|(_, d)| (self.cfg.c2 - d).max(0.0))
            .sum();
        base - self.cfg.alpha * penalty
    }

    pub fn observe(&self, slot: usize) -> Vec<f64> {
        let mut o = vec![0.0; OBS_DIM];
        let Some(Some(id)) = self.slots.get(slot) else {
            return o;
        };
        let Some(i) = self.index_of(*id) else {
            return o;
        };
        let vs = self.cfg.speed_limit;
        let ds = self.cfg.obs_distance_scale;
        let me = &self.vehicles[i];
        let (ahead, behind) = self.neighbours(i);
        if let Some((j, d)) = ahead {
            o[0] = self.vehicles[j].v / vs;
            o[1] = d / ds;
        }
        o[2] = me.v / vs;
        o[3] = me.z / self.cfg.route_length();
        if let Some((j, d)) = behind {
            o[4] = self.vehicles[j].v / vs;
            o[5] = -d / ds;
        }
        o
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.agents).map(|i| self.observe(i)).collect()
    }

    pub fn global_state(&self) -> Vec<f64> {
        match self.cfg.kind {
            ScenarioKind::FigureEight => {
                let vs = self.cfg.speed_limit;
                let l = self.cfg.figure_eight.loop_length;
                let mut s = vec![0.0; self.cfg.state_dim()];
                for (k, v) in self.vehicles.iter().enumerate().take(self.cfg.figure_eight.vehicles) {
                    s[2 * k] = v.v / vs;
                    s[2 * k + 1] = v.z / l;
                }
                s
            }
            ScenarioKind::Merge => self.observations().concat(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lone_loop(v: f64) -> World {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 1;
        cfg.figure_eight.vehicles = 1;
        cfg.figure_eight.init_jitter = 0.0;
        let mut w = World::new(cfg, 0).unwrap();
        w.vehicles_mut()[0].v = v;
        w
    }

    #[test]
    fn euler_kinematics() {
        let mut w = lone_loop(10.0);
        let z0 = w.vehicles()[0].z;
        w.step(&[0.0]).unwrap();
        assert_eq!(w.vehicles()[0].v, 10.0);
        assert_abs_diff_eq!(w.vehicles()[0].z, z0 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn speed_limit_holds() {
        let mut w = lone_loop(30.0);
        w.step(&[3.0]).unwrap();
        assert_eq!(w.vehicles()[0].v, 30.0);
    }

    #[test]
    fn out_of_range_action_clamped() {
        let mut w = lone_loop(10.0);
        w.step(&[50.0]).unwrap();
        assert_abs_diff_eq!(w.vehicles()[0].v, 10.3, epsilon = 1e-12);
        assert_eq!(w.clamped_actions(), 1);
    }

    #[test]
    fn overlap_is_a_collision() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 2;
        cfg.figure_eight.vehicles = 2;
        let mut w = World::new(cfg, 0).unwrap();
        w.vehicles_mut()[0].z = 10.0;
        w.vehicles_mut()[1].z = 12.0;
        let r = w.step(&[0.0, 0.0]).unwrap();
        assert!(r.collision);
        assert!(r.done);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn simultaneous_crossing_is_a_collision() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 2;
        cfg.figure_eight.vehicles = 2;
        let c = cfg.figure_eight.crossing;
        let mut w = World::new(cfg, 0).unwrap();
        w.vehicles_mut()[0].z = c[0] + 2.0;
        w.vehicles_mut()[1].z = c[1] + 2.0;
        assert!(w.detect_collision());
        w.vehicles_mut()[1].z = c[1] + 20.0;
        assert!(!w.detect_collision());
    }

    #[test]
    fn lone_vehicle_is_its_own_neighbour() {
        let w = lone_loop(5.0);
        let o = w.observe(0);
        let l = w.config().figure_eight.loop_length;
        let ds = w.config().obs_distance_scale;
        assert_eq!(o[0], o[2]);
        assert_abs_diff_eq!(o[1], l / ds, epsilon = 1e-12);
        assert_abs_diff_eq!(o[5], -l / ds, epsilon = 1e-12);
    }

    #[test]
    fn three_vehicle_ring_observation() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 3;
        cfg.figure_eight.vehicles = 3;
        cfg.figure_eight.init_jitter = 0.0;
        let mut w = World::new(cfg, 0).unwrap();
        for (k, v) in w.vehicles_mut().iter_mut().enumerate() {
            v.v = 1.0 + k as f64;
        }
        let vs = w.config().speed_limit;
        let ds = w.config().obs_distance_scale;
        let spacing = w.config().figure_eight.loop_length / 3.0;
        let o = w.observe(0);
        assert_abs_diff_eq!(o[0], 2.0 / vs, epsilon = 1e-12);
        assert_abs_diff_eq!(o[1], spacing / ds, epsilon = 1e-12);
        assert_abs_diff_eq!(o[2], 1.0 / vs, epsilon = 1e-12);
        assert_abs_diff_eq!(o[3], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o[4], 3.0 / vs, epsilon = 1e-12);
        assert_abs_diff_eq!(o[5], -spacing / ds, epsilon = 1e-12);
    }

    #[test]
    fn figure_eight_alternates_controllers() {
        let w = World::new(ScenarioConfig::figure_eight(), 1).unwrap();
        for (k, v) in w.vehicles().iter().enumerate() {
            if k % 2 == 0 {
                assert_eq!(v.controller, Controller::Idm);
            } else {
                assert_eq!(v.controller, Controller::Drl(k / 2));
            }
        }
        assert_eq!(w.global_state().len(), 28);
    }

    #[test]
    fn reward_at_desired_speed() {
        let mut w = World::new(ScenarioConfig::figure_eight(), 1).unwrap();
        for v in w.vehicles_mut() {
            v.v = 20.0;
        }
        let vd = (14.0f64 * 400.0).sqrt();
        assert_abs_diff_eq!(w.reward(), vd / (vd + 1e-3), epsilon = 1e-15);
    }

    #[test]
    fn reward_two_vehicle_oracle() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 1;
        cfg.figure_eight.vehicles = 2;
        cfg.c1 = 1e-300;
        let mut w = World::new(cfg, 0).unwrap();
        w.vehicles_mut()[0].v = 20.0;
        w.vehicles_mut()[1].v = 0.0;
        assert_abs_diff_eq!(w.reward(), 1.0 - 20.0 / 800f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(w.reward(), 0.292_893_218_813_452_54, epsilon = 1e-12);
    }

    #[test]
    fn following_penalty() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 1;
        cfg.figure_eight.vehicles = 2;
        cfg.alpha = 0.1;
        let mut w = World::new(cfg, 0).unwrap();
        w.vehicles_mut()[0].z = 0.0;
        w.vehicles_mut()[1].z = 7.0;
        for v in w.vehicles_mut() {
            v.v = 20.0;
        }
        let vd = 800f64.sqrt();
        // vehicle 0 trails vehicle 1 by 7 m; vehicle 1 trails vehicle 0 by 393 m
        assert_abs_diff_eq!(w.reward(), vd / (vd + 1e-3) - 0.1 * 3.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_merge_is_all_zero() {
        let w = World::new(ScenarioConfig::merge(), 3).unwrap();
        assert!(w.global_state().iter().all(|&x| x == 0.0));
        assert_eq!(w.global_state().len(), 6 * 13);
        assert_eq!(w.reward(), 0.0);
    }

    fn merge_with_designated(count: usize) -> World {
        let mut w = World::new(ScenarioConfig::merge(), 3).unwrap();
        for k in 0..count {
            let id = k as u64;
            w.vehicles.push(Vehicle {
                id,
                z: 300.0 - 15.0 * k as f64,
                v: 10.0,
                controller: Controller::Idm,
                route: Route::Trunk,
                designated_drl: true,
                odometer: 0.0,
            });
        }
        w.next_id = count as u64;
        w.assign_drl_slots();
        w
    }

    #[test]
    fn excess_designated_vehicles_drive_idm() {
        let w = merge_with_designated(15);
        for v in w.vehicles() {
            if v.id < 13 {
                assert_eq!(v.controller, Controller::Drl(v.id as usize));
            } else {
                assert_eq!(v.controller, Controller::Idm);
            }
        }
    }

    #[test]
    fn missing_vehicles_pad_with_zeros() {
        let mut w = merge_with_designated(5);
        assert_eq!(w.active_slots().iter().filter(|&&a| a).count(), 5);
        for slot in 5..13 {
            assert!(w.observe(slot).iter().all(|&x| x == 0.0));
        }
        let before: Vec<f64> = w.positions();
        let mut actions = vec![0.0; 13];
        for a in actions.iter_mut().skip(5) {
            *a = 100.0;
        }
        w.step(&actions).unwrap();
        assert_eq!(w.clamped_actions(), 0);
        let _ = before;
    }

    #[test]
    fn merge_inflow_fills_the_road() {
        let mut w = World::new(ScenarioConfig::merge(), 9).unwrap();
        let actions = vec![0.0; 13];
        let mut max_vehicles = 0;
        let mut saw_ramp = false;
        for _ in 0..300 {
            let r = w.step(&actions).unwrap();
            assert!(!r.collision, "collision at t={}", w.time());
            max_vehicles = max_vehicles.max(w.vehicles().len());
            saw_ramp |= w.vehicles().iter().any(|v| v.route == Route::Ramp);
        }
        assert!(max_vehicles > 5);
        assert!(saw_ramp);
        assert!(w.active_slots().iter().any(|&a| a));
    }

    #[test]
    fn merge_designation_share() {
        let mut w = World::new(ScenarioConfig::merge(), 2).unwrap();
        let mut designated = 0;
        let mut total = 0;
        let mut seen = alloc::collections::BTreeSet::new();
        for _ in 0..400 {
            w.step(&[0.0; 13]).unwrap();
            for v in w.vehicles() {
                if v.route == Route::Trunk && seen.insert(v.id) {
                    total += 1;
                    designated += v.designated_drl as usize;
                }
            }
        }
        assert!(total >= 40);
        assert_eq!(designated, total / 4);
    }

    #[test]
    fn all_idm_figure_eight_is_collision_free() {
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.agents = 0;
        cfg.figure_eight.vehicles = 14;
        // zero DRL slots are allowed on the loop
        let mut w = World::new(cfg, 4).unwrap();
        for _ in 0..1500 {
            let r = w.step(&[]).unwrap();
            assert!(!r.collision, "collision at t={}", w.time());
        }
        let mean_v: f64 = w.velocities().iter().sum::<f64>() / 14.0;
        assert!(mean_v > 2.0, "traffic stalled: {mean_v}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ScenarioConfig::merge();
        cfg.merge.trunk_inflow = 2100.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::figure_eight();
        cfg.dt = -1.0;
        assert!(cfg.validate().is_err());
    }
}
