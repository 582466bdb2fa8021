//! Point-queue traffic simulator with 1-second ticks.
//!
//! Each lane is a FIFO of vehicles. A vehicle entering a lane at time `t` is in
//! transit until `t + free_flow_time`; afterwards it is queued at the stop line.
//! Green movements discharge at most one queued head vehicle per lane and
//! second, provided the target lane has room.
//!
//! Order of events inside one tick at time `t`:
//! 1. actions are validated and signal decisions taken (switch requests start a
//!    yellow interlock, phases at their maximum are forced to switch);
//! 2. queued vehicles whose wait reached the teleport threshold are removed;
//! 3. ready vehicles on the last lane of their route leave the network;
//! 4. green lanes discharge their head vehicle;
//! 5. new arrivals join an entry backlog and enter while capacity allows;
//! 6. every queued vehicle accrues one second of waiting;
//! 7. the clock and the signal timers advance.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RoadNetwork;

pub const LANE_FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Seconds between agent decisions.
    pub control_interval: u32,
    /// Waiting time (s) at which a queued vehicle is teleported.
    pub teleport_threshold: u32,
    pub yellow_duration: u32,
    /// Episode length in seconds.
    pub episode_length: u32,
    /// Multiplier on every arrival rate.
    pub demand_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_interval: 5,
            teleport_threshold: 120,
            yellow_duration: 3,
            episode_length: 300,
            demand_scale: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.control_interval < 1 {
            return Err(Error::config("control interval must be at least 1 s"));
        }
        if self.teleport_threshold <= self.yellow_duration {
            return Err(Error::config("teleport threshold must exceed the yellow duration"));
        }
        if self.yellow_duration < 1 {
            return Err(Error::config("yellow duration must be at least 1 s"));
        }
        if self.episode_length < 1 {
            return Err(Error::config("episode length must be positive"));
        }
        if !(self.demand_scale >= 0.0) {
            return Err(Error::config("demand scale must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub id: u64,
    pub arrival: usize,
    pub route: usize,
    /// Index into the route's lane list.
    pub pos: usize,
    pub spawned_at: u32,
    pub entered_at: u32,
    pub ready_at: u32,
    /// Seconds spent queued on the current lane.
    pub wait: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignalState {
    pub phase: usize,
    /// Seconds spent in the current green phase.
    pub elapsed: u32,
    /// Remaining yellow seconds; zero while green.
    pub yellow_left: u32,
}

impl SignalState {
    pub fn in_yellow(&self) -> bool {
        self.yellow_left > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficState {
    pub t: u32,
    pub lanes: Vec<VecDeque<Vehicle>>,
    /// Vehicles generated but still waiting to enter their entry lane.
    pub backlog: Vec<VecDeque<Vehicle>>,
    pub signals: Vec<SignalState>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TripRecord {
    pub travel_time: f64,
    pub delay: f64,
    pub teleported: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EpisodeMetrics {
    pub spawned: u64,
    pub completed: u64,
    pub teleported: u64,
    pub trips: Vec<TripRecord>,
    /// Sum over ticks of queued vehicles (stopped vehicle-seconds).
    pub stopped_vehicle_seconds: u64,
}

impl EpisodeMetrics {
    fn mean(&self, f: impl Fn(&TripRecord) -> f64) -> f64 {
        if self.trips.is_empty() {
            0.0
        } else {
            self.trips.iter().map(f).sum::<f64>() / self.trips.len() as f64
        }
    }

    /// Mean over finished trips (completed or teleported).
    pub fn mean_travel_time(&self) -> f64 {
        self.mean(|r| r.travel_time)
    }

    pub fn mean_delay(&self) -> f64 {
        self.mean(|r| r.delay)
    }
}

#[derive(Clone, Debug)]
pub struct Simulator {
    pub net: Arc<RoadNetwork>,
    pub config: SimConfig,
    pub state: TrafficState,
    pub metrics: EpisodeMetrics,
    rng: ChaCha8Rng,
    poisson: Vec<Option<Poisson<f64>>>,
    next_id: u64,
}

impl Simulator {
    pub fn new(net: Arc<RoadNetwork>, config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let poisson = net
            .arrivals
            .iter()
            .map(|a| {
                let rate = a.rate * config.demand_scale;
                if rate > 0.0 {
                    Poisson::new(rate)
                        .map(Some)
                        .map_err(|e| Error::config(format!("arrival rate: {e}")))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let state = TrafficState {
            t: 0,
            lanes: vec![VecDeque::new(); net.lanes.len()],
            backlog: vec![VecDeque::new(); net.lanes.len()],
            signals: vec![
                SignalState {
                    phase: 0,
                    elapsed: 0,
                    yellow_left: 0,
                };
                net.intersections.len()
            ],
        };
        Ok(Self {
            net,
            config,
            state,
            metrics: EpisodeMetrics::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a441_7a1f_0000),
            poisson,
            next_id: 0,
        })
    }

    pub fn time(&self) -> u32 {
        self.state.t
    }

    pub fn done(&self) -> bool {
        self.state.t >= self.config.episode_length
    }

    pub fn is_decision_tick(&self) -> bool {
        self.state.t % self.config.control_interval == 0
    }

    /// True when movement `m` at intersection `i` may discharge now.
    pub fn movement_green(&self, i: usize, m: usize) -> bool {
        let s = &self.state.signals[i];
        !s.in_yellow() && self.net.intersections[i].green[s.phase][m]
    }

    /// Whether agent `i` may switch now if it asks to.
    pub fn can_switch(&self, i: usize) -> bool {
        let s = &self.state.signals[i];
        !s.in_yellow() && s.elapsed >= self.net.intersections[i].phases[s.phase].min_duration
    }

    /// Advances one second. `actions[i] == 1` requests a phase switch at
    /// intersection `i`; requests off a control boundary are ignored.
    pub fn step(&mut self, actions: &[u8]) -> Result<()> {
        let n = self.net.intersections.len();
        if actions.len() != n {
            return Err(Error::contract(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        if let Some(a) = actions.iter().find(|&&a| a > 1) {
            return Err(Error::contract(format!("action {a} is not binary")));
        }
        let t = self.state.t;
        let boundary = self.is_decision_tick();
        for i in 0..n {
            let max = {
                let s = &self.state.signals[i];
                self.net.intersections[i].phases[s.phase].max_duration
            };
            let s = &self.state.signals[i];
            if s.in_yellow() {
                continue;
            }
            let requested = boundary && actions[i] == 1 && self.can_switch(i);
            if requested || s.elapsed >= max {
                self.state.signals[i].yellow_left = self.config.yellow_duration;
            }
        }

        let tp = self.config.teleport_threshold;
        for l in 0..self.net.lanes.len() {
            let lane = &mut self.state.lanes[l];
            if lane.iter().any(|v| v.wait >= tp) {
                let mut keep = VecDeque::with_capacity(lane.len());
                for v in lane.drain(..) {
                    if v.wait >= tp {
                        let route = &self.net.arrivals[v.arrival].routes[v.route];
                        let rest: u32 = route.lanes[v.pos + 1..]
                            .iter()
                            .map(|&x| self.net.lanes[x].free_flow_time)
                            .sum();
                        let travel = (t - v.spawned_at + rest) as f64;
                        self.metrics.trips.push(TripRecord {
                            travel_time: travel,
                            delay: travel - route.free_flow_total as f64,
                            teleported: true,
                        });
                        self.metrics.teleported += 1;
                    } else {
                        keep.push_back(v);
                    }
                }
                *lane = keep;
            }
        }

        for l in 0..self.net.lanes.len() {
            if self.net.lanes[l].downstream.is_some() {
                continue;
            }
            while let Some(v) = self.state.lanes[l].front() {
                if v.ready_at > t {
                    break;
                }
                let v = self.state.lanes[l].pop_front().expect("front exists");
                let route = &self.net.arrivals[v.arrival].routes[v.route];
                let travel = (t - v.spawned_at) as f64;
                self.metrics.trips.push(TripRecord {
                    travel_time: travel,
                    delay: travel - route.free_flow_total as f64,
                    teleported: false,
                });
                self.metrics.completed += 1;
            }
        }

        for l in 0..self.net.lanes.len() {
            let Some(i) = self.net.lanes[l].downstream else { continue };
            let Some(v) = self.state.lanes[l].front() else { continue };
            if v.ready_at > t {
                continue;
            }
            let route = &self.net.arrivals[v.arrival].routes[v.route];
            let conn = &self.net.connections[route.hops[v.pos]];
            if !self.movement_green(i, conn.movement) {
                continue;
            }
            let target = conn.to;
            if self.state.lanes[target].len() >= self.net.lanes[target].capacity {
                continue;
            }
            let mut v = self.state.lanes[l].pop_front().expect("front exists");
            v.pos += 1;
            v.entered_at = t;
            v.ready_at = t + self.net.lanes[target].free_flow_time;
            v.wait = 0;
            self.state.lanes[target].push_back(v);
        }

        for a in 0..self.net.arrivals.len() {
            let count = match &self.poisson[a] {
                Some(p) => p.sample(&mut self.rng) as u64,
                None => 0,
            };
            let arrival = &self.net.arrivals[a];
            for _ in 0..count {
                let route = pick_route(&mut self.rng, arrival.routes.iter().map(|r| r.weight));
                self.state.backlog[arrival.lane].push_back(Vehicle {
                    id: self.next_id,
                    arrival: a,
                    route,
                    pos: 0,
                    spawned_at: t,
                    entered_at: t,
                    ready_at: t,
                    wait: 0,
                });
                self.next_id += 1;
                self.metrics.spawned += 1;
            }
        }
        for l in 0..self.net.lanes.len() {
            while !self.state.backlog[l].is_empty()
                && self.state.lanes[l].len() < self.net.lanes[l].capacity
            {
                let mut v = self.state.backlog[l].pop_front().expect("non-empty");
                v.entered_at = t;
                v.ready_at = t + self.net.lanes[l].free_flow_time;
                self.state.lanes[l].push_back(v);
            }
        }

        let mut stopped = 0u64;
        for lane in &mut self.state.lanes {
            for v in lane.iter_mut() {
                if v.ready_at <= t {
                    v.wait += 1;
                    stopped += 1;
                }
            }
        }
        self.metrics.stopped_vehicle_seconds += stopped;

        self.state.t += 1;
        let ncycle: Vec<usize> = self.net.intersections.iter().map(|x| x.phases.len()).collect();
        for (i, s) in self.state.signals.iter_mut().enumerate() {
            if s.yellow_left > 0 {
                s.yellow_left -= 1;
                if s.yellow_left == 0 {
                    s.phase = (s.phase + 1) % ncycle[i];
                    s.elapsed = 0;
                }
            } else {
                s.elapsed += 1;
            }
        }
        Ok(())
    }

    /// Vehicles stopped at the line of lane `l` (x(l, t)).
    pub fn queue_len(&self, l: usize) -> usize {
        let t = self.state.t;
        self.state.lanes[l].iter().filter(|v| v.ready_at <= t).count()
    }

    pub fn vehicles_in_network(&self) -> usize {
        self.state.lanes.iter().map(VecDeque::len).sum()
    }

    pub fn backlog_len(&self) -> usize {
        self.state.backlog.iter().map(VecDeque::len).sum()
    }

    /// Pressure term: |Σ_in x/x_max − Σ_out x/x_max|.
    pub fn reward_sta(&self, agent: usize) -> f64 {
        let node = &self.net.intersections[agent];
        let density = |l: &usize| self.queue_len(*l) as f64 / self.net.lanes[*l].capacity as f64;
        let inflow: f64 = node.incoming.iter().map(density).sum();
        let outflow: f64 = node.outgoing.iter().map(density).sum();
        (inflow - outflow).abs()
    }

    /// Normalized waiting term over the incoming lanes.
    pub fn reward_wait(&self, agent: usize) -> f64 {
        let node = &self.net.intersections[agent];
        let mut total = 0u64;
        let mut m = 0usize;
        for &l in &node.incoming {
            for v in &self.state.lanes[l] {
                total += v.wait as u64;
                m += 1;
            }
        }
        if m == 0 {
            0.0
        } else {
            total as f64 / (m as f64 * self.config.teleport_threshold as f64)
        }
    }

    pub fn total_reward(&self, agent: usize, alpha: f64, beta: f64) -> f64 {
        -alpha * self.reward_sta(agent) - beta * self.reward_wait(agent)
    }

    /// Mean of the per-agent rewards.
    pub fn global_reward(&self, alpha: f64, beta: f64) -> f64 {
        let n = self.net.intersections.len();
        (0..n).map(|i| self.total_reward(i, alpha, beta)).sum::<f64>() / n as f64
    }

    /// Signal code of lane `l` seen from intersection `i`: 0 green, 0.5 yellow, 1 red.
    pub fn signal_code(&self, l: usize, i: usize) -> f64 {
        let s = &self.state.signals[i];
        let node = &self.net.intersections[i];
        let mut code: f64 = 1.0;
        for &c in &node.connections {
            let c = &self.net.connections[c];
            if c.from != l && c.to != l {
                continue;
            }
            if node.green[s.phase][c.movement] {
                code = code.min(if s.in_yellow() { 0.5 } else { 0.0 });
            }
        }
        code
    }

    /// Remaining time of the current signal state at `i`, normalized to [0, 1].
    pub fn remaining_time(&self, i: usize) -> f64 {
        let s = &self.state.signals[i];
        if s.in_yellow() {
            s.yellow_left as f64 / self.config.yellow_duration as f64
        } else {
            let max = self.net.intersections[i].phases[s.phase].max_duration as f64;
            ((max - s.elapsed as f64) / max).clamp(0.0, 1.0)
        }
    }

    /// Normalized time since the last phase change at `i`.
    pub fn phase_progress(&self, i: usize) -> f64 {
        let s = &self.state.signals[i];
        let max = self.net.intersections[i].phases[s.phase].max_duration as f64;
        (s.elapsed as f64 / max).clamp(0.0, 1.0)
    }

    /// The seven lane features seen from intersection `perspective`.
    pub fn lane_features(&self, l: usize, perspective: usize, flags: (f64, f64)) -> [f64; LANE_FEATURES] {
        let lane = &self.net.lanes[l];
        let vehicles = &self.state.lanes[l];
        let t = self.state.t;
        let queued = vehicles.iter().filter(|v| v.ready_at <= t).count();
        let speed = if vehicles.is_empty() {
            1.0
        } else {
            (vehicles.len() - queued) as f64 / vehicles.len() as f64
        };
        [
            queued as f64 / lane.capacity as f64,
            speed,
            vehicles.len() as f64 / lane.capacity as f64,
            self.signal_code(l, perspective),
            self.remaining_time(perspective),
            flags.0,
            flags.1,
        ]
    }

    /// Features of a lane seen from the intersection it feeds (else the one it leaves).
    pub fn network_lane_features(&self, l: usize) -> [f64; LANE_FEATURES] {
        let lane = &self.net.lanes[l];
        let perspective = lane.downstream.or(lane.upstream).expect("validated lane");
        let flags = (
            lane.downstream.is_some() as u8 as f64,
            lane.upstream.is_some() as u8 as f64,
        );
        self.lane_features(l, perspective, flags)
    }

    /// Feature rows of every lane in the network.
    pub fn all_lane_features(&self) -> Vec<[f64; LANE_FEATURES]> {
        (0..self.net.lanes.len()).map(|l| self.network_lane_features(l)).collect()
    }

    /// The agent's incoming and outgoing lane rows, in that order.
    pub fn observe(&self, agent: usize) -> Result<Vec<[f64; LANE_FEATURES]>> {
        self.net.check_agent(agent)?;
        let node = &self.net.intersections[agent];
        let mut rows: Vec<_> = node
            .incoming
            .iter()
            .map(|&l| self.lane_features(l, agent, (1.0, 0.0)))
            .collect();
        rows.extend(node.outgoing.iter().map(|&l| self.lane_features(l, agent, (0.0, 1.0))));
        Ok(rows)
    }

    /// Flattened [`Simulator::observe`] plus a one-hot of the current phase.
    pub fn observe_flat(&self, agent: usize) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = self.observe(agent)?.iter().flatten().copied().collect();
        let node = &self.net.intersections[agent];
        let s = &self.state.signals[agent];
        out.extend((0..node.phases.len()).map(|p| (p == s.phase) as u8 as f64));
        Ok(out)
    }

    /// spawned − (backlog + in network + completed + teleported); zero always.
    pub fn conservation_gap(&self) -> i64 {
        self.metrics.spawned as i64
            - (self.backlog_len() + self.vehicles_in_network()) as i64
            - self.metrics.completed as i64
            - self.metrics.teleported as i64
    }
}

fn pick_route(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut x = rng.random_range(0.0..total);
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        last = k;
        if x < w {
            return k;
        }
        x -= w;
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    FixedTime,
    Random,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixedtime" | "fixed-time" | "fixed" => Ok(Baseline::FixedTime),
            "random" => Ok(Baseline::Random),
            _ => Err(Error::config(format!("unknown baseline `{s}`"))),
        }
    }
}

/// Switch requests of the fixed-time plan: switch once the preset green ran out.
pub fn fixed_time_actions(sim: &Simulator) -> Vec<u8> {
    (0..sim.net.intersections.len())
        .map(|i| {
            let s = &sim.state.signals[i];
            let dur = sim.net.intersections[i].phases[s.phase].duration;
            (!s.in_yellow() && s.elapsed >= dur) as u8
        })
        .collect()
}

/// Runs one episode under a baseline controller with arrival seed `seed`.
/// The fixed-time plan is evaluated every second regardless of the control
/// interval; the random controller flips a fair coin per control interval.
pub fn run_baseline(
    net: Arc<RoadNetwork>,
    config: &SimConfig,
    controller: Baseline,
    seed: u64,
) -> Result<EpisodeMetrics> {
    let mut cfg = config.clone();
    if controller == Baseline::FixedTime {
        cfg.control_interval = 1;
    }
    let mut sim = Simulator::new(net, cfg, seed)?;
    let mut coin = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC01);
    let n = sim.net.intersections.len();
    while !sim.done() {
        let actions = match controller {
            Baseline::FixedTime => fixed_time_actions(&sim),
            Baseline::Random => {
                if sim.is_decision_tick() {
                    (0..n).map(|_| coin.random_bool(0.5) as u8).collect()
                } else {
                    vec![0; n]
                }
            }
        };
        sim.step(&actions)?;
    }
    Ok(sim.metrics)
}
