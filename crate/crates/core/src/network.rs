//! Road-network scenarios: the JSON file format and its validated, indexed form.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub lanes: Vec<LaneSpec>,
    pub intersections: Vec<IntersectionSpec>,
    pub connections: Vec<ConnectionSpec>,
    pub phases: Vec<PhaseTableSpec>,
    #[serde(default)]
    pub arrivals: Vec<ArrivalSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSpec {
    pub id: String,
    /// Meters.
    pub length: f64,
    /// Vehicles.
    pub capacity: usize,
    /// Whole seconds needed to traverse the lane unimpeded.
    pub free_flow_time: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionSpec {
    pub id: String,
    pub incoming: Vec<String>,
    pub outgoing: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionSpec {
    pub from: String,
    pub to: String,
    pub intersection: String,
    pub movement: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTableSpec {
    pub intersection: String,
    pub cycle: Vec<PhaseSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub movements: Vec<usize>,
    pub min_duration: u32,
    pub max_duration: u32,
    /// Green time used by the fixed-time plan.
    pub duration: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSpec {
    pub lane: String,
    /// Mean vehicles per second.
    pub rate: f64,
    pub routes: Vec<RouteSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub lanes: Vec<String>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Lane {
    pub id: String,
    pub length: f64,
    pub capacity: usize,
    pub free_flow_time: u32,
    /// Intersection this lane feeds into, if any.
    pub downstream: Option<usize>,
    /// Intersection this lane leaves from, if any.
    pub upstream: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Connection {
    pub from: usize,
    pub to: usize,
    pub intersection: usize,
    pub movement: usize,
}

#[derive(Clone, Debug)]
pub struct Phase {
    pub movements: Vec<usize>,
    pub min_duration: u32,
    pub max_duration: u32,
    pub duration: u32,
}

#[derive(Clone, Debug)]
pub struct Intersection {
    pub id: String,
    pub incoming: Vec<usize>,
    pub outgoing: Vec<usize>,
    pub phases: Vec<Phase>,
    pub num_movements: usize,
    /// Indices into `RoadNetwork::connections` controlled here.
    pub connections: Vec<usize>,
    /// `green[p][m]` is true when phase `p` permits movement `m`.
    pub green: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Route {
    pub lanes: Vec<usize>,
    /// Connection used to leave `lanes[k]`, for every k but the last.
    pub hops: Vec<usize>,
    pub weight: f64,
    pub free_flow_total: u32,
}

#[derive(Clone, Debug)]
pub struct Arrival {
    pub lane: usize,
    pub rate: f64,
    pub routes: Vec<Route>,
}

/// A validated scenario with integer indices.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    pub connections: Vec<Connection>,
    pub arrivals: Vec<Arrival>,
    lane_index: HashMap<String, usize>,
    intersection_index: HashMap<String, usize>,
    /// `conn_lookup[(from, to)]` gives the connection index.
    conn_lookup: HashMap<(usize, usize), usize>,
}

impl RoadNetwork {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("scenario parse error: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let mut lane_index = HashMap::new();
        let mut lanes = Vec::new();
        for l in &file.lanes {
            if lane_index.insert(l.id.clone(), lanes.len()).is_some() {
                return Err(Error::config(format!("duplicate lane `{}`", l.id)));
            }
            if l.capacity == 0 || l.free_flow_time == 0 || !(l.length > 0.0) {
                return Err(Error::config(format!(
                    "lane `{}` needs positive length, capacity and free-flow time",
                    l.id
                )));
            }
            lanes.push(Lane {
                id: l.id.clone(),
                length: l.length,
                capacity: l.capacity,
                free_flow_time: l.free_flow_time,
                downstream: None,
                upstream: None,
            });
        }
        let lane = |name: &str| {
            lane_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown lane `{name}`")))
        };

        let mut intersection_index = HashMap::new();
        let mut intersections = Vec::new();
        for spec in &file.intersections {
            let idx = intersections.len();
            if intersection_index.insert(spec.id.clone(), idx).is_some() {
                return Err(Error::config(format!("duplicate intersection `{}`", spec.id)));
            }
            let incoming = spec.incoming.iter().map(|n| lane(n)).collect::<Result<Vec<_>>>()?;
            let outgoing = spec.outgoing.iter().map(|n| lane(n)).collect::<Result<Vec<_>>>()?;
            for &l in &incoming {
                if lanes[l].downstream.replace(idx).is_some() {
                    return Err(Error::config(format!(
                        "lane `{}` is incoming to two intersections",
                        lanes[l].id
                    )));
                }
            }
            for &l in &outgoing {
                if lanes[l].upstream.replace(idx).is_some() {
                    return Err(Error::config(format!(
                        "lane `{}` is outgoing from two intersections",
                        lanes[l].id
                    )));
                }
            }
            intersections.push(Intersection {
                id: spec.id.clone(),
                incoming,
                outgoing,
                phases: Vec::new(),
                num_movements: 0,
                connections: Vec::new(),
                green: Vec::new(),
            });
        }
        for l in &lanes {
            if l.downstream.is_none() && l.upstream.is_none() {
                return Err(Error::config(format!(
                    "lane `{}` belongs to no intersection",
                    l.id
                )));
            }
        }
        let inter = |name: &str| {
            intersection_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown intersection `{name}`")))
        };

        let mut connections = Vec::new();
        let mut conn_lookup = HashMap::new();
        for c in &file.connections {
            let (from, to, i) = (lane(&c.from)?, lane(&c.to)?, inter(&c.intersection)?);
            if lanes[from].downstream != Some(i) || lanes[to].upstream != Some(i) {
                return Err(Error::config(format!(
                    "connection {}->{} does not pass through `{}`",
                    c.from, c.to, c.intersection
                )));
            }
            if conn_lookup.insert((from, to), connections.len()).is_some() {
                return Err(Error::config(format!("duplicate connection {}->{}", c.from, c.to)));
            }
            intersections[i].connections.push(connections.len());
            intersections[i].num_movements = intersections[i].num_movements.max(c.movement + 1);
            connections.push(Connection {
                from,
                to,
                intersection: i,
                movement: c.movement,
            });
        }

        let mut seen_tables = vec![false; intersections.len()];
        for table in &file.phases {
            let i = inter(&table.intersection)?;
            if std::mem::replace(&mut seen_tables[i], true) {
                return Err(Error::config(format!(
                    "two phase tables for `{}`",
                    table.intersection
                )));
            }
            if table.cycle.is_empty() {
                return Err(Error::config(format!(
                    "empty phase cycle at `{}`",
                    table.intersection
                )));
            }
            let nm = intersections[i].num_movements;
            let mut covered = vec![false; nm];
            let mut phases = Vec::new();
            for p in &table.cycle {
                if p.min_duration == 0 || p.min_duration > p.max_duration {
                    return Err(Error::config(format!(
                        "phase durations at `{}` need 0 < min <= max",
                        table.intersection
                    )));
                }
                if p.duration < p.min_duration || p.duration > p.max_duration {
                    return Err(Error::config(format!(
                        "fixed-time duration at `{}` outside [min, max]",
                        table.intersection
                    )));
                }
                for &m in &p.movements {
                    if m >= nm {
                        return Err(Error::config(format!(
                            "phase at `{}` names movement {m}, which has no connection",
                            table.intersection
                        )));
                    }
                    covered[m] = true;
                }
                phases.push(Phase {
                    movements: p.movements.clone(),
                    min_duration: p.min_duration,
                    max_duration: p.max_duration,
                    duration: p.duration,
                });
            }
            if let Some(m) = covered.iter().position(|c| !c) {
                return Err(Error::config(format!(
                    "movement {m} at `{}` appears in no phase",
                    table.intersection
                )));
            }
            intersections[i].green = phases
                .iter()
                .map(|p| {
                    let mut g = vec![false; nm];
                    for &m in &p.movements {
                        g[m] = true;
                    }
                    g
                })
                .collect();
            intersections[i].phases = phases;
        }
        if let Some(i) = seen_tables.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "intersection `{}` has no phase table",
                intersections[i].id
            )));
        }

        let mut arrivals = Vec::new();
        for a in &file.arrivals {
            let entry = lane(&a.lane)?;
            if !(a.rate >= 0.0) || !a.rate.is_finite() {
                return Err(Error::config(format!("bad arrival rate on `{}`", a.lane)));
            }
            if a.routes.is_empty() {
                return Err(Error::config(format!("arrival on `{}` has no routes", a.lane)));
            }
            let mut routes = Vec::new();
            for r in &a.routes {
                let ids = r.lanes.iter().map(|n| lane(n)).collect::<Result<Vec<_>>>()?;
                if ids.first() != Some(&entry) {
                    return Err(Error::config(format!(
                        "route must start at its arrival lane `{}`",
                        a.lane
                    )));
                }
                if lanes[*ids.last().expect("non-empty")].downstream.is_some() {
                    return Err(Error::config(format!(
                        "route from `{}` must end on an exit lane",
                        a.lane
                    )));
                }
                let mut hops = Vec::new();
                for w in ids.windows(2) {
                    let c = conn_lookup.get(&(w[0], w[1])).copied().ok_or_else(|| {
                        Error::config(format!(
                            "route step {}->{} has no connection",
                            lanes[w[0]].id, lanes[w[1]].id
                        ))
                    })?;
                    hops.push(c);
                }
                if !(r.weight > 0.0) {
                    return Err(Error::config("route weights must be positive"));
                }
                let free_flow_total = ids.iter().map(|&l| lanes[l].free_flow_time).sum();
                routes.push(Route {
                    lanes: ids,
                    hops,
                    weight: r.weight,
                    free_flow_total,
                });
            }
            arrivals.push(Arrival {
                lane: entry,
                rate: a.rate,
                routes,
            });
        }

        Ok(Self {
            lanes,
            intersections,
            connections,
            arrivals,
            lane_index,
            intersection_index,
            conn_lookup,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.intersections.len()
    }

    pub fn lane_id(&self, name: &str) -> Option<usize> {
        self.lane_index.get(name).copied()
    }

    pub fn intersection_id(&self, name: &str) -> Option<usize> {
        self.intersection_index.get(name).copied()
    }

    pub fn connection(&self, from: usize, to: usize) -> Option<usize> {
        self.conn_lookup.get(&(from, to)).copied()
    }

    pub fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.intersections.len() {
            return Err(Error::config(format!(
                "unknown agent {agent}; scenario has {} intersections",
                self.intersections.len()
            )));
        }
        Ok(())
    }

    /// Lanes of the agent's local view: its incoming lanes, its outgoing lanes,
    /// then the one-hop neighbour lanes feeding or fed by them, sorted.
    pub fn receptive_field(&self, agent: usize) -> Result<Vec<usize>> {
        self.check_agent(agent)?;
        let node = &self.intersections[agent];
        let mut out: Vec<usize> = node.incoming.clone();
        out.extend(&node.outgoing);
        let own: BTreeSet<usize> = out.iter().copied().collect();
        let mut extra = BTreeSet::new();
        for &l in &node.incoming {
            if let Some(u) = self.lanes[l].upstream {
                for &c in &self.intersections[u].connections {
                    let c = &self.connections[c];
                    if c.to == l && !own.contains(&c.from) {
                        extra.insert(c.from);
                    }
                }
            }
        }
        for &l in &node.outgoing {
            if let Some(d) = self.lanes[l].downstream {
                for &c in &self.intersections[d].connections {
                    let c = &self.connections[c];
                    if c.from == l && !own.contains(&c.to) {
                        extra.insert(c.to);
                    }
                }
            }
        }
        out.extend(extra);
        Ok(out)
    }

    /// Lanes that vehicles can enter from outside the network.
    pub fn entry_lanes(&self) -> Vec<usize> {
        (0..self.lanes.len()).filter(|&l| self.lanes[l].upstream.is_none()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
      "lanes": [
        {"id": "a", "length": 100, "capacity": 10, "free_flow_time": 5},
        {"id": "b", "length": 100, "capacity": 10, "free_flow_time": 5}
      ],
      "intersections": [{"id": "X", "incoming": ["a"], "outgoing": ["b"]}],
      "connections": [{"from": "a", "to": "b", "intersection": "X", "movement": 0}],
      "phases": [{"intersection": "X", "cycle": [
        {"movements": [0], "min_duration": 5, "max_duration": 30, "duration": 10},
        {"movements": [], "min_duration": 5, "max_duration": 30, "duration": 5}
      ]}],
      "arrivals": [{"lane": "a", "rate": 0.1, "routes": [{"lanes": ["a", "b"], "weight": 1}]}]
    }"#;

    #[test]
    fn parses_and_indexes() {
        let net = RoadNetwork::from_json_str(TINY).unwrap();
        assert_eq!(net.lanes.len(), 2);
        assert_eq!(net.lanes[0].downstream, Some(0));
        assert_eq!(net.lanes[1].upstream, Some(0));
        assert_eq!(net.arrivals[0].routes[0].free_flow_total, 10);
        assert_eq!(net.receptive_field(0).unwrap(), vec![0, 1]);
        assert!(net.receptive_field(3).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_references() {
        let extra = TINY.replacen("\"lanes\"", "\"colour\": 1, \"lanes\"", 1);
        assert!(RoadNetwork::from_json_str(&extra).is_err());
        let bad = TINY.replace("\"to\": \"b\"", "\"to\": \"zz\"");
        assert!(RoadNetwork::from_json_str(&bad).is_err());
        let uncovered = TINY.replace("\"movements\": [0]", "\"movements\": []");
        assert!(RoadNetwork::from_json_str(&uncovered).is_err());
    }
}
