//! Delayed marginalization.
//!
//! The delayed graph mirrors the visual marginalization of the main graph,
//! but eliminates each keyframe only `delay` marginalizations later. Until
//! then the keyframe stays available: IMU factors can be attached to the
//! still-alive keyframes, the result optimized (pose graph bundle
//! adjustment), and the pending eliminations replayed to obtain a prior that
//! contains the inertial information.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, GraphValues, VariableKey};
use crate::imu::PreintegratedImu;
use crate::inertial::{BiasRandomWalkFactor, ImuFactor};
use crate::lie::RigidTransform;
use crate::marginalization::{marginalize_keys, MarginalizationPrior};

pub const DEFAULT_DELAY: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayedGraph {
    delay: usize,
    priors: Vec<MarginalizationPrior>,
    alive: BTreeSet<u32>,
    eliminated: Vec<u32>,
    pending: VecDeque<u32>,
    history: Vec<u32>,
    blanket_sizes: Vec<usize>,
    snapshots: GraphValues,
}

/// Which keyframes a pose graph bundle adjustment can cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgbaPlan {
    /// First keyframe of the connected run ending at the newest keyframe.
    pub start: u32,
    pub frames: Vec<u32>,
    pub imu_pairs: Vec<(u32, u32)>,
    /// Alive keyframes older than `start`; these get no IMU factors.
    pub frames_without_imu: Vec<u32>,
}

/// Delayed priors plus IMU factors, ready to optimize.
#[derive(Clone, Debug)]
pub struct PgbaGraph {
    pub graph: FactorGraph,
    pub values: GraphValues,
    pub plan: PgbaPlan,
}

/// Outcome of replaying the pending eliminations.
#[derive(Clone, Debug)]
pub struct Readvance {
    pub prior: MarginalizationPrior,
    /// Number of variables in each step's Markov blanket.
    pub blanket_sizes: Vec<usize>,
}

impl DelayedGraph {
    pub fn new(delay: usize) -> Self {
        Self {
            delay,
            priors: Vec::new(),
            alive: BTreeSet::new(),
            eliminated: Vec::new(),
            pending: VecDeque::new(),
            history: Vec::new(),
            blanket_sizes: Vec::new(),
            snapshots: GraphValues::new(),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn priors(&self) -> &[MarginalizationPrior] {
        &self.priors
    }

    /// Keyframes that have not been eliminated here (active in the main
    /// graph or pending).
    pub fn alive_frames(&self) -> &BTreeSet<u32> {
        &self.alive
    }

    /// Keyframes already marginalized in the main graph but not yet here,
    /// oldest first.
    pub fn pending(&self) -> &VecDeque<u32> {
        &self.pending
    }

    /// Order in which the main graph marginalized keyframes.
    pub fn history(&self) -> &[u32] {
        &self.history
    }

    pub fn eliminated(&self) -> &[u32] {
        &self.eliminated
    }

    /// Markov blanket size of every elimination performed so far.
    pub fn blanket_sizes(&self) -> &[usize] {
        &self.blanket_sizes
    }

    /// Last known estimates of pending keyframes.
    pub fn snapshots(&self) -> &GraphValues {
        &self.snapshots
    }

    pub fn graph(&self) -> FactorGraph {
        FactorGraph { factors: Vec::new(), priors: self.priors.clone() }
    }

    pub fn fej_values(&self) -> GraphValues {
        let mut out = GraphValues::new();
        for p in &self.priors {
            out.extend_from(&p.fej_values);
        }
        out
    }

    pub fn add_frame(&mut self, frame: u32) -> Result<()> {
        if self.alive.contains(&frame) || self.eliminated.contains(&frame) {
            return Err(Error::Structural(format!("keyframe {frame} was already added")));
        }
        self.alive.insert(frame);
        Ok(())
    }

    /// Adds a prior, re-expressed at this graph's linearization points where
    /// they differ.
    pub fn add_prior(&mut self, prior: MarginalizationPrior) -> Result<()> {
        let mut target = prior.fej_values.clone();
        let mut differs = false;
        for k in &prior.keys {
            if let Some(v) = self.priors.iter().find_map(|p| p.fej_values.try_get(k)) {
                if v != prior.fej_values.get(k)? {
                    differs = true;
                    target.insert(*k, v.clone());
                }
            }
        }
        self.priors.push(if differs { prior.relinearize_to(&target)? } else { prior });
        Ok(())
    }

    /// Records that the main graph marginalized `frame` with the given last
    /// estimates of its states. Eliminates the oldest pending keyframe once
    /// more than `delay` are queued and returns its id.
    pub fn record_marginalization(&mut self, frame: u32, estimates: &GraphValues) -> Result<Option<u32>> {
        if !self.alive.contains(&frame) {
            return Err(Error::Structural(format!("keyframe {frame} is unknown or already eliminated")));
        }
        if self.pending.contains(&frame) {
            return Err(Error::Structural(format!("keyframe {frame} was already marginalized")));
        }
        self.pending.push_back(frame);
        self.history.push(frame);
        for (k, v) in estimates.iter() {
            if k.is_frame_state(frame) {
                self.snapshots.insert(*k, v.clone());
            }
        }
        if self.pending.len() > self.delay {
            let oldest = self.pending.pop_front().expect("queue is non-empty");
            self.eliminate(oldest)?;
            return Ok(Some(oldest));
        }
        Ok(None)
    }

    fn eliminate(&mut self, frame: u32) -> Result<()> {
        let mut graph = self.graph();
        let fej = graph.fej_values();
        let beta: BTreeSet<VariableKey> = graph.keys().into_iter().filter(|k| k.is_frame_state(frame)).collect();
        let blanket = if beta.is_empty() {
            0
        } else {
            marginalize_keys(&mut graph, &fej, &beta)?.map(|p| p.keys.len()).unwrap_or(0)
        };
        self.priors = graph.priors;
        self.blanket_sizes.push(blanket);
        self.alive.remove(&frame);
        self.eliminated.push(frame);
        let stale: Vec<VariableKey> = self.snapshots.keys().filter(|k| k.is_frame_state(frame)).copied().collect();
        for k in stale {
            self.snapshots.remove(&k);
        }
        Ok(())
    }

    /// First keyframe of the longest run `P_c, P_c+1, …, P_newest` of alive
    /// keyframes: every keyframe in it is directly connected to the newest.
    pub fn connected_start(&self) -> Option<u32> {
        let newest = *self.alive.iter().next_back()?;
        let mut start = newest;
        while start > 0 && self.alive.contains(&(start - 1)) {
            start -= 1;
        }
        Some(start)
    }

    pub fn pgba_plan(&self) -> Option<PgbaPlan> {
        let start = self.connected_start()?;
        let newest = *self.alive.iter().next_back()?;
        let frames: Vec<u32> = (start..=newest).collect();
        let imu_pairs = frames.windows(2).map(|w| (w[0], w[1])).collect();
        let frames_without_imu = self.alive.range(..start).copied().collect();
        Some(PgbaPlan { start, frames, imu_pairs, frames_without_imu })
    }

    /// Copies the delayed priors and adds IMU and bias random walk factors
    /// between all connected keyframes. `segments[i]` is the preintegration
    /// from keyframe `i` to `i + 1`.
    ///
    /// Values come from `estimates`, then the pending snapshots, then the
    /// linearization points.
    pub fn populate_with_imu(
        &self,
        segments: &BTreeMap<u32, Arc<PreintegratedImu>>,
        t_cam_imu: &RigidTransform,
        estimates: &GraphValues,
    ) -> Result<PgbaGraph> {
        let plan = self
            .pgba_plan()
            .ok_or_else(|| Error::InsufficientData { needed: 1, got: 0 })?;
        let mut graph = self.graph();
        for &(i, j) in &plan.imu_pairs {
            let pre = segments.get(&i).ok_or(Error::DataGap { from: i, to: j })?;
            graph.add(ImuFactor::new(i, j, pre.clone(), *t_cam_imu)?);
            graph.add(BiasRandomWalkFactor::new(i, j, &pre.noise, pre.dt));
        }
        let fej = graph.fej_values();
        let mut values = GraphValues::new();
        for k in graph.keys() {
            let v = estimates
                .try_get(&k)
                .or_else(|| self.snapshots.try_get(&k))
                .or_else(|| fej.try_get(&k))
                .ok_or(Error::MissingKey(k))?;
            values.insert(k, v.clone());
        }
        Ok(PgbaGraph { graph, values, plan })
    }

    /// Replays the pending eliminations, oldest first, on `graph` at
    /// `values` (priors are re-expressed there first). Factors between
    /// keyframes that stay active are discarded; the remaining priors are
    /// combined into one.
    pub fn readvance(&self, graph: &FactorGraph, values: &GraphValues) -> Result<Readvance> {
        let mut g = FactorGraph { factors: graph.factors.clone(), priors: Vec::new() };
        for p in &graph.priors {
            g.add_prior(p.relinearize_to(&values.subset(&p.keys)?)?);
        }
        let mut blanket_sizes = Vec::with_capacity(self.pending.len());
        for &frame in &self.pending {
            let beta: BTreeSet<VariableKey> = g.keys().into_iter().filter(|k| k.is_frame_state(frame)).collect();
            if beta.is_empty() {
                blanket_sizes.push(0);
                continue;
            }
            let prior = marginalize_keys(&mut g, values, &beta)?;
            blanket_sizes.push(prior.map(|p| p.keys.len()).unwrap_or(0));
        }
        let prior = MarginalizationPrior::combine(&g.priors)?;
        Ok(Readvance { prior, blanket_sizes })
    }

    /// Re-expresses every prior at `values` (keys missing from `values` keep
    /// their linearization point).
    pub fn relinearize_priors(&mut self, values: &GraphValues) -> Result<()> {
        for p in &mut self.priors {
            let mut target = p.fej_values.clone();
            for k in &p.keys {
                if let Some(v) = values.try_get(k) {
                    target.insert(*k, v.clone());
                }
            }
            *p = p.relinearize_to(&target)?;
        }
        Ok(())
    }

    /// Overwrites the snapshots of pending keyframes with newer estimates.
    pub fn update_snapshots(&mut self, values: &GraphValues) {
        for (k, v) in values.iter() {
            if self.pending.iter().any(|f| k.is_frame_state(*f)) {
                self.snapshots.insert(*k, v.clone());
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
