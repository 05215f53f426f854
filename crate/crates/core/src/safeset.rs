//! Sampled safe set: stored successful laps, their cost-to-go, K-nearest-neighbor
//! local safe sets and the shifted (mirrored across the centerline) candidates.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{AugVec, AugmentedState, ControlInput, DroneState, NXA};
use crate::error::SafeSetError;
use crate::kdtree::KdTree;
use crate::track::Centerline;

/// One lap as recorded at the controller's discretization rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iteration: usize,
    pub times: Vec<f64>,
    pub states: Vec<AugmentedState>,
    /// One input per state except the last.
    pub inputs: Vec<ControlInput>,
    /// Stage cost per state; the final entry is zero.
    pub stage_costs: Vec<f64>,
    pub successful: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Realized lap cost, i.e. the cost-to-go of the first state.
    pub fn total_cost(&self) -> f64 {
        cost_to_go(&self.stage_costs).first().copied().unwrap_or(0.0)
    }
}

/// Reverse cumulative sum of stage costs; the last state is assigned zero.
pub fn cost_to_go(stage_costs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; stage_costs.len()];
    let mut acc = 0.0;
    for k in (0..stage_costs.len().saturating_sub(1)).rev() {
        acc += stage_costs[k];
        out[k] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredState {
    pub xa: AugmentedState,
    pub u: Option<ControlInput>,
    pub iteration: usize,
    pub step: usize,
    pub cost_to_go: f64,
}

/// Block weights of the squared distance over `(s, p, v, angles)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnMetric {
    pub arc_length: f64,
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
}

impl Default for KnnMetric {
    fn default() -> Self {
        Self { arc_length: 5.0, position: 1.0, velocity: 0.2, attitude: 0.1 }
    }
}

impl KnnMetric {
    fn scales(&self) -> [f64; NXA] {
        let (a, b, c, d) =
            (self.arc_length.sqrt(), self.position.sqrt(), self.velocity.sqrt(), self.attitude.sqrt());
        [a, b, b, b, c, c, c, d, d, d]
    }

    pub fn embed(&self, xa: &AugmentedState) -> [f64; NXA] {
        let v = xa.to_vec();
        let w = self.scales();
        std::array::from_fn(|i| v[i] * w[i])
    }

    pub fn distance2(&self, a: &AugmentedState, b: &AugmentedState) -> f64 {
        let (ea, eb) = (self.embed(a), self.embed(b));
        ea.iter().zip(eb.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SafeSet {
    trajectories: Vec<Vec<StoredState>>,
    /// (trajectory slot, step) per tree point, in insertion order.
    flat: Vec<(usize, usize)>,
    tree: KdTree<NXA>,
    metric: KnnMetric,
}

impl Default for SafeSet {
    fn default() -> Self {
        Self::new(KnnMetric::default())
    }
}

impl SafeSet {
    pub fn new(metric: KnnMetric) -> Self {
        Self { trajectories: Vec::new(), flat: Vec::new(), tree: KdTree::new(Vec::new()), metric }
    }

    pub fn metric(&self) -> &KnnMetric {
        &self.metric
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn num_iterations(&self) -> usize {
        self.trajectories.len()
    }

    pub fn trajectories(&self) -> &[Vec<StoredState>] {
        &self.trajectories
    }

    /// Most recently added trajectory.
    pub fn latest(&self) -> Option<&[StoredState]> {
        self.trajectories.last().map(|t| t.as_slice())
    }

    /// All stored states in insertion order (iteration-major, then step).
    pub fn states(&self) -> impl Iterator<Item = &StoredState> {
        self.flat.iter().map(|&(t, k)| &self.trajectories[t][k])
    }

    pub fn add_iteration(&mut self, traj: &Trajectory) -> Result<(), SafeSetError> {
        if !traj.successful {
            return Err(SafeSetError::Unsuccessful { iteration: traj.iteration });
        }
        if traj.is_empty() {
            return Err(SafeSetError::Empty);
        }
        let j = cost_to_go(&traj.stage_costs);
        let stored = traj
            .states
            .iter()
            .enumerate()
            .map(|(k, xa)| StoredState {
                xa: *xa,
                u: traj.inputs.get(k).copied(),
                iteration: traj.iteration,
                step: k,
                cost_to_go: j[k],
            })
            .collect();
        self.push_trajectory(stored);
        Ok(())
    }

    fn push_trajectory(&mut self, stored: Vec<StoredState>) {
        let slot = self.trajectories.len();
        self.flat.extend((0..stored.len()).map(|k| (slot, k)));
        self.trajectories.push(stored);
        let points = self.states().map(|st| self.metric.embed(&st.xa)).collect();
        self.tree = KdTree::new(points);
    }

    /// The `k` stored states nearest to `x_bar` under the block-weighted metric.
    /// Ties resolve by insertion order, i.e. by (iteration, step).
    pub fn knn_local(&self, x_bar: &AugmentedState, k: usize) -> Vec<StoredState> {
        if self.len() < k {
            log::warn!("safe set holds {} states, fewer than K = {k}; using all", self.len());
        }
        self.tree
            .knn(&self.metric.embed(x_bar), k)
            .into_iter()
            .map(|n| {
                let (t, step) = self.flat[n.index];
                self.trajectories[t][step]
            })
            .collect()
    }

    pub fn terminal_candidates(
        &self,
        x_bar: &AugmentedState,
        k: usize,
        shifted: bool,
        cl: &Centerline,
        kmat: &Matrix3<f64>,
    ) -> Result<TerminalCandidateSet, SafeSetError> {
        if self.is_empty() {
            return Err(SafeSetError::NoStates);
        }
        let local = self.knn_local(x_bar, k);
        let mut set = TerminalCandidateSet::default();
        for st in &local {
            set.push(st.xa.to_vec(), st.cost_to_go, false);
        }
        if shifted {
            for st in shift_local(&local, cl, kmat) {
                set.push(st.xa.to_vec(), st.cost_to_go, true);
            }
        }
        Ok(set)
    }

    /// Write every stored state as one CSV row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SafeSetError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for st in self.states() {
            let v = st.xa.to_vec();
            let mut row: Vec<String> = vec![st.iteration.to_string(), st.step.to_string()];
            row.extend(v.iter().map(|x| format!("{x:e}")));
            match st.u {
                Some(u) => row.extend(u.to_vec().iter().map(|x| format!("{x:e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            row.push(format!("{:e}", st.cost_to_go));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, metric: KnnMetric) -> Result<Self, SafeSetError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(SafeSetError::Format("unexpected header".into()));
        }
        let mut set = SafeSet::new(metric);
        let mut current: Vec<StoredState> = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, SafeSetError> {
                rec[i].parse::<f64>().map_err(|e| SafeSetError::Format(format!("row {line}, column {i}: {e}")))
            };
            let int = |i: usize| -> Result<usize, SafeSetError> {
                rec[i].parse::<usize>().map_err(|e| SafeSetError::Format(format!("row {line}, column {i}: {e}")))
            };
            let iteration = int(0)?;
            let step = int(1)?;
            let mut v = AugVec::zeros();
            for k in 0..NXA {
                v[k] = num(2 + k)?;
            }
            let u = if rec[12].is_empty() {
                None
            } else {
                Some(ControlInput { f_sigma: num(12)?, phi_cmd: num(13)?, theta_cmd: num(14)?, psi_cmd: num(15)? })
            };
            let st = StoredState { xa: AugmentedState::from_vec(&v), u, iteration, step, cost_to_go: num(16)? };
            if let Some(prev) = current.last() {
                if prev.iteration != iteration {
                    set.push_trajectory(std::mem::take(&mut current));
                } else if step != prev.step + 1 {
                    return Err(SafeSetError::Format(format!("row {line}: steps out of order")));
                }
            }
            current.push(st);
        }
        if !current.is_empty() {
            set.push_trajectory(current);
        }
        Ok(set)
    }
}

const CSV_HEADER: [&str; 17] = [
    "iteration", "step", "s", "px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "psi", "f_sigma",
    "phi_cmd", "theta_cmd", "psi_cmd", "cost_to_go",
];

/// Mean lateral offset of a cluster from the centerline and its mean arc length.
pub fn cluster_offset(states: &[StoredState], cl: &Centerline) -> (Vector3<f64>, f64) {
    let n = states.len() as f64;
    let offset = states.iter().map(|st| st.xa.x.p - cl.position(st.xa.s)).sum::<Vector3<f64>>() / n;
    let s_bar = states.iter().map(|st| st.xa.s).sum::<f64>() / n;
    (offset, s_bar)
}

/// Mirror a local safe set across the centerline and inflate its cost-to-go.
///
/// Positions move by `-2 p_perp`, where `p_perp` is the mean offset with its
/// tangential component at the mean arc length removed. Velocities, attitudes
/// and arc lengths are kept. The shifted cost is `J + |p_hat - p|^2_K`.
pub fn shift_local(states: &[StoredState], cl: &Centerline, kmat: &Matrix3<f64>) -> Vec<StoredState> {
    if states.is_empty() {
        return Vec::new();
    }
    let (offset, s_bar) = cluster_offset(states, cl);
    let t = cl.tangent(s_bar);
    let perp = offset - t * offset.dot(&t);
    if perp.norm() < 1e-6 {
        return states.to_vec();
    }
    let shift = -2.0 * perp;
    let extra = shift.dot(&(kmat * shift));
    states
        .iter()
        .map(|st| {
            let x = DroneState { p: st.xa.x.p + shift, ..st.xa.x };
            StoredState { xa: AugmentedState { x, ..st.xa }, cost_to_go: st.cost_to_go + extra, ..*st }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TerminalCandidateSet {
    pub states: Vec<AugVec>,
    pub costs: Vec<f64>,
    pub shifted: Vec<bool>,
}

impl TerminalCandidateSet {
    fn push(&mut self, x: AugVec, cost: f64, shifted: bool) {
        self.states.push(x);
        self.costs.push(cost);
        self.shifted.push(shifted);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Convex combination of the candidate states.
    pub fn combine(&self, lambda: &[f64]) -> AugVec {
        self.states.iter().zip(lambda).fold(AugVec::zeros(), |acc, (x, l)| acc + x * *l)
    }

    /// Convex combination of the candidate costs.
    pub fn combined_cost(&self, lambda: &[f64]) -> f64 {
        self.costs.iter().zip(lambda).map(|(c, l)| c * l).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{rotation_from_ypr, CenterlineOptions, Gate, Pose, RadiusConfig};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn line() -> Centerline {
        let start = Pose { position: Vector3::zeros(), rotation: Matrix3::identity() };
        let gates = [Gate::new(Vector3::new(10.0, 0.0, 0.0), rotation_from_ypr(0.0, FRAC_PI_2, 0.0), 0.2)];
        Centerline::build(&start, &gates, RadiusConfig::default(), CenterlineOptions::default()).unwrap()
    }

    fn traj(iteration: usize, n: usize, lateral: f64) -> Trajectory {
        let states: Vec<AugmentedState> = (0..n)
            .map(|k| {
                let s = 0.1 * k as f64;
                AugmentedState::new(s, DroneState::at_rest(Vector3::new(s, lateral, 0.0)))
            })
            .collect();
        let mut stage_costs = vec![1.0; n];
        stage_costs[n - 1] = 0.0;
        Trajectory {
            iteration,
            times: (0..n).map(|k| k as f64 * 0.1).collect(),
            inputs: vec![ControlInput::default(); n - 1],
            states,
            stage_costs,
            successful: true,
        }
    }

    #[test]
    fn cost_to_go_edge_cases() {
        assert_eq!(cost_to_go(&[0.0]), vec![0.0]);
        assert_eq!(cost_to_go(&[2.0, 2.0, 2.0, 7.0]), vec![6.0, 4.0, 2.0, 0.0]);
        assert!(cost_to_go(&[]).is_empty());
    }

    #[test]
    fn rejects_unsuccessful_laps() {
        let mut ss = SafeSet::default();
        let mut t = traj(0, 5, 0.0);
        t.successful = false;
        assert!(matches!(ss.add_iteration(&t), Err(SafeSetError::Unsuccessful { .. })));
        assert!(ss.is_empty());
    }

    #[test]
    fn cardinality_and_union() {
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 31, 0.0)).unwrap();
        assert_eq!(ss.len(), 31);
        ss.add_iteration(&traj(1, 31, 0.05)).unwrap();
        let near = ss.knn_local(&AugmentedState::new(1.0, DroneState::at_rest(Vector3::new(1.0, 0.025, 0.0))), 6);
        assert!(near.iter().any(|st| st.iteration == 0));
        assert!(near.iter().any(|st| st.iteration == 1));
        let last = ss.latest().unwrap().last().unwrap();
        assert_eq!(last.cost_to_go, 0.0);
    }

    #[test]
    fn knn_exact_match_and_saturation() {
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 20, 0.0)).unwrap();
        let target = ss.trajectories()[0][7];
        assert_eq!(ss.knn_local(&target.xa, 1)[0], target);
        assert_eq!(ss.knn_local(&target.xa, 20).len(), 20);
        assert_eq!(ss.knn_local(&target.xa, 50).len(), 20);
    }

    #[test]
    fn shift_reflects_a_left_cluster_to_the_right() {
        let cl = line();
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 40, 0.3)).unwrap();
        let local: Vec<StoredState> = ss.trajectories()[0][10..30].to_vec();
        let shifted = shift_local(&local, &cl, &Matrix3::identity());
        let (offset, s_bar) = cluster_offset(&shifted, &cl);
        assert_abs_diff_eq!(offset, Vector3::new(0.0, -0.3, 0.0), epsilon = 1e-9);
        let (orig_offset, _) = cluster_offset(&local, &cl);
        let centroid = shifted.iter().map(|s| s.xa.x.p).sum::<Vector3<f64>>() / shifted.len() as f64;
        assert!((centroid - cl.position(s_bar)).dot(&orig_offset) <= 0.0);
        for (a, b) in local.iter().zip(&shifted) {
            assert_abs_diff_eq!(b.cost_to_go - a.cost_to_go, 0.36, epsilon = 1e-9);
            assert_eq!(a.xa.x.v, b.xa.x.v);
            assert_eq!(a.xa.s, b.xa.s);
        }
    }

    #[test]
    fn shift_on_centerline_is_skipped() {
        let cl = line();
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 10, 0.0)).unwrap();
        let local = ss.trajectories()[0].clone();
        assert_eq!(shift_local(&local, &cl, &Matrix3::identity()), local);
    }

    #[test]
    fn candidate_counts() {
        let cl = line();
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 60, 0.2)).unwrap();
        let x_bar = ss.trajectories()[0][30].xa;
        let plain = ss.terminal_candidates(&x_bar, 20, false, &cl, &Matrix3::identity()).unwrap();
        assert_eq!(plain.len(), 20);
        assert!(plain.shifted.iter().all(|s| !s));
        let both = ss.terminal_candidates(&x_bar, 20, true, &cl, &Matrix3::identity()).unwrap();
        assert_eq!(both.len(), 40);
        for k in 0..20 {
            assert!(both.shifted[20 + k]);
            assert!(both.costs[20 + k] > both.costs[k]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut ss = SafeSet::default();
        ss.add_iteration(&traj(0, 12, 0.0)).unwrap();
        ss.add_iteration(&traj(3, 9, 0.1)).unwrap();
        let mut buf = Vec::new();
        ss.write_csv(&mut buf).unwrap();
        let back = SafeSet::read_csv(buf.as_slice(), KnnMetric::default()).unwrap();
        assert_eq!(back.len(), ss.len());
        for (a, b) in back.states().zip(ss.states()) {
            assert_eq!(a, b);
        }
    }
}
