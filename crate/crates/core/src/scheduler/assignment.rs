use serde::{Deserialize, Serialize};

use super::{AllocationVector, ClusterSpec, MetricsSnapshot, SchedulerError};

/// X: cores of node `i` given to executor `j`, plus each executor's local
/// node I(j).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    nodes: usize,
    executors: usize,
    cells: Vec<u32>,
    local_node: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn new(nodes: usize, local_node: Vec<usize>) -> Self {
        assert!(local_node.iter().all(|&i| i < nodes), "local node out of range");
        let executors = local_node.len();
        Self {
            nodes,
            executors,
            cells: vec![0; nodes * executors],
            local_node,
        }
    }

    /// Builds a matrix from rows (`rows[i][j]`).
    pub fn from_rows(rows: &[Vec<u32>], local_node: Vec<usize>) -> Self {
        let mut x = Self::new(rows.len(), local_node);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), x.executors, "ragged assignment rows");
            for (j, &v) in row.iter().enumerate() {
                x.set(i, j, v);
            }
        }
        x
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn executors(&self) -> usize {
        self.executors
    }

    pub fn get(&self, node: usize, exec: usize) -> u32 {
        self.cells[node * self.executors + exec]
    }

    pub fn set(&mut self, node: usize, exec: usize, cores: u32) {
        self.cells[node * self.executors + exec] = cores;
    }

    /// X_j.
    pub fn total(&self, exec: usize) -> u32 {
        (0..self.nodes).map(|i| self.get(i, exec)).sum()
    }

    /// Σ_j x_ij.
    pub fn node_load(&self, node: usize) -> u32 {
        (0..self.executors).map(|j| self.get(node, j)).sum()
    }

    /// I(j).
    pub fn local_node(&self, exec: usize) -> usize {
        self.local_node[exec]
    }

    pub fn local_nodes(&self) -> &[usize] {
        &self.local_node
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        (0..self.nodes)
            .map(|i| (0..self.executors).map(|j| self.get(i, j)).collect())
            .collect()
    }

    fn conformable(&self, other: &Self) -> Result<(), SchedulerError> {
        if self.nodes != other.nodes || self.executors != other.executors {
            return Err(SchedulerError::Shape(format!(
                "{}x{} vs {}x{}",
                self.nodes, self.executors, other.nodes, other.executors
            )));
        }
        Ok(())
    }
}

/// C(X | X̃) = Σ_j Σ_i max(0, s_j·x̃_ij/X̃_j − s_j·x_ij/X_j).
///
/// An executor with no cores holds no resident state, so its share terms
/// are zero.
pub fn transition_cost(
    prev: &AssignmentMatrix,
    next: &AssignmentMatrix,
    state_bytes: &[f64],
) -> Result<f64, SchedulerError> {
    prev.conformable(next)?;
    if state_bytes.len() != prev.executors {
        return Err(SchedulerError::Shape("state size vector length".into()));
    }
    let mut cost = 0.0;
    for (j, &s) in state_bytes.iter().enumerate() {
        let (tp, tn) = (prev.total(j), next.total(j));
        for i in 0..prev.nodes {
            let before = if tp == 0 { 0.0 } else { s * f64::from(prev.get(i, j)) / f64::from(tp) };
            let after = if tn == 0 { 0.0 } else { s * f64::from(next.get(i, j)) / f64::from(tn) };
            cost += (before - after).max(0.0);
        }
    }
    Ok(cost)
}

/// Marginal migration overhead of giving (C⁺) or taking (C⁻) one core on a
/// node to or from an executor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalCosts {
    pub alloc: f64,
    /// `None` when undefined: the executor has a single core, or none on
    /// this node.
    pub dealloc: Option<f64>,
}

/// C⁺_ij = s_j(X_j − x_ij)/(X_j(X_j+1)), C⁻_ij = s_j(X_j − x_ij)/(X_j(X_j−1)).
pub fn marginal_costs(x: &AssignmentMatrix, node: usize, exec: usize, state_bytes: f64) -> MarginalCosts {
    let total = f64::from(x.total(exec));
    let here = f64::from(x.get(node, exec));
    let alloc = if total == 0.0 {
        0.0
    } else {
        state_bytes * (total - here) / (total * (total + 1.0))
    };
    let dealloc = (total >= 2.0 && here >= 1.0).then(|| state_bytes * (total - here) / (total * (total - 1.0)));
    MarginalCosts { alloc, dealloc }
}

fn check_inputs(
    k: &AllocationVector,
    prev: &AssignmentMatrix,
    cluster: &ClusterSpec,
    snap: &MetricsSnapshot,
) -> Result<(), SchedulerError> {
    if k.0.len() != prev.executors || cluster.nodes() != prev.nodes {
        return Err(SchedulerError::Shape("allocation, assignment and cluster disagree".into()));
    }
    if snap.state_bytes.len() != prev.executors {
        return Err(SchedulerError::Shape("snapshot executor count".into()));
    }
    if let Some(j) = k.0.iter().position(|&kj| kj == 0) {
        return Err(SchedulerError::ZeroAllocation(j));
    }
    if k.total() > cluster.total_cores() {
        return Err(SchedulerError::Infeasible {
            requested: k.total(),
            available: cluster.total_cores(),
        });
    }
    for i in 0..prev.nodes {
        if prev.node_load(i) > cluster.cores[i] {
            return Err(SchedulerError::Shape(format!("node {i} is over capacity in X̃")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Source {
    Idle,
    Donor(usize),
}

/// One pass of the greedy dynamic allocation at data-intensity threshold φ.
///
/// Starting from X = X̃, each under-provisioned executor (X_j < k_j), taken
/// in descending data-intensity order, pulls cores one at a time:
/// data-intensive executors (intensity > φ) only from their local node,
/// picking the idle core or the over-provisioned donor with the smallest
/// C⁻; others from any node, minimising C⁻ + C⁺. Unassigned cores act as
/// donors with zero deallocation cost. Remote cores already held by
/// data-intensive executors are released first, and remaining surplus is
/// trimmed at minimal C⁻ at the end, so the result always satisfies the
/// capacity, allocation and locality constraints.
pub fn assign(
    k: &AllocationVector,
    prev: &AssignmentMatrix,
    cluster: &ClusterSpec,
    phi: f64,
    snap: &MetricsSnapshot,
) -> Result<AssignmentMatrix, SchedulerError> {
    check_inputs(k, prev, cluster, snap)?;
    let (n, m) = (prev.nodes, prev.executors);
    let s = &snap.state_bytes;
    let mut x = prev.clone();
    let mut idle: Vec<u32> = (0..n).map(|i| cluster.cores[i] - x.node_load(i)).collect();
    let intensive: Vec<bool> = (0..m).map(|j| snap.intensity(j) > phi).collect();

    for j in (0..m).filter(|&j| intensive[j]) {
        let home = x.local_node(j);
        for i in (0..n).filter(|&i| i != home) {
            idle[i] += x.get(i, j);
            x.set(i, j, 0);
        }
    }

    let mut under: Vec<usize> = (0..m).filter(|&j| x.total(j) < k.0[j]).collect();
    under.sort_by(|&a, &b| snap.intensity(b).total_cmp(&snap.intensity(a)).then(a.cmp(&b)));

    for &j in &under {
        while x.total(j) < k.0[j] {
            let donors: Vec<usize> = (0..m).filter(|&d| d != j && x.total(d) > k.0[d]).collect();
            let nodes: Vec<usize> = if intensive[j] { vec![x.local_node(j)] } else { (0..n).collect() };
            let mut best: Option<(f64, usize, Source)> = None;
            for &i in &nodes {
                // Locality-constrained executors only weigh the donor side.
                let plus = if intensive[j] { 0.0 } else { marginal_costs(&x, i, j, s[j]).alloc };
                let mut consider = |cost: f64, src: Source| {
                    if best.map_or(true, |(c, _, _)| cost < c) {
                        best = Some((cost, i, src));
                    }
                };
                if idle[i] > 0 {
                    consider(plus, Source::Idle);
                }
                for &d in &donors {
                    if x.get(i, d) > 0 {
                        let minus = marginal_costs(&x, i, d, s[d])
                            .dealloc
                            .expect("donor holds at least two cores");
                        consider(minus + plus, Source::Donor(d));
                    }
                }
            }
            let Some((_, i, src)) = best else {
                return Err(SchedulerError::Fail { phi });
            };
            match src {
                Source::Idle => idle[i] -= 1,
                Source::Donor(d) => x.set(i, d, x.get(i, d) - 1),
            }
            x.set(i, j, x.get(i, j) + 1);
        }
    }

    for j in 0..m {
        while x.total(j) > k.0[j] {
            let i = (0..n)
                .filter(|&i| x.get(i, j) > 0)
                .min_by(|&a, &b| {
                    let ca = marginal_costs(&x, a, j, s[j]).dealloc.unwrap_or(0.0);
                    let cb = marginal_costs(&x, b, j, s[j]).dealloc.unwrap_or(0.0);
                    ca.total_cmp(&cb).then(a.cmp(&b))
                })
                .expect("executor above target holds a core");
            x.set(i, j, x.get(i, j) - 1);
            idle[i] += 1;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub assignment: AssignmentMatrix,
    /// φ at which [`assign`] succeeded.
    pub phi: f64,
    /// Number of [`assign`] invocations.
    pub iterations: u32,
}

/// Runs [`assign`] from φ = φ̃, doubling φ after every failure.
///
/// Terminates once φ exceeds every executor's intensity, because the
/// locality constraint is then vacuous and `Σk ≤ Σc` always admits a
/// transfer.
pub fn assign_adaptive(
    k: &AllocationVector,
    prev: &AssignmentMatrix,
    cluster: &ClusterSpec,
    phi_base: f64,
    snap: &MetricsSnapshot,
) -> Result<AdaptiveOutcome, SchedulerError> {
    assert!(phi_base > 0.0, "φ̃ must be positive");
    let mut phi = phi_base;
    let mut iterations = 0;
    loop {
        iterations += 1;
        match assign(k, prev, cluster, phi, snap) {
            Ok(assignment) => {
                return Ok(AdaptiveOutcome {
                    assignment,
                    phi,
                    iterations,
                })
            }
            Err(SchedulerError::Fail { .. }) => phi *= 2.0,
            Err(e) => return Err(e),
        }
    }
}
