use super::{AllocationVector, MetricsSnapshot, SchedulerConfig, SchedulerError};

/// Expected sojourn time of a queue, or unbounded when it is unstable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latency {
    Finite(f64),
    Unbounded,
}

impl Latency {
    /// Seconds, with `Unbounded` mapped to +∞.
    pub fn seconds(self) -> f64 {
        match self {
            Latency::Finite(t) => t,
            Latency::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, Latency::Finite(_))
    }
}

/// Probability that an arrival waits in an M/M/k queue with offered load
/// `a = λ/μ`. Uses the Erlang-B recurrence so no factorial is formed.
pub fn erlang_c(k: u32, a: f64) -> f64 {
    let rho = a / f64::from(k);
    debug_assert!(rho < 1.0);
    let mut b = 1.0;
    for i in 1..=k {
        b = a * b / (f64::from(i) + a * b);
    }
    b / (1.0 - rho * (1.0 - b))
}

/// Mean sojourn time of an M/M/k queue: `1/μ + C(k, λ/μ) / (kμ − λ)`.
pub fn mmk_latency(lambda: f64, mu: f64, k: u32) -> Latency {
    assert!(mu > 0.0 && k >= 1, "mmk_latency needs μ > 0 and k ≥ 1");
    let a = lambda / mu;
    if f64::from(k) <= a {
        return Latency::Unbounded;
    }
    if lambda <= 0.0 {
        return Latency::Finite(1.0 / mu);
    }
    let kmu = f64::from(k) * mu;
    Latency::Finite(1.0 / mu + erlang_c(k, a) / (kmu - lambda))
}

fn weighted_latency(k: &[u32], snap: &MetricsSnapshot, include: impl Fn(usize) -> bool) -> Latency {
    let mut sum = 0.0;
    for (j, &kj) in k.iter().enumerate() {
        let lambda = snap.arrival_rate[j];
        if lambda <= 0.0 || !include(j) {
            continue;
        }
        let mu = snap.service_rate[j];
        if mu <= 0.0 || kj == 0 {
            return Latency::Unbounded;
        }
        match mmk_latency(lambda, mu, kj) {
            Latency::Finite(t) => sum += lambda * t,
            Latency::Unbounded => return Latency::Unbounded,
        }
    }
    Latency::Finite(sum / snap.source_rate)
}

/// Mean end-to-end latency of the executor network:
/// `E[T] = (1/λ₀) Σ_j λ_j E[T_j](k_j)`.
pub fn pipeline_latency(k: &AllocationVector, snap: &MetricsSnapshot) -> Result<Latency, SchedulerError> {
    if !(snap.source_rate > 0.0) {
        return Err(SchedulerError::ZeroSourceRate);
    }
    if k.0.len() != snap.executors() {
        return Err(SchedulerError::Shape(format!(
            "{} allocations for {} executors",
            k.0.len(),
            snap.executors()
        )));
    }
    Ok(weighted_latency(&k.0, snap, |_| true))
}

/// Result of [`allocate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Allocation {
    /// E[T] ≤ T_max with the fewest cores.
    Met(AllocationVector),
    /// Budget exhausted; carries the best effort.
    Overload(AllocationVector),
}

impl Allocation {
    pub fn vector(&self) -> &AllocationVector {
        match self {
            Allocation::Met(k) | Allocation::Overload(k) => k,
        }
    }

    pub fn into_vector(self) -> AllocationVector {
        match self {
            Allocation::Met(k) | Allocation::Overload(k) => k,
        }
    }

    pub fn is_overload(&self) -> bool {
        matches!(self, Allocation::Overload(_))
    }
}

/// Splits `budget` cores proportionally to `load` by largest remainder,
/// with at least one core per entry.
fn largest_remainder(load: &[f64], budget: u32) -> Vec<u32> {
    let total: f64 = load.iter().sum();
    if load.is_empty() {
        return Vec::new();
    }
    if !(total > 0.0) {
        return vec![1; load.len()];
    }
    let quotas: Vec<f64> = load.iter().map(|a| f64::from(budget) * a / total).collect();
    let mut k: Vec<u32> = quotas.iter().map(|q| (q.floor() as u32).max(1)).collect();
    let mut left = i64::from(budget) - k.iter().map(|&x| i64::from(x)).sum::<i64>();
    if left > 0 {
        let mut order: Vec<usize> = (0..load.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - f64::from(k[a]);
            let rb = quotas[b] - f64::from(k[b]);
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &j in order.iter().cycle() {
            if left == 0 {
                break;
            }
            k[j] += 1;
            left -= 1;
        }
    }
    k
}

/// Greedy model-based allocation.
///
/// Starts from the minimal stable vector `k_j = ⌊λ_j/μ_j⌋ + 1` and adds one
/// core at a time to the executor whose increment lowers E[T] the most
/// (ties: lowest index) until E[T] ≤ T_max or the budget is spent.
/// Executors without a measured service rate stay at one core and are left
/// out of the model.
pub fn allocate(snap: &MetricsSnapshot, cfg: &SchedulerConfig, budget: u32) -> Allocation {
    let m = snap.executors();
    let warm: Vec<bool> = (0..m).map(|j| snap.service_rate[j] > 0.0).collect();
    let mut k: Vec<u32> = (0..m)
        .map(|j| {
            if warm[j] {
                (snap.arrival_rate[j] / snap.service_rate[j]).floor() as u32 + 1
            } else {
                1
            }
        })
        .collect();

    let sum = |k: &[u32]| k.iter().sum::<u32>();
    if sum(&k) > budget {
        let cold = warm.iter().filter(|w| !**w).count() as u32;
        let warm_idx: Vec<usize> = (0..m).filter(|&j| warm[j]).collect();
        let load: Vec<f64> = warm_idx
            .iter()
            .map(|&j| snap.arrival_rate[j] / snap.service_rate[j])
            .collect();
        let split = largest_remainder(&load, budget.saturating_sub(cold));
        for (&j, kj) in warm_idx.iter().zip(split) {
            k[j] = kj;
        }
        return Allocation::Overload(AllocationVector(k));
    }
    if !(snap.source_rate > 0.0) {
        return Allocation::Met(AllocationVector(k));
    }

    let latency = |k: &[u32]| weighted_latency(k, snap, |j| warm[j]).seconds();
    let mut current = latency(&k);
    while current > cfg.latency_target {
        if sum(&k) >= budget {
            return Allocation::Overload(AllocationVector(k));
        }
        let mut best: Option<(usize, f64)> = None;
        for j in (0..m).filter(|&j| warm[j]) {
            k[j] += 1;
            let t = latency(&k);
            k[j] -= 1;
            if best.map_or(true, |(_, bt)| t < bt) {
                best = Some((j, t));
            }
        }
        let Some((j, t)) = best else {
            return Allocation::Overload(AllocationVector(k));
        };
        k[j] += 1;
        current = t;
    }
    Allocation::Met(AllocationVector(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(lambda0: f64, lambda: &[f64], mu: &[f64]) -> MetricsSnapshot {
        MetricsSnapshot {
            source_rate: lambda0,
            arrival_rate: lambda.to_vec(),
            service_rate: mu.to_vec(),
            state_bytes: vec![0.0; lambda.len()],
            data_rate: vec![0.0; lambda.len()],
            cores: vec![1; lambda.len()],
        }
    }

    #[test]
    fn mm1_closed_form() {
        assert_eq!(mmk_latency(0.5, 1.0, 1), Latency::Finite(2.0));
    }

    #[test]
    fn mm2_example() {
        let t = mmk_latency(1.0, 1.0, 2).seconds();
        assert!((t - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(mmk_latency(2.0, 1.0, 2), Latency::Unbounded);
    }

    #[test]
    fn erlang_c_matches_factorial_form() {
        // Direct summation for small k as an independent route.
        fn direct(k: u32, a: f64) -> f64 {
            let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
            let rho = a / f64::from(k);
            let top = a.powi(k as i32) / (fact(k) * (1.0 - rho));
            let sum: f64 = (0..k).map(|i| a.powi(i as i32) / fact(i)).sum();
            top / (sum + top)
        }
        for k in 1..12 {
            for a in [0.1, 0.5, 0.9 * f64::from(k), 0.3 * f64::from(k)] {
                if a < f64::from(k) {
                    assert!((erlang_c(k, a) - direct(k, a)).abs() < 1e-10, "k={k} a={a}");
                }
            }
        }
    }

    #[test]
    fn decreasing_in_k_and_tends_to_service_time() {
        for (lambda, mu) in [(3.0f64, 1.0f64), (0.7, 2.0), (50.0, 10.0)] {
            let mut prev = f64::INFINITY;
            let start = (lambda / mu).floor() as u32 + 1;
            for k in start..start + 40 {
                let t = mmk_latency(lambda, mu, k).seconds();
                // Strict until the waiting term vanishes below f64 resolution.
                assert!(t < prev || t == 1.0 / mu);
                prev = t;
            }
            assert!((prev - 1.0 / mu).abs() < 1e-9);
        }
    }

    #[test]
    fn pipeline_examples() {
        let s = snap(1.0, &[1.0, 1.0], &[2.0, 2.0]);
        let t = pipeline_latency(&AllocationVector(vec![1, 1]), &s).unwrap();
        assert_eq!(t, Latency::Finite(2.0));
        let single = snap(0.5, &[0.5], &[1.0]);
        assert_eq!(
            pipeline_latency(&AllocationVector(vec![1]), &single).unwrap(),
            mmk_latency(0.5, 1.0, 1)
        );
        let unstable = snap(1.0, &[1.0, 3.0], &[2.0, 1.0]);
        assert_eq!(
            pipeline_latency(&AllocationVector(vec![1, 3]), &unstable).unwrap(),
            Latency::Unbounded
        );
        assert_eq!(
            pipeline_latency(&AllocationVector(vec![1]), &snap(0.0, &[0.0], &[1.0])),
            Err(SchedulerError::ZeroSourceRate)
        );
    }

    #[test]
    fn allocate_examples() {
        let cfg = SchedulerConfig {
            latency_target: 2.0,
            ..SchedulerConfig::default()
        };
        let s = snap(0.0001, &[0.0001], &[1.0]);
        assert_eq!(allocate(&s, &cfg, 8), Allocation::Met(AllocationVector(vec![1])));

        let cfg = SchedulerConfig {
            latency_target: 1e9,
            ..SchedulerConfig::default()
        };
        let s = snap(2.5, &[2.5], &[1.0]);
        assert_eq!(allocate(&s, &cfg, 8).into_vector(), AllocationVector(vec![3]));
    }

    #[test]
    fn allocate_is_stable_and_overloads_gracefully() {
        let cfg = SchedulerConfig {
            latency_target: 1e-6,
            ..SchedulerConfig::default()
        };
        let s = snap(10.0, &[10.0, 5.0], &[2.0, 2.0]);
        let out = allocate(&s, &cfg, 12);
        assert!(out.is_overload());
        assert_eq!(out.vector().total(), 12);

        // Initial demand 6 + 3 exceeds a budget of 6: largest remainder on λ/μ.
        let out = allocate(&s, &cfg, 6);
        assert_eq!(out, Allocation::Overload(AllocationVector(vec![4, 2])));
    }

    #[test]
    fn cold_executors_keep_one_core() {
        let cfg = SchedulerConfig::default();
        let s = snap(100.0, &[100.0, 50.0], &[1000.0, 0.0]);
        let k = allocate(&s, &cfg, 16).into_vector();
        assert_eq!(k.0[1], 1);
        assert!(k.0[0] >= 1);
    }
}
