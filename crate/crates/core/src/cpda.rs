//! Cluster-based baseline: polynomial shares and a Vandermonde solve.
//!
//! Each cluster member `i` hides its value in a random polynomial
//! `p_i(t) = x_i + r_{i,1} t + … + r_{i,m-1} t^{m-1}` over `GF(q)` and sends
//! `p_i(s_j)` to member `j`. Member `j` publishes the column sum
//! `F_j = Σ_i p_i(s_j)`. The `F_j` are evaluations of `Σ_i p_i` at the `m`
//! public seeds, so solving the Vandermonde system recovers its constant
//! term `Σ_i x_i`.
//!
//! Only the arithmetic kernel is modelled, for timing against the ring
//! scheme; cluster formation and messaging are not.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::securesum::{self, Modulus};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CpdaError {
    #[error("cluster size {0} is below the minimum of 3")]
    ClusterTooSmall(usize),
    #[error("seeds must be distinct, nonzero and below q")]
    BadSeeds,
    #[error("value {0} is not below q = {1}")]
    ValueTooLarge(u64, u64),
    #[error("share matrix must be {0}x{0}")]
    Shape(usize),
    #[error("Vandermonde system is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("repetitions must be at least 1")]
    NoRepetitions,
    #[error("{scheme} supports n in [{min}, {max}], got {n}")]
    SizeOutOfRange {
        scheme: Scheme,
        n: usize,
        min: usize,
        max: usize,
    },
}

pub const MIN_CLUSTER: usize = 3;
/// Largest cluster the benchmark accepts.
pub const MAX_CLUSTER: usize = 5;

/// Counts modular multiplications and additions (subtractions count as
/// additions).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul: u64,
    pub add: u64,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.mul + self.add
    }
}

/// Arithmetic mod a prime `q < 2^63`, counting every operation.
#[derive(Debug)]
pub struct PrimeField<'a> {
    q: u64,
    ops: &'a mut OpCounter,
}

impl<'a> PrimeField<'a> {
    pub fn new(q: u64, ops: &'a mut OpCounter) -> Self {
        debug_assert!(q < 1 << 63 && primal_check::miller_rabin(q));
        PrimeField { q, ops }
    }

    #[inline]
    pub fn add(&mut self, a: u64, b: u64) -> u64 {
        self.ops.add += 1;
        let s = a + b;
        if s >= self.q {
            s - self.q
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&mut self, a: u64, b: u64) -> u64 {
        self.ops.add += 1;
        if a >= b {
            a - b
        } else {
            a + self.q - b
        }
    }

    #[inline]
    pub fn mul(&mut self, a: u64, b: u64) -> u64 {
        self.ops.mul += 1;
        ((a as u128 * b as u128) % self.q as u128) as u64
    }

    pub fn pow(&mut self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse by Fermat; `a` must be nonzero.
    pub fn inv(&mut self, a: u64) -> u64 {
        self.pow(a, self.q - 2)
    }
}

/// Smallest prime strictly greater than `bound`.
pub fn next_prime_above(bound: u64) -> u64 {
    let mut c = bound + 1;
    while !primal_check::miller_rabin(c) {
        c += 1;
    }
    c
}

/// Public cluster description: size `m`, public evaluation points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub seeds: Vec<u64>,
    pub q: u64,
}

impl Cluster {
    pub fn new(seeds: Vec<u64>, q: u64) -> Result<Self, CpdaError> {
        if seeds.len() < MIN_CLUSTER {
            return Err(CpdaError::ClusterTooSmall(seeds.len()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() || sorted[0] == 0 || *sorted.last().unwrap() >= q {
            return Err(CpdaError::BadSeeds);
        }
        Ok(Cluster { seeds, q })
    }

    /// Seeds `1..=m` over the smallest prime above `sum_bound`.
    pub fn standard(m: usize, sum_bound: u64) -> Result<Self, CpdaError> {
        let q = next_prime_above(sum_bound.max(m as u64));
        Self::new((1..=m as u64).collect(), q)
    }

    pub fn size(&self) -> usize {
        self.seeds.len()
    }
}

/// `m × m` matrix; row `i` holds member `i`'s shares for every member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareMatrix {
    pub rows: Vec<Vec<u64>>,
}

/// Evaluates `x + Σ_l coeffs[l-1] · s^l` at every seed.
pub fn compute_shares(
    x: u64,
    coeffs: &[u64],
    cluster: &Cluster,
    ops: &mut OpCounter,
) -> Result<Vec<u64>, CpdaError> {
    if x >= cluster.q {
        return Err(CpdaError::ValueTooLarge(x, cluster.q));
    }
    if let Some(&c) = coeffs.iter().find(|&&c| c >= cluster.q) {
        return Err(CpdaError::ValueTooLarge(c, cluster.q));
    }
    let mut f = PrimeField::new(cluster.q, ops);
    Ok(cluster
        .seeds
        .iter()
        .map(|&s| {
            let mut acc = x;
            let mut power = 1;
            for &c in coeffs {
                power = f.mul(power, s);
                let term = f.mul(c, power);
                acc = f.add(acc, term);
            }
            acc
        })
        .collect())
}

/// Draws the `m − 1` random coefficients, then evaluates.
pub fn compute_shares_random<R: Rng + ?Sized>(
    x: u64,
    cluster: &Cluster,
    rng: &mut R,
    ops: &mut OpCounter,
) -> Result<(Vec<u64>, Vec<u64>), CpdaError> {
    let coeffs: Vec<u64> = (1..cluster.size())
        .map(|_| rng.gen_range(0..cluster.q))
        .collect();
    let shares = compute_shares(x, &coeffs, cluster, ops)?;
    Ok((shares, coeffs))
}

/// Column sums `F_j`, then Gaussian elimination on the Vandermonde system.
/// Returns `Σ x_i mod q`.
pub fn assemble_cluster_sum(
    matrix: &ShareMatrix,
    cluster: &Cluster,
    ops: &mut OpCounter,
) -> Result<u64, CpdaError> {
    let m = cluster.size();
    if matrix.rows.len() != m || matrix.rows.iter().any(|r| r.len() != m) {
        return Err(CpdaError::Shape(m));
    }
    let mut f = PrimeField::new(cluster.q, ops);

    // Augmented system: row j is [1, s_j, s_j^2, …, s_j^{m-1} | F_j].
    let mut a: Vec<Vec<u64>> = Vec::with_capacity(m);
    for (j, &s) in cluster.seeds.iter().enumerate() {
        let mut row = Vec::with_capacity(m + 1);
        let mut power = 1;
        row.push(power);
        for _ in 1..m {
            power = f.mul(power, s);
            row.push(power);
        }
        let mut column = matrix.rows[0][j];
        for r in &matrix.rows[1..] {
            column = f.add(column, r[j]);
        }
        row.push(column);
        a.push(row);
    }

    for col in 0..m {
        let pivot = (col..m)
            .find(|&r| a[r][col] != 0)
            .ok_or(CpdaError::Singular)?;
        a.swap(col, pivot);
        let inv = f.inv(a[col][col]);
        for v in &mut a[col][col..] {
            *v = f.mul(*v, inv);
        }
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            let factor = row[col];
            if r == col || factor == 0 {
                continue;
            }
            for (v, &p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                let t = f.mul(factor, p);
                *v = f.sub(*v, t);
            }
        }
    }
    Ok(a[0][m])
}

/// One full cluster aggregation: every member shares, then the system is
/// solved.
pub fn cpda_kernel<R: Rng + ?Sized>(
    values: &[u64],
    cluster: &Cluster,
    rng: &mut R,
    ops: &mut OpCounter,
) -> Result<u64, CpdaError> {
    let rows = values
        .iter()
        .map(|&x| compute_shares_random(x, cluster, rng, ops).map(|(s, _)| s))
        .collect::<Result<Vec<_>, _>>()?;
    assemble_cluster_sum(&ShareMatrix { rows }, cluster, ops)
}

/// One ring aggregation: mask, chain, unmask.
pub fn ring_kernel<R: Rng + ?Sized>(
    values: &[u64],
    m: Modulus,
    rng: &mut R,
    ops: &mut OpCounter,
) -> u64 {
    let r = rng.gen_range(0..m.get());
    let mut acc = securesum::mask_initial(values[0], r, m).expect("inputs below modulus");
    ops.add += 1;
    for &x in &values[1..] {
        acc = securesum::chain_add(acc.get(), x, m).expect("inputs below modulus");
        ops.add += 1;
    }
    let sum = securesum::unmask(acc.get(), r, m).expect("reduced");
    ops.add += 1;
    sum.get()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Ours,
    Cpda,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Ours => "ours",
            Scheme::Cpda => "cpda",
        })
    }
}

impl Scheme {
    pub fn size_range(self) -> (usize, usize) {
        match self {
            Scheme::Ours => (1, usize::MAX),
            Scheme::Cpda => (MIN_CLUSTER, MAX_CLUSTER),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchResult {
    pub scheme: Scheme,
    pub n_nodes: usize,
    pub op_count: u64,
    pub wall_ns_median: u64,
    pub repetitions: usize,
}

/// Per-input bound used by the benchmark workload.
pub const BENCH_VALUE_CAP: u64 = 1 << 16;
/// Kernel runs per timed repetition; the per-run time is the batch time
/// divided by this, which keeps timer resolution out of the measurement.
pub const BENCH_BATCH: u32 = 64;

struct Workload {
    values: Vec<u64>,
    ring: Modulus,
    cluster: Option<Cluster>,
}

impl Workload {
    fn new(scheme: Scheme, n: usize) -> Result<Self, BenchError> {
        let (min, max) = scheme.size_range();
        if !(min..=max).contains(&n) {
            return Err(BenchError::SizeOutOfRange {
                scheme,
                n,
                min,
                max,
            });
        }
        let mut rng = rng::derive(n as u64, Stream::Values, 0);
        let values = (0..n).map(|_| rng.gen_range(0..BENCH_VALUE_CAP)).collect();
        let bound = BENCH_VALUE_CAP * n as u64;
        let cluster = match scheme {
            Scheme::Ours => None,
            Scheme::Cpda => Some(Cluster::standard(n, bound).expect("size checked above")),
        };
        Ok(Workload {
            values,
            ring: Modulus::new(bound.next_power_of_two().max(2)).expect("modulus >= 2"),
            cluster,
        })
    }

    fn run<R: Rng + ?Sized>(&self, rng: &mut R, ops: &mut OpCounter) -> u64 {
        match &self.cluster {
            None => ring_kernel(&self.values, self.ring, rng, ops),
            Some(c) => cpda_kernel(&self.values, c, rng, ops).expect("valid workload"),
        }
    }
}

/// Modular operations one kernel run performs for `n` nodes.
pub fn op_count(scheme: Scheme, n: usize) -> Result<u64, BenchError> {
    let work = Workload::new(scheme, n)?;
    let mut ops = OpCounter::default();
    work.run(&mut rng::derive(0, Stream::Trials, 0), &mut ops);
    Ok(ops.total())
}

/// Times the pure kernel: median over `repetitions` of the mean per-run
/// time of a batch of [`BENCH_BATCH`] runs.
pub fn benchmark_kernel(
    scheme: Scheme,
    n: usize,
    repetitions: usize,
) -> Result<BenchResult, BenchError> {
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let work = Workload::new(scheme, n)?;
    let mut rng = rng::derive(n as u64, Stream::Trials, 0);
    let mut ops = OpCounter::default();
    let expected: u64 = work.values.iter().sum();
    assert_eq!(
        work.run(&mut rng, &mut ops),
        expected,
        "kernel disagrees with direct sum"
    );
    let op_count = ops.total();

    let mut samples: Vec<u64> = (0..repetitions)
        .map(|_| {
            let mut scratch = OpCounter::default();
            let start = Instant::now();
            for _ in 0..BENCH_BATCH {
                black_box(work.run(&mut rng, black_box(&mut scratch)));
            }
            start.elapsed().as_nanos() as u64 / BENCH_BATCH as u64
        })
        .collect();
    samples.sort_unstable();
    Ok(BenchResult {
        scheme,
        n_nodes: n,
        op_count,
        wall_ns_median: samples[samples.len() / 2],
        repetitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(q: u64) -> Cluster {
        Cluster::new(vec![1, 2, 3], q).unwrap()
    }

    #[test]
    fn primes() {
        assert_eq!(next_prime_above(1), 2);
        assert_eq!(next_prime_above(7), 11);
        assert_eq!(next_prime_above(1 << 31), 2_147_483_659);
    }

    #[test]
    fn cluster_validation() {
        assert_eq!(
            Cluster::new(vec![1, 2], 7),
            Err(CpdaError::ClusterTooSmall(2))
        );
        assert_eq!(Cluster::new(vec![1, 2, 2], 7), Err(CpdaError::BadSeeds));
        assert_eq!(Cluster::new(vec![0, 1, 2], 7), Err(CpdaError::BadSeeds));
        assert_eq!(Cluster::new(vec![1, 2, 7], 7), Err(CpdaError::BadSeeds));
        let c = Cluster::standard(4, 100).unwrap();
        assert_eq!(c.seeds, vec![1, 2, 3, 4]);
        assert_eq!(c.q, 101);
    }

    #[test]
    fn constant_polynomial_shares() {
        let mut ops = OpCounter::default();
        let shares = compute_shares(5, &[0, 0], &small(101), &mut ops).unwrap();
        assert_eq!(shares, vec![5, 5, 5]);
    }

    #[test]
    fn linear_polynomial_shares() {
        let mut ops = OpCounter::default();
        let shares = compute_shares(0, &[1, 0], &small(101), &mut ops).unwrap();
        assert_eq!(shares, vec![1, 2, 3]);
    }

    #[test]
    fn random_shares_match_direct_evaluation() {
        let cluster = Cluster::new(vec![3, 7, 11, 19, 23], 1_000_003).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ops = OpCounter::default();
        for _ in 0..50 {
            let x = rng.gen_range(0..cluster.q);
            let (shares, coeffs) = compute_shares_random(x, &cluster, &mut rng, &mut ops).unwrap();
            for (j, &s) in cluster.seeds.iter().enumerate() {
                // Horner in u128, independent of the field helper.
                let q = cluster.q as u128;
                let mut acc: u128 = 0;
                for &c in coeffs.iter().rev() {
                    acc = (acc + c as u128) * s as u128 % q;
                }
                acc = (acc + x as u128) % q;
                assert_eq!(shares[j] as u128, acc);
            }
        }
    }

    #[test]
    fn share_domain_errors() {
        let mut ops = OpCounter::default();
        assert_eq!(
            compute_shares(101, &[0, 0], &small(101), &mut ops),
            Err(CpdaError::ValueTooLarge(101, 101))
        );
        assert!(compute_shares(1, &[0, 200], &small(101), &mut ops).is_err());
    }

    fn matrix(values: &[u64], coeffs: &[Vec<u64>], cluster: &Cluster) -> ShareMatrix {
        let mut ops = OpCounter::default();
        ShareMatrix {
            rows: values
                .iter()
                .zip(coeffs)
                .map(|(&x, c)| compute_shares(x, c, cluster, &mut ops).unwrap())
                .collect(),
        }
    }

    #[test]
    fn three_member_sum() {
        let c = small(101);
        let m = matrix(&[4, 5, 6], &[vec![17, 3], vec![99, 42], vec![0, 58]], &c);
        let mut ops = OpCounter::default();
        assert_eq!(assemble_cluster_sum(&m, &c, &mut ops).unwrap(), 15);
    }

    #[test]
    fn zero_values_sum_to_zero() {
        let c = small(101);
        let m = matrix(&[0, 0, 0], &[vec![5, 6], vec![7, 8], vec![9, 10]], &c);
        assert_eq!(
            assemble_cluster_sum(&m, &c, &mut OpCounter::default()).unwrap(),
            0
        );
    }

    #[test]
    fn constant_system() {
        let c = small(101);
        let m = matrix(&[4, 5, 6], &[vec![0, 0], vec![0, 0], vec![0, 0]], &c);
        let columns: Vec<u64> = (0..3).map(|j| m.rows.iter().map(|r| r[j]).sum()).collect();
        assert_eq!(columns, vec![15, 15, 15]);
        assert_eq!(
            assemble_cluster_sum(&m, &c, &mut OpCounter::default()).unwrap(),
            15
        );
    }

    #[test]
    fn shape_is_checked() {
        let c = small(101);
        let m = ShareMatrix {
            rows: vec![vec![1, 2, 3]; 2],
        };
        assert_eq!(
            assemble_cluster_sum(&m, &c, &mut OpCounter::default()),
            Err(CpdaError::Shape(3))
        );
    }

    #[test]
    fn single_column_hides_every_input() {
        // q = 7, m = 3: for every input, the share sent to member j takes
        // every residue equally often over all coefficient pairs.
        let q = 7;
        let c = small(q);
        for j in 0..3 {
            for x in 0..q {
                let mut counts = [0u32; 7];
                for r1 in 0..q {
                    for r2 in 0..q {
                        let shares =
                            compute_shares(x, &[r1, r2], &c, &mut OpCounter::default()).unwrap();
                        counts[shares[j] as usize] += 1;
                    }
                }
                assert!(counts.iter().all(|&n| n == 7), "j={j} x={x}: {counts:?}");
            }
        }
    }

    #[test]
    fn ring_ops_are_n_plus_one() {
        for n in 1..=50 {
            assert_eq!(op_count(Scheme::Ours, n).unwrap(), n as u64 + 1);
        }
    }

    #[test]
    fn cpda_ops_grow_superlinearly() {
        let counts: Vec<u64> = (3..=5)
            .map(|m| op_count(Scheme::Cpda, m).unwrap())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
        assert!(counts[2] - counts[1] > counts[1] - counts[0], "{counts:?}");
        // Deterministic.
        assert_eq!(op_count(Scheme::Cpda, 4).unwrap(), counts[1]);
    }

    #[test]
    fn bench_argument_errors() {
        assert_eq!(
            benchmark_kernel(Scheme::Ours, 3, 0),
            Err(BenchError::NoRepetitions)
        );
        assert!(matches!(
            benchmark_kernel(Scheme::Cpda, 2, 3),
            Err(BenchError::SizeOutOfRange { n: 2, .. })
        ));
        assert!(benchmark_kernel(Scheme::Cpda, 6, 3).is_err());
        assert!(benchmark_kernel(Scheme::Ours, 0, 3).is_err());
        let r = benchmark_kernel(Scheme::Cpda, 3, 3).unwrap();
        assert_eq!((r.n_nodes, r.repetitions), (3, 3));
    }
}
