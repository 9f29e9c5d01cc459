//! One-class SVM over binary anomaly vectors.
//!
//! Solves the standard dual
//!
//! ```text
//! min  1/2 sum_ij a_i a_j K(x_i, x_j)
//! s.t. 0 <= a_i <= 1/(nu * l),  sum_i a_i = 1
//! ```
//!
//! with an RBF kernel, which on bit vectors is `exp(-gamma * hamming)`.
//! Identical training vectors are merged into one variable whose upper
//! bound is scaled by its multiplicity; the merged problem has the same
//! optimum and makes the solver independent of input order.

use crate::error::{Error, Result};
use crate::persist::{self, FORMAT_VERSION};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const DEFAULT_NU: f64 = 0.05;
/// RBF width used by the pipeline. On binary vectors the kernel is
/// `exp(-gamma * hamming)`, so this puts the similarity of two anomaly sets
/// that differ in ten KPIs at about `1/e`, whatever the catalog size.
pub const HAMMING_GAMMA: f64 = 0.1;
pub const KKT_TOLERANCE: f64 = 1e-6;

/// The solver aims well below the acceptance tolerance so that vectors off
/// the margin do not land on the wrong side of it by rounding.
const SOLVER_TOLERANCE: f64 = 1e-10;

/// Groups above this count get kernel rows computed on demand instead of
/// a dense cache.
const DENSE_KERNEL_LIMIT: usize = 2048;

/// One bit per KPI: set when the autoencoder flags that KPI.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryAnomalyVector {
    len: usize,
    words: Vec<u64>,
}

impl BinaryAnomalyVector {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut v = Self::zeros(len);
        for &i in indices {
            if i >= len {
                return Err(Error::Schema(format!("KPI index {i} out of range for {len} KPIs")));
            }
            v.words[i / 64] |= 1 << (i % 64);
        }
        Ok(v)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let idx: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        Self::from_indices(bits.len(), &idx).expect("indices in range")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

impl fmt::Display for BinaryAnomalyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BinaryAnomalyVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Schema(format!("invalid bit {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bits(&bits))
    }
}

impl Serialize for BinaryAnomalyVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BinaryAnomalyVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OcsvmClass {
    Benign,
    FailureProne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub format_version: u32,
    width: usize,
    support_vectors: Vec<BinaryAnomalyVector>,
    /// Dual coefficient of each support vector, merged over duplicates.
    alpha: Vec<f64>,
    /// How many training vectors each support vector stands for.
    multiplicity: Vec<usize>,
    rho: f64,
    gamma: f64,
    nu: f64,
    training_size: usize,
    seed: u64,
    kkt_violation: f64,
}

fn rbf(gamma: f64, a: &BinaryAnomalyVector, b: &BinaryAnomalyVector) -> f64 {
    (-gamma * a.hamming(b) as f64).exp()
}

struct Kernel<'a> {
    points: &'a [BinaryAnomalyVector],
    gamma: f64,
    dense: Option<Vec<f64>>,
}

impl<'a> Kernel<'a> {
    fn new(points: &'a [BinaryAnomalyVector], gamma: f64) -> Self {
        let g = points.len();
        let dense = (g <= DENSE_KERNEL_LIMIT).then(|| {
            let mut m = vec![0.0; g * g];
            for i in 0..g {
                m[i * g + i] = 1.0;
                for j in 0..i {
                    let k = rbf(gamma, &points[i], &points[j]);
                    m[i * g + j] = k;
                    m[j * g + i] = k;
                }
            }
            m
        });
        Self { points, gamma, dense }
    }

    fn row(&self, i: usize, out: &mut Vec<f64>) {
        let g = self.points.len();
        out.clear();
        match &self.dense {
            Some(m) => out.extend_from_slice(&m[i * g..(i + 1) * g]),
            None => out.extend(self.points.iter().map(|p| rbf(self.gamma, &self.points[i], p))),
        }
    }
}

/// Largest KKT violation of a feasible `alpha` given gradient `grad`.
fn kkt_violation(alpha: &[f64], upper: &[f64], grad: &[f64]) -> f64 {
    let min_up = (0..alpha.len())
        .filter(|&i| alpha[i] < upper[i])
        .map(|i| grad[i])
        .fold(f64::INFINITY, f64::min);
    let max_down = (0..alpha.len())
        .filter(|&i| alpha[i] > 0.0)
        .map(|i| grad[i])
        .fold(f64::NEG_INFINITY, f64::max);
    (max_down - min_up).max(0.0)
}

/// Width-scaled alternative, `1 / width`.
pub fn default_gamma(width: usize) -> f64 {
    1.0 / width.max(1) as f64
}

/// Trains a one-class SVM. The solver is deterministic; `seed` is recorded
/// with the model for provenance.
pub fn train_ocsvm(vectors: &[BinaryAnomalyVector], nu: f64, gamma: f64, seed: u64) -> Result<OcsvmModel> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Parameter(format!("nu must lie in (0, 1], got {nu}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if vectors.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "one-class SVM needs at least 2 training vectors, got {}",
            vectors.len()
        )));
    }
    let width = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != width) {
        return Err(Error::Schema(format!("vector of width {} among width {width}", v.len())));
    }

    let mut groups: BTreeMap<&BinaryAnomalyVector, usize> = BTreeMap::new();
    for v in vectors {
        *groups.entry(v).or_default() += 1;
    }
    let points: Vec<BinaryAnomalyVector> = groups.keys().map(|v| (*v).clone()).collect();
    let counts: Vec<usize> = groups.values().copied().collect();
    let total = vectors.len() as f64;
    let upper: Vec<f64> = counts.iter().map(|&c| c as f64 / (nu * total)).collect();
    let g = points.len();

    let mut alpha = vec![0.0; g];
    let mut remaining = 1.0;
    for (a, u) in alpha.iter_mut().zip(&upper) {
        if remaining <= 0.0 {
            break;
        }
        *a = u.min(remaining);
        remaining -= *a;
    }
    if remaining > 1e-12 {
        return Err(Error::Degenerate(format!("could not place initial mass, {remaining} left over")));
    }

    let kernel = Kernel::new(&points, gamma);
    let mut grad = vec![0.0; g];
    let mut row = Vec::with_capacity(g);
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            kernel.row(i, &mut row);
            for (gr, k) in grad.iter_mut().zip(&row) {
                *gr += a * k;
            }
        }
    }

    let max_iter = 100_000 + 200 * g;
    let mut row_j = Vec::with_capacity(g);
    for _ in 0..max_iter {
        // maximal violating pair: i can grow, j can shrink
        let mut i_sel = None;
        let mut j_sel = None;
        for t in 0..g {
            if alpha[t] < upper[t] && i_sel.is_none_or(|i: usize| grad[t] < grad[i]) {
                i_sel = Some(t);
            }
            if alpha[t] > 0.0 && j_sel.is_none_or(|j: usize| grad[t] > grad[j]) {
                j_sel = Some(t);
            }
        }
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) => (i, j),
            _ => break,
        };
        let gap = grad[j] - grad[i];
        if gap < SOLVER_TOLERANCE || i == j {
            break;
        }
        kernel.row(i, &mut row);
        kernel.row(j, &mut row_j);
        let quad = (row[i] + row_j[j] - 2.0 * row[j]).max(1e-12);
        let room_i = upper[i] - alpha[i];
        let room_j = alpha[j];
        let mut delta = gap / quad;
        if delta >= room_i {
            delta = room_i;
        }
        if delta >= room_j {
            delta = room_j;
        }
        alpha[i] = if delta == room_i { upper[i] } else { alpha[i] + delta };
        alpha[j] = if delta == room_j { 0.0 } else { alpha[j] - delta };
        for t in 0..g {
            grad[t] += delta * (row[t] - row_j[t]);
        }
    }

    // fresh gradient to shed accumulated rounding
    grad.iter_mut().for_each(|x| *x = 0.0);
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            kernel.row(i, &mut row);
            for (gr, k) in grad.iter_mut().zip(&row) {
                *gr += a * k;
            }
        }
    }
    let violation = kkt_violation(&alpha, &upper, &grad);
    if violation > KKT_TOLERANCE {
        return Err(Error::Degenerate(format!(
            "solver stopped with KKT violation {violation:.3e} over {g} distinct vectors"
        )));
    }

    let free: Vec<usize> = (0..g).filter(|&i| alpha[i] > 0.0 && alpha[i] < upper[i]).collect();
    // Margin vectors agree on rho up to the solver tolerance; the smallest
    // of their gradients keeps every one of them on the benign side.
    let rho = if !free.is_empty() {
        free.iter().map(|&i| grad[i]).fold(f64::INFINITY, f64::min)
    } else {
        // No margin vector: any rho between the bound-constrained gradients
        // satisfies KKT; take the midpoint.
        let lo = (0..g).filter(|&i| alpha[i] >= upper[i]).map(|i| grad[i]).fold(f64::NEG_INFINITY, f64::max);
        let hi = (0..g).filter(|&i| alpha[i] <= 0.0).map(|i| grad[i]).fold(f64::INFINITY, f64::min);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => {
                return Err(Error::Degenerate(format!(
                    "no margin support vector and no bound to derive rho from ({g} distinct vectors)"
                )))
            }
        }
    };

    let keep: Vec<usize> = (0..g).filter(|&i| alpha[i] > 0.0).collect();
    Ok(OcsvmModel {
        format_version: FORMAT_VERSION,
        width,
        support_vectors: keep.iter().map(|&i| points[i].clone()).collect(),
        alpha: keep.iter().map(|&i| alpha[i]).collect(),
        multiplicity: keep.iter().map(|&i| counts[i]).collect(),
        rho,
        gamma,
        nu,
        training_size: vectors.len(),
        seed,
        kkt_violation: violation,
    })
}

impl OcsvmModel {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn support_vectors(&self) -> &[BinaryAnomalyVector] {
        &self.support_vectors
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn multiplicity(&self) -> &[usize] {
        &self.multiplicity
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn training_size(&self) -> usize {
        self.training_size
    }

    pub fn kkt_violation(&self) -> f64 {
        self.kkt_violation
    }

    /// Per-training-vector coefficients: each copy of a merged support
    /// vector receives an equal share, all other vectors zero.
    pub fn expanded_alpha(&self, training: &[BinaryAnomalyVector]) -> Vec<f64> {
        training
            .iter()
            .map(|v| match self.support_vectors.iter().position(|s| s == v) {
                Some(k) => self.alpha[k] / self.multiplicity[k] as f64,
                None => 0.0,
            })
            .collect()
    }

    pub fn kernel(&self, a: &BinaryAnomalyVector, b: &BinaryAnomalyVector) -> f64 {
        rbf(self.gamma, a, b)
    }

    pub fn decision_value(&self, x: &BinaryAnomalyVector) -> Result<f64> {
        if x.len() != self.width {
            return Err(Error::Schema(format!(
                "anomaly vector has {} bits, model expects {}",
                x.len(),
                self.width
            )));
        }
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.alpha)
            .map(|(sv, a)| a * rbf(self.gamma, sv, x))
            .sum();
        Ok(sum - self.rho)
    }

    pub fn classify(&self, x: &BinaryAnomalyVector) -> Result<OcsvmClass> {
        Ok(if self.decision_value(x)? >= 0.0 {
            OcsvmClass::Benign
        } else {
            OcsvmClass::FailureProne
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = persist::read_json(path.as_ref())?;
        persist::check_version(model.format_version, "one-class SVM model")?;
        let n = model.support_vectors.len();
        if model.alpha.len() != n || model.multiplicity.len() != n {
            return Err(Error::Schema("support vector arrays differ in length".into()));
        }
        if model.support_vectors.iter().any(|v| v.len() != model.width) {
            return Err(Error::Schema("support vector width differs from model width".into()));
        }
        Ok(model)
    }
}

pub fn decision_value(model: &OcsvmModel, x: &BinaryAnomalyVector) -> Result<f64> {
    model.decision_value(x)
}

pub fn classify_ocsvm(model: &OcsvmModel, x: &BinaryAnomalyVector) -> Result<OcsvmClass> {
    model.classify(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn bits(s: &str) -> BinaryAnomalyVector {
        s.parse().unwrap()
    }

    fn random_set(rng: &mut impl Rng, count: usize, width: usize, density: f64) -> Vec<BinaryAnomalyVector> {
        (0..count)
            .map(|_| BinaryAnomalyVector::from_bits(&(0..width).map(|_| rng.random_bool(density)).collect::<Vec<_>>()))
            .collect()
    }

    /// `-1/2 a'Ka` over the unmerged training set.
    fn dual_objective(v: &[BinaryAnomalyVector], a: &[f64], gamma: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += a[i] * a[j] * rbf(gamma, &v[i], &v[j]);
            }
        }
        -0.5 * s
    }

    /// KKT residual in the unmerged problem.
    fn unmerged_violation(v: &[BinaryAnomalyVector], a: &[f64], nu: f64, gamma: f64) -> f64 {
        let l = v.len();
        let ub = 1.0 / (nu * l as f64);
        let grad: Vec<f64> = (0..l).map(|i| (0..l).map(|j| a[j] * rbf(gamma, &v[i], &v[j])).sum()).collect();
        let upper = vec![ub; l];
        // tiny slack for the per-copy split of merged coefficients
        let clipped: Vec<f64> = a.iter().map(|x| if (x - ub).abs() < 1e-15 { ub } else { *x }).collect();
        kkt_violation(&clipped, &upper, &grad)
    }

    #[test]
    fn bit_vector_basics() {
        let v = BinaryAnomalyVector::from_indices(70, &[0, 65]).unwrap();
        assert_eq!(v.count_ones(), 2);
        assert!(v.get(65) && !v.get(64));
        assert_eq!(v.ones(), vec![0, 65]);
        assert_eq!(v.to_string().parse::<BinaryAnomalyVector>().unwrap(), v);
        assert!(BinaryAnomalyVector::from_indices(4, &[4]).is_err());
        assert_eq!(bits("1100").hamming(&bits("0101")), 2);
    }

    #[test]
    fn parameter_checks() {
        let v = vec![bits("00"), bits("01")];
        assert!(matches!(train_ocsvm(&v, 0.0, 0.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(train_ocsvm(&v, 1.5, 0.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(train_ocsvm(&v, 0.5, 0.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(train_ocsvm(&v[..1], 0.5, 0.5, 0), Err(Error::InsufficientData(_))));
        assert!(matches!(train_ocsvm(&[bits("00"), bits("1")], 0.5, 0.5, 0), Err(Error::Schema(_))));
    }

    #[test]
    fn identical_vectors_are_benign() {
        let v = vec![bits("0110"); 10];
        let m = train_ocsvm(&v, 0.1, 0.25, 0).unwrap();
        assert!(m.decision_value(&bits("0110")).unwrap() >= 0.0);
        assert_eq!(m.classify(&bits("0110")).unwrap(), OcsvmClass::Benign);
    }

    #[test]
    fn all_zero_training_rejects_all_ones() {
        let n = 16;
        let v = vec![BinaryAnomalyVector::zeros(n); 20];
        let m = train_ocsvm(&v, 0.1, 1.0 / n as f64, 0).unwrap();
        let ones = BinaryAnomalyVector::from_indices(n, &(0..n).collect::<Vec<_>>()).unwrap();
        assert_eq!(m.classify(&ones).unwrap(), OcsvmClass::FailureProne);
        assert_eq!(m.classify(&BinaryAnomalyVector::zeros(n)).unwrap(), OcsvmClass::Benign);
    }

    /// Exhaustive search over a coarse grid of feasible coefficients for a
    /// four-point problem; the solver must do at least as well and agree on
    /// the labels of far-away probes.
    #[test]
    fn solver_beats_coarse_grid_search() {
        let n = 16;
        let train: Vec<BinaryAnomalyVector> = [vec![], vec![0], vec![1], vec![0, 1, 2]]
            .iter()
            .map(|idx| BinaryAnomalyVector::from_indices(n, idx).unwrap())
            .collect();
        let (nu, gamma) = (0.5, 1.0 / n as f64);
        let ub = 1.0 / (nu * 4.0);
        let step: f64 = 0.01;
        let steps = (ub / step).round() as usize;
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..=steps {
            for b in 0..=steps {
                for c in 0..=steps {
                    let (a, b, c) = (a as f64 * step, b as f64 * step, c as f64 * step);
                    let d = 1.0 - a - b - c;
                    if d < -1e-12 || d > ub + 1e-12 {
                        continue;
                    }
                    let alpha = vec![a, b, c, d.max(0.0)];
                    let obj = dual_objective(&train, &alpha, gamma);
                    if obj > best.0 {
                        best = (obj, alpha);
                    }
                }
            }
        }
        let m = train_ocsvm(&train, nu, gamma, 0).unwrap();
        let alpha = m.expanded_alpha(&train);
        let obj = dual_objective(&train, &alpha, gamma);
        assert!(obj >= best.0 - 1e-12, "{obj} < grid {}", best.0);
        assert!((obj - best.0).abs() < 1e-3);

        let rho_grid = {
            let a = &best.1;
            let grad: Vec<f64> = (0..4).map(|i| (0..4).map(|j| a[j] * rbf(gamma, &train[i], &train[j])).sum()).collect();
            let free: Vec<usize> = (0..4).filter(|&i| a[i] > 1e-9 && a[i] < ub - 1e-9).collect();
            free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64
        };
        let all_ones = BinaryAnomalyVector::from_indices(n, &(0..n).collect::<Vec<_>>()).unwrap();
        let grid_score: f64 = (0..4).map(|j| best.1[j] * rbf(gamma, &train[j], &all_ones)).sum::<f64>() - rho_grid;
        assert!(grid_score < 0.0);
        assert_eq!(m.classify(&all_ones).unwrap(), OcsvmClass::FailureProne);
    }

    #[test]
    fn half_flipped_vector_is_failure_prone() {
        let n = 16;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let train = random_set(&mut rng, 40, n, 0.05);
        let m = train_ocsvm(&train, 0.05, 1.0 / n as f64, 0).unwrap();
        // flip the 8 bits at even positions relative to the all-zero
        // pattern; every training vector has at most a few bits set
        let probe = BinaryAnomalyVector::from_indices(n, &[0, 2, 4, 6, 8, 10, 12, 14]).unwrap();
        assert!(train.iter().all(|t| t.hamming(&probe) >= 5));
        assert_eq!(m.classify(&probe).unwrap(), OcsvmClass::FailureProne);
    }

    #[test]
    fn margin_support_vector_scores_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let train = random_set(&mut rng, 30, 10, 0.3);
        let m = train_ocsvm(&train, 0.2, 0.1, 0).unwrap();
        let ub_share = 1.0 / (0.2 * 30.0);
        let mut found = false;
        for (k, sv) in m.support_vectors().iter().enumerate() {
            if m.alpha()[k] < ub_share * m.multiplicity()[k] as f64 - 1e-12 {
                assert!(m.decision_value(sv).unwrap().abs() < 1e-6);
                found = true;
            }
        }
        assert!(found);
        assert_eq!(m.kernel(&train[0], &train[0]), 1.0);
    }

    #[test]
    fn decision_value_matches_kernel_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let train = random_set(&mut rng, 25, 12, 0.2);
        let m = train_ocsvm(&train, 0.1, 0.2, 0).unwrap();
        let alpha = m.expanded_alpha(&train);
        for probe in random_set(&mut rng, 10, 12, 0.3) {
            let mut s = 0.0;
            for (t, a) in train.iter().zip(&alpha) {
                let d = (0..12).filter(|&i| t.get(i) != probe.get(i)).count() as f64;
                s += a * (-0.2 * d).exp();
            }
            assert!((m.decision_value(&probe).unwrap() - (s - m.rho())).abs() < 1e-12);
        }
        assert!(matches!(m.decision_value(&bits("01")), Err(Error::Schema(_))));
    }

    #[test]
    fn zero_decision_is_benign() {
        let mut m = train_ocsvm(&[bits("00"), bits("00")], 0.5, 1.0, 0).unwrap();
        m.rho = 1.0;
        assert_eq!(m.decision_value(&bits("00")).unwrap(), 0.0);
        assert_eq!(m.classify(&bits("00")).unwrap(), OcsvmClass::Benign);
    }

    #[test]
    fn mostly_empty_training_keeps_zero_vector_benign() {
        let n = 32;
        let mut train = vec![BinaryAnomalyVector::zeros(n); 90];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        train.extend(random_set(&mut rng, 10, n, 0.05));
        let m = train_ocsvm(&train, DEFAULT_NU, default_gamma(n), 0).unwrap();
        assert_eq!(m.classify(&BinaryAnomalyVector::zeros(n)).unwrap(), OcsvmClass::Benign);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let train = random_set(&mut rng, 20, 70, 0.05);
        let m = train_ocsvm(&train, 0.1, default_gamma(70), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ocsvm.json");
        m.save(&p).unwrap();
        assert_eq!(OcsvmModel::load(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kkt_and_nu_property(seed in any::<u64>(), l in 2usize..=50, nu in 0.05f64..=1.0, density in 0.05f64..0.5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let width = 12;
            let train = random_set(&mut rng, l, width, density);
            let gamma = default_gamma(width);
            let m = train_ocsvm(&train, nu, gamma, seed).unwrap();
            let alpha = m.expanded_alpha(&train);
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let ub = 1.0 / (nu * l as f64);
            prop_assert!(alpha.iter().all(|a| *a >= 0.0 && *a <= ub + 1e-12));
            prop_assert!(m.kkt_violation() < KKT_TOLERANCE);
            prop_assert!(unmerged_violation(&train, &alpha, nu, gamma) < KKT_TOLERANCE + 1e-9);

            let uniform = vec![1.0 / l as f64; l];
            prop_assert!(dual_objective(&train, &alpha, gamma) >= dual_objective(&train, &uniform, gamma) - 1e-12);

            let outliers = train.iter().filter(|v| m.classify(v).unwrap() == OcsvmClass::FailureProne).count();
            prop_assert!(outliers as f64 / l as f64 <= nu + 0.05, "{} of {}", outliers, l);
        }

        #[test]
        fn permutation_leaves_classifications_unchanged(seed in any::<u64>(), l in 2usize..=40) {
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let train = random_set(&mut rng, l, 10, 0.2);
            let mut shuffled = train.clone();
            shuffled.shuffle(&mut rng);
            let a = train_ocsvm(&train, 0.2, 0.1, 0).unwrap();
            let b = train_ocsvm(&shuffled, 0.2, 0.1, 0).unwrap();
            for probe in random_set(&mut rng, 20, 10, 0.3).iter().chain(&train) {
                prop_assert_eq!(a.classify(probe).unwrap(), b.classify(probe).unwrap());
            }
        }
    }
}
