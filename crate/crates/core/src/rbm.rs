//! Gaussian-Bernoulli restricted Boltzmann machine and its free-energy
//! state classifier.
//!
//! The visible layer has one unit per KPI (unit-variance Gaussian, matching
//! z-scored inputs) and the hidden layer has the same number of binary
//! units. Training uses one-step contrastive divergence. The free energy
//! marginalizes the hidden units of the Gaussian joint energy
//! `E(v, h) = |v - a|^2 / 2 - b.h - v'Wh`; the binary-visible form without
//! the quadratic term is available through [`EnergyForm::Binary`]. The classifier
//! flags a snapshot when its free energy deviates from the mean free energy
//! on normal data by more than three standard deviations, in either
//! direction.

use crate::error::{Error, Result};
use crate::persist::{self, FORMAT_VERSION};
use crate::telemetry::{Series, Snapshot};
use crate::training::{order_free_mean_std, seeded_rng, shuffled_indices, TrainConfig};
use crate::State;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Deviation, in standard deviations of the calibration energies, beyond
/// which a snapshot is anomalous.
pub const ENERGY_SIGMA: f64 = 3.0;

/// Energy statistics over normal data. `threshold` is `mean + 3 * std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCalibration {
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
}

/// Which joint energy the free energy marginalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EnergyForm {
    /// `E(v, h) = |v - a|^2 / 2 - b.h - v'Wh`, unit-variance Gaussian visibles.
    #[default]
    Gaussian,
    /// `E(v, h) = -a.v - b.h - v'Wh`.
    Binary,
}

/// `weights` is `visible x hidden`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmModel {
    pub format_version: u32,
    visible: usize,
    hidden: usize,
    visible_bias: Vec<f64>,
    hidden_bias: Vec<f64>,
    weights: Vec<f64>,
    #[serde(default)]
    energy: EnergyForm,
    calibration: Option<EnergyCalibration>,
    config: Option<TrainConfig>,
    trained: bool,
    /// Mean squared one-step reconstruction error per training epoch.
    #[serde(default)]
    reconstruction_errors: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RbmModel {
    /// Seeded initialization with small Gaussian weights and zero biases.
    pub fn initialize(visible: usize, hidden: usize, seed: u64) -> Result<Self> {
        if visible == 0 || hidden == 0 {
            return Err(Error::Architecture("RBM layers must be non-empty".into()));
        }
        let mut rng = seeded_rng(seed, 11);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Ok(Self {
            format_version: FORMAT_VERSION,
            visible,
            hidden,
            visible_bias: vec![0.0; visible],
            hidden_bias: vec![0.0; hidden],
            weights: (0..visible * hidden).map(|_| normal.sample(&mut rng)).collect(),
            energy: EnergyForm::Gaussian,
            calibration: None,
            config: None,
            trained: false,
            reconstruction_errors: Vec::new(),
        })
    }

    pub fn from_parameters(
        visible_bias: Vec<f64>,
        hidden_bias: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let (visible, hidden) = (visible_bias.len(), hidden_bias.len());
        if visible == 0 || hidden == 0 || weights.len() != visible * hidden {
            return Err(Error::Architecture(format!(
                "weights must be {visible}x{hidden}, got {} entries",
                weights.len()
            )));
        }
        if visible_bias.iter().chain(&hidden_bias).chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("RBM parameters must be finite".into()));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            visible,
            hidden,
            visible_bias,
            hidden_bias,
            weights,
            energy: EnergyForm::Gaussian,
            calibration: None,
            config: None,
            trained: true,
            reconstruction_errors: Vec::new(),
        })
    }

    pub fn visible(&self) -> usize {
        self.visible
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn visible_bias(&self) -> &[f64] {
        &self.visible_bias
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.hidden_bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.hidden + j]
    }

    pub fn energy_form(&self) -> EnergyForm {
        self.energy
    }

    /// Switches the energy form. Drops any calibration, which would no
    /// longer match.
    pub fn with_energy_form(mut self, form: EnergyForm) -> Self {
        if form != self.energy {
            self.calibration = None;
        }
        self.energy = form;
        self
    }

    pub fn calibration(&self) -> Option<&EnergyCalibration> {
        self.calibration.as_ref()
    }

    pub fn set_calibration(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
            return Err(Error::InvalidValue(format!("invalid calibration mean={mean} std={std}")));
        }
        self.calibration = Some(EnergyCalibration { mean, std, threshold: mean + ENERGY_SIGMA * std });
        Ok(())
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.config.as_ref()
    }

    pub fn reconstruction_errors(&self) -> &[f64] {
        &self.reconstruction_errors
    }

    fn check_width(&self, len: usize) -> Result<()> {
        if len != self.visible {
            return Err(Error::Schema(format!(
                "snapshot has {len} values, RBM expects {}",
                self.visible
            )));
        }
        Ok(())
    }

    /// Hidden pre-activations `b_j + sum_i W_ij v_i`.
    fn hidden_input(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.hidden_bias);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.hidden..(i + 1) * self.hidden];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * vi;
            }
        }
    }

    /// Gaussian: `F(v) = sum_i (v_i - a_i)^2 / 2 - sum_j softplus(b_j + sum_i W_ij v_i)`.
    /// Binary: `F(v) = -sum_i a_i v_i - sum_j softplus(b_j + sum_i W_ij v_i)`.
    pub fn free_energy(&self, v: &[f64]) -> Result<f64> {
        self.check_width(v.len())?;
        let mut pre = vec![0.0; self.hidden];
        self.hidden_input(v, &mut pre);
        let visible_term: f64 = match self.energy {
            EnergyForm::Gaussian => self.visible_bias.iter().zip(v).map(|(a, x)| 0.5 * (x - a) * (x - a)).sum(),
            EnergyForm::Binary => -self.visible_bias.iter().zip(v).map(|(a, x)| a * x).sum::<f64>(),
        };
        Ok(visible_term - pre.iter().map(|&x| softplus(x)).sum::<f64>())
    }

    pub fn classify_state(&self, v: &[f64]) -> Result<State> {
        let cal = self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::NotCalibrated("RBM energy threshold not calibrated".into()))?;
        let f = self.free_energy(v)?;
        Ok(if (f - cal.mean).abs() > ENERGY_SIGMA * cal.std {
            State::Anomalous
        } else {
            State::Normal
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = persist::read_json(path.as_ref())?;
        persist::check_version(model.format_version, "RBM model")?;
        if model.weights.len() != model.visible * model.hidden
            || model.visible_bias.len() != model.visible
            || model.hidden_bias.len() != model.hidden
        {
            return Err(Error::Architecture("RBM parameter shapes are inconsistent".into()));
        }
        Ok(model)
    }
}

/// Trains an RBM with as many hidden units as KPIs using CD-1.
pub fn train_rbm(train: &Series, cfg: &TrainConfig) -> Result<RbmModel> {
    train_rbm_with_hidden(train, train.width(), cfg)
}

pub fn train_rbm_with_hidden(train: &Series, hidden: usize, cfg: &TrainConfig) -> Result<RbmModel> {
    cfg.validate(true)?;
    if train.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "RBM training needs at least 10 snapshots, got {}",
            train.len()
        )));
    }
    let n = train.width();
    let mut model = RbmModel::initialize(n, hidden, cfg.seed)?;
    let data: Vec<&[f64]> = train.snapshots().iter().map(|s| s.values.as_slice()).collect();
    let mut rng = seeded_rng(cfg.seed, 12);

    let mut grad_w = vec![0.0; n * hidden];
    let mut grad_a = vec![0.0; n];
    let mut grad_b = vec![0.0; hidden];
    let mut h0 = vec![0.0; hidden];
    let mut h1 = vec![0.0; hidden];
    let mut v1 = vec![0.0; n];
    let mut sample = vec![0.0; hidden];

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sq_err = 0.0;
        let order = shuffled_indices(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_a.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &idx in chunk {
                let v0 = data[idx];
                // positive phase
                model.hidden_input(v0, &mut h0);
                h0.iter_mut().for_each(|x| *x = sigmoid(*x));
                for (s, p) in sample.iter_mut().zip(&h0) {
                    *s = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                }
                // reconstruction: mean of the Gaussian visibles given h
                for i in 0..n {
                    let row = &model.weights[i * hidden..(i + 1) * hidden];
                    v1[i] = model.visible_bias[i] + row.iter().zip(&sample).map(|(w, h)| w * h).sum::<f64>();
                }
                // negative phase
                model.hidden_input(&v1, &mut h1);
                h1.iter_mut().for_each(|x| *x = sigmoid(*x));

                for i in 0..n {
                    let gw = &mut grad_w[i * hidden..(i + 1) * hidden];
                    let (a, b) = (v0[i], v1[i]);
                    for j in 0..hidden {
                        gw[j] += a * h0[j] - b * h1[j];
                    }
                    grad_a[i] += a - b;
                    sq_err += (a - b) * (a - b);
                }
                for j in 0..hidden {
                    grad_b[j] += h0[j] - h1[j];
                }
            }
            let step = cfg.learning_rate / chunk.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad_w) {
                *w += step * g;
            }
            for (a, g) in model.visible_bias.iter_mut().zip(&grad_a) {
                *a += step * g;
            }
            for (b, g) in model.hidden_bias.iter_mut().zip(&grad_b) {
                *b += step * g;
            }
        }
        let finite = model
            .weights
            .iter()
            .chain(&model.visible_bias)
            .chain(&model.hidden_bias)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Training { epoch, message: "RBM parameters became non-finite".into() });
        }
        curve.push(sq_err / (data.len() * n) as f64);
    }
    model.trained = true;
    model.reconstruction_errors = curve;
    model.config = Some(cfg.clone());
    Ok(model)
}

/// Sets the energy statistics from normal data. The result does not depend
/// on snapshot order.
pub fn calibrate_threshold(model: &RbmModel, normal: &Series) -> Result<RbmModel> {
    if !model.trained {
        return Err(Error::NotCalibrated("cannot calibrate an untrained RBM".into()));
    }
    if normal.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "energy calibration needs at least 10 snapshots, got {}",
            normal.len()
        )));
    }
    let energies = normal
        .snapshots()
        .iter()
        .map(|s| model.free_energy(&s.values))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = order_free_mean_std(&energies);
    let mut calibrated = model.clone();
    calibrated.set_calibration(mean, std)?;
    Ok(calibrated)
}

pub fn free_energy(model: &RbmModel, v: &Snapshot) -> Result<f64> {
    model.free_energy(&v.values)
}

pub fn classify_state_rbm(model: &RbmModel, snapshot: &Snapshot) -> Result<State> {
    model.classify_state(&snapshot.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{Kpi, KpiCatalog};
    use proptest::prelude::*;
    use std::sync::Arc;
    use rand::Rng;

    fn series(rows: Vec<Vec<f64>>) -> Series {
        let n = rows[0].len();
        let cat = KpiCatalog::new((0..n).map(|i| Kpi::new(format!("k{i}"), "a").unwrap()).collect()).unwrap();
        let snaps = rows.into_iter().enumerate().map(|(t, v)| Snapshot::new(t as u64, v)).collect();
        Series::new(Arc::new(cat), snaps).unwrap()
    }

    /// `-ln sum_h exp(-E(v, h))` over all 2^m binary hidden vectors, using
    /// log-sum-exp. The visible part of `E` is `-a.v` for the binary form
    /// and `|v - a|^2 / 2` for the Gaussian one.
    fn enumerated_free_energy(m: &RbmModel, v: &[f64]) -> f64 {
        let hidden = m.hidden();
        let av: f64 = match m.energy_form() {
            EnergyForm::Binary => m.visible_bias().iter().zip(v).map(|(a, x)| a * x).sum(),
            EnergyForm::Gaussian => -m.visible_bias().iter().zip(v).map(|(a, x)| 0.5 * (x - a).powi(2)).sum::<f64>(),
        };
        let neg_energies: Vec<f64> = (0u32..(1 << hidden))
            .map(|mask| {
                let mut s = av;
                for j in 0..hidden {
                    if mask & (1 << j) != 0 {
                        s += m.hidden_bias()[j];
                        for (i, x) in v.iter().enumerate() {
                            s += x * m.weight(i, j);
                        }
                    }
                }
                s
            })
            .collect();
        let max = neg_energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        -(max + neg_energies.iter().map(|e| (e - max).exp()).sum::<f64>().ln())
    }

    #[test]
    fn zero_model_free_energy_is_minus_m_ln2() {
        for m in [1usize, 3, 7] {
            let model = RbmModel::from_parameters(vec![0.0; m], vec![0.0; m], vec![0.0; m * m])
                .unwrap()
                .with_energy_form(EnergyForm::Binary);
            let v: Vec<f64> = (0..m).map(|i| i as f64 - 1.5).collect();
            let f = model.free_energy(&v).unwrap();
            assert!((f + m as f64 * std::f64::consts::LN_2).abs() < 1e-12);

            let gaussian = model.with_energy_form(EnergyForm::Gaussian);
            let half_sq: f64 = v.iter().map(|x| 0.5 * x * x).sum();
            let f = gaussian.free_energy(&v).unwrap();
            assert!((f - (half_sq - m as f64 * std::f64::consts::LN_2)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_unit_hand_value() {
        let model = RbmModel::from_parameters(vec![2.0], vec![0.0], vec![0.0]).unwrap();
        assert_eq!(model.energy_form(), EnergyForm::Gaussian);
        let f = model.free_energy(&[1.0]).unwrap();
        assert!((f - (0.5 - std::f64::consts::LN_2)).abs() < 1e-15);
        let f = model.with_energy_form(EnergyForm::Binary).free_energy(&[1.0]).unwrap();
        assert!((f - (-2.0 - std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn switching_form_drops_calibration() {
        let mut model = RbmModel::from_parameters(vec![0.0], vec![0.0], vec![0.0]).unwrap();
        model.set_calibration(0.0, 1.0).unwrap();
        let same = model.clone().with_energy_form(EnergyForm::Gaussian);
        assert!(same.calibration().is_some());
        assert!(model.with_energy_form(EnergyForm::Binary).calibration().is_none());
    }

    #[test]
    fn length_mismatch_is_schema_error() {
        let model = RbmModel::initialize(3, 3, 0).unwrap();
        assert!(matches!(model.free_energy(&[1.0]), Err(Error::Schema(_))));
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1e3), 1e3);
        assert_eq!(softplus(-1e3), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        for form in [EnergyForm::Gaussian, EnergyForm::Binary] {
            let model = RbmModel::from_parameters(vec![1.0; 2], vec![0.0; 2], vec![1.0; 4]).unwrap().with_energy_form(form);
            assert!(model.free_energy(&[1e3, 1e3]).unwrap().is_finite());
            assert!(model.free_energy(&[-1e3, -1e3]).unwrap().is_finite());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn free_energy_matches_enumeration(
            m in 1usize..=8,
            seed in any::<u64>(),
            binary in any::<bool>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let model = RbmModel::from_parameters(
                (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ).unwrap().with_energy_form(if binary { EnergyForm::Binary } else { EnergyForm::Gaussian });
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fast = model.free_energy(&v).unwrap();
            let slow = enumerated_free_energy(&model, &v);
            prop_assert!((fast - slow).abs() < 1e-8, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn zero_epochs_returns_seeded_initialization() {
        let s = series(vec![vec![0.5, -0.5, 1.0]; 12]);
        let cfg = TrainConfig { epochs: 0, learning_rate: 0.01, batch_size: 4, seed: 9, patience: 0 };
        let m = train_rbm(&s, &cfg).unwrap();
        let init = RbmModel::initialize(3, 3, 9).unwrap();
        assert_eq!(m.weights(), init.weights());
        assert_eq!(m.visible_bias(), init.visible_bias());
        assert!(m.calibration().is_none());
    }

    #[test]
    fn identical_seeds_identical_parameters() {
        let rows: Vec<Vec<f64>> = (0..40).map(|t| vec![(t as f64 * 0.3).sin(), (t as f64 * 0.3).cos(), 0.1]).collect();
        let s = series(rows);
        let cfg = TrainConfig { epochs: 5, learning_rate: 0.01, batch_size: 8, seed: 4, patience: 0 };
        assert_eq!(train_rbm(&s, &cfg).unwrap(), train_rbm(&s, &cfg).unwrap());
        assert_eq!(train_rbm(&s, &cfg).unwrap().hidden(), 3);
    }

    #[test]
    fn calibration_rules() {
        let untrained = RbmModel::initialize(2, 2, 0).unwrap();
        let s = series(vec![vec![0.0, 0.0]; 12]);
        assert!(matches!(calibrate_threshold(&untrained, &s), Err(Error::NotCalibrated(_))));
        assert!(matches!(untrained.classify_state(&[0.0, 0.0]), Err(Error::NotCalibrated(_))));

        let model = RbmModel::from_parameters(vec![0.3, -0.2], vec![0.1, 0.0], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
        let cal = calibrate_threshold(&model, &s).unwrap();
        let c = cal.calibration().unwrap();
        assert_eq!(c.std, 0.0);
        assert_eq!(c.threshold, c.mean);
        assert_eq!(cal.classify_state(&[0.0, 0.0]).unwrap(), State::Normal);
        assert_eq!(cal.classify_state(&[0.0, 0.01]).unwrap(), State::Anomalous);
    }

    #[test]
    fn calibration_matches_two_pass_oracle_and_is_order_free() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let model = RbmModel::from_parameters(
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let energies: Vec<f64> = rows.iter().map(|r| model.free_energy(r).unwrap()).collect();
        let mean = energies.iter().sum::<f64>() / 50.0;
        let std = (energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 49.0).sqrt();

        let cal = calibrate_threshold(&model, &series(rows.clone())).unwrap();
        let c = cal.calibration().unwrap().clone();
        assert!((c.mean - mean).abs() < 1e-12);
        assert!((c.std - std).abs() < 1e-12);
        assert!((c.threshold - (mean + 3.0 * std)).abs() < 1e-12);

        let again = calibrate_threshold(&cal, &series(rows.clone())).unwrap();
        assert_eq!(again.calibration().unwrap(), &c);

        let mut reversed = rows;
        reversed.reverse();
        let rev = calibrate_threshold(&model, &series(reversed)).unwrap();
        assert_eq!(rev.calibration().unwrap(), &c);
    }

    #[test]
    fn boundary_is_strict() {
        // softplus(-1000) underflows to exactly zero, so F([1]) = 3 exactly.
        let mut model = RbmModel::from_parameters(vec![-3.0], vec![-1000.0], vec![0.0])
            .unwrap()
            .with_energy_form(EnergyForm::Binary);
        assert_eq!(model.free_energy(&[1.0]).unwrap(), 3.0);
        model.set_calibration(0.0, 1.0).unwrap();
        assert_eq!(model.classify_state(&[1.0]).unwrap(), State::Normal);
        assert_eq!(model.classify_state(&[1.5]).unwrap(), State::Anomalous);
        model.set_calibration(3.0, 1.0).unwrap();
        assert_eq!(model.classify_state(&[1.0]).unwrap(), State::Normal);
    }

    #[test]
    fn save_load_round_trip() {
        let s = series((0..20).map(|t| vec![t as f64 * 0.1, -(t as f64) * 0.05]).collect());
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.01, batch_size: 5, seed: 1, patience: 0 };
        let m = calibrate_threshold(&train_rbm(&s, &cfg).unwrap(), &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rbm.json");
        m.save(&p).unwrap();
        assert_eq!(RbmModel::load(&p).unwrap(), m);
    }
}
