//! NASA-7 polynomial thermodynamics, ideal-gas mixture properties, Newton
//! temperature inversion, and Sutherland/constant-Prandtl transport.
//!
//! The transported energy variable everywhere in this crate is the absolute
//! (formation-inclusive) enthalpy, so the energy equation carries no separate
//! heat-release source: heat release enters through composition change. Out of
//! range temperatures are clamped to the polynomial limits; each clamp bumps a
//! global counter the step loop can report, since transient overshoots during
//! pressure iterations are expected and not fatal.

use crate::constants::R_UNIVERSAL;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Clamp events since the last call to [`take_clamp_count`].
static CLAMP_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn take_clamp_count() -> u64 {
    CLAMP_COUNT.swap(0, Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum ThermoError {
    #[error("temperature ranges invalid: Tlow {t_low} < Tcommon {t_common} < Thigh {t_high} violated")]
    BadRange { t_low: f64, t_common: f64, t_high: f64 },
    #[error("mass fractions sum to {sum}, outside 1 +- 1e-8")]
    UnnormalizedY { sum: f64 },
    #[error("mass fraction {value} of species {index} outside [0,1]")]
    YOutOfBounds { index: usize, value: f64 },
    #[error("state has {found} mass fractions for {expected} species")]
    SpeciesCount { expected: usize, found: usize },
    #[error("enthalpy {h} J/kg unreachable in [{t_min}, {t_max}] K: range [{h_min}, {h_max}]")]
    EnthalpyOutOfRange { h: f64, t_min: f64, t_max: f64, h_min: f64, h_max: f64 },
    #[error("temperature inversion failed to converge from T = {t_guess} K")]
    InversionDiverged { t_guess: f64 },
}

/// Two-range NASA-7 polynomial set.
#[derive(Debug, Clone, PartialEq)]
pub struct Nasa7 {
    pub low: [f64; 7],
    pub high: [f64; 7],
    pub t_low: f64,
    pub t_common: f64,
    pub t_high: f64,
}

impl Nasa7 {
    pub fn new(
        low: [f64; 7],
        high: [f64; 7],
        t_low: f64,
        t_common: f64,
        t_high: f64,
    ) -> Result<Nasa7, ThermoError> {
        if !(t_low < t_common && t_common < t_high) {
            return Err(ThermoError::BadRange { t_low, t_common, t_high });
        }
        Ok(Nasa7 { low, high, t_low, t_common, t_high })
    }

    /// Clamp T to the validity range, counting excursions.
    fn clamp(&self, t: f64) -> f64 {
        if t < self.t_low {
            CLAMP_COUNT.fetch_add(1, Ordering::Relaxed);
            self.t_low
        } else if t > self.t_high {
            CLAMP_COUNT.fetch_add(1, Ordering::Relaxed);
            self.t_high
        } else {
            t
        }
    }

    fn coeffs(&self, t: f64) -> &[f64; 7] {
        if t < self.t_common {
            &self.low
        } else {
            &self.high
        }
    }
}

/// How a species' dynamic viscosity depends on temperature.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportModel {
    /// mu = As sqrt(T) / (1 + Ts/T).
    Sutherland { a_s: f64, t_s: f64 },
    Constant { mu: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesDef {
    pub name: String,
    /// Molar mass, kg/kmol.
    pub w: f64,
    pub thermo: Nasa7,
    pub transport: TransportModel,
    /// Lewis number for the Fickian closure D_k = lambda/(rho cp Le_k).
    pub lewis: f64,
    /// Elemental composition (element symbol, atoms per molecule), used by
    /// the mechanism atom audit.
    pub composition: Vec<(String, f64)>,
}

impl SpeciesDef {
    /// cp/R, dimensionless.
    pub fn cp_r(&self, t: f64) -> f64 {
        let t = self.thermo.clamp(t);
        let a = self.thermo.coeffs(t);
        a[0] + t * (a[1] + t * (a[2] + t * (a[3] + t * a[4])))
    }

    /// h/(R T), dimensionless. Absolute enthalpy including formation.
    pub fn h_rt(&self, t: f64) -> f64 {
        let t = self.thermo.clamp(t);
        let a = self.thermo.coeffs(t);
        a[0] + t * (a[1] / 2.0 + t * (a[2] / 3.0 + t * (a[3] / 4.0 + t * a[4] / 5.0))) + a[5] / t
    }

    /// s/R at standard pressure, dimensionless.
    pub fn s_r(&self, t: f64) -> f64 {
        let t = self.thermo.clamp(t);
        let a = self.thermo.coeffs(t);
        a[0] * t.ln() + t * (a[1] + t * (a[2] / 2.0 + t * (a[3] / 3.0 + t * a[4] / 4.0))) + a[6]
    }

    /// Specific heat, J/(kg K).
    pub fn cp_mass(&self, t: f64) -> f64 {
        self.cp_r(t) * R_UNIVERSAL / self.w
    }

    /// Absolute enthalpy, J/kg.
    pub fn h_mass(&self, t: f64) -> f64 {
        self.h_rt(t) * R_UNIVERSAL * t / self.w
    }

    /// Molar absolute enthalpy, J/kmol.
    pub fn h_molar(&self, t: f64) -> f64 {
        self.h_rt(t) * R_UNIVERSAL * t
    }

    pub fn viscosity(&self, t: f64) -> f64 {
        match self.transport {
            TransportModel::Sutherland { a_s, t_s } => a_s * t.sqrt() / (1.0 + t_s / t),
            TransportModel::Constant { mu } => mu,
        }
    }
}

/// Point state of an ideal-gas mixture; `y` is ordered like the species list.
#[derive(Debug, Clone, Copy)]
pub struct MixtureState<'a> {
    pub p: f64,
    pub t: f64,
    pub y: &'a [f64],
}

impl MixtureState<'_> {
    pub fn validate(&self, n_species: usize) -> Result<(), ThermoError> {
        if self.y.len() != n_species {
            return Err(ThermoError::SpeciesCount {
                expected: n_species,
                found: self.y.len(),
            });
        }
        let mut sum = 0.0;
        for (k, &yk) in self.y.iter().enumerate() {
            if !(-1e-10..=1.0 + 1e-10).contains(&yk) {
                return Err(ThermoError::YOutOfBounds { index: k, value: yk });
            }
            sum += yk;
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(ThermoError::UnnormalizedY { sum });
        }
        Ok(())
    }
}

/// Mass-weighted mixture specific heat, J/(kg K).
pub fn mixture_cp(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    species
        .iter()
        .zip(state.y)
        .map(|(sp, &yk)| yk * sp.cp_mass(state.t))
        .sum()
}

/// Mass-weighted mixture absolute enthalpy, J/kg.
pub fn mixture_h(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    species
        .iter()
        .zip(state.y)
        .map(|(sp, &yk)| yk * sp.h_mass(state.t))
        .sum()
}

/// Mean molar mass by the harmonic mass-fraction rule, kg/kmol.
pub fn mixture_w(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    let inv: f64 = species
        .iter()
        .zip(state.y)
        .map(|(sp, &yk)| yk / sp.w)
        .sum();
    1.0 / inv
}

/// Compressibility psi = W/(R_u T) in s^2/m^2, so that rho = psi p.
pub fn psi(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    mixture_w(species, state) / (R_UNIVERSAL * state.t)
}

/// Ideal-gas density rho = p W/(R_u T), kg/m^3.
pub fn density(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    psi(species, state) * state.p
}

/// Mass-weighted mixture viscosity, Pa s.
pub fn viscosity(species: &[SpeciesDef], state: &MixtureState) -> f64 {
    species
        .iter()
        .zip(state.y)
        .map(|(sp, &yk)| yk * sp.viscosity(state.t))
        .sum()
}

/// Thermal conductivity from the constant-Prandtl closure lambda = mu cp/Pr.
pub fn conductivity(species: &[SpeciesDef], state: &MixtureState, prandtl: f64) -> f64 {
    viscosity(species, state) * mixture_cp(species, state) / prandtl
}

/// Species diffusivity D_k = lambda/(rho cp Le_k), m^2/s.
pub fn diffusivity(species: &[SpeciesDef], state: &MixtureState, prandtl: f64, k: usize) -> f64 {
    conductivity(species, state, prandtl)
        / (density(species, state) * mixture_cp(species, state) * species[k].lewis)
}

/// Shared polynomial validity window of a species set.
pub fn temperature_range(species: &[SpeciesDef]) -> (f64, f64) {
    let t_min = species.iter().map(|s| s.thermo.t_low).fold(f64::MIN, f64::max);
    let t_max = species.iter().map(|s| s.thermo.t_high).fold(f64::MAX, f64::min);
    (t_min, t_max)
}

/// Invert mixture_h for T: Newton steps T += (h - h(T))/cp(T), clamped to the
/// species' shared range, with bisection fallback. Converges to well below
/// the contract |h(T) - h_target|/cp < 1e-6 K. Returns (T, newton iterations).
pub fn t_from_h_detailed(
    species: &[SpeciesDef],
    h_target: f64,
    p: f64,
    y: &[f64],
    t_guess: f64,
) -> Result<(f64, usize), ThermoError> {
    let (t_min, t_max) = temperature_range(species);
    let h_at = |t: f64| mixture_h(species, &MixtureState { p, t, y });
    let cp_at = |t: f64| mixture_cp(species, &MixtureState { p, t, y });
    let (h_min, h_max) = (h_at(t_min), h_at(t_max));
    // cp > 0 makes h monotone in T, so the range check is exact.
    if h_target < h_min || h_target > h_max {
        return Err(ThermoError::EnthalpyOutOfRange {
            h: h_target,
            t_min,
            t_max,
            h_min,
            h_max,
        });
    }
    let mut t = t_guess.clamp(t_min, t_max);
    for it in 1..=50 {
        let dt = (h_target - h_at(t)) / cp_at(t);
        t = (t + dt).clamp(t_min, t_max);
        // Converge on the landed residual, not the step, so the returned T
        // itself satisfies the contract.
        if ((h_target - h_at(t)) / cp_at(t)).abs() < 1e-8 {
            return Ok((t, it));
        }
    }
    // Newton stalled (pathological polynomials); bisect the bracket.
    let (mut lo, mut hi) = (t_min, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h_at(mid) < h_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            return Ok((0.5 * (lo + hi), 50));
        }
    }
    Err(ThermoError::InversionDiverged { t_guess })
}

pub fn t_from_h(
    species: &[SpeciesDef],
    h_target: f64,
    p: f64,
    y: &[f64],
    t_guess: f64,
) -> Result<f64, ThermoError> {
    t_from_h_detailed(species, h_target, p, y, t_guess).map(|(t, _)| t)
}


#[cfg(test)]
mod tests {
    use super::fixtures::{constant_cp, n2, o2};
    use super::*;

    #[test]
    fn constant_coefficient_species() {
        let sp = constant_cp("A", 10.0, 3.5, 0.0);
        for t in [300.0, 1000.0, 2500.0] {
            assert_eq!(sp.cp_r(t), 3.5);
            assert!((sp.cp_mass(t) - 3.5 * R_UNIVERSAL / 10.0).abs() < 1e-12);
        }
        // Only a6 nonzero: h/RT = a6/T.
        let sp = constant_cp("B", 10.0, 0.0, 500.0);
        assert!((sp.h_rt(1000.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cp_is_dh_dt_and_entropy_consistent() {
        for sp in [n2(), o2()] {
            let mut t = 320.0;
            while t < 4900.0 {
                let dt = 1e-3 * t;
                let dh = (sp.h_mass(t + dt) - sp.h_mass(t - dt)) / (2.0 * dt);
                let cp = sp.cp_mass(t);
                assert!(
                    ((dh - cp) / cp).abs() < 1e-6,
                    "{}: cp mismatch at T = {t}",
                    sp.name
                );
                let ds = (sp.s_r(t + dt) - sp.s_r(t - dt)) / (2.0 * dt);
                let want = sp.cp_r(t) / t;
                assert!(
                    ((ds - want) / want).abs() < 1e-6,
                    "{}: ds/dT mismatch at T = {t}",
                    sp.name
                );
                t *= 1.35;
            }
        }
    }

    #[test]
    fn cp_continuous_at_common_temperature() {
        for sp in [n2(), o2()] {
            let below = sp.cp_r(sp.thermo.t_common - 1e-9);
            let above = sp.cp_r(sp.thermo.t_common + 1e-9);
            assert!(
                ((below - above) / above).abs() < 1e-3,
                "{}: cp jump {below} vs {above}",
                sp.name
            );
        }
    }

    #[test]
    fn out_of_range_clamps_and_counts() {
        let sp = n2();
        take_clamp_count();
        let low = sp.cp_r(100.0);
        let high = sp.cp_r(9000.0);
        assert_eq!(low, sp.cp_r(300.0));
        assert_eq!(high, sp.cp_r(5000.0));
        assert!(take_clamp_count() >= 2);
    }

    #[test]
    fn single_species_mixture_reduces() {
        let species = [n2()];
        let st = MixtureState { p: 101325.0, t: 800.0, y: &[1.0] };
        st.validate(1).unwrap();
        assert_eq!(mixture_cp(&species, &st), species[0].cp_mass(800.0));
        assert_eq!(mixture_h(&species, &st), species[0].h_mass(800.0));
        assert!((mixture_w(&species, &st) - 28.0134).abs() < 1e-10);
    }

    #[test]
    fn equimolar_mean_molar_mass_two_ways() {
        // Equimolar W=2 and W=28: mole-fraction arithmetic gives 15, the
        // harmonic mass-fraction rule must agree.
        let species = [constant_cp("L", 2.0, 3.5, 0.0), constant_cp("H", 28.0, 3.5, 0.0)];
        let y = [2.0 * 0.5 / 15.0, 28.0 * 0.5 / 15.0];
        let st = MixtureState { p: 1e5, t: 500.0, y: &y };
        let w = mixture_w(&species, &st);
        assert!((w - 15.0).abs() < 1e-12, "W = {w}");
    }

    #[test]
    fn ideal_gas_identity() {
        let species = [n2(), o2()];
        let y = [0.77, 0.23];
        for (p, t) in [(101325.0, 300.0), (5e5, 1400.0), (2e4, 2200.0)] {
            let st = MixtureState { p, t, y: &y };
            let lhs = density(&species, &st) * R_UNIVERSAL * t / (p * mixture_w(&species, &st));
            assert!((lhs - 1.0).abs() < 1e-14);
            assert!((density(&species, &st) - psi(&species, &st) * p).abs() < 1e-14);
        }
    }

    #[test]
    fn state_validation_rejects_bad_y() {
        let bad = MixtureState { p: 1e5, t: 300.0, y: &[0.5, 0.6] };
        assert!(matches!(bad.validate(2), Err(ThermoError::UnnormalizedY { .. })));
        let neg = MixtureState { p: 1e5, t: 300.0, y: &[1.2, -0.2] };
        assert!(matches!(neg.validate(2), Err(ThermoError::YOutOfBounds { .. })));
        let wrong = MixtureState { p: 1e5, t: 300.0, y: &[1.0] };
        assert!(matches!(wrong.validate(2), Err(ThermoError::SpeciesCount { .. })));
    }

    #[test]
    fn enthalpy_is_affine_in_composition() {
        let species = [n2(), o2()];
        let t = 1234.0;
        let y1 = [0.9, 0.1];
        let y2 = [0.3, 0.7];
        for alpha in [0.0, 0.25, 0.6, 1.0] {
            let mix: Vec<f64> = y1
                .iter()
                .zip(&y2)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let h_mix = mixture_h(&species, &MixtureState { p: 1e5, t, y: &mix });
            let h1 = mixture_h(&species, &MixtureState { p: 1e5, t, y: &y1 });
            let h2 = mixture_h(&species, &MixtureState { p: 1e5, t, y: &y2 });
            let want = alpha * h1 + (1.0 - alpha) * h2;
            assert!((h_mix - want).abs() < 1e-9 * want.abs());
        }
    }

    #[test]
    fn t_from_h_roundtrip_over_grid() {
        let species = [n2(), o2()];
        let y = [0.6, 0.4];
        for i in 0..50 {
            let t = 300.0 + (2500.0 - 300.0) * i as f64 / 49.0;
            let h = mixture_h(&species, &MixtureState { p: 1e5, t, y: &y });
            let back = t_from_h(&species, h, 1e5, &y, 900.0).unwrap();
            assert!((back - t).abs() < 1e-6, "T = {t}: got {back}");
        }
    }

    #[test]
    fn t_from_h_far_guess_converges() {
        let species = [n2(), o2()];
        let y = [0.5, 0.5];
        let h = mixture_h(&species, &MixtureState { p: 1e5, t: 2400.0, y: &y });
        let t = t_from_h(&species, h, 1e5, &y, 300.0).unwrap();
        assert!((t - 2400.0).abs() < 1e-6);
    }

    #[test]
    fn constant_cp_converges_in_one_newton_step() {
        let species = [constant_cp("A", 20.0, 4.0, 0.0)];
        let y = [1.0];
        let h = mixture_h(&species, &MixtureState { p: 1e5, t: 1700.0, y: &y });
        let (t, iters) = t_from_h_detailed(&species, h, 1e5, &y, 400.0).unwrap();
        assert!((t - 1700.0).abs() < 1e-9);
        assert_eq!(iters, 1);
    }

    #[test]
    fn unreachable_enthalpy_is_an_error() {
        let species = [n2()];
        let y = [1.0];
        let h_hot = mixture_h(&species, &MixtureState { p: 1e5, t: 5000.0, y: &y });
        let r = t_from_h(&species, h_hot * 2.0 + 1e9, 1e5, &y, 1000.0);
        assert!(matches!(r, Err(ThermoError::EnthalpyOutOfRange { .. })));
    }

    #[test]
    fn sutherland_and_lewis_closures() {
        // Ts = 0 reduces to mu = As sqrt(T).
        let free = SpeciesDef {
            transport: TransportModel::Sutherland { a_s: 2e-6, t_s: 0.0 },
            ..n2()
        };
        assert!((free.viscosity(400.0) - 2e-6 * 20.0).abs() < 1e-18);
        // Sutherland ratio mu(600)/mu(300) against the formula.
        let sp = n2();
        let ratio = sp.viscosity(600.0) / sp.viscosity(300.0);
        let want = (600.0f64 / 300.0).sqrt() * (1.0 + 116.0 / 300.0) / (1.0 + 116.0 / 600.0);
        assert!((ratio - want).abs() < 1e-12);
        // Unity Lewis: D = lambda/(rho cp).
        let species = [n2(), o2()];
        let st = MixtureState { p: 1e5, t: 900.0, y: &[0.7, 0.3] };
        let pr = 0.72;
        let d0 = diffusivity(&species, &st, pr, 0);
        let want = conductivity(&species, &st, pr) / (density(&species, &st) * mixture_cp(&species, &st));
        assert!((d0 - want).abs() < 1e-18 + 1e-12 * want);
    }
}
