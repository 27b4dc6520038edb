//! Arrhenius kinetics and a stiff constant-pressure reactor integrator, plus
//! training-sample generation for the chemistry surrogate.
//!
//! The reactor advances mass fractions with implicit-Euler substeps (Newton on
//! a finite-difference Jacobian) under step-doubling error control;
//! temperature is slaved to the conserved absolute enthalpy through
//! [`thermo::t_from_h`], so adiabatic energy conservation holds by
//! construction rather than by integration accuracy.

use crate::constants::{P_STANDARD, R_UNIVERSAL};
use crate::sparse::DenseLu;
use crate::thermo::{self, MixtureState, SpeciesDef, ThermoError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChemistryError {
    #[error("reaction {reaction}: species index {index} out of range ({n_species} species)")]
    UnknownSpecies { reaction: usize, index: usize, n_species: usize },
    #[error("reaction {reaction}: element {element} unbalanced by {delta} atoms")]
    AtomImbalance { reaction: usize, element: String, delta: f64 },
    #[error("reaction {reaction}: pre-exponential {a} must be positive")]
    BadPreExponential { reaction: usize, a: f64 },
    #[error("reaction {reaction}: third-body efficiency list has {found} entries for {expected} species")]
    ThirdBodyLength { reaction: usize, expected: usize, found: usize },
    #[error("inert species {name} not in species list")]
    UnknownInert { name: String },
    #[error("mass fractions drifted to sum {sum} during integration")]
    SumDrift { sum: f64 },
    #[error(
        "reactor Newton failed at T = {t} K, dt_sub = {dt_sub}: Y = {y:?} (remaining {remaining} of {dt} s)"
    )]
    NewtonFailed { t: f64, y: Vec<f64>, dt_sub: f64, remaining: f64, dt: f64 },
    #[error("cell {cell}: {source}")]
    CellFailed { cell: usize, source: Box<ChemistryError> },
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error("sample table: {0}")]
    BadTable(String),
}

/// Elementary reaction over mechanism species indices. Rates use SI
/// kmol-m-s units; Ea is J/kmol.
#[derive(Debug, Clone)]
pub struct Reaction {
    pub reactants: Vec<(usize, f64)>,
    pub products: Vec<(usize, f64)>,
    pub a: f64,
    pub beta: f64,
    pub ea: f64,
    pub reversible: bool,
    /// Per-species third-body efficiencies; None for reactions without "+ M".
    pub third_body: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Mechanism {
    pub species: Vec<SpeciesDef>,
    pub reactions: Vec<Reaction>,
    /// Indices of inert species (never predicted by the surrogate; absorb
    /// mass-fraction residuals).
    pub inert: Vec<usize>,
}

impl Mechanism {
    /// Validates species references, positivity, third-body lengths, and the
    /// per-element atom balance of every reaction.
    pub fn new(
        species: Vec<SpeciesDef>,
        reactions: Vec<Reaction>,
        inert_names: &[String],
    ) -> Result<Mechanism, ChemistryError> {
        let n = species.len();
        for (r, reaction) in reactions.iter().enumerate() {
            if reaction.a <= 0.0 {
                return Err(ChemistryError::BadPreExponential { reaction: r, a: reaction.a });
            }
            for &(k, _) in reaction.reactants.iter().chain(&reaction.products) {
                if k >= n {
                    return Err(ChemistryError::UnknownSpecies {
                        reaction: r,
                        index: k,
                        n_species: n,
                    });
                }
            }
            if let Some(eff) = &reaction.third_body {
                if eff.len() != n {
                    return Err(ChemistryError::ThirdBodyLength {
                        reaction: r,
                        expected: n,
                        found: eff.len(),
                    });
                }
            }
            // Atom audit: net atoms of each element must vanish.
            let mut elements: Vec<&str> = Vec::new();
            for &(k, _) in reaction.reactants.iter().chain(&reaction.products) {
                for (el, _) in &species[k].composition {
                    if !elements.contains(&el.as_str()) {
                        elements.push(el);
                    }
                }
            }
            for el in elements {
                let count = |side: &[(usize, f64)]| -> f64 {
                    side.iter()
                        .map(|&(k, nu)| {
                            nu * species[k]
                                .composition
                                .iter()
                                .find(|(e, _)| e == el)
                                .map_or(0.0, |&(_, n)| n)
                        })
                        .sum()
                };
                let delta = count(&reaction.products) - count(&reaction.reactants);
                if delta.abs() > 1e-10 {
                    return Err(ChemistryError::AtomImbalance {
                        reaction: r,
                        element: el.to_string(),
                        delta,
                    });
                }
            }
        }
        let mut inert = Vec::new();
        for name in inert_names {
            match species.iter().position(|s| &s.name == name) {
                Some(k) => inert.push(k),
                None => return Err(ChemistryError::UnknownInert { name: name.clone() }),
            }
        }
        Ok(Mechanism { species, reactions, inert })
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn is_inert(&self, k: usize) -> bool {
        self.inert.contains(&k)
    }

    /// Non-inert species indices in species-list order.
    pub fn active_species(&self) -> Vec<usize> {
        (0..self.species.len()).filter(|k| !self.is_inert(*k)).collect()
    }
}

/// Modified Arrhenius forward rate kf = A T^beta exp(-Ea/(Ru T)).
pub fn rate_forward(reaction: &Reaction, t: f64) -> f64 {
    reaction.a * t.powf(reaction.beta) * (-reaction.ea / (R_UNIVERSAL * t)).exp()
}

/// Concentration equilibrium constant Kc = Kp (p0/(Ru T))^dnu with
/// Kp = exp(-dG0/(Ru T)) from the NASA-7 Gibbs function g/RT = h/RT - s/R.
pub fn equilibrium_kc(reaction: &Reaction, t: f64, species: &[SpeciesDef]) -> f64 {
    let g_rt = |k: usize| species[k].h_rt(t) - species[k].s_r(t);
    let mut dg_rt = 0.0;
    let mut dnu = 0.0;
    for &(k, nu) in &reaction.products {
        dg_rt += nu * g_rt(k);
        dnu += nu;
    }
    for &(k, nu) in &reaction.reactants {
        dg_rt -= nu * g_rt(k);
        dnu -= nu;
    }
    (-dg_rt).exp() * (P_STANDARD / (R_UNIVERSAL * t)).powf(dnu)
}

/// Negative-concentration clip events from rate evaluation, in mass-fraction
/// units. Persistent worst values above 1e-6 deserve a step diagnostic.
#[derive(Debug, Clone, Copy, Default)]
pub struct RateDiagnostics {
    pub negative_clips: usize,
    pub worst_clip: f64,
}

/// Molar production rates wdot_k in kmol/(m^3 s).
pub fn production_rates_with_diag(
    mech: &Mechanism,
    state: &MixtureState,
    diag: &mut RateDiagnostics,
) -> Vec<f64> {
    let n = mech.n_species();
    let rho = thermo::density(&mech.species, state);
    let mut conc = vec![0.0; n];
    for k in 0..n {
        let c = rho * state.y[k] / mech.species[k].w;
        if c < 0.0 {
            diag.negative_clips += 1;
            diag.worst_clip = diag.worst_clip.max(-state.y[k]);
            conc[k] = 0.0;
        } else {
            conc[k] = c;
        }
    }
    let mut wdot = vec![0.0; n];
    for reaction in &mech.reactions {
        let kf = rate_forward(reaction, state.t);
        let mut q = kf
            * reaction
                .reactants
                .iter()
                .map(|&(k, nu)| conc[k].powf(nu))
                .product::<f64>();
        if reaction.reversible {
            let kr = kf / equilibrium_kc(reaction, state.t, &mech.species);
            q -= kr
                * reaction
                    .products
                    .iter()
                    .map(|&(k, nu)| conc[k].powf(nu))
                    .product::<f64>();
        }
        if let Some(eff) = &reaction.third_body {
            q *= eff.iter().zip(&conc).map(|(e, c)| e * c).sum::<f64>();
        }
        for &(k, nu) in &reaction.reactants {
            wdot[k] -= nu * q;
        }
        for &(k, nu) in &reaction.products {
            wdot[k] += nu * q;
        }
    }
    wdot
}

pub fn production_rates(mech: &Mechanism, state: &MixtureState) -> Vec<f64> {
    production_rates_with_diag(mech, state, &mut RateDiagnostics::default())
}

/// Constant-pressure adiabatic reactor right-hand side:
/// dY_k/dt = wdot_k W_k/rho, dT/dt = -sum h_k wdot_k W_k/(rho cp).
pub fn reactor_rhs(mech: &Mechanism, state: &MixtureState) -> (Vec<f64>, f64) {
    let wdot = production_rates(mech, state);
    let rho = thermo::density(&mech.species, state);
    let cp = thermo::mixture_cp(&mech.species, state);
    let mut dy = vec![0.0; mech.n_species()];
    let mut heat = 0.0;
    for k in 0..mech.n_species() {
        let flux = wdot[k] * mech.species[k].w;
        dy[k] = flux / rho;
        heat += mech.species[k].h_mass(state.t) * flux;
    }
    (dy, -heat / (rho * cp))
}

#[derive(Debug, Clone, Copy)]
pub struct ReactorTols {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for ReactorTols {
    fn default() -> ReactorTols {
        ReactorTols { abs_tol: 1e-10, rel_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub t: f64,
    pub y: Vec<f64>,
    pub substeps: usize,
    pub newton_iterations: usize,
}

/// dY/dt at fixed pressure with T slaved to the conserved enthalpy h0.
fn rhs_y(mech: &Mechanism, p: f64, h0: f64, y: &[f64], t_guess: f64) -> Result<(Vec<f64>, f64), ChemistryError> {
    let t = thermo::t_from_h(&mech.species, h0, p, y, t_guess)?;
    let state = MixtureState { p, t, y };
    let wdot = production_rates(mech, &state);
    let rho = thermo::density(&mech.species, &state);
    let dy = wdot
        .iter()
        .zip(&mech.species)
        .map(|(w, sp)| w * sp.w / rho)
        .collect();
    Ok((dy, t))
}

/// One implicit-Euler step of size dt on Y, Newton with a finite-difference
/// Jacobian. Returns (y_new, t_new, newton iterations) or None on
/// non-convergence (caller halves the step).
fn implicit_euler_step(
    mech: &Mechanism,
    p: f64,
    h0: f64,
    y: &[f64],
    t_guess: f64,
    dt: f64,
    tols: &ReactorTols,
) -> Result<Option<(Vec<f64>, f64, usize)>, ChemistryError> {
    let n = mech.n_species();
    let mut v = y.to_vec();
    let mut t_v = t_guess;
    for it in 1..=12 {
        let (f_v, t_now) = rhs_y(mech, p, h0, &v, t_v)?;
        t_v = t_now;
        // Residual G(v) = v - y - dt f(v).
        let g: Vec<f64> = (0..n).map(|k| v[k] - y[k] - dt * f_v[k]).collect();
        // J = I - dt df/dv by forward differences.
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let h = f64::EPSILON.sqrt() * v[j].abs().max(1e-3);
            let mut vp = v.clone();
            vp[j] += h;
            let (f_p, _) = rhs_y(mech, p, h0, &vp, t_v)?;
            for i in 0..n {
                jac[i * n + j] = -dt * (f_p[i] - f_v[i]) / h;
            }
            jac[j * n + j] += 1.0;
        }
        let delta = DenseLu::factor(jac, n).solve(&g);
        let mut converged = true;
        for k in 0..n {
            v[k] -= delta[k];
            if delta[k].abs() > 0.1 * (tols.abs_tol + tols.rel_tol * v[k].abs()) {
                converged = false;
            }
        }
        if converged {
            let t_final = thermo::t_from_h(&mech.species, h0, p, &v, t_v)?;
            return Ok(Some((v, t_final, it)));
        }
    }
    Ok(None)
}

/// Advance one constant-pressure adiabatic reactor state over dt.
pub fn integrate_cell(
    mech: &Mechanism,
    p: f64,
    t0: f64,
    y0: &[f64],
    dt: f64,
    tols: &ReactorTols,
) -> Result<CellResult, ChemistryError> {
    let h0 = thermo::mixture_h(&mech.species, &MixtureState { p, t: t0, y: y0 });
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut remaining = dt;
    let mut sub = dt;
    let mut substeps = 0;
    let mut newton_total = 0;
    while remaining > 0.0 {
        sub = sub.min(remaining);
        if sub < dt * 1e-12 {
            return Err(ChemistryError::NewtonFailed {
                t,
                y,
                dt_sub: sub,
                remaining,
                dt,
            });
        }
        let full = implicit_euler_step(mech, p, h0, &y, t, sub, tols)?;
        let halves = match &full {
            Some(_) => match implicit_euler_step(mech, p, h0, &y, t, 0.5 * sub, tols)? {
                Some((y_h, t_h, n_h)) => implicit_euler_step(mech, p, h0, &y_h, t_h, 0.5 * sub, tols)?
                    .map(|(y2, t2, n2)| (y2, t2, n_h + n2)),
                None => None,
            },
            None => None,
        };
        let (Some((y_full, _, n_f)), Some((y_fine, t_fine, n_h))) = (full, halves) else {
            sub *= 0.5;
            continue;
        };
        newton_total += n_f + n_h;
        // Step-doubling error estimate on the first-order method.
        let mut err: f64 = 0.0;
        for k in 0..y.len() {
            let scale = tols.abs_tol + tols.rel_tol * y_full[k].abs().max(y_fine[k].abs());
            err = err.max((y_full[k] - y_fine[k]).abs() / scale);
        }
        if err <= 1.0 {
            // Local extrapolation: 2 y_fine - y_full cancels the first-order
            // truncation term, so the accepted value is well inside the
            // budget the estimate controls.
            y = y_fine
                .iter()
                .zip(&y_full)
                .map(|(f, c)| 2.0 * f - c)
                .collect();
            t = thermo::t_from_h(&mech.species, h0, p, &y, t_fine)?;
            remaining -= sub;
            substeps += 1;
            sub *= (0.9 / err.max(1e-4).sqrt()).min(2.0);
        } else {
            sub *= (0.9 / err.sqrt()).max(0.1);
        }
    }
    let sum: f64 = y.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(ChemistryError::SumDrift { sum });
    }
    for yk in &mut y {
        *yk /= sum;
    }
    let t_final = thermo::t_from_h(&mech.species, h0, p, &y, t)?;
    Ok(CellResult { t: t_final, y, substeps, newton_iterations: newton_total })
}

/// Integrate every cell of component-major fields independently. `y` holds
/// n_species components of length n_cells; `t` and `p` are per-cell.
pub fn integrate_field(
    mech: &Mechanism,
    p: &[f64],
    t: &mut [f64],
    y: &mut [f64],
    dt: f64,
    tols: &ReactorTols,
) -> Result<(), ChemistryError> {
    let n_cells = t.len();
    let n = mech.n_species();
    let mut y_cell = vec![0.0; n];
    for c in 0..n_cells {
        for k in 0..n {
            y_cell[k] = y[k * n_cells + c];
        }
        let out = integrate_cell(mech, p[c], t[c], &y_cell, dt, tols)
            .map_err(|e| ChemistryError::CellFailed { cell: c, source: Box::new(e) })?;
        t[c] = out.t;
        for k in 0..n {
            y[k * n_cells + c] = out.y[k];
        }
    }
    Ok(())
}

/// Sampling ranges for surrogate training data.
#[derive(Debug, Clone, Copy)]
pub struct SampleRanges {
    pub t_min: f64,
    pub t_max: f64,
    pub p: f64,
}

/// Training-sample table: per row T, p, Y_1..Y_n, rate_1..rate_n where the
/// rates are the finite increments dY/dt over the sampling dt.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub species_names: Vec<String>,
    pub dt: f64,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn n_columns(&self) -> usize {
        2 + 2 * self.species_names.len()
    }
}

/// Draw n random reactor states (T uniform in range, Y Dirichlet over
/// non-inert species, fixed p), integrate each over dt, and record the
/// finite-increment labels. Fixed seed gives a bitwise-identical table.
pub fn generate_samples(
    mech: &Mechanism,
    ranges: &SampleRanges,
    dt: f64,
    n: usize,
    seed: u64,
    tols: &ReactorTols,
) -> Result<SampleTable, ChemistryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sp = mech.n_species();
    let active = mech.active_species();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = ranges.t_min + (ranges.t_max - ranges.t_min) * rng.gen::<f64>();
        // Dirichlet(1,..,1) over active species via normalized Exp(1) draws.
        let mut y = vec![0.0; n_sp];
        let mut total = 0.0;
        for &k in &active {
            let g = -(rng.gen::<f64>()).ln();
            y[k] = g;
            total += g;
        }
        for &k in &active {
            y[k] /= total;
        }
        let out = integrate_cell(mech, ranges.p, t0, &y, dt, tols)?;
        let mut row = Vec::with_capacity(2 + 2 * n_sp);
        row.push(t0);
        row.push(ranges.p);
        row.extend_from_slice(&y);
        for k in 0..n_sp {
            row.push((out.y[k] - y[k]) / dt);
        }
        rows.push(row);
    }
    Ok(SampleTable {
        species_names: mech.species.iter().map(|s| s.name.clone()).collect(),
        dt,
        rows,
    })
}

/// Serialize a sample table: a dt comment, a header naming columns, then one
/// full-precision row per sample.
pub fn write_sample_table(table: &SampleTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("# dt {:e}\n", table.dt));
    out.push('T');
    out.push_str(" p");
    for name in &table.species_names {
        out.push_str(&format!(" Y_{name}"));
    }
    for name in &table.species_names {
        out.push_str(&format!(" rate_{name}"));
    }
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_sample_table(text: &str) -> Result<SampleTable, ChemistryError> {
    let mut lines = text.lines();
    let dt_line = lines
        .next()
        .ok_or_else(|| ChemistryError::BadTable("empty file".into()))?;
    let dt: f64 = dt_line
        .strip_prefix("# dt ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| ChemistryError::BadTable(format!("bad dt line {dt_line:?}")))?;
    let header = lines
        .next()
        .ok_or_else(|| ChemistryError::BadTable("missing header".into()))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    if cols.len() < 4 || cols[0] != "T" || cols[1] != "p" || cols.len() % 2 != 0 {
        return Err(ChemistryError::BadTable(format!("bad header {header:?}")));
    }
    let n_sp = (cols.len() - 2) / 2;
    let mut names = Vec::with_capacity(n_sp);
    for (i, col) in cols[2..2 + n_sp].iter().enumerate() {
        match col.strip_prefix("Y_") {
            Some(name) => names.push(name.to_string()),
            None => {
                return Err(ChemistryError::BadTable(format!(
                    "column {} should be a Y_ column, got {col:?}",
                    i + 2
                )))
            }
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|e| ChemistryError::BadTable(format!("line {}: {e}", ln + 3)))?;
        if row.len() != cols.len() {
            return Err(ChemistryError::BadTable(format!(
                "line {}: {} values, expected {}",
                ln + 3,
                row.len(),
                cols.len()
            )));
        }
        rows.push(row);
    }
    Ok(SampleTable { species_names: names, dt, rows })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::thermo::fixtures::constant_cp;

    fn state_y1(p: f64, t: f64) -> MixtureState<'static> {
        MixtureState { p, t, y: &[1.0, 0.0] }
    }

    #[test]
    fn forward_rate_reduces_to_a() {
        let r = &mech_ab(7.5).reactions[0];
        for t in [300.0, 1000.0, 3000.0] {
            assert_eq!(rate_forward(r, t), 7.5);
        }
    }

    #[test]
    fn forward_rate_hand_value_and_monotonicity() {
        let r = Reaction {
            reactants: vec![(0, 1.0)],
            products: vec![(1, 1.0)],
            a: 2.0,
            beta: 0.5,
            ea: 1000.0 * R_UNIVERSAL,
            reversible: false,
            third_body: None,
        };
        let want = 2.0 * 1000.0f64.sqrt() * (-1.0f64).exp();
        assert!((rate_forward(&r, 1000.0) - want).abs() < 1e-12 * want);
        let mut prev = 0.0;
        for i in 1..40 {
            let kf = rate_forward(&r, 100.0 * i as f64);
            assert!(kf > prev);
            prev = kf;
        }
    }

    #[test]
    fn symmetric_reaction_has_unit_kc_and_detailed_balance() {
        // Identical thermo on both sides: dG = 0, dnu = 0.
        let mech = Mechanism::new(
            vec![constant_cp("A", 10.0, 3.5, 0.0), constant_cp("B", 10.0, 3.5, 0.0)],
            vec![Reaction {
                reactants: vec![(0, 1.0)],
                products: vec![(1, 1.0)],
                a: 5.0,
                beta: 0.0,
                ea: 0.0,
                reversible: true,
                third_body: None,
            }],
            &[],
        )
        .unwrap();
        for t in [400.0, 1000.0, 2500.0] {
            let kc = equilibrium_kc(&mech.reactions[0], t, &mech.species);
            assert!((kc - 1.0).abs() < 1e-12);
        }
        let st = MixtureState { p: 1e5, t: 1000.0, y: &[0.5, 0.5] };
        let wdot = production_rates(&mech, &st);
        assert!(wdot[0].abs() < 1e-14 && wdot[1].abs() < 1e-14);
    }

    #[test]
    fn kc_four_reaches_algebraic_equilibrium() {
        let mech = mech_ab_reversible();
        let kc = equilibrium_kc(&mech.reactions[0], 1000.0, &mech.species);
        assert!((kc - 4.0).abs() < 1e-12);
        // A <=> B with Kc = 4 from Y = (1, 0): equilibrium Y_B = 4/5. The
        // species share thermo up to the entropy offset, so T is constant.
        let out = integrate_cell(&mech, 1e5, 1000.0, &[1.0, 0.0], 20.0, &ReactorTols::default())
            .unwrap();
        assert!((out.y[1] - 0.8).abs() < 1e-6, "Y_B = {}", out.y[1]);
        assert!((out.t - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn production_rate_hand_case() {
        // [A] = p/(Ru T) = 3 kmol/m^3, kf = 2: wdot = (-6, +6).
        let mech = mech_ab(2.0);
        let t = 1000.0;
        let p = 3.0 * R_UNIVERSAL * t;
        let wdot = production_rates(&mech, &state_y1(p, t));
        assert!((wdot[0] + 6.0).abs() < 1e-12);
        assert!((wdot[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_reactants_no_rates() {
        let mech = mech_fuel3();
        let st = MixtureState { p: 1e5, t: 1500.0, y: &[0.0, 0.0, 1.0] };
        assert!(production_rates(&mech, &st).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn negative_concentration_clips_with_diagnostic() {
        let mech = mech_ab(2.0);
        let st = MixtureState { p: 1e5, t: 1000.0, y: &[1.00002, -2e-5] };
        let mut diag = RateDiagnostics::default();
        let wdot = production_rates_with_diag(&mech, &st, &mut diag);
        assert_eq!(diag.negative_clips, 1);
        assert!((diag.worst_clip - 2e-5).abs() < 1e-18);
        assert!(wdot[0] < 0.0);
    }

    #[test]
    fn mass_conservation_on_random_states() {
        let mech = mech_fuel3();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen::<f64>() * (1.0 - a);
            let y = [a, b, 1.0 - a - b];
            let st = MixtureState {
                p: 5e4 + 2e5 * rng.gen::<f64>(),
                t: 400.0 + 2000.0 * rng.gen::<f64>(),
                y: &y,
            };
            let wdot = production_rates(&mech, &st);
            let mdot: f64 = wdot.iter().zip(&mech.species).map(|(w, s)| w * s.w).sum();
            let scale: f64 = wdot
                .iter()
                .zip(&mech.species)
                .map(|(w, s)| (w * s.w).abs())
                .fold(0.0, f64::max)
                .max(1e-300);
            assert!(mdot.abs() <= 1e-12 * scale, "mdot {mdot} scale {scale}");
        }
    }

    #[test]
    fn reactor_rhs_signs_and_enthalpy_identity() {
        // Exothermic A -> B (h_A > h_B): temperature must rise.
        let mech = Mechanism::new(
            vec![constant_cp("A", 10.0, 3.5, 2000.0), constant_cp("B", 10.0, 3.5, 0.0)],
            vec![Reaction {
                reactants: vec![(0, 1.0)],
                products: vec![(1, 1.0)],
                a: 4.0,
                beta: 0.0,
                ea: 0.0,
                reversible: false,
                third_body: None,
            }],
            &[],
        )
        .unwrap();
        let y = [0.7, 0.3];
        let st = MixtureState { p: 1e5, t: 900.0, y: &y };
        let (dy, dtemp) = reactor_rhs(&mech, &st);
        assert!(dtemp > 0.0);
        // d/dt of mixture enthalpy: sum h_k dY_k + cp dT = 0.
        let h_dot: f64 = dy
            .iter()
            .zip(&mech.species)
            .map(|(d, sp)| d * sp.h_mass(900.0))
            .sum();
        let cp = thermo::mixture_cp(&mech.species, &st);
        let scale = h_dot.abs().max(cp * dtemp.abs());
        assert!((h_dot + cp * dtemp).abs() < 1e-10 * scale);
    }

    #[test]
    fn zero_reactions_identity() {
        let mech = Mechanism::new(
            vec![constant_cp("A", 10.0, 3.5, 0.0), constant_cp("B", 12.0, 3.6, 0.0)],
            vec![],
            &[],
        )
        .unwrap();
        let out = integrate_cell(&mech, 1e5, 1100.0, &[0.25, 0.75], 1.0, &ReactorTols::default())
            .unwrap();
        assert_eq!(out.y, vec![0.25, 0.75]);
        assert!((out.t - 1100.0).abs() < 1e-8);
    }

    #[test]
    fn linear_decay_matches_analytic() {
        // Equal W and h: dY_A/dt = -kf Y_A exactly, isothermal.
        let kf = 5.0;
        let mech = mech_ab(kf);
        let dt = 0.3;
        let out = integrate_cell(&mech, 1e5, 1000.0, &[1.0, 0.0], dt, &ReactorTols::default())
            .unwrap();
        let want = (-kf * dt).exp();
        assert!(
            ((out.y[0] - want) / want).abs() < 1e-6,
            "Y_A = {}, analytic {want}",
            out.y[0]
        );
    }

    #[test]
    fn stiff_chain_matches_fine_rk4_oracle() {
        let mech = mech_stiff();
        let dt = 1e-4;
        // RK4 on the full (Y, T) reactor at dt/1e6: resolves the fast mode
        // (lambda h = 0.01) with fourth-order accuracy.
        let oracle = |t0: f64, y0: &[f64], steps: usize| -> (Vec<f64>, f64) {
            let h = dt / steps as f64;
            let mut y = y0.to_vec();
            let mut t = t0;
            let rhs = |y: &[f64], t: f64| reactor_rhs(&mech, &MixtureState { p: 1e5, t, y });
            for _ in 0..steps {
                let (k1, l1) = rhs(&y, t);
                let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
                let (k2, l2) = rhs(&y2, t + 0.5 * h * l1);
                let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
                let (k3, l3) = rhs(&y3, t + 0.5 * h * l2);
                let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
                let (k4, l4) = rhs(&y4, t + h * l3);
                for i in 0..y.len() {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                t += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
            }
            (y, t)
        };
        // Single state at the full 1e6-substep oracle resolution.
        let y0 = [0.6, 0.3, 0.1];
        let (y_ref, _) = oracle(1200.0, &y0, 1_000_000);
        let out = integrate_cell(&mech, 1e5, 1200.0, &y0, dt, &ReactorTols::default()).unwrap();
        for k in 0..3 {
            assert!(
                (out.y[k] - y_ref[k]).abs() < 1e-6,
                "species {k}: {} vs {}",
                out.y[k],
                y_ref[k]
            );
        }
        // 100-state random sweep against a 1e4-substep oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen::<f64>() * (1.0 - a);
            let y0 = [a, b, 1.0 - a - b];
            let t0 = 800.0 + 1000.0 * rng.gen::<f64>();
            let (y_ref, _) = oracle(t0, &y0, 10_000);
            let out = integrate_cell(&mech, 1e5, t0, &y0, dt, &ReactorTols::default()).unwrap();
            for k in 0..3 {
                assert!(
                    (out.y[k] - y_ref[k]).abs() < 1e-6,
                    "T0 {t0} Y0 {y0:?} species {k}: {} vs {}",
                    out.y[k],
                    y_ref[k]
                );
            }
        }
    }

    #[test]
    fn integration_conserves_mass_elements_enthalpy() {
        let mech = mech_fuel3();
        let tols = ReactorTols::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen::<f64>() * (1.0 - a);
            let y0 = [a, b, 1.0 - a - b];
            let t0 = 900.0 + 800.0 * rng.gen::<f64>();
            let p = 1e5;
            let out = integrate_cell(&mech, p, t0, &y0, 0.05, &tols).unwrap();
            let sum: f64 = out.y.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            // Element conservation: atoms per mass = sum_k Y_k n_el_k / W_k.
            for el in ["F", "X"] {
                let atoms = |y: &[f64]| -> f64 {
                    y.iter()
                        .zip(&mech.species)
                        .map(|(yk, sp)| {
                            yk / sp.w
                                * sp.composition
                                    .iter()
                                    .find(|(e, _)| e == el)
                                    .map_or(0.0, |&(_, n)| n)
                        })
                        .sum()
                };
                let (before, after) = (atoms(&y0), atoms(&out.y));
                assert!(
                    (after - before).abs() < 1e-8 * before.abs().max(1e-3),
                    "element {el}: {before} -> {after}"
                );
            }
            let h0 = thermo::mixture_h(&mech.species, &MixtureState { p, t: t0, y: &y0 });
            let h1 = thermo::mixture_h(&mech.species, &MixtureState { p, t: out.t, y: &out.y });
            assert!(((h1 - h0) / h0).abs() < 1e-8, "h {h0} -> {h1}");
        }
    }

    #[test]
    fn field_integration_matches_per_cell_and_uniformity() {
        let mech = mech_stiff();
        let tols = ReactorTols::default();
        let n_cells = 5;
        let p = vec![1e5; n_cells];
        let mut t = vec![1000.0, 1200.0, 1000.0, 1500.0, 1000.0];
        let mut y = vec![0.0; 3 * n_cells];
        let states = [
            [0.5, 0.3, 0.2],
            [0.9, 0.05, 0.05],
            [0.5, 0.3, 0.2],
            [0.2, 0.2, 0.6],
            [0.5, 0.3, 0.2],
        ];
        for (c, st) in states.iter().enumerate() {
            for k in 0..3 {
                y[k * n_cells + c] = st[k];
            }
        }
        let t_in = t.clone();
        integrate_field(&mech, &p, &mut t, &mut y, 1e-5, &tols).unwrap();
        for (c, st) in states.iter().enumerate() {
            let cell = integrate_cell(&mech, 1e5, t_in[c], st, 1e-5, &tols).unwrap();
            assert_eq!(t[c], cell.t, "cell {c}");
            for k in 0..3 {
                assert_eq!(y[k * n_cells + c], cell.y[k], "cell {c} species {k}");
            }
        }
        // Identical inputs (cells 0, 2, 4) give identical outputs.
        assert_eq!(t[0], t[2]);
        assert_eq!(t[0], t[4]);
    }

    #[test]
    fn sample_generation_format_and_reproducibility() {
        let mech = mech_fuel3();
        let ranges = SampleRanges { t_min: 900.0, t_max: 1600.0, p: 1e5 };
        let tols = ReactorTols::default();
        let t1 = generate_samples(&mech, &ranges, 1e-3, 40, 42, &tols).unwrap();
        assert_eq!(t1.rows.len(), 40);
        assert_eq!(t1.n_columns(), 2 + 2 * 3);
        for row in &t1.rows {
            assert_eq!(row.len(), 8);
            assert!(row[0] >= 900.0 && row[0] <= 1600.0);
            assert_eq!(row[1], 1e5);
            let sum: f64 = row[2..5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let t2 = generate_samples(&mech, &ranges, 1e-3, 40, 42, &tols).unwrap();
        assert_eq!(t1, t2);
        let t3 = generate_samples(&mech, &ranges, 1e-3, 40, 43, &tols).unwrap();
        assert_ne!(t1, t3);
        // Recorded label is reproduced bitwise by re-integrating the input.
        for row in t1.rows.iter().step_by(13) {
            let y0 = &row[2..5];
            let out = integrate_cell(&mech, row[1], row[0], y0, 1e-3, &tols).unwrap();
            for k in 0..3 {
                assert_eq!(row[5 + k], (out.y[k] - y0[k]) / 1e-3);
            }
        }
    }

    #[test]
    fn sample_table_text_roundtrip() {
        let mech = mech_ab(2.0);
        let ranges = SampleRanges { t_min: 800.0, t_max: 1200.0, p: 2e5 };
        let table =
            generate_samples(&mech, &ranges, 1e-2, 7, 5, &ReactorTols::default()).unwrap();
        let text = write_sample_table(&table);
        let back = parse_sample_table(&text).unwrap();
        assert_eq!(table, back);
        assert!(parse_sample_table("garbage\n").is_err());
    }

    #[test]
    fn mechanism_validation() {
        use crate::thermo::fixtures::constant_cp;
        // Unbalanced F2 -> F is rejected naming the element.
        let mut f2 = constant_cp("F2", 4.0, 3.5, 0.0);
        f2.composition = vec![("F".into(), 2.0)];
        let mut f1 = constant_cp("F", 2.0, 3.5, 0.0);
        f1.composition = vec![("F".into(), 1.0)];
        let bad = Mechanism::new(
            vec![f2.clone(), f1.clone()],
            vec![Reaction {
                reactants: vec![(0, 1.0)],
                products: vec![(1, 1.0)],
                a: 1.0,
                beta: 0.0,
                ea: 0.0,
                reversible: false,
                third_body: None,
            }],
            &[],
        );
        match bad {
            Err(ChemistryError::AtomImbalance { element, .. }) => assert_eq!(element, "F"),
            other => panic!("expected atom imbalance, got {other:?}"),
        }
        // Nonpositive A rejected.
        let bad_a = Mechanism::new(
            vec![f2.clone(), f1.clone()],
            vec![Reaction {
                reactants: vec![(0, 1.0)],
                products: vec![(1, 2.0)],
                a: 0.0,
                beta: 0.0,
                ea: 0.0,
                reversible: false,
                third_body: None,
            }],
            &[],
        );
        assert!(matches!(bad_a, Err(ChemistryError::BadPreExponential { .. })));
        // Unknown inert name rejected.
        let bad_inert = Mechanism::new(vec![f2, f1], vec![], &["Q".into()]);
        assert!(matches!(bad_inert, Err(ChemistryError::UnknownInert { .. })));
    }

    #[test]
    fn third_body_scales_rate() {
        use crate::thermo::fixtures::constant_cp;
        let make = |eff: Option<Vec<f64>>| {
            Mechanism::new(
                vec![constant_cp("A", 10.0, 3.5, 0.0), constant_cp("B", 10.0, 3.5, 0.0)],
                vec![Reaction {
                    reactants: vec![(0, 1.0)],
                    products: vec![(1, 1.0)],
                    a: 2.0,
                    beta: 0.0,
                    ea: 0.0,
                    reversible: false,
                    third_body: eff,
                }],
                &[],
            )
            .unwrap()
        };
        let t = 1000.0;
        let p = 3.0 * R_UNIVERSAL * t;
        let plain = production_rates(&make(None), &state_y1(p, t));
        // Uniform efficiency 1: factor [M] = total concentration = 3.
        let third = production_rates(&make(Some(vec![1.0, 1.0])), &state_y1(p, t));
        assert!((third[0] - 3.0 * plain[0]).abs() < 1e-10);
        // Zero efficiencies kill the reaction.
        let off = production_rates(&make(Some(vec![0.0, 0.0])), &state_y1(p, t));
        assert_eq!(off[0], 0.0);
    }
}
