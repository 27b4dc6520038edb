//! Low-Mach pressure-velocity coupling.
//!
//! One [`advance`] call marches the coupled system a single time step in the
//! operator-split order species -> chemistry -> energy -> properties ->
//! momentum -> pressure. Pressure is split into a spatially uniform
//! thermodynamic part `p_thermo`, which feeds the gas law and the chemistry,
//! and the dynamic gauge field `p` solved by the corrector; on a closed box
//! `p_thermo` is rescaled every step so the global mass matches the initial
//! inventory exactly. Each corrector reassembles HbyA from the latest
//! velocity, solves the variable-coefficient pressure equation, and applies
//! conservative face-flux and cell-velocity corrections.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::chemistry::{self, ChemistryError, Mechanism, ReactorTols};
use crate::field::{self, BoundaryCondition, CellField, FaceField, FieldError};
use crate::fvm::{self, DdtScheme, DivScheme, FvMatrix, FvmError, SchemeConfig, SolverReport};
use crate::mesh::Mesh;
use crate::sparse::{self, SolverControls, SolverKind};
use crate::surrogate::{self, ApplyStats, SurrogateBundle, SurrogateError};
use crate::thermo::{self, MixtureState, ThermoError};

#[derive(Debug, Error)]
pub enum PisoError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error("{stage}: {source}")]
    Fvm {
        stage: &'static str,
        #[source]
        source: FvmError,
    },
    #[error("{stage}: {source}")]
    Field {
        stage: &'static str,
        #[source]
        source: FieldError,
    },
    #[error("chemistry: {source}")]
    Chemistry {
        #[source]
        source: ChemistryError,
    },
    #[error("chemistry: {source}")]
    Surrogate {
        #[source]
        source: SurrogateError,
    },
    #[error("{stage}, cell {cell}: {source}")]
    Thermo {
        stage: &'static str,
        cell: usize,
        #[source]
        source: ThermoError,
    },
    #[error(
        "{stage}: {equation} solver stopped at residual {residual:e} after {iterations} iterations"
    )]
    NotConverged {
        stage: &'static str,
        equation: String,
        residual: f64,
        iterations: usize,
    },
    #[error("Courant number {co:.4} at cell {cell} exceeds the limit {limit}")]
    CourantExceeded { co: f64, cell: usize, limit: f64 },
}

/// How the reaction term is advanced inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChemistryMode {
    /// Frozen chemistry: species and temperature pass through untouched.
    None,
    /// Stiff implicit-Euler integration per cell.
    Ode,
    /// Trained MLP increments per cell.
    Surrogate,
}

#[derive(Debug, Clone)]
pub struct PisoConfig {
    /// Pressure correctors per step; the first PISO sweep needs at least one.
    pub n_correctors: usize,
    /// Solve the momentum predictor before the correctors. Without it the
    /// correctors project the assembled HbyA directly.
    pub momentum_predictor: bool,
    /// Step is rejected when the cell Courant number exceeds this.
    pub max_co: f64,
    pub ddt_scheme: DdtScheme,
    /// Convection scheme for momentum.
    pub div_u: DivScheme,
    /// Convection scheme for species and energy (upwind keeps them bounded).
    pub div_scalar: DivScheme,
    pub prandtl: f64,
    /// Add the lagged V dp_thermo/dt source to the enthalpy equation.
    pub energy_dpdt: bool,
    pub chemistry: ChemistryMode,
    pub reactor_tols: ReactorTols,
    pub controls_u: SolverControls,
    pub controls_p: SolverControls,
    pub controls_y: SolverControls,
    pub controls_h: SolverControls,
}

impl Default for PisoConfig {
    fn default() -> PisoConfig {
        let mut controls_u = SolverControls::new(SolverKind::BiCgStab);
        controls_u.abs_tol = 1e-10;
        let mut controls_p = SolverControls::new(SolverKind::AmgPcg);
        controls_p.abs_tol = 1e-9;
        controls_p.max_iter = 2000;
        let mut controls_y = SolverControls::new(SolverKind::BiCgStab);
        controls_y.abs_tol = 1e-10;
        let mut controls_h = SolverControls::new(SolverKind::BiCgStab);
        controls_h.abs_tol = 1e-10;
        PisoConfig {
            n_correctors: 2,
            momentum_predictor: true,
            max_co: 0.9,
            ddt_scheme: DdtScheme::Euler,
            div_u: DivScheme::Linear,
            div_scalar: DivScheme::Upwind,
            prandtl: 0.72,
            energy_dpdt: false,
            chemistry: ChemistryMode::None,
            reactor_tols: ReactorTols::default(),
            controls_u,
            controls_p,
            controls_y,
            controls_h,
        }
    }
}

impl PisoConfig {
    pub fn validate(&self) -> Result<(), PisoError> {
        if self.n_correctors == 0 {
            return Err(PisoError::Config("nCorrectors must be at least 1".into()));
        }
        if !(self.max_co > 0.0) {
            return Err(PisoError::Config(format!("maxCo must be positive, got {}", self.max_co)));
        }
        if !(self.prandtl > 0.0) {
            return Err(PisoError::Config(format!(
                "Prandtl number must be positive, got {}",
                self.prandtl
            )));
        }
        Ok(())
    }
}

/// Wall-clock seconds binned into the four stage categories. Every piece of
/// work inside [`advance`] lands in exactly one bin.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    /// Matrix assembly, flux algebra, corrections, time-level bookkeeping.
    pub discretisation: f64,
    /// Krylov/AMG solver time.
    pub linear_solve: f64,
    /// Reaction integration (stiff ODE or surrogate inference).
    pub chemistry: f64,
    /// Equation-of-state and property evaluations, enthalpy inversions.
    pub thermo: f64,
}

impl StageTimings {
    pub fn sum(&self) -> f64 {
        self.discretisation + self.linear_solve + self.chemistry + self.thermo
    }
}

/// Outcome of one [`advance`] step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub timings: StageTimings,
    pub total_seconds: f64,
    pub max_co: f64,
    pub co_cell: usize,
    /// Normalized continuity defect after the last corrector (scaled like the
    /// pressure solver residuals).
    pub continuity: f64,
    /// Largest cell imbalance in kg/s after the last corrector.
    pub continuity_raw: f64,
    /// One-norm of the continuity right-hand side entering each corrector.
    pub corrector_rhs: Vec<f64>,
    pub solver_reports: Vec<SolverReport>,
    pub surrogate: Option<ApplyStats>,
    pub thermo_clamps: u64,
    pub p_thermo: f64,
}

/// Full transported state of one case.
#[derive(Debug, Clone)]
pub struct SimulationState {
    pub mesh: Arc<Mesh>,
    pub mech: Arc<Mechanism>,
    /// Velocity, 3 components.
    pub u: CellField,
    /// Dynamic (gauge) pressure driving the velocity correction.
    pub p: CellField,
    /// Mass fractions, one component per mechanism species.
    pub y: CellField,
    /// Absolute specific enthalpy.
    pub h: CellField,
    pub t: CellField,
    pub rho: CellField,
    /// Face mass flux in kg/s, oriented owner -> neighbor.
    pub phi: FaceField,
    /// Uniform thermodynamic pressure entering the gas law and chemistry.
    pub p_thermo: f64,
    pub p_thermo_old: f64,
    /// Global mass inventory the p_thermo rescaling preserves.
    pub mass_target: f64,
    pub rho_old: CellField,
    pub u_old: CellField,
    pub y_old: CellField,
    pub h_old: CellField,
    pub rho_old_old: Option<CellField>,
    pub u_old_old: Option<CellField>,
    pub y_old_old: Option<CellField>,
    pub h_old_old: Option<CellField>,
    pub step_count: usize,
}

impl SimulationState {
    /// Builds a consistent state from primitive initial data: enthalpy and
    /// density follow from (T, Y, p_thermo), the face flux from (rho, U), and
    /// the old time levels start as copies of the current one.
    ///
    /// `u` keeps the boundary closures it was built with; `p`, `h`, `y`, and
    /// `rho` get zeroGradient everywhere (impermeable adiabatic walls), which
    /// callers can override on the returned state.
    pub fn from_primitive(
        mesh: &Arc<Mesh>,
        mech: &Arc<Mechanism>,
        u: CellField,
        t: CellField,
        y: CellField,
        p_thermo: f64,
    ) -> Result<SimulationState, PisoError> {
        let n = mesh.n_cells();
        let n_sp = mech.n_species();
        if u.n_components != 3 || u.n_cells != n {
            return Err(PisoError::State(format!(
                "velocity must have 3 components on {} cells, got {} on {}",
                n, u.n_components, u.n_cells
            )));
        }
        if t.n_components != 1 || t.n_cells != n {
            return Err(PisoError::State("temperature must be a scalar field".into()));
        }
        if y.n_components != n_sp || y.n_cells != n {
            return Err(PisoError::State(format!(
                "mass fractions need one component per species ({}), got {}",
                n_sp, y.n_components
            )));
        }
        if !(p_thermo > 0.0) {
            return Err(PisoError::State(format!("p_thermo must be positive, got {p_thermo}")));
        }
        let mut u = u;
        u.name = "U".to_string();
        let mut t = t;
        t.name = "T".to_string();
        let mut y = y;
        y.name = "Y".to_string();

        let mut h = CellField::zeros(mesh, 1).named("h");
        let mut rho = CellField::zeros(mesh, 1).named("rho");
        let mut yb = vec![0.0; n_sp];
        for c in 0..n {
            for (k, v) in yb.iter_mut().enumerate() {
                *v = y.at(k, c);
            }
            let ms = MixtureState { p: p_thermo, t: t.data[c], y: &yb };
            ms.validate(n_sp)
                .map_err(|e| PisoError::Thermo { stage: "init", cell: c, source: e })?;
            h.data[c] = thermo::mixture_h(&mech.species, &ms);
            rho.data[c] = thermo::density(&mech.species, &ms);
        }
        let mut p = CellField::zeros(mesh, 1).named("p");
        for ip in 0..mesh.patches.len() {
            p.set_boundary(ip, BoundaryCondition::ZeroGradient);
            h.set_boundary(ip, BoundaryCondition::ZeroGradient);
            rho.set_boundary(ip, BoundaryCondition::ZeroGradient);
            y.set_boundary(ip, BoundaryCondition::ZeroGradient);
        }
        let phi = mass_flux(mesh, &rho, &u).map_err(|e| PisoError::Field {
            stage: "init",
            source: e,
        })?;
        let v = mesh.geometry.cell_volume;
        let mass_target = rho.data.iter().sum::<f64>() * v;
        Ok(SimulationState {
            mesh: Arc::clone(mesh),
            mech: Arc::clone(mech),
            rho_old: rho.clone(),
            u_old: u.clone(),
            y_old: y.clone(),
            h_old: h.clone(),
            u,
            p,
            y,
            h,
            t,
            rho,
            phi,
            p_thermo,
            p_thermo_old: p_thermo,
            mass_target,
            rho_old_old: None,
            u_old_old: None,
            y_old_old: None,
            h_old_old: None,
            step_count: 0,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }
}

/// Face mass flux rho_f (U_f . n) S_f from linearly interpolated density and
/// velocity, internal and patch faces alike.
pub fn mass_flux(mesh: &Mesh, rho: &CellField, u: &CellField) -> Result<FaceField, FieldError> {
    let rho_f = field::interpolate_linear(rho, mesh)?;
    let u_f = field::interpolate_linear(u, mesh)?;
    let faces = &mesh.faces;
    let mut phi = FaceField::zeros(mesh, 1);
    for f in 0..faces.n_internal_faces {
        let nrm = faces.face_normal[f];
        let un = u_f.at(0, f) * nrm[0] + u_f.at(1, f) * nrm[1] + u_f.at(2, f) * nrm[2];
        phi.set(0, f, rho_f.at(0, f) * un * faces.face_area[f]);
    }
    for (ip, patch) in mesh.patches.iter().enumerate() {
        for (bf, _) in patch.face_cells.iter().enumerate() {
            let un = u_f.patch_at(ip, 0, bf) * patch.normal[0]
                + u_f.patch_at(ip, 1, bf) * patch.normal[1]
                + u_f.patch_at(ip, 2, bf) * patch.normal[2];
            phi.patch_set(ip, 0, bf, rho_f.patch_at(ip, 0, bf) * un * patch.face_area);
        }
    }
    Ok(phi)
}

/// Evaluates a per-cell mixture property into a scalar field.
fn map_thermo(state: &SimulationState, f: impl Fn(&MixtureState) -> f64) -> CellField {
    let n = state.mesh.n_cells();
    let n_sp = state.mech.n_species();
    let mut out = CellField::zeros(&state.mesh, 1);
    let mut yb = vec![0.0; n_sp];
    for c in 0..n {
        for (k, v) in yb.iter_mut().enumerate() {
            *v = state.y.at(k, c);
        }
        out.data[c] = f(&MixtureState { p: state.p_thermo, t: state.t.data[c], y: &yb });
    }
    out
}

/// A diffusivity's closure mirrors its unknown's: a fixedValue psi face keeps
/// the interior coefficient (zeroGradient), a zeroGradient psi face carries no
/// diffusive flux, so the coefficient is pinned to zero there.
fn match_diffusivity_boundary(gamma: &mut CellField, psi: &CellField) {
    for ip in 0..psi.boundary.len() {
        let bc = match &psi.boundary[ip] {
            BoundaryCondition::FixedValue(_) => BoundaryCondition::ZeroGradient,
            BoundaryCondition::ZeroGradient => BoundaryCondition::FixedValue(vec![0.0]),
        };
        gamma.set_boundary(ip, bc);
    }
}

/// One component of a multi-component field as a standalone scalar field,
/// boundary closures included.
fn extract_component(f: &CellField, mesh: &Arc<Mesh>, comp: usize, name: &str) -> CellField {
    let mut out = CellField::zeros(mesh, 1).named(name);
    out.comp_mut(0).copy_from_slice(f.comp(comp));
    for (ip, bc) in f.boundary.iter().enumerate() {
        let bc1 = match bc {
            BoundaryCondition::FixedValue(v) => BoundaryCondition::FixedValue(vec![v[comp]]),
            BoundaryCondition::ZeroGradient => BoundaryCondition::ZeroGradient,
        };
        out.set_boundary(ip, bc1);
    }
    out
}

fn require_converged(stage: &'static str, report: &SolverReport) -> Result<(), PisoError> {
    if report.converged {
        return Ok(());
    }
    let worst = report
        .components
        .iter()
        .max_by(|a, b| a.final_residual.total_cmp(&b.final_residual))
        .expect("solver report has at least one component");
    Err(PisoError::NotConverged {
        stage,
        equation: report.psi_name.clone(),
        residual: worst.final_residual,
        iterations: worst.iterations,
    })
}

fn efvm(stage: &'static str) -> impl Fn(FvmError) -> PisoError {
    move |source| PisoError::Fvm { stage, source }
}

fn efield(stage: &'static str) -> impl Fn(FieldError) -> PisoError {
    move |source| PisoError::Field { stage, source }
}

/// Implicit transport of every species but the last; the closure species
/// absorbs 1 - sum so the fractions stay consistent cell by cell. Diffusion
/// uses rho D_k = mu / (Pr Le_k), the unity-Lewis-style closure of the
/// conductivity model.
pub fn species_step(
    state: &mut SimulationState,
    dt: f64,
    config: &PisoConfig,
    timings: &mut StageTimings,
) -> Result<Vec<SolverReport>, PisoError> {
    let mesh = Arc::clone(&state.mesh);
    let n = mesh.n_cells();
    let n_sp = state.mech.n_species();
    let mut reports = Vec::new();
    if n_sp == 1 {
        let t0 = Instant::now();
        state.y.comp_mut(0).fill(1.0);
        timings.discretisation += t0.elapsed().as_secs_f64();
        return Ok(reports);
    }
    let t_prop = Instant::now();
    let mu = map_thermo(state, |ms| thermo::viscosity(&state.mech.species, ms));
    timings.thermo += t_prop.elapsed().as_secs_f64();

    for k in 0..n_sp - 1 {
        let t_asm = Instant::now();
        let name = format!("Y_{}", state.mech.species[k].name);
        let mut yk = extract_component(&state.y, &mesh, k, &name);
        let yk_old = extract_component(&state.y_old, &mesh, k, &name);
        let yk_oo = state
            .y_old_old
            .as_ref()
            .map(|f| extract_component(f, &mesh, k, &name));
        let scheme = SchemeConfig {
            ddt_scheme: config.ddt_scheme,
            div_scheme: config.div_scalar,
            rho_old: &state.rho_old,
            psi_old: &yk_old,
            rho_old_old: state.rho_old_old.as_ref(),
            psi_old_old: yk_oo.as_ref(),
        };
        let le = state.mech.species[k].lewis;
        let mut gamma = CellField::zeros(&mesh, 1);
        for c in 0..n {
            gamma.data[c] = mu.data[c] / (config.prandtl * le);
        }
        match_diffusivity_boundary(&mut gamma, &yk);

        let ddt = fvm::fvm_ddt(&mesh, &state.rho, &yk, &scheme, dt).map_err(efvm("species"))?;
        let conv =
            fvm::fvm_div(&mesh, &state.phi, &yk, config.div_scalar).map_err(efvm("species"))?;
        let diff = fvm::fvm_laplacian(&mesh, &gamma, &yk).map_err(efvm("species"))?;
        let mut m = fvm::combine(&ddt, &conv, 1.0).map_err(efvm("species"))?;
        m = fvm::combine(&m, &diff, -1.0).map_err(efvm("species"))?;
        timings.discretisation += t_asm.elapsed().as_secs_f64();

        let t_sol = Instant::now();
        let report = fvm::solve_fv(&mut m, &mut yk, &config.controls_y).map_err(efvm("species"))?;
        timings.linear_solve += t_sol.elapsed().as_secs_f64();
        require_converged("species", &report)?;
        reports.push(report);
        state.y.comp_mut(k).copy_from_slice(yk.comp(0));
    }
    let t_fix = Instant::now();
    for c in 0..n {
        let mut rest = 0.0;
        for k in 0..n_sp - 1 {
            rest += state.y.at(k, c);
        }
        state.y.set(n_sp - 1, c, 1.0 - rest);
    }
    timings.discretisation += t_fix.elapsed().as_secs_f64();
    Ok(reports)
}

/// Advances the reaction term per cell at constant pressure and enthalpy.
/// Temperature comes back through the conserved-enthalpy inversion inside the
/// integrator, so the enthalpy field itself is untouched.
pub fn chemistry_step(
    state: &mut SimulationState,
    dt: f64,
    config: &PisoConfig,
    bundle: Option<&SurrogateBundle>,
    timings: &mut StageTimings,
) -> Result<Option<ApplyStats>, PisoError> {
    match config.chemistry {
        ChemistryMode::None => Ok(None),
        ChemistryMode::Ode => {
            let t0 = Instant::now();
            let p = vec![state.p_thermo; state.mesh.n_cells()];
            chemistry::integrate_field(
                &state.mech,
                &p,
                &mut state.t.data,
                &mut state.y.data,
                dt,
                &config.reactor_tols,
            )
            .map_err(|source| PisoError::Chemistry { source })?;
            timings.chemistry += t0.elapsed().as_secs_f64();
            Ok(None)
        }
        ChemistryMode::Surrogate => {
            let b = bundle.ok_or_else(|| {
                PisoError::Config("surrogate chemistry needs a loaded weights bundle".into())
            })?;
            let t0 = Instant::now();
            let p = vec![state.p_thermo; state.mesh.n_cells()];
            let stats = surrogate::apply_surrogate_field(
                b,
                &state.mech,
                &p,
                &mut state.t.data,
                &mut state.y.data,
                dt,
            )
            .map_err(|source| PisoError::Surrogate { source })?;
            timings.chemistry += t0.elapsed().as_secs_f64();
            Ok(Some(stats))
        }
    }
}

/// Implicit transport of absolute enthalpy with alpha = mu/Pr, then the
/// pointwise temperature inversion T(h, Y).
pub fn energy_step(
    state: &mut SimulationState,
    dt: f64,
    config: &PisoConfig,
    timings: &mut StageTimings,
) -> Result<SolverReport, PisoError> {
    let mesh = Arc::clone(&state.mesh);
    let n = mesh.n_cells();

    let t_prop = Instant::now();
    let mut alpha = map_thermo(state, |ms| thermo::viscosity(&state.mech.species, ms));
    for v in alpha.data.iter_mut() {
        *v /= config.prandtl;
    }
    timings.thermo += t_prop.elapsed().as_secs_f64();

    let t_asm = Instant::now();
    match_diffusivity_boundary(&mut alpha, &state.h);
    let scheme = SchemeConfig {
        ddt_scheme: config.ddt_scheme,
        div_scheme: config.div_scalar,
        rho_old: &state.rho_old,
        psi_old: &state.h_old,
        rho_old_old: state.rho_old_old.as_ref(),
        psi_old_old: state.h_old_old.as_ref(),
    };
    let ddt = fvm::fvm_ddt(&mesh, &state.rho, &state.h, &scheme, dt).map_err(efvm("energy"))?;
    let conv =
        fvm::fvm_div(&mesh, &state.phi, &state.h, config.div_scalar).map_err(efvm("energy"))?;
    let diff = fvm::fvm_laplacian(&mesh, &alpha, &state.h).map_err(efvm("energy"))?;
    let mut m = fvm::combine(&ddt, &conv, 1.0).map_err(efvm("energy"))?;
    m = fvm::combine(&m, &diff, -1.0).map_err(efvm("energy"))?;
    if config.energy_dpdt {
        let dpdt = (state.p_thermo - state.p_thermo_old) / dt;
        let su = fvm::fvm_source_su(&mesh, &CellField::uniform(&mesh, &[dpdt]), &state.h);
        m = fvm::combine(&m, &su, 1.0).map_err(efvm("energy"))?;
    }
    timings.discretisation += t_asm.elapsed().as_secs_f64();

    let t_sol = Instant::now();
    let mut h = std::mem::replace(&mut state.h, CellField::zeros(&mesh, 0));
    let report = fvm::solve_fv(&mut m, &mut h, &config.controls_h).map_err(efvm("energy"))?;
    state.h = h;
    timings.linear_solve += t_sol.elapsed().as_secs_f64();
    require_converged("energy", &report)?;

    let t_th = Instant::now();
    let n_sp = state.mech.n_species();
    let mut yb = vec![0.0; n_sp];
    for c in 0..n {
        for (k, v) in yb.iter_mut().enumerate() {
            *v = state.y.at(k, c);
        }
        let t_new = thermo::t_from_h(
            &state.mech.species,
            state.h.data[c],
            state.p_thermo,
            &yb,
            state.t.data[c],
        )
        .map_err(|e| PisoError::Thermo { stage: "energy", cell: c, source: e })?;
        state.t.data[c] = t_new;
    }
    timings.thermo += t_th.elapsed().as_secs_f64();
    Ok(report)
}

/// Closed-box equation of state update: rescale p_thermo so the global mass
/// integral matches the initial inventory exactly, then refresh the density
/// from psi = W/(Ru T).
pub fn update_properties(state: &mut SimulationState, timings: &mut StageTimings) {
    let t0 = Instant::now();
    let psi = map_thermo(state, |ms| thermo::psi(&state.mech.species, ms));
    let v = state.mesh.geometry.cell_volume;
    let psi_v: f64 = psi.data.iter().sum::<f64>() * v;
    state.p_thermo_old = state.p_thermo;
    state.p_thermo = state.mass_target / psi_v;
    for c in 0..state.mesh.n_cells() {
        state.rho.data[c] = psi.data[c] * state.p_thermo;
    }
    timings.thermo += t0.elapsed().as_secs_f64();
}

/// Assembles the momentum system ddt + div - laplacian and (optionally)
/// solves it against the explicit -grad p source. The returned matrix is
/// flattened and deliberately excludes the pressure gradient: HbyA built
/// from it is pressure-free, so the correctors introduce grad p exactly
/// once.
pub fn momentum_predictor(
    state: &mut SimulationState,
    dt: f64,
    config: &PisoConfig,
    timings: &mut StageTimings,
) -> Result<(FvMatrix, Option<SolverReport>), PisoError> {
    let mesh = Arc::clone(&state.mesh);

    let t_prop = Instant::now();
    let mut mu = map_thermo(state, |ms| thermo::viscosity(&state.mech.species, ms));
    timings.thermo += t_prop.elapsed().as_secs_f64();

    let t_asm = Instant::now();
    match_diffusivity_boundary(&mut mu, &state.u);
    let scheme = SchemeConfig {
        ddt_scheme: config.ddt_scheme,
        div_scheme: config.div_u,
        rho_old: &state.rho_old,
        psi_old: &state.u_old,
        rho_old_old: state.rho_old_old.as_ref(),
        psi_old_old: state.u_old_old.as_ref(),
    };
    let ddt = fvm::fvm_ddt(&mesh, &state.rho, &state.u, &scheme, dt).map_err(efvm("momentum"))?;
    let conv = fvm::fvm_div(&mesh, &state.phi, &state.u, config.div_u).map_err(efvm("momentum"))?;
    let diff = fvm::fvm_laplacian(&mesh, &mu, &state.u).map_err(efvm("momentum"))?;
    let mut m = fvm::combine(&ddt, &conv, 1.0).map_err(efvm("momentum"))?;
    m = fvm::combine(&m, &diff, -1.0).map_err(efvm("momentum"))?;
    timings.discretisation += t_asm.elapsed().as_secs_f64();

    let report = if config.momentum_predictor {
        let t_asm2 = Instant::now();
        let gradp = field::gauss_gradient(&state.p, &mesh).map_err(efield("momentum"))?;
        let su = fvm::fvm_source_su(&mesh, &gradp, &state.u);
        let mut m_solve = fvm::combine(&m, &su, -1.0).map_err(efvm("momentum"))?;
        timings.discretisation += t_asm2.elapsed().as_secs_f64();
        let t_sol = Instant::now();
        let mut u = std::mem::replace(&mut state.u, CellField::zeros(&mesh, 0));
        let r = fvm::solve_fv(&mut m_solve, &mut u, &config.controls_u).map_err(efvm("momentum"))?;
        state.u = u;
        timings.linear_solve += t_sol.elapsed().as_secs_f64();
        require_converged("momentum", &r)?;
        Some(r)
    } else {
        None
    };
    m.flatten();
    Ok((m, report))
}

/// Per-corrector pressure solve outcome.
#[derive(Debug, Clone)]
pub struct PressureOutcome {
    pub reports: Vec<SolverReport>,
    /// One-norm of the continuity right-hand side entering each corrector.
    pub rhs_norms: Vec<f64>,
    /// Largest cell imbalance in kg/s after the final flux correction.
    pub defect_raw: f64,
    /// Total imbalance scaled by the pressure system's normalization factor,
    /// comparable with the solver's residuals.
    pub defect_normalized: f64,
    /// Whether the all-Neumann system needed the reference-cell pin.
    pub pinned: bool,
}

/// Reference-cell pin for the all-Neumann pressure system: zero row and
/// column of cell 0 symmetrically, keep the original diagonal as the row
/// scale, and move the known reference value through the neighbours'
/// sources. Off-diagonal symmetry survives, so CG and AMG still apply; the
/// reference cell's own continuity is recovered through global compatibility.
fn pin_reference_cell(m: &mut FvMatrix, p_ref: f64) {
    debug_assert!(m.is_flattened());
    let mesh = Arc::clone(&m.mesh);
    for (f, is_owner) in mesh.cell_faces.faces_of(0) {
        let (other, coeff) = if is_owner {
            (mesh.faces.neighbor[f], m.ldu.lower[f])
        } else {
            (mesh.faces.owner[f], m.ldu.upper[f])
        };
        m.source[other] -= coeff * p_ref;
        m.ldu.upper[f] = 0.0;
        m.ldu.lower[f] = 0.0;
    }
    m.source[0] = m.ldu.diag[0] * p_ref;
}

/// PISO corrector loop. Each sweep rebuilds HbyA from the latest velocity,
/// forms the predictor flux phi* = rho_f (HbyA . n) S_f, solves
/// laplacian(rho rAU, p) = div phi* + V drho/dt, and applies the conservative
/// corrections phi -= a_f (p_nei - p_own) and U = HbyA - rAU grad p.
pub fn pressure_correct(
    state: &mut SimulationState,
    ueqn: &mut FvMatrix,
    dt: f64,
    config: &PisoConfig,
    timings: &mut StageTimings,
) -> Result<PressureOutcome, PisoError> {
    let mesh = Arc::clone(&state.mesh);
    let n = mesh.n_cells();
    let faces = &mesh.faces;
    let v = mesh.geometry.cell_volume;

    let t0 = Instant::now();
    ueqn.flatten();
    let a = fvm::diag_a(ueqn);
    let mut rau = CellField::zeros(&mesh, 1).named("rAU");
    for c in 0..n {
        if !(a.data[c] > 0.0) {
            return Err(PisoError::State(format!(
                "momentum diagonal is not positive at cell {c}: {}",
                a.data[c]
            )));
        }
        rau.data[c] = 1.0 / a.data[c];
    }
    let pinned = !state
        .p
        .boundary
        .iter()
        .any(|bc| matches!(bc, BoundaryCondition::FixedValue(_)));
    timings.discretisation += t0.elapsed().as_secs_f64();

    let mut outcome = PressureOutcome {
        reports: Vec::with_capacity(config.n_correctors),
        rhs_norms: Vec::with_capacity(config.n_correctors),
        defect_raw: 0.0,
        defect_normalized: 0.0,
        pinned,
    };

    for corrector in 0..config.n_correctors {
        let t_asm = Instant::now();
        let mut hbya = fvm::h_of(ueqn, &state.u);
        for comp in 0..3 {
            for c in 0..n {
                let val = hbya.at(comp, c) * rau.data[c];
                hbya.set(comp, c, val);
            }
        }
        hbya.boundary = state.u.boundary.clone();
        let phi_star = mass_flux(&mesh, &state.rho, &hbya).map_err(efield("pressure"))?;

        let div_star = field::explicit_divergence(&phi_star, &mesh).map_err(efield("pressure"))?;
        let mut b = vec![0.0; n];
        for c in 0..n {
            b[c] = div_star.data[c] * v + (state.rho.data[c] - state.rho_old.data[c]) * v / dt;
        }
        outcome.rhs_norms.push(b.iter().map(|x| x.abs()).sum());

        let mut gamma = CellField::zeros(&mesh, 1);
        for c in 0..n {
            gamma.data[c] = state.rho.data[c] * rau.data[c];
        }
        match_diffusivity_boundary(&mut gamma, &state.p);
        let mut peqn = fvm::fvm_laplacian(&mesh, &gamma, &state.p).map_err(efvm("pressure"))?;
        peqn.source.copy_from_slice(&b);
        peqn.flatten();
        // Keep the physical coefficients: the flux correction must use them
        // even for faces the reference pin zeroes out.
        let upper_true = peqn.ldu.upper.clone();
        if pinned {
            pin_reference_cell(&mut peqn, state.p.data[0]);
        }
        timings.discretisation += t_asm.elapsed().as_secs_f64();

        let t_sol = Instant::now();
        let mut p = std::mem::replace(&mut state.p, CellField::zeros(&mesh, 0));
        let report = fvm::solve_fv(&mut peqn, &mut p, &config.controls_p).map_err(efvm("pressure"))?;
        state.p = p;
        timings.linear_solve += t_sol.elapsed().as_secs_f64();
        require_converged("pressure", &report)?;
        outcome.reports.push(report);

        let t_cor = Instant::now();
        let mut phi_new = phi_star.clone();
        for f in 0..faces.n_internal_faces {
            let dp = state.p.data[faces.neighbor[f]] - state.p.data[faces.owner[f]];
            phi_new.data[f] = phi_star.data[f] - upper_true[f] * dp;
        }
        for (ip, patch) in mesh.patches.iter().enumerate() {
            if !matches!(state.p.boundary[ip], BoundaryCondition::FixedValue(_)) {
                continue;
            }
            for (bf, &c) in patch.face_cells.iter().enumerate() {
                let gb = gamma.boundary_value(ip, 0, c);
                let dp = state.p.boundary_value(ip, 0, c) - state.p.data[c];
                let corr = gb * patch.delta_coeff * patch.face_area * dp;
                let cur = phi_new.patch_at(ip, 0, bf);
                phi_new.patch_set(ip, 0, bf, cur - corr);
            }
        }
        state.phi = phi_new;

        let gradp = field::gauss_gradient(&state.p, &mesh).map_err(efield("pressure"))?;
        for comp in 0..3 {
            for c in 0..n {
                state.u.set(comp, c, hbya.at(comp, c) - rau.data[c] * gradp.at(comp, c));
            }
        }

        if corrector + 1 == config.n_correctors {
            let div_new =
                field::explicit_divergence(&state.phi, &mesh).map_err(efield("pressure"))?;
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for c in 0..n {
                let defect =
                    div_new.data[c] * v + (state.rho.data[c] - state.rho_old.data[c]) * v / dt;
                sum += defect.abs();
                max = max.max(defect.abs());
            }
            let csr = sparse::ldu_to_csr(&peqn.ldu);
            let nf = sparse::norm_factor(&csr, state.p.comp(0), &peqn.source);
            outcome.defect_raw = max;
            outcome.defect_normalized = if sum == 0.0 { 0.0 } else { sum / nf.max(f64::MIN_POSITIVE) };
        }
        timings.discretisation += t_cor.elapsed().as_secs_f64();
    }
    Ok(outcome)
}

/// One time step of the split low-Mach system. Stage order: Courant check,
/// time-level rotation, species transport, chemistry, energy, equation of
/// state, momentum predictor, pressure correctors.
pub fn advance(
    state: &mut SimulationState,
    dt: f64,
    config: &PisoConfig,
    bundle: Option<&SurrogateBundle>,
) -> Result<StepReport, PisoError> {
    config.validate()?;
    if !(dt > 0.0) {
        return Err(PisoError::Config(format!("dt must be positive, got {dt}")));
    }
    let wall0 = Instant::now();
    let mut timings = StageTimings::default();
    let mesh = Arc::clone(&state.mesh);

    // Courant number from the volumetric face flux of the current step.
    let t0 = Instant::now();
    let rho_f = field::interpolate_linear(&state.rho, &mesh).map_err(efield("courant"))?;
    let mut volf = state.phi.clone();
    for f in 0..volf.n_internal_faces {
        volf.data[f] /= rho_f.data[f];
    }
    for ip in 0..volf.patch_data.len() {
        for bf in 0..volf.patch_data[ip].len() {
            volf.patch_data[ip][bf] /= rho_f.patch_data[ip][bf];
        }
    }
    let (max_co, co_cell) = field::courant_number(&volf, &mesh, dt);
    if max_co > config.max_co {
        return Err(PisoError::CourantExceeded { co: max_co, cell: co_cell, limit: config.max_co });
    }

    // Rotate time levels; the second old level only exists from step two on.
    let had_prior = state.step_count > 0;
    let prev = std::mem::replace(&mut state.u_old, state.u.clone());
    state.u_old_old = had_prior.then_some(prev);
    let prev = std::mem::replace(&mut state.y_old, state.y.clone());
    state.y_old_old = had_prior.then_some(prev);
    let prev = std::mem::replace(&mut state.h_old, state.h.clone());
    state.h_old_old = had_prior.then_some(prev);
    let prev = std::mem::replace(&mut state.rho_old, state.rho.clone());
    state.rho_old_old = had_prior.then_some(prev);
    timings.discretisation += t0.elapsed().as_secs_f64();

    let mut solver_reports = Vec::new();
    solver_reports.extend(species_step(state, dt, config, &mut timings)?);
    let surrogate_stats = chemistry_step(state, dt, config, bundle, &mut timings)?;
    solver_reports.push(energy_step(state, dt, config, &mut timings)?);
    update_properties(state, &mut timings);
    let (mut ueqn, u_report) = momentum_predictor(state, dt, config, &mut timings)?;
    solver_reports.extend(u_report);
    let pressure = pressure_correct(state, &mut ueqn, dt, config, &mut timings)?;
    solver_reports.extend(pressure.reports.iter().cloned());

    state.step_count += 1;
    Ok(StepReport {
        timings,
        total_seconds: wall0.elapsed().as_secs_f64(),
        max_co,
        co_cell,
        continuity: pressure.defect_normalized,
        continuity_raw: pressure.defect_raw,
        corrector_rhs: pressure.rhs_norms,
        solver_reports,
        surrogate: surrogate_stats,
        thermo_clamps: thermo::take_clamp_count(),
        p_thermo: state.p_thermo,
    })
}
