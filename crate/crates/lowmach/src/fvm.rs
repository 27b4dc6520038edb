//! Implicit finite-volume operators: ddt, convection, Laplacian, and sources
//! assembled into [`FvMatrix`] systems, plus the A/H decomposition and the
//! solve entry point the pressure algorithm is built on.
//!
//! Sign convention: every operator adds its discrete term to the left side of
//! M psi = b, so an equation like ddt - laplacian = 0 is assembled as
//! combine(ddt, lap, -1). The Laplacian itself carries a negative diagonal;
//! [`solve_fv`] normalizes the overall sign before handing the system to the
//! Krylov solvers. The convention is pinned by the 1D Dirichlet rod oracle
//! below, not by any external reference.
//!
//! All accumulation into cell arrays runs through the mesh's per-cell gather
//! tables in ascending face order, so assembly is bitwise deterministic.

use crate::field::{CellField, FaceField};
use crate::mesh::{Mesh, PatchKind};
use crate::sparse::{
    self, ldu_to_csr, LduMatrix, SolveStats, SolverControls, SolverKind, SparseError,
};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FvmError {
    #[error("operands discretize different meshes")]
    MeshMismatch,
    #[error("operands solve for different unknowns: {a:?} vs {b:?}")]
    MismatchedUnknown { a: String, b: String },
    #[error("operands carry different unit tags: {a:?} vs {b:?}")]
    MismatchedDimensions { a: String, b: String },
    #[error("component counts differ: {a} vs {b}")]
    ComponentMismatch { a: usize, b: usize },
    #[error("negative diffusivity {value} in cell {cell}")]
    NegativeDiffusivity { cell: usize, value: f64 },
    #[error("flux field has {found} faces, mesh has {expected}")]
    FluxMismatch { expected: usize, found: usize },
    #[error("time step {0} must be positive")]
    BadTimeStep(f64),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdtScheme {
    Euler,
    Backward2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivScheme {
    Upwind,
    Linear,
}

/// Discretization choices plus the prior time levels they consume.
/// `backward2` needs both old levels; on the first step (`*_old_old` absent)
/// it falls back to Euler, which keeps the start-up self-contained.
pub struct SchemeConfig<'a> {
    pub ddt_scheme: DdtScheme,
    pub div_scheme: DivScheme,
    pub rho_old: &'a CellField,
    pub psi_old: &'a CellField,
    pub rho_old_old: Option<&'a CellField>,
    pub psi_old_old: Option<&'a CellField>,
}

/// One implicit equation M psi = b in assembly form. The LDU coefficients are
/// shared by all components (the operators here are component-identical);
/// source and boundaryCoeffs are component-major. internalCoeffs fold into
/// the diagonal on [`FvMatrix::flatten`], boundaryCoeffs into the source.
#[derive(Debug, Clone)]
pub struct FvMatrix {
    pub mesh: Arc<Mesh>,
    pub n_components: usize,
    pub ldu: LduMatrix,
    /// Component-major right-hand side, `n_components * n_cells`.
    pub source: Vec<f64>,
    /// `[patch][face]`, shared across components.
    pub internal_coeffs: Vec<Vec<f64>>,
    /// `[patch][comp * n_patch_faces + face]`.
    pub boundary_coeffs: Vec<Vec<f64>>,
    /// Name of the unknown field; combine refuses to mix different unknowns.
    pub psi_name: String,
    /// Unit tag of diag*psi and source (one tag, they agree by construction).
    pub dimensions: String,
    flattened: bool,
}

impl FvMatrix {
    pub fn zeros(mesh: &Arc<Mesh>, psi: &CellField) -> FvMatrix {
        FvMatrix {
            mesh: Arc::clone(mesh),
            n_components: psi.n_components,
            ldu: LduMatrix::zeros(mesh),
            source: vec![0.0; psi.n_components * mesh.n_cells()],
            internal_coeffs: mesh
                .patches
                .iter()
                .map(|p| vec![0.0; p.face_count()])
                .collect(),
            boundary_coeffs: mesh
                .patches
                .iter()
                .map(|p| vec![0.0; psi.n_components * p.face_count()])
                .collect(),
            psi_name: psi.name.clone(),
            dimensions: String::new(),
            flattened: false,
        }
    }

    pub fn with_dimensions(mut self, dims: &str) -> FvMatrix {
        self.dimensions = dims.to_string();
        self
    }

    pub fn is_flattened(&self) -> bool {
        self.flattened
    }

    /// Fold boundary closures into the interior system: internalCoeffs into
    /// the diagonal, boundaryCoeffs into the source. Idempotent.
    pub fn flatten(&mut self) {
        if self.flattened {
            return;
        }
        let n_cells = self.mesh.n_cells();
        for (p, patch) in self.mesh.patches.iter().enumerate() {
            let nf = patch.face_count();
            for (bf, &c) in patch.face_cells.iter().enumerate() {
                self.ldu.diag[c] += self.internal_coeffs[p][bf];
                for comp in 0..self.n_components {
                    self.source[comp * n_cells + c] += self.boundary_coeffs[p][comp * nf + bf];
                }
            }
        }
        self.flattened = true;
    }

    #[inline]
    fn source_at(&self, comp: usize, cell: usize) -> f64 {
        self.source[comp * self.mesh.n_cells() + cell]
    }
}

fn check_compatible(a: &FvMatrix, b: &FvMatrix) -> Result<(), FvmError> {
    if !Arc::ptr_eq(&a.mesh, &b.mesh) {
        return Err(FvmError::MeshMismatch);
    }
    if a.psi_name != b.psi_name {
        return Err(FvmError::MismatchedUnknown {
            a: a.psi_name.clone(),
            b: b.psi_name.clone(),
        });
    }
    if a.n_components != b.n_components {
        return Err(FvmError::ComponentMismatch {
            a: a.n_components,
            b: b.n_components,
        });
    }
    if !a.dimensions.is_empty() && !b.dimensions.is_empty() && a.dimensions != b.dimensions {
        return Err(FvmError::MismatchedDimensions {
            a: a.dimensions.clone(),
            b: b.dimensions.clone(),
        });
    }
    Ok(())
}

/// Entrywise a + sign * b over every coefficient array.
pub fn combine(a: &FvMatrix, b: &FvMatrix, sign: f64) -> Result<FvMatrix, FvmError> {
    check_compatible(a, b)?;
    let mut out = a.clone();
    if out.dimensions.is_empty() {
        out.dimensions = b.dimensions.clone();
    }
    let add = |dst: &mut [f64], src: &[f64]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
    };
    add(&mut out.ldu.diag, &b.ldu.diag);
    add(&mut out.ldu.upper, &b.ldu.upper);
    add(&mut out.ldu.lower, &b.ldu.lower);
    add(&mut out.source, &b.source);
    for p in 0..out.internal_coeffs.len() {
        add(&mut out.internal_coeffs[p], &b.internal_coeffs[p]);
        add(&mut out.boundary_coeffs[p], &b.boundary_coeffs[p]);
    }
    Ok(out)
}

/// Time derivative of rho*psi. Euler: diag += rho V/dt, source +=
/// rho_old V psi_old / dt. Backward2 uses the three-level (3/2, -2, 1/2)/dt
/// weights with densities at matching levels; without a second old level it
/// falls back to Euler.
pub fn fvm_ddt(
    mesh: &Arc<Mesh>,
    rho: &CellField,
    psi: &CellField,
    scheme: &SchemeConfig,
    dt: f64,
) -> Result<FvMatrix, FvmError> {
    if dt <= 0.0 {
        return Err(FvmError::BadTimeStep(dt));
    }
    let mut m = FvMatrix::zeros(mesh, psi);
    let v = mesh.geometry.cell_volume;
    let n = mesh.n_cells();
    let two_levels = scheme.ddt_scheme == DdtScheme::Backward2
        && scheme.psi_old_old.is_some()
        && scheme.rho_old_old.is_some();
    if two_levels {
        let psi_oo = scheme.psi_old_old.unwrap();
        let rho_oo = scheme.rho_old_old.unwrap();
        for c in 0..n {
            m.ldu.diag[c] = 1.5 * rho.data[c] * v / dt;
        }
        for comp in 0..psi.n_components {
            for c in 0..n {
                m.source[comp * n + c] = (2.0 * scheme.rho_old.data[c]
                    * scheme.psi_old.at(comp, c)
                    - 0.5 * rho_oo.data[c] * psi_oo.at(comp, c))
                    * v
                    / dt;
            }
        }
    } else {
        for c in 0..n {
            m.ldu.diag[c] = rho.data[c] * v / dt;
        }
        for comp in 0..psi.n_components {
            for c in 0..n {
                m.source[comp * n + c] =
                    scheme.rho_old.data[c] * scheme.psi_old.at(comp, c) * v / dt;
            }
        }
    }
    Ok(m)
}

/// Implicit convection of psi by the mass flux through faces (kg/s).
///
/// Upwind: face f with flux phi adds max(phi,0) to the owner diagonal and
/// min(phi,0) at the neighbor column; the neighbor row gets the negated pair.
/// Linear splits phi by the face weight instead. Boundary faces: fixedValue
/// moves phi_b psi_b to the source, zeroGradient adds phi_b to the diagonal.
pub fn fvm_div(
    mesh: &Arc<Mesh>,
    face_flux: &FaceField,
    psi: &CellField,
    scheme: DivScheme,
) -> Result<FvMatrix, FvmError> {
    if face_flux.n_internal_faces != mesh.n_internal_faces() {
        return Err(FvmError::FluxMismatch {
            expected: mesh.n_internal_faces(),
            found: face_flux.n_internal_faces,
        });
    }
    let mut m = FvMatrix::zeros(mesh, psi);
    let faces = &mesh.faces;
    // Owner/neighbor column coefficients per face.
    let mut own_coeff = vec![0.0; faces.n_internal_faces];
    for f in 0..faces.n_internal_faces {
        let phi = face_flux.at(0, f);
        let (diag_own_c, upper_c) = match scheme {
            DivScheme::Upwind => (phi.max(0.0), phi.min(0.0)),
            DivScheme::Linear => {
                let w = faces.interp_weight[f];
                (phi * w, phi * (1.0 - w))
            }
        };
        m.ldu.upper[f] = upper_c;
        m.ldu.lower[f] = -diag_own_c;
        own_coeff[f] = diag_own_c;
    }
    for c in 0..mesh.n_cells() {
        let mut acc = 0.0;
        for (f, is_owner) in mesh.cell_faces.faces_of(c) {
            if is_owner {
                acc += own_coeff[f];
            } else {
                acc += -m.ldu.upper[f];
            }
        }
        m.ldu.diag[c] = acc;
    }
    let n = mesh.n_cells();
    for (p, patch) in mesh.patches.iter().enumerate() {
        let nf = patch.face_count();
        for (bf, &c) in patch.face_cells.iter().enumerate() {
            let phi_b = face_flux.patch_at(p, 0, bf);
            match patch.kind {
                PatchKind::FixedValue => {
                    for comp in 0..psi.n_components {
                        let psi_b = psi.boundary_value(p, comp, c);
                        m.boundary_coeffs[p][comp * nf + bf] += -phi_b * psi_b;
                    }
                }
                PatchKind::ZeroGradient => {
                    m.internal_coeffs[p][bf] += phi_b;
                }
                PatchKind::Periodic => unreachable!("periodic sides produce no patches"),
            }
            let _ = n;
        }
    }
    Ok(m)
}

/// Implicit Laplacian div(gamma grad psi). Face diffusivity is interpolated
/// inline (one fused pass, no stored face field). Off-diagonals are positive
/// gamma_f delta_f S_f; the diagonal collects their negatives through the
/// per-cell gather. fixedValue patches close with the one-sided stencil:
/// internalCoeff = -gamma_b delta_b S_b, boundaryCoeff = internalCoeff*psi_b.
pub fn fvm_laplacian(
    mesh: &Arc<Mesh>,
    gamma: &CellField,
    psi: &CellField,
) -> Result<FvMatrix, FvmError> {
    for (c, &g) in gamma.comp(0).iter().enumerate() {
        if g < 0.0 {
            return Err(FvmError::NegativeDiffusivity { cell: c, value: g });
        }
    }
    let mut m = FvMatrix::zeros(mesh, psi);
    let faces = &mesh.faces;
    for f in 0..faces.n_internal_faces {
        let w = faces.interp_weight[f];
        let gf = w * gamma.data[faces.owner[f]] + (1.0 - w) * gamma.data[faces.neighbor[f]];
        let coeff = gf * faces.delta_coeff[f] * faces.face_area[f];
        m.ldu.upper[f] = coeff;
        m.ldu.lower[f] = coeff;
    }
    for c in 0..mesh.n_cells() {
        let mut acc = 0.0;
        for (f, _) in mesh.cell_faces.faces_of(c) {
            acc -= m.ldu.upper[f];
        }
        m.ldu.diag[c] = acc;
    }
    for (p, patch) in mesh.patches.iter().enumerate() {
        if patch.kind != PatchKind::FixedValue {
            continue;
        }
        let nf = patch.face_count();
        for (bf, &c) in patch.face_cells.iter().enumerate() {
            let gb = gamma.boundary_value(p, 0, c);
            let coeff = -gb * patch.delta_coeff * patch.face_area;
            m.internal_coeffs[p][bf] += coeff;
            for comp in 0..psi.n_components {
                let psi_b = psi.boundary_value(p, comp, c);
                m.boundary_coeffs[p][comp * nf + bf] += coeff * psi_b;
            }
        }
    }
    Ok(m)
}

/// Implicit source: diag += coeff * V per cell.
pub fn fvm_source_sp(mesh: &Arc<Mesh>, coeff: &CellField, psi: &CellField) -> FvMatrix {
    let mut m = FvMatrix::zeros(mesh, psi);
    let v = mesh.geometry.cell_volume;
    for c in 0..mesh.n_cells() {
        m.ldu.diag[c] = coeff.data[c] * v;
    }
    m
}

/// Explicit source: source += value * V per cell, component-wise.
pub fn fvm_source_su(mesh: &Arc<Mesh>, value: &CellField, psi: &CellField) -> FvMatrix {
    let mut m = FvMatrix::zeros(mesh, psi);
    let v = mesh.geometry.cell_volume;
    let n = mesh.n_cells();
    for comp in 0..psi.n_components {
        for c in 0..n {
            m.source[comp * n + c] = value.at(comp, c) * v;
        }
    }
    m
}

/// A coefficient of the PISO decomposition: diag / V (flattened system).
pub fn diag_a(m: &FvMatrix) -> CellField {
    debug_assert!(m.flattened, "diag_A needs the flattened system");
    let mut out = CellField::zeros(&m.mesh, 1);
    let inv_v = 1.0 / m.mesh.geometry.cell_volume;
    for c in 0..m.mesh.n_cells() {
        out.data[c] = m.ldu.diag[c] * inv_v;
    }
    out
}

/// H operator of the PISO decomposition:
/// H(psi) = (source - sum_offdiag coeff * psi_across) / V per component,
/// so that A psi - H(psi) = (A_matrix psi - b) / V cell by cell.
pub fn h_of(m: &FvMatrix, psi: &CellField) -> CellField {
    debug_assert!(m.flattened, "H needs the flattened system");
    let mesh = &m.mesh;
    let n = mesh.n_cells();
    let mut out = CellField::zeros(mesh, m.n_components);
    let inv_v = 1.0 / mesh.geometry.cell_volume;
    for comp in 0..m.n_components {
        for c in 0..n {
            let mut acc = m.source_at(comp, c);
            for (f, is_owner) in mesh.cell_faces.faces_of(c) {
                if is_owner {
                    acc -= m.ldu.upper[f] * psi.at(comp, mesh.faces.neighbor[f]);
                } else {
                    acc -= m.ldu.lower[f] * psi.at(comp, mesh.faces.owner[f]);
                }
            }
            out.set(comp, c, acc * inv_v);
        }
    }
    out
}

/// Per-component outcome of one [`solve_fv`] call. Residuals are in the
/// scale-invariant norm of [`sparse::residual_norm`].
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub psi_name: String,
    pub solver: SolverKind,
    pub components: Vec<SolveStats>,
    pub converged: bool,
}

/// Flatten, normalize the global sign (so diffusion-dominated systems become
/// positive definite), convert to CSR, and solve each component: symmetric
/// systems route to PCG (or AMG-PCG when requested), asymmetric ones to
/// BiCGStab. The solution lands back in `psi`; boundary closures are
/// evaluated on demand by the field, so nothing further to update.
///
/// `controls.abs_tol`/`rel_tol` are interpreted against the normalized
/// residual; the inner l2 budget is scaled by normFactor/sqrt(n).
pub fn solve_fv(
    m: &mut FvMatrix,
    psi: &mut CellField,
    controls: &SolverControls,
) -> Result<SolverReport, FvmError> {
    m.flatten();
    let flip = m.ldu.diag.iter().sum::<f64>() < 0.0;
    let sign = if flip { -1.0 } else { 1.0 };
    let mut ldu = m.ldu.clone();
    let mut source = m.source.clone();
    if flip {
        ldu.diag.iter_mut().for_each(|v| *v = -*v);
        ldu.upper.iter_mut().for_each(|v| *v = -*v);
        ldu.lower.iter_mut().for_each(|v| *v = -*v);
        source.iter_mut().for_each(|v| *v = -*v);
    }
    let _ = sign;
    let a = ldu_to_csr(&ldu);
    let symmetric = ldu.is_symmetric();
    let kind = if symmetric {
        if controls.kind == SolverKind::AmgPcg {
            SolverKind::AmgPcg
        } else {
            SolverKind::Pcg
        }
    } else {
        SolverKind::BiCgStab
    };
    let n = m.mesh.n_cells();
    let mut report = SolverReport {
        psi_name: m.psi_name.clone(),
        solver: kind,
        components: Vec::with_capacity(m.n_components),
        converged: true,
    };
    for comp in 0..m.n_components {
        let b = &source[comp * n..(comp + 1) * n];
        let x0 = psi.comp(comp).to_vec();
        let norm = sparse::norm_factor(&a, &x0, b);
        let mut inner = *controls;
        inner.kind = kind;
        inner.abs_tol = controls.abs_tol * norm / (n as f64).sqrt();
        let (x, mut stats) = sparse::solve(&a, b, &x0, &inner)?;
        stats.initial_residual = stats.initial_residual / norm.max(f64::MIN_POSITIVE);
        stats.final_residual = sparse::residual_norm(&a, &x, b);
        report.converged &= stats.converged;
        report.components.push(stats);
        psi.comp_mut(comp).copy_from_slice(&x);
    }
    Ok(report)
}
