//! Cell- and face-centered data in component-major layout, plus the explicit
//! spatial operators: interpolation, Gauss gradient, divergence, Courant number.
//!
//! Component-major means all cells of component 0 come first, then component 1,
//! and so on. That layout is part of the type's contract; kernels iterate cells
//! innermost. Face-to-cell accumulations use the per-cell gather index of the
//! mesh, so results do not depend on any parallel schedule.

use crate::mesh::{Mesh, PatchKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field has {found} cells/faces but mesh expects {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("patch {patch} ({name}) has no boundary closure for this field")]
    MissingBoundary { patch: usize, name: String },
    #[error("boundary value count {found} does not match {expected} components")]
    BoundaryComponents { expected: usize, found: usize },
}

/// Boundary closure of a field on one patch.
///
/// `FixedValue` holds one value per component, uniform over the patch.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    FixedValue(Vec<f64>),
    ZeroGradient,
}

/// Multi-component cell-centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    /// Equation/output tag ("U", "p", ...); empty for scratch fields.
    pub name: String,
    pub n_components: usize,
    pub n_cells: usize,
    /// Component-major: `data[comp * n_cells + cell]`.
    pub data: Vec<f64>,
    /// Per-patch closure, aligned with `mesh.patches`.
    pub boundary: Vec<BoundaryCondition>,
}

impl CellField {
    /// Uniform field with the given per-component value and the patch kinds'
    /// default closures (fixedValue patches get the same uniform value).
    pub fn uniform(mesh: &Mesh, values: &[f64]) -> CellField {
        let n_components = values.len();
        let n_cells = mesh.n_cells();
        let mut data = Vec::with_capacity(n_components * n_cells);
        for &v in values {
            data.extend(std::iter::repeat(v).take(n_cells));
        }
        let boundary = mesh
            .patches
            .iter()
            .map(|p| match p.kind {
                PatchKind::FixedValue => BoundaryCondition::FixedValue(values.to_vec()),
                _ => BoundaryCondition::ZeroGradient,
            })
            .collect();
        CellField {
            name: String::new(),
            n_components,
            n_cells,
            data,
            boundary,
        }
    }

    pub fn named(mut self, name: &str) -> CellField {
        self.name = name.to_string();
        self
    }

    pub fn zeros(mesh: &Mesh, n_components: usize) -> CellField {
        Self::uniform(mesh, &vec![0.0; n_components])
    }

    /// Scalar field built from a function of the cell center.
    pub fn from_fn(mesh: &Mesh, f: impl Fn([f64; 3]) -> f64) -> CellField {
        let mut field = Self::zeros(mesh, 1);
        for c in 0..field.n_cells {
            field.data[c] = f(mesh.geometry.cell_centers[c]);
        }
        field
    }

    pub fn set_boundary(&mut self, patch: usize, bc: BoundaryCondition) {
        self.boundary[patch] = bc;
    }

    #[inline]
    pub fn at(&self, comp: usize, cell: usize) -> f64 {
        self.data[comp * self.n_cells + cell]
    }

    #[inline]
    pub fn set(&mut self, comp: usize, cell: usize, value: f64) {
        self.data[comp * self.n_cells + cell] = value;
    }

    /// All cells of one component.
    pub fn comp(&self, comp: usize) -> &[f64] {
        &self.data[comp * self.n_cells..(comp + 1) * self.n_cells]
    }

    pub fn comp_mut(&mut self, comp: usize) -> &mut [f64] {
        &mut self.data[comp * self.n_cells..(comp + 1) * self.n_cells]
    }

    /// Boundary-face value of `comp` on `patch` for the face adjacent to `cell`.
    #[inline]
    pub fn boundary_value(&self, patch: usize, comp: usize, cell: usize) -> f64 {
        match &self.boundary[patch] {
            BoundaryCondition::FixedValue(vals) => vals[comp],
            BoundaryCondition::ZeroGradient => self.at(comp, cell),
        }
    }

    fn check_mesh(&self, mesh: &Mesh) -> Result<(), FieldError> {
        if self.n_cells != mesh.n_cells() {
            return Err(FieldError::SizeMismatch {
                expected: mesh.n_cells(),
                found: self.n_cells,
            });
        }
        if self.boundary.len() != mesh.patches.len() {
            return Err(FieldError::MissingBoundary {
                patch: self.boundary.len(),
                name: "<missing>".into(),
            });
        }
        Ok(())
    }
}

/// Multi-component face-centered data: internal faces plus per-patch arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub n_components: usize,
    pub n_internal_faces: usize,
    /// Component-major over internal faces.
    pub data: Vec<f64>,
    /// Per patch: component-major over that patch's faces.
    pub patch_data: Vec<Vec<f64>>,
}

impl FaceField {
    pub fn zeros(mesh: &Mesh, n_components: usize) -> FaceField {
        FaceField {
            n_components,
            n_internal_faces: mesh.n_internal_faces(),
            data: vec![0.0; n_components * mesh.n_internal_faces()],
            patch_data: mesh
                .patches
                .iter()
                .map(|p| vec![0.0; n_components * p.face_count()])
                .collect(),
        }
    }

    #[inline]
    pub fn at(&self, comp: usize, face: usize) -> f64 {
        self.data[comp * self.n_internal_faces + face]
    }

    #[inline]
    pub fn set(&mut self, comp: usize, face: usize, value: f64) {
        self.data[comp * self.n_internal_faces + face] = value;
    }

    #[inline]
    pub fn patch_at(&self, patch: usize, comp: usize, face: usize) -> f64 {
        let n = self.patch_data[patch].len() / self.n_components.max(1);
        self.patch_data[patch][comp * n + face]
    }

    #[inline]
    pub fn patch_set(&mut self, patch: usize, comp: usize, face: usize, value: f64) {
        let n = self.patch_data[patch].len() / self.n_components.max(1);
        self.patch_data[patch][comp * n + face] = value;
    }

    fn check_mesh(&self, mesh: &Mesh) -> Result<(), FieldError> {
        if self.n_internal_faces != mesh.n_internal_faces() {
            return Err(FieldError::SizeMismatch {
                expected: mesh.n_internal_faces(),
                found: self.n_internal_faces,
            });
        }
        Ok(())
    }
}

/// Linear (central) interpolation of a cell field to faces.
///
/// Internal faces blend with the face weight; boundary faces take the patch
/// closure value (prescribed for fixedValue, adjacent cell for zeroGradient).
pub fn interpolate_linear(field: &CellField, mesh: &Mesh) -> Result<FaceField, FieldError> {
    field.check_mesh(mesh)?;
    let mut out = FaceField::zeros(mesh, field.n_components);
    for comp in 0..field.n_components {
        for f in 0..mesh.n_internal_faces() {
            let w = mesh.faces.interp_weight[f];
            let v = w * field.at(comp, mesh.faces.owner[f])
                + (1.0 - w) * field.at(comp, mesh.faces.neighbor[f]);
            out.set(comp, f, v);
        }
        for (p, patch) in mesh.patches.iter().enumerate() {
            for (bf, &c) in patch.face_cells.iter().enumerate() {
                out.patch_set(p, comp, bf, field.boundary_value(p, comp, c));
            }
        }
    }
    Ok(out)
}

/// Upwind interpolation: the face takes the upstream cell's value.
///
/// Zero flux ties break to the owner side. Boundary faces use the patch
/// closure value like the linear scheme.
pub fn interpolate_upwind(
    field: &CellField,
    flux: &FaceField,
    mesh: &Mesh,
) -> Result<FaceField, FieldError> {
    field.check_mesh(mesh)?;
    flux.check_mesh(mesh)?;
    let mut out = FaceField::zeros(mesh, field.n_components);
    for comp in 0..field.n_components {
        for f in 0..mesh.n_internal_faces() {
            let donor = if flux.at(0, f) >= 0.0 {
                mesh.faces.owner[f]
            } else {
                mesh.faces.neighbor[f]
            };
            out.set(comp, f, field.at(comp, donor));
        }
        for (p, patch) in mesh.patches.iter().enumerate() {
            for (bf, &c) in patch.face_cells.iter().enumerate() {
                out.patch_set(p, comp, bf, field.boundary_value(p, comp, c));
            }
        }
    }
    Ok(out)
}

/// Gauss gradient of a scalar field: grad_c = (1/V) sum_f psi_f S_f n_f
/// with outward orientation per cell. Returns a 3-component field.
pub fn gauss_gradient(field: &CellField, mesh: &Mesh) -> Result<CellField, FieldError> {
    field.check_mesh(mesh)?;
    let face_vals = interpolate_linear(field, mesh)?;
    let mut grad = CellField::zeros(mesh, 3 * field.n_components);
    let inv_v = 1.0 / mesh.geometry.cell_volume;
    for comp in 0..field.n_components {
        for c in 0..mesh.n_cells() {
            let mut acc = [0.0f64; 3];
            for (f, is_owner) in mesh.cell_faces.faces_of(c) {
                let sign = if is_owner { 1.0 } else { -1.0 };
                let v = face_vals.at(comp, f) * mesh.faces.face_area[f] * sign;
                for d in 0..3 {
                    acc[d] += v * mesh.faces.face_normal[f][d];
                }
            }
            for &(p, bf) in mesh.cell_faces.boundary_faces_of(c) {
                let patch = &mesh.patches[p];
                let v = face_vals.patch_at(p, comp, bf) * patch.face_area;
                for d in 0..3 {
                    acc[d] += v * patch.normal[d];
                }
            }
            for d in 0..3 {
                grad.set(3 * comp + d, c, acc[d] * inv_v);
            }
        }
    }
    Ok(grad)
}

/// Divergence of a scalar face flux (flux already includes the face area):
/// div_c = (1/V) (outgoing - incoming).
pub fn explicit_divergence(flux: &FaceField, mesh: &Mesh) -> Result<CellField, FieldError> {
    flux.check_mesh(mesh)?;
    let mut div = CellField::zeros(mesh, 1);
    let inv_v = 1.0 / mesh.geometry.cell_volume;
    for c in 0..mesh.n_cells() {
        let mut acc = 0.0;
        for (f, is_owner) in mesh.cell_faces.faces_of(c) {
            let sign = if is_owner { 1.0 } else { -1.0 };
            acc += sign * flux.at(0, f);
        }
        for &(p, bf) in mesh.cell_faces.boundary_faces_of(c) {
            acc += flux.patch_at(p, 0, bf);
        }
        div.data[c] = acc * inv_v;
    }
    Ok(div)
}

/// Maximum Courant number over cells for a volumetric face flux [m^3/s]:
/// Co = dt * max_c (sum_f |flux_f|) / (2 V). Returns (Co, argmax cell).
pub fn courant_number(flux: &FaceField, mesh: &Mesh, dt: f64) -> (f64, usize) {
    let inv_2v = 1.0 / (2.0 * mesh.geometry.cell_volume);
    let mut max_co = 0.0;
    let mut argmax = 0;
    for c in 0..mesh.n_cells() {
        let mut acc = 0.0;
        for (f, _) in mesh.cell_faces.faces_of(c) {
            acc += flux.at(0, f).abs();
        }
        for &(p, bf) in mesh.cell_faces.boundary_faces_of(c) {
            acc += flux.patch_at(p, 0, bf).abs();
        }
        let co = dt * acc * inv_2v;
        if co > max_co {
            max_co = co;
            argmax = c;
        }
    }
    (max_co, argmax)
}
