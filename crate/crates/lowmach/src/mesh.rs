//! Structured Cartesian meshes with face-based owner/neighbor addressing.
//!
//! Cells are linearized i-fastest: `cell = i + nx*(j + ny*k)`. Internal faces
//! are sorted lexicographically by `(owner, neighbor)` with `owner < neighbor`,
//! which is the layout the LDU matrix format relies on. Periodic boundaries are
//! realized as internal faces wrapping the domain, so a fully periodic mesh has
//! no boundary patches at all.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("dimension {axis} has zero extent")]
    ZeroExtent { axis: usize },
    #[error("length along axis {axis} must be positive, got {value}")]
    NonPositiveLength { axis: usize, value: f64 },
    #[error("periodic sides must come in opposing pairs: {side} is periodic but its opposite is not")]
    MismatchedPeriodicPair { side: &'static str },
}

/// Which of the six box sides a patch sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    XMin = 0,
    XMax = 1,
    YMin = 2,
    YMax = 3,
    ZMin = 4,
    ZMax = 5,
}

impl Side {
    pub const ALL: [Side; 6] = [
        Side::XMin,
        Side::XMax,
        Side::YMin,
        Side::YMax,
        Side::ZMin,
        Side::ZMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Side::XMin => "xmin",
            Side::XMax => "xmax",
            Side::YMin => "ymin",
            Side::YMax => "ymax",
            Side::ZMin => "zmin",
            Side::ZMax => "zmax",
        }
    }

    fn axis(self) -> usize {
        (self as usize) / 2
    }
}

/// Declared closure of a boundary patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    FixedValue,
    ZeroGradient,
    Periodic,
}

/// Per-side patch kinds handed to the mesh builder.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec(pub [PatchKind; 6]);

impl PatchSpec {
    pub fn uniform(kind: PatchKind) -> Self {
        PatchSpec([kind; 6])
    }

    pub fn fully_periodic() -> Self {
        Self::uniform(PatchKind::Periodic)
    }

    pub fn all_walls() -> Self {
        Self::uniform(PatchKind::FixedValue)
    }

    pub fn with(mut self, side: Side, kind: PatchKind) -> Self {
        self.0[side as usize] = kind;
        self
    }
}

/// Cell-centered geometry of a uniform Cartesian block.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    pub dims: [usize; 3],
    pub lengths: [f64; 3],
    pub spacing: [f64; 3],
    pub n_cells: usize,
    /// Uniform cell volume dx*dy*dz.
    pub cell_volume: f64,
    /// Cell centers, indexed by the i-fastest linearization.
    pub cell_centers: Vec<[f64; 3]>,
}

impl StructuredMesh {
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn cell_coords(&self, c: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [c % nx, (c / nx) % ny, c / (nx * ny)]
    }
}

/// Internal-face addressing and geometry.
///
/// `owner[f] < neighbor[f]` for every face, and faces are sorted by
/// `(owner, neighbor)`. The face normal points from owner to neighbor.
#[derive(Debug, Clone)]
pub struct FaceConnectivity {
    pub n_internal_faces: usize,
    pub owner: Vec<usize>,
    pub neighbor: Vec<usize>,
    /// |S_f| per face [m^2].
    pub face_area: Vec<f64>,
    /// Unit normal, owner -> neighbor.
    pub face_normal: Vec<[f64; 3]>,
    /// 1/|d| between the straddling cell centers [1/m].
    pub delta_coeff: Vec<f64>,
    /// Linear interpolation weight of the owner value (0.5 on uniform meshes).
    pub interp_weight: Vec<f64>,
}

impl FaceConnectivity {
    /// Geometry of one internal face: (area, unit normal, delta coefficient).
    pub fn face_geometry(&self, f: usize) -> Option<(f64, [f64; 3], f64)> {
        if f >= self.n_internal_faces {
            return None;
        }
        Some((self.face_area[f], self.face_normal[f], self.delta_coeff[f]))
    }
}

/// One boundary patch: every exterior face of the mesh belongs to exactly one.
#[derive(Debug, Clone)]
pub struct BoundaryPatch {
    pub name: String,
    pub kind: PatchKind,
    pub side: Side,
    /// Adjacent cell per boundary face.
    pub face_cells: Vec<usize>,
    /// |S_b| per face [m^2] (uniform per patch on Cartesian meshes).
    pub face_area: f64,
    /// 1/|d| from cell center to face center, = 2/spacing along the normal.
    pub delta_coeff: f64,
    /// Outward unit normal of the patch.
    pub normal: [f64; 3],
}

impl BoundaryPatch {
    pub fn face_count(&self) -> usize {
        self.face_cells.len()
    }
}

/// Per-cell gather tables: which faces touch each cell, and on which side.
///
/// Face-to-cell accumulations (gradients, divergence, matrix diagonals) loop
/// over these lists instead of scattering from faces, so the summation order
/// per cell is fixed regardless of how the face loop is scheduled.
#[derive(Debug, Clone)]
pub struct CellFaceIndex {
    offsets: Vec<usize>,
    faces: Vec<usize>,
    is_owner: Vec<bool>,
    boundary_offsets: Vec<usize>,
    /// (patch index, face index within patch)
    boundary_faces: Vec<(usize, usize)>,
}

impl CellFaceIndex {
    /// Internal faces of cell `c` as (face index, cell-is-owner).
    pub fn faces_of(&self, c: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        let range = self.offsets[c]..self.offsets[c + 1];
        range.map(move |i| (self.faces[i], self.is_owner[i]))
    }

    /// Boundary faces of cell `c` as (patch index, face-in-patch index).
    pub fn boundary_faces_of(&self, c: usize) -> &[(usize, usize)] {
        &self.boundary_faces[self.boundary_offsets[c]..self.boundary_offsets[c + 1]]
    }
}

/// A complete mesh: geometry, internal-face connectivity, boundary patches,
/// and the per-cell gather index. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub geometry: StructuredMesh,
    pub faces: FaceConnectivity,
    pub patches: Vec<BoundaryPatch>,
    pub cell_faces: CellFaceIndex,
}

impl Mesh {
    /// Build a uniform Cartesian mesh with the requested per-side closures.
    ///
    /// Periodic sides must be declared in opposing pairs; each pair is turned
    /// into wrap-around internal faces and produces no boundary patch. A
    /// periodic direction of extent 1 generates no wrap face (the cell would
    /// connect to itself; all fluxes cancel identically).
    pub fn cartesian(
        dims: [usize; 3],
        lengths: [f64; 3],
        patch_spec: PatchSpec,
    ) -> Result<Mesh, MeshError> {
        for axis in 0..3 {
            if dims[axis] == 0 {
                return Err(MeshError::ZeroExtent { axis });
            }
            if lengths[axis] <= 0.0 {
                return Err(MeshError::NonPositiveLength {
                    axis,
                    value: lengths[axis],
                });
            }
        }
        let mut periodic = [false; 3];
        for axis in 0..3 {
            let lo = patch_spec.0[2 * axis] == PatchKind::Periodic;
            let hi = patch_spec.0[2 * axis + 1] == PatchKind::Periodic;
            if lo != hi {
                let side = if lo {
                    Side::ALL[2 * axis].name()
                } else {
                    Side::ALL[2 * axis + 1].name()
                };
                return Err(MeshError::MismatchedPeriodicPair { side });
            }
            periodic[axis] = lo;
        }

        let [nx, ny, nz] = dims;
        let spacing = [
            lengths[0] / nx as f64,
            lengths[1] / ny as f64,
            lengths[2] / nz as f64,
        ];
        let n_cells = nx * ny * nz;
        let cell_volume = spacing[0] * spacing[1] * spacing[2];

        let mut cell_centers = Vec::with_capacity(n_cells);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    cell_centers.push([
                        (i as f64 + 0.5) * spacing[0],
                        (j as f64 + 0.5) * spacing[1],
                        (k as f64 + 0.5) * spacing[2],
                    ]);
                }
            }
        }

        let geometry = StructuredMesh {
            dims,
            lengths,
            spacing,
            n_cells,
            cell_volume,
            cell_centers,
        };

        // Areas and inverse center-to-center distances per axis.
        let area = [
            spacing[1] * spacing[2],
            spacing[0] * spacing[2],
            spacing[0] * spacing[1],
        ];
        let delta = [1.0 / spacing[0], 1.0 / spacing[1], 1.0 / spacing[2]];

        // (owner, neighbor, axis, sign of the owner->neighbor normal)
        let mut raw_faces: Vec<(usize, usize, usize, f64)> = Vec::new();
        let stride = [1usize, nx, nx * ny];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = geometry.cell_index(i, j, k);
                    let idx = [i, j, k];
                    for axis in 0..3 {
                        if idx[axis] + 1 < dims[axis] {
                            raw_faces.push((c, c + stride[axis], axis, 1.0));
                        }
                        // Wrap face, held by the low-index cell.
                        if periodic[axis] && dims[axis] > 1 && idx[axis] == 0 {
                            let nei = c + stride[axis] * (dims[axis] - 1);
                            raw_faces.push((c, nei, axis, -1.0));
                        }
                    }
                }
            }
        }
        raw_faces.sort_by_key(|&(own, nei, _, _)| (own, nei));

        let n_internal_faces = raw_faces.len();
        let mut faces = FaceConnectivity {
            n_internal_faces,
            owner: Vec::with_capacity(n_internal_faces),
            neighbor: Vec::with_capacity(n_internal_faces),
            face_area: Vec::with_capacity(n_internal_faces),
            face_normal: Vec::with_capacity(n_internal_faces),
            delta_coeff: Vec::with_capacity(n_internal_faces),
            interp_weight: Vec::with_capacity(n_internal_faces),
        };
        for &(own, nei, axis, sign) in &raw_faces {
            faces.owner.push(own);
            faces.neighbor.push(nei);
            faces.face_area.push(area[axis]);
            let mut normal = [0.0; 3];
            normal[axis] = sign;
            faces.face_normal.push(normal);
            faces.delta_coeff.push(delta[axis]);
            faces.interp_weight.push(0.5);
        }

        let mut patches = Vec::new();
        for side in Side::ALL {
            let axis = side.axis();
            if periodic[axis] {
                continue;
            }
            let kind = patch_spec.0[side as usize];
            let face_cells = boundary_cells(&geometry, side);
            let mut normal = [0.0; 3];
            normal[axis] = if (side as usize) % 2 == 0 { -1.0 } else { 1.0 };
            patches.push(BoundaryPatch {
                name: side.name().to_string(),
                kind,
                side,
                face_cells,
                face_area: area[axis],
                delta_coeff: 2.0 * delta[axis],
                normal,
            });
        }

        let cell_faces = build_cell_face_index(n_cells, &faces, &patches);

        Ok(Mesh {
            geometry,
            faces,
            patches,
            cell_faces,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.geometry.n_cells
    }

    pub fn n_internal_faces(&self) -> usize {
        self.faces.n_internal_faces
    }

    pub fn n_boundary_faces(&self) -> usize {
        self.patches.iter().map(|p| p.face_count()).sum()
    }

    pub fn patch_face_count(&self, patch: usize) -> Option<usize> {
        self.patches.get(patch).map(|p| p.face_count())
    }

    pub fn patch_by_name(&self, name: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.name == name)
    }
}

/// Cells adjacent to one box side, ordered with the lower axis fastest.
fn boundary_cells(geo: &StructuredMesh, side: Side) -> Vec<usize> {
    let [nx, ny, nz] = geo.dims;
    let mut cells = Vec::new();
    match side {
        Side::XMin | Side::XMax => {
            let i = if side == Side::XMin { 0 } else { nx - 1 };
            for k in 0..nz {
                for j in 0..ny {
                    cells.push(geo.cell_index(i, j, k));
                }
            }
        }
        Side::YMin | Side::YMax => {
            let j = if side == Side::YMin { 0 } else { ny - 1 };
            for k in 0..nz {
                for i in 0..nx {
                    cells.push(geo.cell_index(i, j, k));
                }
            }
        }
        Side::ZMin | Side::ZMax => {
            let k = if side == Side::ZMin { 0 } else { nz - 1 };
            for j in 0..ny {
                for i in 0..nx {
                    cells.push(geo.cell_index(i, j, k));
                }
            }
        }
    }
    cells
}

fn build_cell_face_index(
    n_cells: usize,
    faces: &FaceConnectivity,
    patches: &[BoundaryPatch],
) -> CellFaceIndex {
    let mut counts = vec![0usize; n_cells];
    for f in 0..faces.n_internal_faces {
        counts[faces.owner[f]] += 1;
        counts[faces.neighbor[f]] += 1;
    }
    let mut offsets = vec![0usize; n_cells + 1];
    for c in 0..n_cells {
        offsets[c + 1] = offsets[c] + counts[c];
    }
    let mut fill = offsets.clone();
    let mut face_idx = vec![0usize; offsets[n_cells]];
    let mut is_owner = vec![false; offsets[n_cells]];
    // Face indices ascend within each cell because f ascends here.
    for f in 0..faces.n_internal_faces {
        let own = faces.owner[f];
        face_idx[fill[own]] = f;
        is_owner[fill[own]] = true;
        fill[own] += 1;
        let nei = faces.neighbor[f];
        face_idx[fill[nei]] = f;
        is_owner[fill[nei]] = false;
        fill[nei] += 1;
    }

    let mut bcounts = vec![0usize; n_cells];
    for patch in patches {
        for &c in &patch.face_cells {
            bcounts[c] += 1;
        }
    }
    let mut boundary_offsets = vec![0usize; n_cells + 1];
    for c in 0..n_cells {
        boundary_offsets[c + 1] = boundary_offsets[c] + bcounts[c];
    }
    let mut bfill = boundary_offsets.clone();
    let mut boundary_faces = vec![(0usize, 0usize); boundary_offsets[n_cells]];
    for (p, patch) in patches.iter().enumerate() {
        for (bf, &c) in patch.face_cells.iter().enumerate() {
            boundary_faces[bfill[c]] = (p, bf);
            bfill[c] += 1;
        }
    }

    CellFaceIndex {
        offsets,
        faces: face_idx,
        is_owner,
        boundary_offsets,
        boundary_faces,
    }
}
