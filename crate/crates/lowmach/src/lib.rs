//! Low-Mach reactive flow mini-solver.
//!
//! Implicit cell-centred finite volume discretization on structured Cartesian
//! meshes, LDU/CSR sparse linear algebra with Krylov and algebraic-multigrid
//! solvers, PISO pressure-velocity coupling for variable-density low-Mach flow,
//! NASA-7 thermochemistry, a stiff chemical-kinetics integrator, and a
//! per-species GELU MLP chemistry surrogate with its own trainer.
//!
//! The crate is organized bottom-up:
//!
//! - [`mesh`]: structured meshes with owner/neighbor face addressing
//! - [`field`]: component-major cell/face data and explicit operators
//! - [`sparse`]: LDU and CSR matrices, SPMV, PCG/BiCGStab/AMG solvers
//! - [`fvm`]: implicit operator assembly (ddt, div, laplacian, sources)
//! - [`thermo`]: NASA-7 polynomials, mixture properties, transport
//! - [`chemistry`]: Arrhenius kinetics and a stiff reactor integrator
//! - [`surrogate`]: MLP inference, Adam trainer, weights persistence
//! - [`piso`]: the time-advancement pipeline coupling all of the above
//! - [`driver`]: case/mechanism files, initialization, output, benchmarks

pub mod chemistry;
pub mod constants;
pub mod driver;
pub mod field;
pub mod fvm;
pub mod mesh;
pub mod piso;
pub mod sparse;
pub mod surrogate;
pub mod thermo;
