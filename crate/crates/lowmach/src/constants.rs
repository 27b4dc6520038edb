//! Physical constants in SI units (kmol convention).

/// Universal gas constant [J/(kmol K)].
pub const R_UNIVERSAL: f64 = 8314.462_618_153_24;

/// Standard-state pressure for equilibrium constants [Pa].
pub const P_STANDARD: f64 = 101_325.0;
