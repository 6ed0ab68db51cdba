//! Toolkit for optimal control problems with unbounded (impulsive) controls.
//!
//! The crate embeds a control-affine problem whose control derivative is only
//! constrained to a convex cone into its space-time extension, where the
//! original time becomes a state variable driven by a bounded canonical
//! control. On the extended side it provides
//!
//! * numeric integration of trajectories and adjoint paths ([`dynamics`]),
//! * a direct transcription solver with an impulse-restricted variant
//!   ([`solver`]),
//! * verification and classification of candidate extremals ([`pmp`]),
//! * detection and certification machinery for the gap between the extended
//!   infimum and the infimum over genuinely non-impulsive processes
//!   ([`analysis`]).
//!
//! Problems are described through symbolic expressions ([`expr`]) bundled
//! into a [`model::ProblemSpec`]; conversions between the original and the
//! extended parameterization live in [`reparam`]. Three worked example
//! problems ship with the crate in [`bundled`], and the file exchange
//! formats (problem documents, trajectory CSV, multiplier files) are in
//! [`io`].

pub mod analysis;
pub mod bundled;
pub mod dynamics;
pub mod expr;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pmp;
pub mod reparam;
pub mod solver;
