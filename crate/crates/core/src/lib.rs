//! Computational metric measure spaces with exact arithmetic.
//!
//! This crate builds finite metric measure spaces (tori, stars, group
//! products over finite-field quadrics, Ahlfors–David regular products,
//! rooted trees), runs maximal-operator experiments over them, and certifies
//! the resulting operator-norm bounds with exact rational witnesses.
//!
//! Everything downstream of a distance comparison is exact: distances are
//! represented by integer codes ordered consistently with the underlying
//! real radii (rational, `a + b*sqrt(2)`, or powers of `3^(1/n)`), measures
//! are integer weights, and averages are rationals. Floating point appears
//! only in reports.

pub mod construct;
pub mod cover;
pub mod err;
pub mod exact;
pub mod field;
pub mod maximal;
pub mod partition;
pub mod space;
pub mod tree;

pub use err::{Error, Result};
