//! Sub-Finsler geometry of first-order differential operators on a single
//! chart of R^n.
//!
//! A first-order operator `D f = sum_j a_j(x) d_j f + b(x) f` carries the
//! symbol seminorm `P(xi) = |sum_j xi_j a_j(x)|_op` on covectors. Its dual
//! extended norm `P*` measures velocities, and the induced control distance
//! bounds how fast solutions of `du/dt = i D u` can spread.

// `!(x > 0.0)` also rejects NaN; index loops walk several arrays in step.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod fields;
pub mod flows;
pub mod gallery;
pub mod geometry;
pub mod linalg;
pub mod mollify;
pub mod propagate;
pub mod symbol;

pub use fields::{ExtReal, Field, FieldError, Grid};
pub use linalg::{CMatrix, C64};
pub use symbol::{dual_norm, seminorm, DualNormOptions, SymbolError, SymbolField};
