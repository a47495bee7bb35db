//! Solver toolkit for risk-averse bilevel stochastic linear programs over
//! finite discrete distributions.
//!
//! The pipeline: [`model`] holds instance data; [`simplex`] is the exact
//! LP kernel everything else leans on; [`lowerlevel`] enumerates follower
//! bases and evaluates the leader's stage cost; [`risk`] applies risk
//! functionals to scenario cost profiles and differentiates them;
//! [`detequiv`] builds single-level deterministic equivalents; [`mpcc`]
//! solves the resulting complementarity programs by global enumeration or
//! a regularization path; [`harness`] runs stability and genericity
//! experiments on top of all of it.

mod linalg;

pub mod detequiv;
pub mod harness;
pub mod lowerlevel;
pub mod model;
pub mod mpcc;
pub mod risk;
pub mod simplex;
