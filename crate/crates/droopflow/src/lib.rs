//! Steady-state AC-DC power system solver toolkit with smooth droop control.
//!
//! Piecewise-linear droop characteristics (generator contingency response,
//! converter P-Vdc and Q-Vac droop with deadbands) are replaced by tunable
//! smooth equality constraints built from softplus terms, and embedded in
//! power flow, optimal power flow, and security-constrained optimal power
//! flow problems. An exact segment-enumeration oracle validates the smooth
//! formulation on small instances.

pub mod acdc;
pub mod curves;
pub mod exec;
pub mod network;
pub mod nlp;
pub mod opf;
pub mod oracle;
pub mod pf;
pub mod smooth;

pub use network::{Network, NetworkError};
pub use smooth::{SmoothError, SmoothingConfig};
