//! Comparison schemes: fingerprinting, static-RIS estimators and the
//! CRLB-driven adaptive design.

pub mod crlb;
pub mod fingerprint;
pub mod static_dnn;
