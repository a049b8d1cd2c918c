pub mod clearing;
pub mod harness;
pub mod model;
pub mod negotiation;
pub mod qp;
