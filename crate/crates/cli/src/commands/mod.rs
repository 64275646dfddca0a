pub mod bench;
pub mod cost_curves;
pub mod roofline;
pub mod verify;
