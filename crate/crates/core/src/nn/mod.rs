//! Parameter storage and hand-differentiated layer primitives.

pub mod ops;
pub mod params;

pub use params::{Init, Layout, Linear, ParamSpec, Slot};
