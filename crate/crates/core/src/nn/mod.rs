pub mod fused;
pub mod layers;
pub mod ops;
pub mod params;
