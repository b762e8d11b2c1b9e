pub mod tensor;
pub mod pose;
pub mod synth;
pub mod targets;
pub mod adaptive;
pub mod network;
pub mod losses;
pub mod decoder;
pub mod eval;
pub mod trainer;
pub mod gradsuite;
