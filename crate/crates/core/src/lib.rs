//! Safety toolkit for insulin delivery with a human both acting on and being the plant.
//!
//! * [`plant`] and [`sim`]: Bergman minimal model, RK4 and closed-loop simulation.
//! * [`mc`]: meal-event Markov chains and their domain of attraction.
//! * [`fis`] and [`reach`]: the human's bolus behaviour as a fuzzy system and
//!   interval enclosures of its output over input boxes.
//! * [`controllers`], [`clbf`] and [`nn`]: baselines, neural certificate and
//!   controller synthesis.
//! * [`stl`] and [`harness`]: monitors, metrics and scenario orchestration.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod clbf;
pub mod controllers;
pub mod error;
pub mod fis;
pub mod harness;
pub mod mc;
pub mod nn;
pub mod plant;
pub mod reach;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod stl;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PlantStateF64 = plant::PlantState<f64>;
pub type PlantStateF32 = plant::PlantState<f32>;
pub type BmmParamsF64 = plant::BmmParams<f64>;
pub type BmmParamsF32 = plant::BmmParams<f32>;
pub type FisModelF64 = fis::FisModel<f64>;
pub type FisModelF32 = fis::FisModel<f32>;
pub type IntervalF64 = reach::Interval<f64>;
pub type IntervalF32 = reach::Interval<f32>;
pub type InputBoxF64 = reach::InputBox<f64>;
pub type InputBoxF32 = reach::InputBox<f32>;
pub type MlpF64 = nn::Mlp<f64>;
pub type MlpF32 = nn::Mlp<f32>;
