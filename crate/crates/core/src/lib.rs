//! Lane-driving simulator with scripted teachers and the four learning
//! stages: imitation, reward induction, safety gating and double DQN.

pub mod dataset;
pub mod env;
mod error;
pub mod imitation;
pub mod nets;
pub mod render;
pub mod reward;
pub mod rl;
pub mod safety;
pub mod teacher;
pub mod track;
pub mod train;
pub mod world;

pub use error::CoreError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
