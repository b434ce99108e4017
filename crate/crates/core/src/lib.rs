pub mod autodiff;
pub mod bernstein;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod error;
pub mod flow;
pub mod geom;
pub mod guidance;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod scorer;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
