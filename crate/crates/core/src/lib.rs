pub mod dataio;
pub mod error;
pub mod expcli;
pub mod gradsurgery;
pub mod mlpnet;
pub mod ndmath;
pub mod objectives;
pub mod optimizer;
pub mod trainloop;

pub use error::{Error, Result};
