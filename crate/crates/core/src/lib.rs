pub mod binio;
pub mod codec;
pub mod config;
pub mod demo;
pub mod env;
pub mod eval;
pub mod error;
pub mod lapo;
pub mod latent;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod sft;
pub mod tape;

pub use error::{LapoError, Result};
