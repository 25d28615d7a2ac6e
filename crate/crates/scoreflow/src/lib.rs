pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod finetune;
pub mod flow;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod ppo;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod stats;
pub mod verify;
