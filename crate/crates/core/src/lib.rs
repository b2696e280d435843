pub mod anneal;
pub mod chain;
pub mod cli;
pub mod config;
pub mod defects;
pub mod odmr;
pub mod pipeline;
pub mod plot;
pub mod radialdose;
pub mod rng;
pub mod spectra;
pub mod stopping;
pub mod ttmd;
pub mod units;
