pub mod anchor;
pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod discovery;
pub mod exec;
pub mod mixture;
pub mod models;
pub mod refiner;
pub mod rules;
