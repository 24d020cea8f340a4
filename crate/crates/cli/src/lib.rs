pub mod commands;
pub mod config;
pub mod models;
pub mod output;
pub mod pipelines;
