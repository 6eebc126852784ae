//! Heat-demand regression from map imagery, building composition and
//! vision-language captions of municipal heat-planning zones.

pub mod buildings;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod hashing;
pub mod imagery;
pub mod io;
pub mod models;
pub mod semantics;
pub mod config;
pub mod pipeline;
pub mod synthetic;
