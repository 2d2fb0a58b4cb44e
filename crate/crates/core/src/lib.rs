pub mod constraints;
pub mod controllers;
pub mod disturbances;
pub mod dynamics;
pub mod envs;
pub mod numopt;
pub mod safefilters;
