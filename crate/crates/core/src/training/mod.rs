pub mod adamax;
pub mod data;
pub mod trace;
pub mod trainer;
