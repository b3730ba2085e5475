//! Executable constructions on ample groupoids over Cantor unit spaces.

pub mod cantor;
pub mod density;
pub mod folner;
pub mod fullgroup;
pub mod gamma;
pub mod castle;
pub mod groupoid;
pub mod report;
pub mod systems;
pub mod tiling;
