mod attention;
mod heatmap;
mod model;
mod train;

pub use attention::*;
pub use heatmap::*;
pub use model::*;
pub use train::*;
