mod analysis;
mod cox;
mod risk;

pub use analysis::*;
pub use cox::*;
pub use risk::*;
