mod fewshot;
mod probe;
mod prototype;

pub use fewshot::*;
pub use probe::*;
pub use prototype::*;
