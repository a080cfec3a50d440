pub mod formats;
pub mod pipeline;
pub mod svg;
