pub mod numcore;
pub mod embeddings;
pub mod params;
pub mod model;
pub mod encoder;
pub mod cmrd;
pub mod belief;
pub mod data;
pub mod hiergen;
pub mod evalbench;
pub mod training;
