pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod kpca;
pub mod linalg;
pub mod motion;
pub mod pca;
pub mod spca;
