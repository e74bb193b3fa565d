pub mod cli;
pub mod correction;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimize;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod resample;
pub mod spline;
pub mod volume;
