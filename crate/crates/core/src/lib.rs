pub mod autodiff;
pub mod counterfactual;
pub mod data;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod report;
pub mod training;
