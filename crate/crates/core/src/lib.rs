//! Proposal-free instance segmentation of RGB-D frames by clustering per-pixel
//! geometric object features.
//!
//! Pipeline: [`scenegen`] renders synthetic frames, [`annotation`] derives the
//! per-pixel targets, a [`predictor`] produces a [`clustering::Prediction`],
//! [`clustering::segment`] turns it into instances and [`eval`] scores them.
//! [`losses`] holds the training objective with analytic gradients,
//! [`training`] fits the MLP predictor and [`dataio`] stores tensors in a
//! self-describing binary bundle.

pub mod annotation;
pub mod clustering;
pub mod dataio;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod predictor;
pub mod rng;
pub mod scenegen;
pub mod training;

/// Union of the module errors, for callers that chain several stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Scene(#[from] scenegen::SceneError),
    #[error(transparent)]
    Annotation(#[from] annotation::AnnotationError),
    #[error(transparent)]
    Clustering(#[from] clustering::ClusteringError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Predictor(#[from] predictor::PredictorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
}
