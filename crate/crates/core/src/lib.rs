//! Implicit-surface fitting from noisy point clouds with noise-compensated moment matrices.

pub mod basis;
pub mod cloud;
pub mod compensation;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod noise;
pub mod shapes;
pub mod symbolic;

pub use basis::{Basis, BasisSpec, FamilyKind, Feature, FeatureAtom, Trig};
pub use cloud::PointCloud;
pub use compensation::{build_plan, instantiate, load_plan, save_plan, CompensationEvaluator, CompensationPlan};
pub use error::{FitError, Result};
pub use eval::{coefficient_distance, cosine_similarity, evaluate, extract_level_set, fit_loss, EvalReport, Geometry, LevelSet};
pub use fitter::{accumulate, fit, fit_smoothed, grid_search_theta, solve_null, FitConfig, FitMode, FitOutcome, FitResult, GridSpec, MomentAccumulator, NoiseConfig};
pub use noise::{MomentKey, MomentTable, NoiseFamily, NoiseModel};
pub use shapes::{builtin_shape, AffineTransform, Bbox, ImplicitShape, NormalizeMode, SampledCloud};
