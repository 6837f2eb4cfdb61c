//! Heterogeneous treatment effects on several outcomes at once, estimated by
//! robust sparse reduced-rank regression on treatment-signed covariates
//! with propensity weighting.
//!
//! The effect matrix is factored as `Γ = W Vᵀ` with column-orthonormal `V`;
//! a row-group penalty on `W` selects covariates and a row-group penalty on
//! an outlier matrix `C` absorbs grossly contaminated subjects.
//!
//! ```
//! use nalgebra::DMatrix;
//! use rrhte::{fit, rct_weights, Dataset, FitConfig};
//!
//! let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 0.8, 1.0, 0.1]);
//! let y = DMatrix::from_row_slice(4, 2, &[0.5, 0.2, -0.4, 1.0, 0.9, -0.3, 0.1, 0.0]);
//! let d = Dataset::from_parts(x, y, vec![1, -1, 1, -1], None).unwrap();
//! let (model, trace) = fit(&d, &rct_weights(4), &FitConfig::default()).unwrap();
//! assert_eq!(model.gamma().shape(), (2, 2));
//! assert!(trace.converged);
//! ```

pub mod baselines;
pub mod cli;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model_selection;
pub mod simulation;
pub mod solver;
pub mod types;
pub mod weights;

pub use baselines::{fit_method, BaselineModel, Hyper, Method};
pub use error::{Error, ErrorKind, Result};
pub use metrics::MetricsReport;
pub use model_selection::{cross_validate, cv_loss, kfold_split, CvGrid, CvResult};
pub use solver::{fit, objective, predict_cate, FitTrace};
pub use types::{
    assemble_design, validate_dataset, CateEstimate, Dataset, FactorModel, FitConfig, TreatmentCoding,
    ValidateOptions,
};
pub use weights::{compute_weights, rct_weights, PropensitySource, WeightVector};
