//! Evaluation toolkit for layout-conditioned scene generation.
//!
//! Scores generated images against real ones at scene and object level with
//! manifold precision/recall/consistency, Fréchet distance, diversity and
//! label-recovery metrics, and prepares the data splits the scores are
//! reported on.

pub mod catmerge;
pub mod diversity;
pub mod frechet;
pub mod labelmetrics;
pub mod linalg;
pub mod manifold;
pub mod splits;
pub mod store;
pub mod report;

use thiserror::Error;

/// Any failure of the toolkit, as surfaced by the command-line interface.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Manifold(#[from] manifold::ManifoldError),
    #[error(transparent)]
    Frechet(#[from] frechet::FrechetError),
    #[error(transparent)]
    Diversity(#[from] diversity::DiversityError),
    #[error(transparent)]
    Label(#[from] labelmetrics::LabelError),
    #[error(transparent)]
    Split(#[from] splits::SplitError),
    #[error(transparent)]
    Merge(#[from] catmerge::MergeError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Process exit status: 3 for numerical failures, 2 for everything else
    /// (bad input, bad configuration, unreadable files).
    pub fn exit_code(&self) -> i32 {
        let numerical = match self {
            Error::Frechet(e) => e.is_numerical(),
            Error::Report(e) => e.is_numerical(),
            _ => false,
        };
        if numerical {
            3
        } else {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let numerical = Error::from(frechet::FrechetError::NegativeDistance(-1.0));
        assert_eq!(numerical.exit_code(), 3);
        let psd = Error::from(report::ReportError::Frechet(frechet::FrechetError::NotPsd {
            eigenvalue: -1.0,
            largest: 1.0,
        }));
        assert_eq!(psd.exit_code(), 3);
        assert_eq!(Error::from(frechet::FrechetError::TooFewSamples(1)).exit_code(), 2);
        assert_eq!(Error::from(manifold::ManifoldError::ZeroK).exit_code(), 2);
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
    }
}
