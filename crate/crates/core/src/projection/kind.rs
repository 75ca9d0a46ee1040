use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How `compute_P` builds the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    /// `P = I`: plain full-rank training.
    FullRank,
    TopR,
    /// Top-r indices chosen at the first refresh and never recomputed.
    FrozenTopR,
    UniformR,
    UniformNR,
    MultNormR,
    MultNormNR,
    MultNorm2R,
    MultNorm2NR,
    /// Dense `N(0, 1/r)` entries (Flora).
    DenseGaussian,
    /// Dense top-r left singular vectors (GaLore).
    DenseSVD,
    CountSketch,
}

/// Which row statistic feeds the sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QKind {
    Norm,
    Norm2,
    Uniform,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 12] = [
        ProjectionKind::FullRank,
        ProjectionKind::TopR,
        ProjectionKind::FrozenTopR,
        ProjectionKind::UniformR,
        ProjectionKind::UniformNR,
        ProjectionKind::MultNormR,
        ProjectionKind::MultNormNR,
        ProjectionKind::MultNorm2R,
        ProjectionKind::MultNorm2NR,
        ProjectionKind::DenseGaussian,
        ProjectionKind::DenseSVD,
        ProjectionKind::CountSketch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::FullRank => "full",
            ProjectionKind::TopR => "topr",
            ProjectionKind::FrozenTopR => "frozen-topr",
            ProjectionKind::UniformR => "uniform-r",
            ProjectionKind::UniformNR => "uniform-nr",
            ProjectionKind::MultNormR => "multnorm-r",
            ProjectionKind::MultNormNR => "multnorm-nr",
            ProjectionKind::MultNorm2R => "multnorm2-r",
            ProjectionKind::MultNorm2NR => "multnorm2-nr",
            ProjectionKind::DenseGaussian => "gaussian",
            ProjectionKind::DenseSVD => "svd",
            ProjectionKind::CountSketch => "countsketch",
        }
    }

    /// Row-selection kinds whose `P^T` is `rho * B`.
    pub fn is_sparse(self) -> bool {
        !matches!(
            self,
            ProjectionKind::DenseGaussian | ProjectionKind::DenseSVD | ProjectionKind::CountSketch
        )
    }

    /// Sampling distribution and replacement flag for stochastic kinds.
    pub fn sampling(self) -> Option<(QKind, bool)> {
        match self {
            ProjectionKind::UniformR => Some((QKind::Uniform, true)),
            ProjectionKind::UniformNR => Some((QKind::Uniform, false)),
            ProjectionKind::MultNormR => Some((QKind::Norm, true)),
            ProjectionKind::MultNormNR => Some((QKind::Norm, false)),
            ProjectionKind::MultNorm2R => Some((QKind::Norm2, true)),
            ProjectionKind::MultNorm2NR => Some((QKind::Norm2, false)),
            _ => None,
        }
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        let alias = match key.as_str() {
            "fullrank" | "full-rank" => "full",
            "grass" => "topr",
            "flora" => "gaussian",
            "galore" => "svd",
            other => other,
        };
        ProjectionKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown projection kind '{s}'")))
    }
}
