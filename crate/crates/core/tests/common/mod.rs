//! Fixture fields shared by the integration targets. The TOML files under
//! `fixtures/` describe the same fields for the command-line tool.
#![allow(dead_code)]

use sencache::{GaussianField, GaussianMixtureField, InterpolantSchedule, MixtureComponent, StiffSyntheticField};

/// Anisotropic 4-d Gaussian used for the bound and secant checks.
pub fn gaussian() -> GaussianField {
    GaussianField::new(vec![0.5, -1.0, 0.8, 0.0], vec![0.3, 2.0, 0.7, 1.0], InterpolantSchedule::linear()).unwrap()
}

/// Well separated three-component mixture in d=8, for Jacobian oracles.
pub fn oracle_mixture() -> GaussianMixtureField {
    let c = |weight: f64, mean: [f64; 8], var: [f64; 8]| MixtureComponent { weight, mean: mean.to_vec(), var: var.to_vec() };
    GaussianMixtureField::new(
        vec![
            c(0.45, [1.2, -0.8, 0.5, 1.0, -0.3, 0.9, -1.1, 0.4], [0.20, 0.35, 0.15, 0.30, 0.25, 0.40, 0.18, 0.22]),
            c(0.35, [-1.0, 0.7, -0.9, -0.4, 1.1, -0.6, 0.8, -1.2], [0.30, 0.20, 0.35, 0.15, 0.28, 0.22, 0.33, 0.26]),
            c(0.20, [0.3, 1.4, 1.0, -1.3, 0.2, -1.0, 0.1, 1.1], [0.25, 0.30, 0.20, 0.35, 0.18, 0.27, 0.24, 0.31]),
        ],
        InterpolantSchedule::linear(),
    )
    .unwrap()
}

pub const MIXTURE_DIM: usize = 512;

const SIGN_PATTERNS: [[f64; 8]; 3] = [
    [1., -1., 1., 1., -1., -1., 1., -1.],
    [-1., 1., 1., -1., 1., -1., -1., 1.],
    [1., 1., -1., 1., 1., 1., -1., -1.],
];

/// Three-component mixture in d=512: sign-pattern means of scale 0.1 and a
/// shared diagonal covariance alternating 0.5 / 2. The components sit about
/// three standard deviations apart while per-sample norms concentrate, which
/// is what makes small calibration sets representative.
pub fn mixture() -> GaussianMixtureField {
    let weights = [0.5, 0.3, 0.2];
    let var: Vec<f64> = (0..MIXTURE_DIM).map(|i| if i % 2 == 0 { 0.5 } else { 2.0 }).collect();
    GaussianMixtureField::new(
        (0..3)
            .map(|j| MixtureComponent {
                weight: weights[j],
                mean: (0..MIXTURE_DIM).map(|i| 0.1 * SIGN_PATTERNS[j][i % 8]).collect(),
                var: var.clone(),
            })
            .collect(),
        InterpolantSchedule::linear(),
    )
    .unwrap()
}

/// Stiff field with time-localized sensitivity bursts.
pub fn stiff() -> StiffSyntheticField {
    StiffSyntheticField::new(12.0, 0.5, 16).unwrap()
}
