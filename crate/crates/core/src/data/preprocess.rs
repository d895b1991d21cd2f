//! Input transforms of the ego predictor: linear separation, translation and
//! the single-level Haar transform.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-coordinate least-squares line over step indices `1..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit<T> {
    pub slope: [T; 2],
    pub intercept: [T; 2],
    pub steps: usize,
}

impl<T: Scalar> LinearFit<T> {
    pub fn eval(&self, t: T) -> [T; 2] {
        [
            self.slope[0] * t + self.intercept[0],
            self.slope[1] * t + self.intercept[1],
        ]
    }
}

/// Fits a line to each coordinate and returns it with the residual
/// `traj − line`.
pub fn linear_fit_separate<T: Scalar>(traj: &[[T; 2]]) -> Result<(LinearFit<T>, Vec<[T; 2]>)> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::dim(format!(
            "linear fit needs at least 2 steps, got {n}"
        )));
    }
    let nf = T::from_usize(n).unwrap();
    let tbar = (nf + T::one()) / T::lit(2.0);
    let mut sxx = T::zero();
    for k in 1..=n {
        let dt = T::from_usize(k).unwrap() - tbar;
        sxx += dt * dt;
    }
    let mut slope = [T::zero(); 2];
    let mut intercept = [T::zero(); 2];
    for c in 0..2 {
        let mean = traj.iter().map(|p| p[c]).sum::<T>() / nf;
        let mut sxy = T::zero();
        for (k, p) in traj.iter().enumerate() {
            sxy += (T::from_usize(k + 1).unwrap() - tbar) * (p[c] - mean);
        }
        slope[c] = sxy / sxx;
        intercept[c] = mean - slope[c] * tbar;
    }
    let fit = LinearFit {
        slope,
        intercept,
        steps: n,
    };
    let residual = traj
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let l = fit.eval(T::from_usize(k + 1).unwrap());
            [p[0] - l[0], p[1] - l[1]]
        })
        .collect();
    Ok((fit, residual))
}

/// Evaluates the fitted line at steps `offset+1 ..= offset+steps`.
pub fn linear_extrapolate<T: Scalar>(
    fit: &LinearFit<T>,
    steps: usize,
    offset: usize,
) -> Vec<[T; 2]> {
    (1..=steps)
        .map(|k| fit.eval(T::from_usize(offset + k).unwrap()))
        .collect()
}

pub fn translate_to_ego_origin<T: Scalar>(traj: &[[T; 2]], origin: [T; 2]) -> Vec<[T; 2]> {
    traj.iter()
        .map(|p| [p[0] - origin[0], p[1] - origin[1]])
        .collect()
}

pub fn translate_from_ego_origin<T: Scalar>(traj: &[[T; 2]], origin: [T; 2]) -> Vec<[T; 2]> {
    traj.iter()
        .map(|p| [p[0] + origin[0], p[1] + origin[1]])
        .collect()
}

/// Single-level orthonormal Haar transform per coordinate: approximation
/// coefficients followed by detail coefficients.
pub fn haar_forward<T: Scalar>(seq: &[[T; 2]]) -> Result<Vec<[T; 2]>> {
    let n = seq.len();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "Haar transform needs an even length, got {n}"
        )));
    }
    let s = T::FRAC_1_SQRT_2();
    let half = n / 2;
    let mut out = vec![[T::zero(); 2]; n];
    for i in 0..half {
        for c in 0..2 {
            let (a, b) = (seq[2 * i][c], seq[2 * i + 1][c]);
            out[i][c] = (a + b) * s;
            out[half + i][c] = (a - b) * s;
        }
    }
    Ok(out)
}

pub fn haar_inverse<T: Scalar>(coeffs: &[[T; 2]]) -> Result<Vec<[T; 2]>> {
    let n = coeffs.len();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "Haar transform needs an even length, got {n}"
        )));
    }
    let s = T::FRAC_1_SQRT_2();
    let half = n / 2;
    let mut out = vec![[T::zero(); 2]; n];
    for i in 0..half {
        for c in 0..2 {
            let (a, d) = (coeffs[i][c], coeffs[half + i][c]);
            out[2 * i][c] = (a + d) * s;
            out[2 * i + 1][c] = (a - d) * s;
        }
    }
    Ok(out)
}
