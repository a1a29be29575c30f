use super::{EvalError, Result};

/// Below this angle (or within it of π) slerp falls back to lerp.
pub const SLERP_ANGLE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Slerp,
    Lerp,
}

impl Interpolation {
    pub fn apply(self, za: &[f64], zb: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            Self::Slerp => slerp_block(za, zb, t),
            Self::Lerp => lerp_block(za, zb, t),
        }
    }
}

fn check(za: &[f64], zb: &[f64], t: f64) -> Result<()> {
    if za.len() != zb.len() {
        return Err(EvalError::Shape(format!(
            "interpolating {} and {} entries",
            za.len(),
            zb.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(EvalError::Shape(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn lerp_block(za: &[f64], zb: &[f64], t: f64) -> Result<Vec<f64>> {
    check(za, zb, t)?;
    Ok(za.iter().zip(zb).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Great-circle interpolation of directions with the radius interpolated
/// linearly. Nearly parallel or antipodal pairs (angle within
/// [`SLERP_ANGLE_EPS`] of 0 or π) are interpolated linearly instead.
pub fn slerp_block(za: &[f64], zb: &[f64], t: f64) -> Result<Vec<f64>> {
    check(za, zb, t)?;
    let (na, nb) = (norm(za), norm(zb));
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    if t == 0.0 {
        return Ok(za.to_vec());
    }
    if t == 1.0 {
        return Ok(zb.to_vec());
    }
    let cos = za.iter().zip(zb).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
    let theta = cos.clamp(-1.0, 1.0).acos();
    if theta < SLERP_ANGLE_EPS || theta > std::f64::consts::PI - SLERP_ANGLE_EPS {
        return lerp_block(za, zb, t);
    }
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s / na;
    let wb = (t * theta).sin() / s / nb;
    let mut dir: Vec<f64> = za.iter().zip(zb).map(|(a, b)| wa * a + wb * b).collect();
    // one renormalization pass removes the O(ε/sin θ) drift of the formula
    let n = norm(&dir);
    let r = (1.0 - t) * na + t * nb;
    dir.iter_mut().for_each(|x| *x *= r / n);
    Ok(dir)
}
