//! Far-field piston directivity 2J₁(x)/x written as a function of t = x².
//!
//! Working in t keeps the function and both derivatives smooth through the
//! axis (x = 0), where the field Hessian is needed for the radiation force.

/// Value and first two t-derivatives of 2J₁(√t)/√t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piston {
    pub h: f64,
    pub dh: f64,
    pub d2h: f64,
}

const SERIES_LIMIT: f64 = 1.0;

pub fn piston(t: f64) -> Piston {
    debug_assert!(t >= 0.0);
    if t < SERIES_LIMIT {
        series(t)
    } else {
        let x = t.sqrt();
        let j0 = libm::j0(x);
        let j1 = libm::j1(x);
        let j2 = 2.0 * j1 / x - j0;
        let j3 = 4.0 * j2 / x - j1;
        Piston {
            h: 2.0 * j1 / x,
            dh: -j2 / t,
            d2h: j3 / (2.0 * t * x),
        }
    }
}

/// Σ (−1)^m (t/4)^m / (m!(m+1)!) and its derivatives.
fn series(t: f64) -> Piston {
    let (mut h, mut dh, mut d2h) = (0.0, 0.0, 0.0);
    // c_m = (−1)^m / (4^m m! (m+1)!)
    let mut c = 1.0;
    for m in 0..12 {
        let mf = m as f64;
        h += c * t.powi(m);
        if m >= 1 {
            dh += c * mf * t.powi(m - 1);
        }
        if m >= 2 {
            d2h += c * mf * (mf - 1.0) * t.powi(m - 2);
        }
        c *= -1.0 / (4.0 * (mf + 1.0) * (mf + 2.0));
    }
    Piston { h, dh, d2h }
}

/// Directivity at polar angle `theta` for wavenumber-radius product `ka`.
pub fn directivity(ka: f64, theta: f64) -> f64 {
    let x = ka * theta.sin();
    piston(x * x).h
}
