//! Monotone cubic interpolation (Fritsch–Carlson) used for the marginal
//! quantile tables, plus an isotonic repair pass for control points that lose
//! monotonicity to quadrature noise.

use crate::error::{Error, Result};

/// Shape-preserving cubic Hermite interpolant through strictly increasing
/// abscissae with nondecreasing ordinates. Monotone by construction.
#[derive(Debug, Clone)]
pub struct MonotoneSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::usage("spline needs at least two matched points"));
        }
        for w in x.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::usage("spline abscissae must be strictly increasing"));
            }
        }
        for w in y.windows(2) {
            if w[1] < w[0] {
                return Err(Error::usage("spline ordinates must be nondecreasing"));
            }
        }
        let n = x.len();
        let mut secant = vec![0.0; n - 1];
        for k in 0..n - 1 {
            secant[k] = (y[k + 1] - y[k]) / (x[k + 1] - x[k]);
        }
        let mut slope = vec![0.0; n];
        slope[0] = secant[0];
        slope[n - 1] = secant[n - 2];
        for k in 1..n - 1 {
            slope[k] = if secant[k - 1] * secant[k] <= 0.0 {
                0.0
            } else {
                0.5 * (secant[k - 1] + secant[k])
            };
        }
        // Fritsch-Carlson limiter.
        for k in 0..n - 1 {
            if secant[k] == 0.0 {
                slope[k] = 0.0;
                slope[k + 1] = 0.0;
            } else {
                let a = slope[k] / secant[k];
                let b = slope[k + 1] / secant[k];
                let s = a * a + b * b;
                if s > 9.0 {
                    let t = 3.0 / s.sqrt();
                    slope[k] = t * a * secant[k];
                    slope[k + 1] = t * b * secant[k];
                }
            }
        }
        Ok(Self { x, y, slope })
    }

    pub fn x_min(&self) -> f64 {
        self.x[0]
    }
    pub fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }
    pub fn y_min(&self) -> f64 {
        self.y[0]
    }
    pub fn y_max(&self) -> f64 {
        *self.y.last().unwrap()
    }
    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }

    fn segment(&self, xv: f64) -> usize {
        match self.x.partition_point(|&v| v <= xv) {
            0 => 0,
            k if k >= self.x.len() => self.x.len() - 2,
            k => k - 1,
        }
    }

    /// Evaluate the interpolant; outside the knot range the boundary segment
    /// is extended linearly with its endpoint slope.
    pub fn eval(&self, xv: f64) -> f64 {
        let n = self.x.len();
        if xv <= self.x[0] {
            return self.y[0] + self.slope[0] * (xv - self.x[0]);
        }
        if xv >= self.x[n - 1] {
            return self.y[n - 1] + self.slope[n - 1] * (xv - self.x[n - 1]);
        }
        let k = self.segment(xv);
        let h = self.x[k + 1] - self.x[k];
        let t = (xv - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[k] + h10 * h * self.slope[k] + h01 * self.y[k + 1] + h11 * h * self.slope[k + 1]
    }

    /// First derivative of the interpolant.
    pub fn derivative(&self, xv: f64) -> f64 {
        let n = self.x.len();
        if xv <= self.x[0] {
            return self.slope[0];
        }
        if xv >= self.x[n - 1] {
            return self.slope[n - 1];
        }
        let k = self.segment(xv);
        let h = self.x[k + 1] - self.x[k];
        let t = (xv - self.x[k]) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * self.y[k] + d10 * self.slope[k] + d01 * self.y[k + 1] + d11 * self.slope[k + 1]
    }
}

/// Plain cubic Hermite interpolant with centered-difference slopes; no shape
/// constraint. Used for log-density tables where monotonicity is not wanted.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::usage("spline needs at least two matched points"));
        }
        for w in x.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::usage("spline abscissae must be strictly increasing"));
            }
        }
        let n = x.len();
        let mut slope = vec![0.0; n];
        slope[0] = (y[1] - y[0]) / (x[1] - x[0]);
        slope[n - 1] = (y[n - 1] - y[n - 2]) / (x[n - 1] - x[n - 2]);
        for k in 1..n - 1 {
            slope[k] = (y[k + 1] - y[k - 1]) / (x[k + 1] - x[k - 1]);
        }
        Ok(Self { x, y, slope })
    }

    pub fn eval(&self, xv: f64) -> f64 {
        let n = self.x.len();
        if xv <= self.x[0] {
            return self.y[0] + self.slope[0] * (xv - self.x[0]);
        }
        if xv >= self.x[n - 1] {
            return self.y[n - 1] + self.slope[n - 1] * (xv - self.x[n - 1]);
        }
        let k = match self.x.partition_point(|&v| v <= xv) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let t = (xv - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[k] + h10 * h * self.slope[k] + h01 * self.y[k + 1] + h11 * h * self.slope[k + 1]
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }
}

/// Pool-adjacent-violators projection onto nondecreasing sequences.
/// Returns true if any repair was needed.
pub fn isotonic_nondecreasing(y: &mut [f64]) -> bool {
    let n = y.len();
    let mut repaired = false;
    // (value, weight) blocks
    let mut vals: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &v in y.iter() {
        vals.push((v, 1.0));
        while vals.len() >= 2 {
            let (v2, w2) = vals[vals.len() - 1];
            let (v1, w1) = vals[vals.len() - 2];
            if v1 <= v2 {
                break;
            }
            repaired = true;
            vals.pop();
            vals.pop();
            vals.push(((v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2));
        }
    }
    let mut idx = 0;
    for (v, w) in vals {
        for _ in 0..w as usize {
            y[idx] = v;
            idx += 1;
        }
    }
    repaired
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interpolates_knots() {
        let s = MonotoneSpline::new(vec![0.0, 1.0, 2.0, 4.0], vec![0.0, 1.0, 1.5, 5.0]).unwrap();
        assert!((s.eval(1.0) - 1.0).abs() < 1e-15);
        assert!((s.eval(4.0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn isotonic_repairs() {
        let mut y = vec![0.0, 0.5, 0.45, 1.0];
        assert!(isotonic_nondecreasing(&mut y));
        assert!(y.windows(2).all(|w| w[1] >= w[0]));
        let mut ok = vec![0.0, 1.0, 2.0];
        assert!(!isotonic_nondecreasing(&mut ok));
    }

    proptest! {
        #[test]
        fn monotone_everywhere(knots in proptest::collection::vec(0.0f64..1.0, 4..20)) {
            let mut y = knots.clone();
            y.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = y.len();
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let s = MonotoneSpline::new(x, y).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=((n - 1) * 50) {
                let xv = i as f64 / 50.0;
                let v = s.eval(xv);
                prop_assert!(v >= prev - 1e-12, "non-monotone at {}", xv);
                prev = v;
            }
        }
    }
}
