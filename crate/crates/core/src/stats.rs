//! Small statistical helpers shared by the verifiers.

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let var = ss / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// A Monte-Carlo estimate together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let (value, se) = mean_se(values);
        Estimate { value, se }
    }

    /// Distance from `target` measured in standard errors.
    pub fn sigmas_from(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.se
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.se
    }
}

impl std::fmt::Display for Estimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6} ± {:.6}", self.value, self.se)
    }
}
