//! Central finite-difference checks of hand-written gradients.

use rand::Rng;

use crate::nn::Parameterized;

/// Relative error with an absolute floor, so coordinates whose gradient is
/// numerically zero do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The central differences at `h` and `h / 10` disagree, so a ReLU kink
    /// lies inside the stencil and `numeric` is not a derivative estimate.
    pub kink: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Smooth coordinates whose error is not below `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&CoordCheck> {
        self.coords.iter().filter(|c| !c.kink && !(c.rel_error < tol)).collect()
    }

    pub fn kinks(&self) -> usize {
        self.coords.iter().filter(|c| c.kink).count()
    }

    pub fn smooth(&self) -> usize {
        self.coords.len() - self.kinks()
    }
}

fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn coord(tensor: &str, index: usize, analytic: f64, coarse: f64, fine: f64, floor: f64) -> CoordCheck {
    CoordCheck {
        tensor: tensor.to_string(),
        index,
        analytic,
        numeric: coarse,
        rel_error: relative_error(analytic, coarse, floor),
        kink: relative_error(coarse, fine, floor) > KINK_DISAGREEMENT,
    }
}

/// Relative gap between the two step sizes above which a coordinate is
/// treated as a kink crossing.
pub const KINK_DISAGREEMENT: f64 = 1e-3;

/// Compare `analytic` (same structure as `params`) with central differences
/// of `loss` at `n` coordinates: one per tensor first, the rest uniformly.
pub fn check_parameters<P, F, R>(params: &P, analytic: &P, loss: F, n: usize, h: f64, floor: f64, rng: &mut R) -> GradCheckReport
where
    P: Parameterized + Clone,
    F: Fn(&P) -> f64,
    R: Rng,
{
    let tensors = params.tensors();
    let sizes: Vec<usize> = tensors.iter().map(|t| t.data.len()).collect();
    let names: Vec<String> = tensors.iter().map(|t| t.name.clone()).collect();
    drop(tensors);
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = (0..sizes.len())
        .filter(|&t| sizes[t] > 0)
        .map(|t| (t, rng.random_range(0..sizes[t])))
        .collect();
    while picks.len() < n && total > 0 {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        picks.push((t, flat));
    }

    let grads = analytic.tensors();
    let mut work = params.clone();
    let mut coords = Vec::with_capacity(picks.len());
    for (t, i) in picks {
        let orig = work.tensors_mut()[t][i];
        let mut at = |d: f64| {
            work.tensors_mut()[t][i] = orig + d;
            let l = loss(&work);
            work.tensors_mut()[t][i] = orig;
            l
        };
        let coarse = central(&mut at, h);
        let fine = central(&mut at, h / 10.0);
        coords.push(coord(&names[t], i, grads[t].data[i], coarse, fine, floor));
    }
    GradCheckReport { coords }
}

/// The same check for a plain slice of inputs.
pub fn check_slice<F, R>(x: &[f64], analytic: &[f64], loss: F, n: usize, h: f64, floor: f64, rng: &mut R) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
    R: Rng,
{
    let mut work = x.to_vec();
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..x.len());
        let orig = work[i];
        let mut at = |d: f64| {
            work[i] = orig + d;
            let l = loss(&work);
            work[i] = orig;
            l
        };
        let coarse = central(&mut at, h);
        let fine = central(&mut at, h / 10.0);
        coords.push(coord("input", i, analytic[i], coarse, fine, floor));
    }
    GradCheckReport { coords }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_passes_and_wrong_one_fails() {
        let x = [0.3, -1.2, 2.0];
        let loss = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(check_slice(&x, &good, loss, 20, 1e-5, 1e-6, &mut rng).worst() < 1e-8);
        let bad: Vec<f64> = good.iter().map(|g| g * 1.01).collect();
        let r = check_slice(&x, &bad, loss, 20, 1e-5, 1e-6, &mut rng);
        assert_eq!(r.kinks(), 0);
        assert_eq!(r.failures(1e-3).len(), 20);
    }

    #[test]
    fn kink_inside_the_stencil_is_flagged_not_failed() {
        // |x - 3e-6| has its kink within h = 1e-5 of the point 0.
        let loss = |v: &[f64]| (v[0] - 3e-6).abs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_slice(&[0.0], &[-1.0], loss, 1, 1e-5, 1e-6, &mut rng);
        assert_eq!(r.kinks(), 1);
        assert!(r.failures(1e-4).is_empty());
        // Exactly on the kink both step sizes agree, so the mismatch is reported.
        let on = |v: &[f64]| v[0].abs();
        let r = check_slice(&[0.0], &[1.0], on, 1, 1e-5, 1e-6, &mut rng);
        assert_eq!(r.kinks(), 0);
        assert_eq!(r.failures(1e-4).len(), 1);
    }
}
