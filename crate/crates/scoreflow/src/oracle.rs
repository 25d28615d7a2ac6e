//! Analytic and Monte-Carlo ground truth.
//!
//! For Gaussian (and finite-mixture) data under the linear path, the
//! marginal score and the optimal velocity have closed forms, so the
//! score-from-velocity identity can be checked to floating-point accuracy,
//! and a trained network can be graded against the exact mixture score.

use crate::error::{Error, Result};
use crate::flow::VelocityFieldParams;
use crate::rng::{standard_normal, StreamRng};
use crate::score::closed_form_score;
use rand::Rng;

/// Isotropic Gaussian data distribution a₁ ~ N(mean, var·I).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianData {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::Domain(format!("variance must be positive, got {var}")));
        }
        Ok(GaussianData { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Finite isotropic-Gaussian mixture; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureData {
    pub components: Vec<(f64, GaussianData)>,
}

impl MixtureData {
    pub fn new(components: Vec<(f64, GaussianData)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != dim) {
            return Err(Error::Shape("mixture components have mixed dimensions".into()));
        }
        if components.iter().any(|(w, _)| *w <= 0.0) {
            return Err(Error::Domain("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(MixtureData { components })
    }

    pub fn single(g: GaussianData) -> Self {
        MixtureData { components: vec![(1.0, g)] }
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    /// One draw a₁ ~ p_data.
    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1].1;
        for (w, g) in &self.components {
            acc += w;
            if u < acc {
                chosen = g;
                break;
            }
        }
        let sd = chosen.var.sqrt();
        chosen.mean.iter().map(|&m| m + sd * standard_normal(rng)).collect()
    }

    /// Marginal density of a_t under the linear path.
    pub fn marginal_density(&self, a: &[f64], t: f64) -> f64 {
        self.components
            .iter()
            .map(|(w, g)| w * (component_log_density(g, a, t)).exp())
            .sum()
    }
}

fn path_variance(g: &GaussianData, t: f64) -> f64 {
    (1.0 - t) * (1.0 - t) + t * t * g.var
}

fn component_log_density(g: &GaussianData, a: &[f64], t: f64) -> f64 {
    let vt = path_variance(g, t);
    let d = a.len() as f64;
    let sq: f64 = a.iter().zip(&g.mean).map(|(&x, &m)| (x - t * m) * (x - t * m)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * vt).ln() - 0.5 * sq / vt
}

/// Exact score of the path marginal N(t·m, ((1−t)² + t²·var)·I):
/// −(a − t·m)/((1−t)² + t²·var).
pub fn gaussian_marginal_score(data: &GaussianData, a: &[f64], t: f64) -> Result<Vec<f64>> {
    check_a_t(data.dim(), a, t)?;
    let vt = path_variance(data, t);
    Ok(a.iter().zip(&data.mean).map(|(&x, &m)| -(x - t * m) / vt).collect())
}

/// Posterior mean E[a₁ | a_t] under the conjugate-Gaussian pair
/// (prior N(m, var·I), likelihood a_t | a₁ ~ N(t·a₁, (1−t)²·I)),
/// in the cancellation-free form (m·(1−t)² + t·a·var)/v_t.
pub fn gaussian_posterior_mean(data: &GaussianData, a: &[f64], t: f64) -> Result<Vec<f64>> {
    check_a_t(data.dim(), a, t)?;
    let omt2 = (1.0 - t) * (1.0 - t);
    let vt = path_variance(data, t);
    Ok(a.iter()
        .zip(&data.mean)
        .map(|(&x, &m)| (m * omt2 + t * x * data.var) / vt)
        .collect())
}

/// Optimal velocity v = (E[a₁|a_t] − a)/(1−t), evaluated in the
/// algebraically identical stable form ((m−a)(1−t) + a·t·var)/v_t so no
/// intermediate carries a 1/(1−t) amplification.
pub fn gaussian_optimal_velocity(data: &GaussianData, a: &[f64], t: f64) -> Result<Vec<f64>> {
    check_a_t(data.dim(), a, t)?;
    let vt = path_variance(data, t);
    Ok(a.iter()
        .zip(&data.mean)
        .map(|(&x, &m)| ((m - x) * (1.0 - t) + x * t * data.var) / vt)
        .collect())
}

/// ∞-norm gap between the score reconstructed from the optimal velocity and
/// the exact marginal score. Zero in exact arithmetic for every (a, t).
pub fn duality_check(data: &GaussianData, a: &[f64], t: f64) -> Result<f64> {
    let v = gaussian_optimal_velocity(data, a, t)?;
    let from_velocity = closed_form_score(&v, a, t)?;
    let exact = gaussian_marginal_score(data, a, t)?;
    Ok(from_velocity
        .iter()
        .zip(&exact)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Exact mixture marginal score: responsibility-weighted component scores,
/// with responsibilities formed in log-space.
pub fn mixture_score(data: &MixtureData, a: &[f64], t: f64) -> Result<Vec<f64>> {
    check_a_t(data.dim(), a, t)?;
    let logs: Vec<f64> = data
        .components
        .iter()
        .map(|(w, g)| w.ln() + component_log_density(g, a, t))
        .collect();
    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let denom: f64 = logs.iter().map(|&l| (l - max).exp()).sum();
    let mut score = vec![0.0; a.len()];
    for ((w, g), &l) in data.components.iter().zip(&logs) {
        let _ = w;
        let resp = (l - max).exp() / denom;
        let comp = gaussian_marginal_score(g, a, t)?;
        for (acc, c) in score.iter_mut().zip(&comp) {
            *acc += resp * c;
        }
    }
    Ok(score)
}

/// Neumaier-compensated accumulator; keeps the t→0 estimate exact to a few
/// ulp instead of drifting with the sample count.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Self-normalized importance estimate of the marginal score with jackknife
/// standard errors.
#[derive(Debug, Clone)]
pub struct McScoreEstimate {
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Effective sample size (Σw)²/Σw² of the importance weights.
    pub ess: f64,
    /// Set when ESS < 10; the estimate is then unreliable.
    pub low_ess: bool,
}

/// Monte-Carlo realization of the posterior-expectation identity: draws
/// a₁ ~ p_data, weights each draw by the conditional path density
/// ρ_t(a | a₁) = N(a; t·a₁, (1−t)²·I) and averages the conditional scores
/// −(a − t·a₁)/(1−t)².
pub fn mc_posterior_score(
    data: &MixtureData,
    a: &[f64],
    t: f64,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<McScoreEstimate> {
    check_a_t(data.dim(), a, t)?;
    if n_samples < 1000 {
        return Err(Error::Domain(format!(
            "mc_posterior_score needs at least 1000 samples, got {n_samples}"
        )));
    }
    let d = a.len();
    let omt2 = (1.0 - t) * (1.0 - t);
    let mut log_w = Vec::with_capacity(n_samples);
    let mut scores = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let a1 = data.sample(rng);
        let sq: f64 = a.iter().zip(&a1).map(|(&x, &y)| (x - t * y) * (x - t * y)).sum();
        log_w.push(-0.5 * sq / omt2);
        let score: Vec<f64> = a.iter().zip(&a1).map(|(&x, &y)| -(x - t * y) / omt2).collect();
        scores.push(score);
    }
    let max_lw = log_w.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let w: Vec<f64> = log_w.iter().map(|&l| (l - max_lw).exp()).collect();
    let mut sw_acc = CompensatedSum::default();
    let mut sw2_acc = CompensatedSum::default();
    let mut sws_acc = vec![CompensatedSum::default(); d];
    for (wi, s) in w.iter().zip(&scores) {
        sw_acc.add(*wi);
        sw2_acc.add(wi * wi);
        for (acc, &si) in sws_acc.iter_mut().zip(s) {
            acc.add(wi * si);
        }
    }
    let sw = sw_acc.value();
    let ess = sw * sw / sw2_acc.value();
    let sws: Vec<f64> = sws_acc.iter().map(CompensatedSum::value).collect();
    let estimate: Vec<f64> = sws.iter().map(|&x| x / sw).collect();
    // delete-one jackknife of the ratio estimator, per dimension
    let n = n_samples as f64;
    let mut std_error = vec![0.0; d];
    for dim in 0..d {
        let mut mean_loo = 0.0;
        for (wi, s) in w.iter().zip(&scores) {
            mean_loo += (sws[dim] - wi * s[dim]) / (sw - wi);
        }
        mean_loo /= n;
        let mut var = 0.0;
        for (wi, s) in w.iter().zip(&scores) {
            let loo = (sws[dim] - wi * s[dim]) / (sw - wi);
            var += (loo - mean_loo) * (loo - mean_loo);
        }
        std_error[dim] = ((n - 1.0) / n * var).sqrt();
    }
    Ok(McScoreEstimate { estimate, std_error, ess, low_ess: ess < 10.0 })
}

/// Grid report comparing the score implied by a trained velocity field with
/// the exact mixture score, restricted to the bulk (grid points whose
/// marginal density clears the 5th percentile of all grid densities).
#[derive(Debug, Clone)]
pub struct TrainedDualityReport {
    pub median_bulk_error: f64,
    pub max_bulk_error: f64,
    pub bulk_points: usize,
    pub total_points: usize,
}

/// Grades a 1-D velocity field trained on `data` (observation held at `s`)
/// against the analytic mixture score over the (a, t) grid.
pub fn trained_velocity_duality(
    v_params: &VelocityFieldParams,
    data: &MixtureData,
    a_grid: &[f64],
    t_grid: &[f64],
    s: &[f64],
) -> Result<TrainedDualityReport> {
    if data.dim() != 1 || v_params.action_dim != 1 {
        return Err(Error::Shape("trained duality report is defined for 1-D actions".into()));
    }
    let mut rows: Vec<(f64, f64)> = Vec::with_capacity(a_grid.len() * t_grid.len());
    for &t in t_grid {
        for &a in a_grid {
            let point = [a];
            let v = v_params.eval(&point, t, s)?;
            let implied = closed_form_score(&v, &point, t)?;
            let exact = mixture_score(data, &point, t)?;
            let density = data.marginal_density(&point, t);
            rows.push((density, (implied[0] - exact[0]).abs()));
        }
    }
    let mut densities: Vec<f64> = rows.iter().map(|r| r.0).collect();
    densities.sort_by(|a, b| a.total_cmp(b));
    let threshold = densities[(densities.len() as f64 * 0.05) as usize];
    let mut bulk: Vec<f64> = rows.iter().filter(|r| r.0 > threshold).map(|r| r.1).collect();
    if bulk.is_empty() {
        return Err(Error::Domain("empty bulk region; grid too coarse".into()));
    }
    bulk.sort_by(|a, b| a.total_cmp(b));
    let median = bulk[bulk.len() / 2];
    Ok(TrainedDualityReport {
        median_bulk_error: median,
        max_bulk_error: *bulk.last().expect("nonempty"),
        bulk_points: bulk.len(),
        total_points: rows.len(),
    })
}

fn check_a_t(dim: usize, a: &[f64], t: f64) -> Result<()> {
    if a.len() != dim {
        return Err(Error::Shape(format!("point has dim {}, data has dim {dim}", a.len())));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("path time must lie in [0, 1), got {t}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn unit_gaussian(d: usize) -> GaussianData {
        GaussianData::new(vec![0.0; d], 1.0).unwrap()
    }

    #[test]
    fn marginal_score_worked_example() {
        let data = GaussianData::new(vec![0.0], 4.0).unwrap();
        let s = gaussian_marginal_score(&data, &[1.0], 0.5).unwrap();
        assert!((s[0] - -0.8).abs() < 1e-15, "expected −1/1.25, got {}", s[0]);
    }

    #[test]
    fn marginal_score_at_zero_time_and_at_mode() {
        let data = GaussianData::new(vec![2.0, -1.0], 3.0).unwrap();
        let s = gaussian_marginal_score(&data, &[0.7, -0.4], 0.0).unwrap();
        assert_eq!(s, vec![-0.7, 0.4], "t=0 marginal is the source N(0, I)");
        let t = 0.6;
        let mode = [t * 2.0, t * -1.0];
        let s = gaussian_marginal_score(&data, &mode, t).unwrap();
        assert_eq!(s, vec![0.0, -0.0]);
    }

    #[test]
    fn posterior_mean_and_velocity_worked_example() {
        let data = GaussianData::new(vec![0.0], 4.0).unwrap();
        let post = gaussian_posterior_mean(&data, &[1.0], 0.5).unwrap();
        assert!((post[0] - 1.6).abs() < 1e-15);
        let v = gaussian_optimal_velocity(&data, &[1.0], 0.5).unwrap();
        assert!((v[0] - 1.2).abs() < 1e-15);
        // the two forms agree: v = (E[a₁|a_t] − a)/(1−t)
        assert!((v[0] - (post[0] - 1.0) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn velocity_limit_at_small_time_is_prior_pull() {
        let data = GaussianData::new(vec![1.5, -2.0], 0.7).unwrap();
        let a = [0.3, 0.4];
        let v = gaussian_optimal_velocity(&data, &a, 1e-6).unwrap();
        for i in 0..2 {
            assert!(
                (v[i] - (data.mean[i] - a[i])).abs() < 1e-4,
                "v → m − a as t → 0, got {} vs {}",
                v[i],
                data.mean[i] - a[i]
            );
        }
    }

    #[test]
    fn velocity_vanishes_at_prior_mode_for_centered_data() {
        let data = GaussianData::new(vec![0.0, 0.0], 2.5).unwrap();
        let v = gaussian_optimal_velocity(&data, &[0.0, 0.0], 0.4).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn duality_residual_worked_example_and_t_zero() {
        let data = GaussianData::new(vec![0.0], 4.0).unwrap();
        assert!(duality_check(&data, &[1.0], 0.5).unwrap() < 1e-12);
        let data = unit_gaussian(3);
        assert_eq!(duality_check(&data, &[0.4, -0.9, 2.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn duality_sweep_small() {
        // the acceptance suite runs the full 10⁴ sweep; smoke it here
        let mut rng = stream_rng(123, &[1]);
        let mut worst = 0.0f64;
        for _ in 0..500 {
            let d = rng.gen_range(1..4);
            let mean: Vec<f64> = (0..d).map(|_| 4.0 * standard_normal(&mut rng)).collect();
            let var = 0.25 + 3.75 * rng.gen::<f64>();
            let data = GaussianData::new(mean, var).unwrap();
            let a: Vec<f64> = (0..d).map(|_| 4.0 * standard_normal(&mut rng)).collect();
            let t = rng.gen::<f64>() * 0.999;
            worst = worst.max(duality_check(&data, &a, t).unwrap());
        }
        assert!(worst < 1e-10, "max duality residual {worst}");
    }

    #[test]
    fn single_component_mixture_reduces_exactly() {
        let g = GaussianData::new(vec![0.7, -0.2], 1.9).unwrap();
        let mix = MixtureData::single(g.clone());
        for t in [0.0, 0.3, 0.9] {
            let a = [0.5, 1.4];
            let ms = mixture_score(&mix, &a, t).unwrap();
            let gs = gaussian_marginal_score(&g, &a, t).unwrap();
            assert_eq!(ms, gs, "1-component mixture must reduce bit-exactly");
        }
    }

    #[test]
    fn symmetric_mixture_score_is_zero_at_origin() {
        let mix = MixtureData::new(vec![
            (0.5, GaussianData::new(vec![1.0], 0.3).unwrap()),
            (0.5, GaussianData::new(vec![-1.0], 0.3).unwrap()),
        ])
        .unwrap();
        let s = mixture_score(&mix, &[0.0], 0.5).unwrap();
        assert!(s[0].abs() < 1e-15);
    }

    #[test]
    fn mixture_log_space_survives_far_tails() {
        let mix = MixtureData::new(vec![
            (0.5, GaussianData::new(vec![30.0], 0.01).unwrap()),
            (0.5, GaussianData::new(vec![-30.0], 0.01).unwrap()),
        ])
        .unwrap();
        // near t=1 the marginal components are razor thin; responsibilities
        // underflow in linear space but must stay finite in log space
        let s = mixture_score(&mix, &[29.0], 0.99).unwrap();
        assert!(s[0].is_finite());
    }

    #[test]
    fn mixture_weights_validated() {
        let g = unit_gaussian(1);
        assert!(MixtureData::new(vec![(0.6, g.clone()), (0.5, g.clone())]).is_err());
        assert!(MixtureData::new(vec![(1.0, g.clone()), (-0.0, g)]).is_err());
    }

    #[test]
    fn mc_score_matches_analytic_gaussian() {
        let g = GaussianData::new(vec![0.4], 2.0).unwrap();
        let mix = MixtureData::single(g.clone());
        let mut rng = stream_rng(7, &[2]);
        let est = mc_posterior_score(&mix, &[0.9], 0.5, 20_000, &mut rng).unwrap();
        let exact = gaussian_marginal_score(&g, &[0.9], 0.5).unwrap();
        let resid = (est.estimate[0] - exact[0]).abs();
        assert!(
            resid <= 3.0 * est.std_error[0],
            "residual {resid} exceeds 3·SE = {}",
            3.0 * est.std_error[0]
        );
        assert!(!est.low_ess);
    }

    #[test]
    fn mc_score_at_time_zero_is_exact() {
        let mix = MixtureData::new(vec![
            (0.3, GaussianData::new(vec![2.0], 0.5).unwrap()),
            (0.7, GaussianData::new(vec![-1.0], 1.5).unwrap()),
        ])
        .unwrap();
        let mut rng = stream_rng(11, &[3]);
        let est = mc_posterior_score(&mix, &[1.3], 0.0, 2000, &mut rng).unwrap();
        // at t=0 every weight is 1 and every conditional score is −a
        assert!((est.estimate[0] - -1.3).abs() < 1e-12);
        assert!(est.std_error[0] < 1e-12);
        assert!((est.ess - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn mc_score_is_deterministic_given_stream() {
        let mix = MixtureData::single(unit_gaussian(2));
        let a = [0.2, -0.5];
        let e1 = mc_posterior_score(&mix, &a, 0.4, 1500, &mut stream_rng(5, &[9])).unwrap();
        let e2 = mc_posterior_score(&mix, &a, 0.4, 1500, &mut stream_rng(5, &[9])).unwrap();
        assert_eq!(e1.estimate, e2.estimate);
        assert_eq!(e1.std_error, e2.std_error);
    }

    #[test]
    fn mc_score_se_shrinks_like_root_n() {
        let mix = MixtureData::single(GaussianData::new(vec![0.0], 1.5).unwrap());
        let a = [0.7];
        let mut ladder = Vec::new();
        for (i, n) in [2000usize, 4000, 8000, 16000].iter().enumerate() {
            let est =
                mc_posterior_score(&mix, &a, 0.45, *n, &mut stream_rng(21, &[i as u64])).unwrap();
            ladder.push((*n as f64, est.std_error[0]));
        }
        // log-log slope of SE against n should sit near −1/2
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for &(n, se) in &ladder {
            let (x, y) = (n.ln(), se.ln());
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        let k = ladder.len() as f64;
        let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
        assert!(
            (-0.6..=-0.4).contains(&slope),
            "SE consistency slope {slope} outside [−0.6, −0.4]"
        );
    }

    #[test]
    fn mc_score_flags_low_ess() {
        // far-tail query at small path noise: only a₁ draws within a
        // ~0.014-wide window around 3.03 carry weight, so a couple of
        // samples dominate the whole sum
        let mix = MixtureData::single(unit_gaussian(1));
        let mut rng = stream_rng(3, &[4]);
        let est = mc_posterior_score(&mix, &[3.0], 0.99, 1000, &mut rng).unwrap();
        assert!(est.low_ess, "ess {} should be flagged", est.ess);
    }

    #[test]
    fn mc_score_needs_enough_samples() {
        let mix = MixtureData::single(unit_gaussian(1));
        let mut rng = stream_rng(0, &[0]);
        assert!(mc_posterior_score(&mix, &[0.0], 0.5, 999, &mut rng).is_err());
    }

    #[test]
    fn trained_duality_zero_net_t_zero_residual_vanishes() {
        // an untrained (zero-output) field still gets t=0 right because the
        // implied score (t·v − a)/(1−t) degenerates to −a there
        let v = crate::flow::VelocityFieldParams {
            net: crate::nn::ParamBundle {
                layers: vec![crate::nn::Layer {
                    in_dim: 3,
                    out_dim: 1,
                    weights: vec![0.0; 3],
                    bias: vec![0.0],
                    activation: crate::nn::Activation::Identity,
                }],
            },
            action_dim: 1,
            obs_dim: 1,
        };
        let mix = MixtureData::new(vec![
            (0.5, GaussianData::new(vec![1.0], 0.0625).unwrap()),
            (0.5, GaussianData::new(vec![-1.0], 0.0625).unwrap()),
        ])
        .unwrap();
        for a in [-1.0, 0.3, 1.7] {
            let implied = closed_form_score(&v.eval(&[a], 0.0, &[0.0]).unwrap(), &[a], 0.0).unwrap();
            let exact = mixture_score(&mix, &[a], 0.0).unwrap();
            assert!((implied[0] - exact[0]).abs() < 1e-14);
        }
    }
}
