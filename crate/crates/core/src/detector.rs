//! Post-training unknown detection: per-class latent Gaussians, membership
//! probabilities, the reconstruction-error threshold and the decision rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{argmax, Inference, LadderModel};
use crate::numerics::Tensor;

/// Lower bound applied to every fitted per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub class_id: usize,
    pub m: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl ClassGaussian {
    /// Mean and population variance (denominator N) of `latents`, floored.
    pub fn fit(class_id: usize, latents: &[&[f64]]) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::Calibration(format!(
                "class {class_id} has {} correctly classified training samples, need at least 2",
                latents.len()
            )));
        }
        let dim = latents[0].len();
        if latents.iter().any(|z| z.len() != dim) {
            return Err(Error::dim("fit_class_gaussians", "latent codes differ in length"));
        }
        let n = latents.len() as f64;
        let mut m = vec![0.0; dim];
        for z in latents {
            m.iter_mut().zip(*z).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; dim];
        for z in latents {
            for ((v, zi), mi) in var.iter_mut().zip(*z).zip(&m) {
                *v += (zi - mi) * (zi - mi);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / n).max(VARIANCE_FLOOR));
        Ok(ClassGaussian {
            class_id,
            m,
            var,
            count: latents.len(),
        })
    }
}

/// Probability mass of `g` lying outside the axis-aligned box centred on the
/// class mean whose corner is `z`: `1 − ∏_j erf(|z_j − m_j| / (σ_j √2))`.
pub fn membership_probability(z: &[f64], g: &ClassGaussian) -> f64 {
    debug_assert_eq!(z.len(), g.m.len());
    let inside: f64 = z
        .iter()
        .zip(&g.m)
        .zip(&g.var)
        .map(|((zj, mj), vj)| libm::erf((zj - mj).abs() / (vj.sqrt() * std::f64::consts::SQRT_2)))
        .product();
    (1.0 - inside).clamp(0.0, 1.0)
}

/// Gaussians of every class from the deterministic latent codes of the
/// training samples the classifier gets right.
pub fn fit_class_gaussians(model: &LadderModel, x: &Tensor, labels: &[usize]) -> Result<Vec<ClassGaussian>> {
    let inf = model.infer(x)?;
    fit_from_inference(&inf, labels, model.config().num_classes)
}

pub fn fit_from_inference(inf: &Inference, labels: &[usize], num_classes: usize) -> Result<Vec<ClassGaussian>> {
    if labels.len() != inf.len() {
        return Err(Error::dim("fit_class_gaussians", "label count differs from sample count"));
    }
    let mut per_class: Vec<Vec<&[f64]>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Index {
                what: "classes",
                index: label,
                len: num_classes,
            });
        }
        if inf.predicted(i) == label {
            per_class[label].push(inf.z.row(i));
        }
    }
    per_class
        .iter()
        .enumerate()
        .map(|(k, zs)| ClassGaussian::fit(k, zs))
        .collect()
}

/// Smallest value with at least `fraction` of `values` at or below it
/// (rank `⌈fraction·N⌉` of the ascending order).
pub fn nearest_rank(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Calibration("cannot take a percentile of an empty set".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("percentile fraction {fraction} outside (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let exact = fraction * n;
    let nearest = exact.round();
    let rank = if (exact - nearest).abs() < 1e-9 { nearest } else { exact.ceil() };
    let rank = (rank as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Fraction of training samples that must fall at or below `tau_r`.
pub const KNOWN_FRACTION: f64 = 0.95;

/// Reconstruction threshold at the 95th nearest-rank percentile of the
/// training reconstruction errors.
pub fn calibrate_tau_r(model: &LadderModel, x: &Tensor) -> Result<f64> {
    let (n, _) = x.dims2()?;
    if n == 0 {
        return Err(Error::Calibration("training set is empty".into()));
    }
    nearest_rank(&model.infer(x)?.recon_error, KNOWN_FRACTION)
}

fn default_tau_l() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorThresholds {
    #[serde(default = "default_tau_l")]
    pub tau_l: f64,
    pub tau_r: f64,
}

impl DetectorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_l > 0.0 && self.tau_l < 1.0) {
            return Err(Error::Config(format!("tau_l = {} must lie in (0, 1)", self.tau_l)));
        }
        if !(self.tau_r >= 0.0 && self.tau_r.is_finite()) {
            return Err(Error::Config(format!("tau_r = {} must be finite and nonnegative", self.tau_r)));
        }
        Ok(())
    }
}

/// Which evidence rejects a sample as unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Top class probability below 0.5.
    SoftmaxThreshold,
    /// Membership probability below `tau_l` for every class.
    Cgd,
    /// Reconstruction error above `tau_r`.
    Re,
    /// Either of the two above.
    CgdAndRe,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::SoftmaxThreshold,
        DetectorKind::Cgd,
        DetectorKind::Re,
        DetectorKind::CgdAndRe,
    ];
}

/// Threshold on the top class probability used by [`DetectorKind::SoftmaxThreshold`].
pub const SOFTMAX_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub predicted_label: Option<usize>,
    pub max_membership: f64,
    pub recon_error: f64,
}

impl Decision {
    /// Class index with unknown mapped to `num_classes`.
    pub fn class_index(&self, num_classes: usize) -> usize {
        self.predicted_label.unwrap_or(num_classes)
    }
}

/// Fitted class Gaussians plus thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub gaussians: Vec<ClassGaussian>,
    pub thresholds: DetectorThresholds,
}

impl Detector {
    /// Fits the class Gaussians and the reconstruction threshold on training data.
    pub fn calibrate(model: &LadderModel, x: &Tensor, labels: &[usize], tau_l: f64) -> Result<Self> {
        let inf = model.infer(x)?;
        Detector::calibrate_from(&inf, labels, model.config().num_classes, tau_l)
    }

    pub fn calibrate_from(inf: &Inference, labels: &[usize], num_classes: usize, tau_l: f64) -> Result<Self> {
        let gaussians = fit_from_inference(inf, labels, num_classes)?;
        let tau_r = nearest_rank(&inf.recon_error, KNOWN_FRACTION)?;
        let thresholds = DetectorThresholds { tau_l, tau_r };
        thresholds.validate()?;
        Ok(Detector { gaussians, thresholds })
    }

    pub fn max_membership(&self, z: &[f64]) -> f64 {
        self.gaussians
            .iter()
            .map(|g| membership_probability(z, g))
            .fold(0.0, f64::max)
    }

    /// Decision for one sample given its latent code, class probabilities and
    /// reconstruction error. A tie `R == tau_r` counts as known.
    pub fn decide_parts(&self, kind: DetectorKind, z: &[f64], probs: &[f64], recon_error: f64) -> Decision {
        let max_membership = self.max_membership(z);
        let predicted = argmax(probs);
        let cgd_reject = max_membership < self.thresholds.tau_l;
        let re_reject = recon_error > self.thresholds.tau_r;
        let reject = match kind {
            DetectorKind::SoftmaxThreshold => probs[predicted] < SOFTMAX_THRESHOLD,
            DetectorKind::Cgd => cgd_reject,
            DetectorKind::Re => re_reject,
            DetectorKind::CgdAndRe => cgd_reject || re_reject,
        };
        Decision {
            verdict: if reject { Verdict::Unknown } else { Verdict::Known },
            predicted_label: (!reject).then_some(predicted),
            max_membership,
            recon_error,
        }
    }

    /// Decisions for every row of an inference batch.
    pub fn decide_all(&self, kind: DetectorKind, inf: &Inference) -> Vec<Decision> {
        (0..inf.len())
            .map(|i| self.decide_parts(kind, inf.z.row(i), inf.probs.row(i), inf.recon_error[i]))
            .collect()
    }

    /// Full test-time rule for a single flattened sample.
    pub fn decide(&self, model: &LadderModel, x: &[f64]) -> Result<Decision> {
        let input = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let inf = model.infer(&input)?;
        Ok(self.decide_parts(DetectorKind::CgdAndRe, inf.z.row(0), inf.probs.row(0), inf.recon_error[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::LadderConfig;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn gaussian(m: &[f64], var: &[f64]) -> ClassGaussian {
        ClassGaussian {
            class_id: 0,
            m: m.to_vec(),
            var: var.to_vec(),
            count: 2,
        }
    }

    /// Composite Simpson integral of the N(m, var) density over [m − d, m + d].
    fn simpson_axis(m: f64, var: f64, d: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        let n = 2000;
        let (a, b) = (m - d, m + d);
        let h = (b - a) / n as f64;
        let pdf = |t: f64| (-(t - m).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn quadrature(z: &[f64], g: &ClassGaussian) -> f64 {
        1.0 - z
            .iter()
            .zip(&g.m)
            .zip(&g.var)
            .map(|((zj, mj), vj)| simpson_axis(*mj, *vj, (zj - mj).abs()))
            .product::<f64>()
    }

    #[test]
    fn two_point_fit() {
        let zs: [&[f64]; 2] = [&[0.0, 0.0], &[2.0, 2.0]];
        let g = ClassGaussian::fit(0, &zs).unwrap();
        assert_eq!(g.m, vec![1.0, 1.0]);
        assert_eq!(g.var, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_latents_hit_floor() {
        let zs: [&[f64]; 3] = [&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]];
        assert_eq!(ClassGaussian::fit(0, &zs).unwrap().var, vec![VARIANCE_FLOOR; 2]);
    }

    #[test]
    fn fewer_than_two_samples_is_a_calibration_error() {
        let zs: [&[f64]; 1] = [&[0.5]];
        let err = ClassGaussian::fit(3, &zs).unwrap_err();
        assert!(matches!(err, Error::Calibration(ref s) if s.contains("class 3")));
    }

    #[test]
    fn fit_matches_two_pass_oracle() {
        let mut rng = SeededRng::new(31);
        let rows: Vec<Vec<f64>> = (0..57).map(|_| (0..5).map(|_| rng.uniform_range(-4.0, 4.0)).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let g = ClassGaussian::fit(0, &refs).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!((g.m[j] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((g.var[j] - var).abs() <= 1e-12 * var);
        }
    }

    #[test]
    fn membership_reference_values() {
        let g = gaussian(&[0.0], &[1.0]);
        assert_eq!(membership_probability(&[0.0], &g), 1.0);
        let p1 = membership_probability(&[1.0], &g);
        assert!((p1 - quadrature(&[1.0], &g)).abs() < 1e-9);
        assert!((p1 - 0.31731).abs() < 1e-5);

        let g2 = gaussian(&[1.0, -2.0], &[4.0, 0.25]);
        let z = [3.0, -1.5];
        let p2 = membership_probability(&z, &g2);
        assert!((p2 - quadrature(&z, &g2)).abs() < 1e-6);
        assert!((p2 - 0.53394).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn membership_matches_quadrature(
            m in proptest::collection::vec(-3.0f64..3.0, 3),
            var in proptest::collection::vec(0.05f64..4.0, 3),
            offs in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let g = gaussian(&m, &var);
            let z: Vec<f64> = m.iter().zip(&offs).zip(&var).map(|((a, o), v)| a + o * v.sqrt()).collect();
            let p = membership_probability(&z, &g);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p - quadrature(&z, &g)).abs() < 1e-9);
        }

        #[test]
        fn membership_non_increasing_per_axis(
            m in proptest::collection::vec(-3.0f64..3.0, 2),
            var in proptest::collection::vec(0.05f64..4.0, 2),
            other in -3.0f64..3.0,
            d1 in 0.0f64..5.0,
            extra in 0.0f64..5.0,
        ) {
            let g = gaussian(&m, &var);
            let near = membership_probability(&[m[0] + d1, m[1] + other], &g);
            let far = membership_probability(&[m[0] + d1 + extra, m[1] + other], &g);
            prop_assert!(far <= near + 1e-15);
        }
    }

    #[test]
    fn membership_is_one_only_at_mean() {
        let g = gaussian(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(membership_probability(&[0.0, 0.0], &g), 1.0);
        assert!(membership_probability(&[1e-3, 1e-3], &g) < 1.0);
    }

    #[test]
    fn nearest_rank_cases() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.95).unwrap(), 95.0);
        assert_eq!(nearest_rank(&[2.5; 7], 0.95).unwrap(), 2.5);
        assert!(matches!(nearest_rank(&[], 0.95), Err(Error::Calibration(_))));
    }

    #[test]
    fn nearest_rank_matches_sort_oracle() {
        let mut rng = SeededRng::new(4);
        for n in [1usize, 2, 19, 20, 21, 333] {
            let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 50.0)).collect();
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // smallest element with at least 95% of the set at or below it
            let oracle = *s.iter().find(|&&t| s.iter().filter(|&&u| u <= t).count() * 100 >= 95 * n).unwrap();
            assert_eq!(nearest_rank(&v, 0.95).unwrap(), oracle);
        }
    }

    fn detector(tau_l: f64, tau_r: f64) -> Detector {
        Detector {
            gaussians: vec![
                ClassGaussian {
                    class_id: 0,
                    m: vec![0.0],
                    var: vec![1.0],
                    count: 10,
                },
                ClassGaussian {
                    class_id: 1,
                    m: vec![10.0],
                    var: vec![1.0],
                    count: 10,
                },
            ],
            thresholds: DetectorThresholds { tau_l, tau_r },
        }
    }

    /// Offset from a unit-variance mean with membership probability `p`.
    fn offset_for(p: f64) -> f64 {
        // 1 - erf(d/√2) = p  ⇔  d = √2·erfinv(1-p); bisection on erf
        let target = 1.0 - p;
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if libm::erf(mid / std::f64::consts::SQRT_2) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn decision_rule_cases() {
        let det = detector(0.5, 10.0);
        let probs = [0.8, 0.2];
        let z_high = [offset_for(0.9)];
        let z_low = [offset_for(0.1)];

        let d = det.decide_parts(DetectorKind::CgdAndRe, &z_high, &probs, 10.0);
        assert!((d.max_membership - 0.9).abs() < 1e-9);
        assert_eq!(d.verdict, Verdict::Known);
        assert_eq!(d.predicted_label, Some(0));

        let d = det.decide_parts(DetectorKind::CgdAndRe, &z_low, &probs, 0.0);
        assert_eq!(d.verdict, Verdict::Unknown);
        assert_eq!(d.predicted_label, None);

        let d = det.decide_parts(DetectorKind::CgdAndRe, &z_high, &probs, 10.5);
        assert_eq!(d.verdict, Verdict::Unknown);
    }

    #[test]
    fn variant_rules() {
        let det = detector(0.5, 10.0);
        let z_far = [5.0];
        assert_eq!(det.decide_parts(DetectorKind::Cgd, &z_far, &[0.9, 0.1], 0.0).verdict, Verdict::Unknown);
        assert_eq!(det.decide_parts(DetectorKind::Re, &z_far, &[0.9, 0.1], 0.0).verdict, Verdict::Known);
        assert_eq!(
            det.decide_parts(DetectorKind::SoftmaxThreshold, &[0.0], &[0.45, 0.55], 99.0).verdict,
            Verdict::Known
        );
        let three = [0.4, 0.35, 0.25];
        assert_eq!(
            det.decide_parts(DetectorKind::SoftmaxThreshold, &[0.0], &three, 0.0).verdict,
            Verdict::Unknown
        );
    }

    proptest! {
        #[test]
        fn stricter_thresholds_never_accept_more(
            z in -3.0f64..13.0, r in 0.0f64..20.0,
            tau_l in 0.05f64..0.9, dl in 0.0f64..0.09,
            tau_r in 0.0f64..20.0, dr in 0.0f64..5.0,
        ) {
            let loose = detector(tau_l, tau_r);
            let strict = detector(tau_l + dl, (tau_r - dr).max(0.0));
            let a = loose.decide_parts(DetectorKind::CgdAndRe, &[z], &[0.6, 0.4], r);
            let b = strict.decide_parts(DetectorKind::CgdAndRe, &[z], &[0.6, 0.4], r);
            if a.verdict == Verdict::Unknown {
                prop_assert_eq!(b.verdict, Verdict::Unknown);
            }
        }
    }

    #[test]
    fn decide_is_deterministic() {
        let model = LadderModel::new(LadderConfig::new(6, vec![5, 4], 3, 2), 1).unwrap();
        let mut rng = SeededRng::new(2);
        let x = Tensor::new(vec![40, 6], (0..240).map(|_| rng.uniform()).collect()).unwrap();
        let inf = model.infer(&x).unwrap();
        let rows: Vec<&[f64]> = (0..40).map(|i| inf.z.row(i)).collect();
        let det = Detector {
            gaussians: vec![ClassGaussian::fit(0, &rows[..20]).unwrap(), ClassGaussian::fit(1, &rows[20..]).unwrap()],
            thresholds: DetectorThresholds {
                tau_l: 0.5,
                tau_r: nearest_rank(&inf.recon_error, KNOWN_FRACTION).unwrap(),
            },
        };
        let sample = x.row(3).to_vec();
        let first = det.decide(&model, &sample).unwrap();
        assert_eq!(first, det.decide(&model, &sample).unwrap());
        assert_eq!(first.recon_error, inf.recon_error[3]);
    }
}
