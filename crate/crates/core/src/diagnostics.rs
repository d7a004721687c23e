//! Domain-shift diagnostics: Jensen-Shannon divergence on projected feature
//! histograms, intra-class divergence, and an empirical target-error bound.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::tensor::Tensor;

/// Features grouped by `(domain, class)`, each group a FIFO of bounded length.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: Option<usize>,
    capacity: usize,
    groups: BTreeMap<(usize, usize), VecDeque<Vec<f64>>>,
}

impl FeatureBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(domain("feature bank capacity must be at least 1"));
        }
        Ok(Self {
            dim: None,
            capacity,
            groups: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, domain_id: usize, class: usize, feature: Vec<f64>) -> Result<()> {
        match self.dim {
            Some(d) if d != feature.len() => return Err(shape(&[d], &[feature.len()])),
            None => self.dim = Some(feature.len()),
            _ => {}
        }
        let q = self.groups.entry((domain_id, class)).or_default();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(feature);
        Ok(())
    }

    /// Pushes every row of `features [B × D]` with its label.
    pub fn push_batch(
        &mut self,
        domain_id: usize,
        labels: &[usize],
        features: &Tensor,
    ) -> Result<()> {
        let (b, _) = features.dims2()?;
        if labels.len() != b {
            return Err(shape(&[b], &[labels.len()]));
        }
        for (row, &c) in features.rows().zip(labels) {
            self.push(domain_id, c, row.to_vec())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All features of one domain, ordered by class then insertion.
    pub fn domain_features(&self, domain_id: usize) -> Vec<&[f64]> {
        self.groups
            .range((domain_id, 0)..=(domain_id, usize::MAX))
            .flat_map(|(_, q)| q.iter().map(Vec::as_slice))
            .collect()
    }

    /// All features of one class across domains.
    pub fn class_features(&self, class: usize) -> Vec<&[f64]> {
        self.groups
            .iter()
            .filter(|((_, c), _)| *c == class)
            .flat_map(|(_, q)| q.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.groups.keys().map(|k| k.1).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Entries of one domain only.
    pub fn restrict(&self, domain_id: usize) -> FeatureBank {
        FeatureBank {
            dim: self.dim,
            capacity: self.capacity,
            groups: self
                .groups
                .iter()
                .filter(|((d, _), _)| *d == domain_id)
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }
}

/// `½KL(P‖M) + ½KL(Q‖M)` in nats, `M = (P+Q)/2`. Inputs are renormalized.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(domain(format!(
            "histograms have {} and {} bins",
            p.len(),
            q.len()
        )));
    }
    let normalize = |h: &[f64]| -> Result<Vec<f64>> {
        if h.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(domain("histogram entries must be finite and non-negative"));
        }
        let s: f64 = h.iter().sum();
        if s <= 0.0 {
            return Err(domain("histogram has no mass"));
        }
        Ok(h.iter().map(|v| v / s).collect())
    };
    let p = normalize(p)?;
    let q = normalize(q)?;
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (term(a, m) + term(b, m))
        })
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Mean squared distance to the centroid of `features`.
pub fn cluster_spread(features: &[&[f64]]) -> Result<f64> {
    let n = features.len();
    if n == 0 {
        return Err(domain("no features"));
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(*f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let total: f64 = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// `IC = (1/|C|)·Σ ‖f_i − mean‖²` over every entry of `class`.
pub fn intra_class_divergence(bank: &FeatureBank, class: usize) -> Result<f64> {
    let feats = bank.class_features(class);
    if feats.is_empty() {
        return Err(domain(format!("class {class} has no entries")));
    }
    cluster_spread(&feats)
}

/// Normalized histogram over `[lo, hi)` with out-of-range values clamped into
/// the edge bins.
pub fn histogram_1d(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(domain("histograms need at least 2 bins"));
    }
    if !(hi > lo) {
        return Err(domain("histogram range is empty"));
    }
    if values.is_empty() {
        return Err(domain("no values to bin"));
    }
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = ((v - lo) / width).floor();
        let i = if i.is_nan() {
            0
        } else {
            i.clamp(0.0, (bins - 1) as f64) as usize
        };
        h[i] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// Scalar projection onto the leading principal direction of a reference
/// feature set, with a binning range of mean ± 4σ of the projected values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub center: Vec<f64>,
    pub direction: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Projection {
    pub fn fit(features: &[&[f64]]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(domain("cannot fit a projection to no features"));
        }
        let d = features[0].len();
        let mut center = vec![0.0; d];
        for f in features {
            for (c, v) in center.iter_mut().zip(*f) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);

        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - center[i];
                for j in 0..d {
                    cov[i * d + j] += di * (f[j] - center[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n as f64);

        // power iteration from a fixed start
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
        normalize(&mut v);
        for _ in 0..500 {
            let mut w = vec![0.0; d];
            for i in 0..d {
                w[i] = (0..d).map(|j| cov[i * d + j] * v[j]).sum();
            }
            if normalize(&mut w) == 0.0 {
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        // fix the sign so the largest component is positive
        let lead = (0..d).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        if d > 0 && v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }

        let mut p = Self {
            center,
            direction: v,
            lo: 0.0,
            hi: 0.0,
        };
        let proj: Vec<f64> = features.iter().map(|f| p.apply(f)).collect();
        let mean = proj.iter().sum::<f64>() / n as f64;
        let sd = (proj.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        let half = if sd > 0.0 { 4.0 * sd } else { 1.0 };
        p.lo = mean - half;
        p.hi = mean + half;
        Ok(p)
    }

    pub fn apply(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.center)
            .zip(&self.direction)
            .map(|((x, c), d)| (x - c) * d)
            .sum()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Histogram of one domain's projected features.
pub fn feature_histogram(
    bank: &FeatureBank,
    domain_id: usize,
    projection: &Projection,
    bins: usize,
) -> Result<Vec<f64>> {
    let feats = bank.domain_features(domain_id);
    if feats.is_empty() {
        return Err(domain(format!("domain {domain_id} has no entries")));
    }
    let values: Vec<f64> = feats.iter().map(|f| projection.apply(f)).collect();
    histogram_1d(&values, bins, projection.lo, projection.hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_s: f64,
    pub eps_t: f64,
    pub divergence: f64,
    pub label_disc: f64,
    /// `(ε_S + d + label_disc) − ε_T`; negative when the surrogate bound fails.
    pub slack: f64,
}

/// Inputs with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    fn check(&self, what: &str) -> Result<()> {
        let (b, _) = self.inputs.dims2()?;
        if b == 0 || self.labels.len() != b {
            return Err(domain(format!("{what} set needs one label per input")));
        }
        Ok(())
    }
}

/// A batch classifier.
pub type Labeler<'a> = &'a dyn Fn(&Tensor) -> Result<Vec<usize>>;

fn error_rate(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

fn disagreement(f_s: Labeler<'_>, f_t: Labeler<'_>, x: &Tensor) -> Result<f64> {
    let a = f_s(x)?;
    let b = f_t(x)?;
    Ok(a.iter().zip(&b).filter(|(a, b)| a != b).count() as f64 / a.len().max(1) as f64)
}

/// Evaluates both sides of the target-error bound with the JS surrogate for
/// the domain divergence.
pub fn bound_check(
    h: Labeler<'_>,
    source: &LabeledSet,
    target: &LabeledSet,
    f_s: Labeler<'_>,
    f_t: Labeler<'_>,
    hist_s: &[f64],
    hist_t: &[f64],
) -> Result<BoundReport> {
    source.check("source")?;
    target.check("target")?;
    let eps_s = error_rate(&h(&source.inputs)?, &source.labels);
    let eps_t = error_rate(&h(&target.inputs)?, &target.labels);
    let divergence = js_divergence(hist_s, hist_t)?;
    let label_disc =
        disagreement(f_s, f_t, &source.inputs)?.min(disagreement(f_s, f_t, &target.inputs)?);
    Ok(BoundReport {
        eps_s,
        eps_t,
        divergence,
        label_disc,
        slack: (eps_s + divergence + label_disc) - eps_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(
            (js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );
        let want = 0.5 * (1.0f64 / 0.75).ln()
            + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        let got = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.2158).abs() < 1e-3);
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
        // unnormalized input is rescaled
        assert_eq!(js_divergence(&[2.0, 2.0], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn ic_examples() {
        let mut bank = FeatureBank::new(8).unwrap();
        bank.push(0, 1, vec![0.0]).unwrap();
        bank.push(0, 1, vec![2.0]).unwrap();
        assert!((intra_class_divergence(&bank, 1).unwrap() - 1.0).abs() < 1e-12);
        bank.push(0, 2, vec![5.0]).unwrap();
        assert_eq!(intra_class_divergence(&bank, 2).unwrap(), 0.0);
        bank.push(1, 3, vec![4.0]).unwrap();
        bank.push(1, 3, vec![4.0]).unwrap();
        assert_eq!(intra_class_divergence(&bank, 3).unwrap(), 0.0);
        assert!(intra_class_divergence(&bank, 7).is_err());
        assert!(bank.push(0, 0, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn bank_is_fifo_per_group() {
        let mut bank = FeatureBank::new(2).unwrap();
        for i in 0..5 {
            bank.push(0, 0, vec![i as f64]).unwrap();
        }
        bank.push(0, 1, vec![9.0]).unwrap();
        let feats: Vec<f64> = bank.domain_features(0).iter().map(|f| f[0]).collect();
        assert_eq!(feats, vec![3.0, 4.0, 9.0]);
        assert_eq!(bank.restrict(1).len(), 0);
    }

    #[test]
    fn histogram_examples() {
        let mut bank = FeatureBank::new(8).unwrap();
        bank.push(0, 0, vec![0.3, 0.1]).unwrap();
        let p = Projection {
            center: vec![0.0, 0.0],
            direction: vec![1.0, 0.0],
            lo: -1.0,
            hi: 1.0,
        };
        let h = feature_histogram(&bank, 0, &p, 4).unwrap();
        assert_eq!(h, vec![0.0, 0.0, 1.0, 0.0]);
        bank.push(0, 1, vec![0.4, -3.0]).unwrap();
        assert_eq!(
            feature_histogram(&bank, 0, &p, 4).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
        assert!(feature_histogram(&bank, 5, &p, 4).is_err());
        assert!(histogram_1d(&[0.0], 1, 0.0, 1.0).is_err());

        let values = [-0.9, -0.2, 0.05, 0.49, 0.51, 0.99, 3.0, -7.0];
        let got = histogram_1d(&values, 4, -1.0, 1.0).unwrap();
        let mut counts = [0usize; 4];
        for v in values {
            let idx = if v < -0.5 {
                0
            } else if v < 0.0 {
                1
            } else if v < 0.5 {
                2
            } else {
                3
            };
            counts[idx] += 1;
        }
        for (g, c) in got.iter().zip(counts) {
            assert_eq!(*g, c as f64 / values.len() as f64);
        }
    }

    #[test]
    fn projection_finds_dominant_axis() {
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 / 10.0 - 2.5;
                vec![0.1 * (i % 3) as f64, 3.0 * t, 0.05 * t]
            })
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let p = Projection::fit(&refs).unwrap();
        assert!(p.direction[1] > 0.99);
        assert!(p.lo < -4.0 && p.hi > 4.0);
    }

    #[test]
    fn bound_degenerate_domains() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.2, 0.2]]).unwrap();
        let set = LabeledSet {
            inputs: x,
            labels: vec![0, 1, 1],
        };
        let h = |t: &Tensor| Ok(t.rows().map(|r| usize::from(r[0] < 0.5)).collect());
        let r = bound_check(&h, &set, &set, &h, &h, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(r.divergence, 0.0);
        assert_eq!(r.label_disc, 0.0);
        assert_eq!(r.slack, 0.0);
        let r = bound_check(&h, &set, &set, &h, &h, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((r.divergence - std::f64::consts::LN_2).abs() < 1e-12);
        let bad = LabeledSet {
            inputs: set.inputs.clone(),
            labels: vec![0],
        };
        assert!(bound_check(&h, &bad, &set, &h, &h, &[0.5, 0.5], &[0.5, 0.5]).is_err());
    }

    fn hist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 8).prop_filter("mass", |v| v.iter().sum::<f64>() > 1e-3)
    }

    proptest! {
        #[test]
        fn js_is_symmetric_and_bounded(p in hist(), q in hist()) {
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-9).contains(&a));
        }

        #[test]
        fn ic_scales_quadratically(
            feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20),
            k in 0.1f64..4.0,
        ) {
            let mut a = FeatureBank::new(64).unwrap();
            let mut b = FeatureBank::new(64).unwrap();
            for f in &feats {
                a.push(0, 0, f.clone()).unwrap();
                b.push(0, 0, f.iter().map(|v| v * k).collect()).unwrap();
            }
            let ia = intra_class_divergence(&a, 0).unwrap();
            let ib = intra_class_divergence(&b, 0).unwrap();
            prop_assert!((ib - k * k * ia).abs() <= 1e-9 * (1.0 + ib.abs()));
        }

        #[test]
        fn histogram_mass_is_one(values in prop::collection::vec(-10.0f64..10.0, 1..200)) {
            let h = histogram_1d(&values, 32, -3.0, 3.0).unwrap();
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
