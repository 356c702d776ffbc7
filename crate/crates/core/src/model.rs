//! Small classification models with exact per-sample gradients.
//!
//! Two model kinds are supported: multinomial softmax regression and a
//! one-hidden-layer tanh MLP. Both are trained with cross-entropy loss and
//! expose analytic gradients over a flat parameter vector.
//!
//! Parameter layouts (row-major):
//! - softmax regression: `W[class][feature]`, then `b[class]`
//! - MLP: `W1[hidden][feature]`, `b1[hidden]`, `W2[class][hidden]`, `b2[class]`

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a parameter vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// `self - other`, coordinate-wise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        Error::check_len("parameter difference", self.len(), other.len())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    SoftmaxRegression,
    /// One hidden tanh layer of the given width.
    Mlp {
        hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_features: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax(num_features: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            num_features,
            num_classes,
        }
    }

    pub fn mlp(num_features: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            num_features,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 {
            return Err(Error::invalid("model needs at least one feature"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::invalid("mlp hidden width must be positive"));
        }
        Ok(())
    }

    /// Number of trainable parameters `d`.
    pub fn dimension(&self) -> usize {
        let (f, k) = (self.num_features, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => k * f + k,
            ModelKind::Mlp { hidden: h } => h * f + h + k * h + k,
        }
    }

    /// Initial parameters. Softmax regression starts at zero; the MLP draws
    /// each layer uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match self.kind {
            ModelKind::SoftmaxRegression => ParamVector::zeros(self.dimension()),
            ModelKind::Mlp { hidden } => {
                let (f, k) = (self.num_features, self.num_classes);
                let mut v = Vec::with_capacity(self.dimension());
                let b1 = 1.0 / (f as f64).sqrt();
                v.extend((0..hidden * f + hidden).map(|_| rng.gen_range(-b1..=b1)));
                let b2 = 1.0 / (hidden as f64).sqrt();
                v.extend((0..k * hidden + k).map(|_| rng.gen_range(-b2..=b2)));
                ParamVector(v)
            }
        }
    }

    fn check(&self, params: &ParamVector, sample: &LabeledSample) -> Result<()> {
        Error::check_len("parameters", self.dimension(), params.len())?;
        Error::check_len("sample features", self.num_features, sample.features.len())?;
        if sample.label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: sample.label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Class logits for one input.
    pub fn logits(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("parameters", self.dimension(), params.len())?;
        Error::check_len("sample features", self.num_features, features.len())?;
        Ok(self.forward(params.as_slice(), features).logits)
    }

    pub fn predict(&self, params: &ParamVector, features: &[f64]) -> Result<usize> {
        let z = self.logits(params, features)?;
        Ok(argmax(&z))
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Forward {
        let (f, k) = (self.num_features, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => {
                let (weights, bias) = w.split_at(k * f);
                let logits = (0..k)
                    .map(|c| dot(&weights[c * f..(c + 1) * f], x) + bias[c])
                    .collect();
                Forward {
                    hidden: Vec::new(),
                    logits,
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = w.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let hidden: Vec<f64> = (0..h)
                    .map(|j| (dot(&w1[j * f..(j + 1) * f], x) + b1[j]).tanh())
                    .collect();
                let logits = (0..k)
                    .map(|c| dot(&w2[c * h..(c + 1) * h], &hidden) + b2[c])
                    .collect();
                Forward { hidden, logits }
            }
        }
    }
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Cross-entropy loss of one sample.
pub fn loss(spec: &ModelSpec, params: &ParamVector, sample: &LabeledSample) -> Result<f64> {
    spec.check(params, sample)?;
    let z = spec.forward(params.as_slice(), &sample.features).logits;
    // logsumexp >= max(z) >= z[label]; the clamp only absorbs rounding
    Ok((log_sum_exp(&z) - z[sample.label]).max(0.0))
}

/// Exact gradient of [`loss`] with respect to the parameters.
pub fn per_sample_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    sample: &LabeledSample,
) -> Result<ParamVector> {
    spec.check(params, sample)?;
    let w = params.as_slice();
    let x = &sample.features;
    let (f, k) = (spec.num_features, spec.num_classes);
    let fwd = spec.forward(w, x);
    let mut dz = softmax(&fwd.logits);
    dz[sample.label] -= 1.0;

    let mut grad = vec![0.0; spec.dimension()];
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (gw, gb) = grad.split_at_mut(k * f);
            for c in 0..k {
                for (g, xi) in gw[c * f..(c + 1) * f].iter_mut().zip(x) {
                    *g = dz[c] * xi;
                }
                gb[c] = dz[c];
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let w2 = &w[h * f + h..h * f + h + k * h];
            let (gw1, rest) = grad.split_at_mut(h * f);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(k * h);
            let mut dh = vec![0.0; h];
            for c in 0..k {
                for j in 0..h {
                    gw2[c * h + j] = dz[c] * fwd.hidden[j];
                    dh[j] += w2[c * h + j] * dz[c];
                }
                gb2[c] = dz[c];
            }
            for j in 0..h {
                let da = dh[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                for (g, xi) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                    *g = da * xi;
                }
                gb1[j] = da;
            }
        }
    }
    Ok(ParamVector(grad))
}

/// Mean per-sample gradient over `samples`.
///
/// Samples are summed in a canonical order (by label, then feature bit
/// patterns), so the result is bit-identical under any permutation of the
/// input.
pub fn full_batch_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[LabeledSample],
) -> Result<ParamVector> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<&LabeledSample> = samples.iter().collect();
    order.sort_by(|a, b| {
        a.label.cmp(&b.label).then_with(|| {
            a.features
                .iter()
                .zip(&b.features)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut sum = vec![0.0; spec.dimension()];
    for s in order {
        let g = per_sample_gradient(spec, params, s)?;
        for (acc, gi) in sum.iter_mut().zip(g.as_slice()) {
            *acc += gi;
        }
    }
    let n = samples.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(ParamVector(sum))
}

/// Mean loss over `samples` (index order).
pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        total += loss(spec, params, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of `samples` classified correctly.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in samples {
        if spec.predict(params, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(features: &[f64], label: usize) -> LabeledSample {
        LabeledSample::new(features.to_vec(), label)
    }

    /// Central finite differences of `loss`, step 1e-6.
    fn fd_gradient(spec: &ModelSpec, params: &ParamVector, s: &LabeledSample) -> Vec<f64> {
        let h = 1e-6;
        (0..params.len())
            .map(|i| {
                let mut plus = params.clone().into_vec();
                let mut minus = plus.clone();
                plus[i] += h;
                minus[i] -= h;
                let lp = loss(spec, &ParamVector(plus), s).unwrap();
                let lm = loss(spec, &ParamVector(minus), s).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let s2 = ModelSpec::softmax(3, 2);
        let l = loss(
            &s2,
            &ParamVector::zeros(s2.dimension()),
            &sample(&[0.3, -1.0, 2.0], 1),
        )
        .unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let s10 = ModelSpec::softmax(4, 10);
        let l = loss(
            &s10,
            &ParamVector::zeros(s10.dimension()),
            &sample(&[1.0, 2.0, 3.0, 4.0], 7),
        )
        .unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_logits() {
        // x = (1, 0); W row 0 = (1, 0), everything else zero -> logits (1, 0)
        let spec = ModelSpec::softmax(2, 2);
        let mut p = vec![0.0; spec.dimension()];
        p[0] = 1.0;
        let params = ParamVector::new(p).unwrap();
        let s = sample(&[1.0, 0.0], 0);
        assert_eq!(spec.logits(&params, &s.features).unwrap(), vec![1.0, 0.0]);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let l = loss(&spec, &params, &s).unwrap();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn closed_form_softmax_gradient_at_zero() {
        let spec = ModelSpec::softmax(2, 2);
        let g =
            per_sample_gradient(&spec, &ParamVector::zeros(6), &sample(&[1.0, 0.0], 0)).unwrap();
        // weights: (p - y) outer x with p = (0.5, 0.5), y = (1, 0)
        assert_eq!(&g.as_slice()[..4], &[-0.5, 0.0, 0.5, 0.0]);
        assert_eq!(&g.as_slice()[4..], &[-0.5, 0.5]);
    }

    #[test]
    fn saturated_probability_has_flat_gradient() {
        let spec = ModelSpec::softmax(2, 3);
        let mut p = vec![0.0; spec.dimension()];
        p[0] = 50.0; // class 0 logit = 50 * x0
        let params = ParamVector::new(p).unwrap();
        let g = per_sample_gradient(&spec, &params, &sample(&[1.0, 0.5], 0)).unwrap();
        assert!(g.norm() < 1e-6, "norm {}", g.norm());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = ModelSpec::softmax(2, 2);
        match loss(&spec, &ParamVector::zeros(5), &sample(&[1.0, 0.0], 0)) {
            Err(Error::DimensionMismatch {
                expected: 6,
                actual: 5,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(per_sample_gradient(&spec, &ParamVector::zeros(6), &sample(&[1.0], 0)).is_err());
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(6), &sample(&[1.0, 0.0], 2)),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn non_finite_params_rejected() {
        assert!(ParamVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mlp_dimension_and_init_bounds() {
        let spec = ModelSpec::mlp(5, 3, 4);
        assert_eq!(spec.dimension(), 3 * 5 + 3 + 4 * 3 + 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = spec.init_params(&mut rng);
        let b1 = 1.0 / 5f64.sqrt();
        assert!(p.as_slice()[..18].iter().all(|v| v.abs() <= b1));
        let b2 = 1.0 / 3f64.sqrt();
        assert!(p.as_slice()[18..].iter().all(|v| v.abs() <= b2));
        assert_eq!(p, spec.init_params(&mut ChaCha8Rng::seed_from_u64(7)));
    }

    #[test]
    fn full_batch_single_and_symmetric() {
        let spec = ModelSpec::softmax(2, 2);
        let params = ParamVector::new(vec![0.2, -0.1, 0.4, 0.3, 0.0, 0.1]).unwrap();
        let s = sample(&[0.7, -1.2], 1);
        assert_eq!(
            full_batch_gradient(&spec, &params, std::slice::from_ref(&s)).unwrap(),
            per_sample_gradient(&spec, &params, &s).unwrap()
        );
        // at zero params, x and -x with the same label give opposite weight
        // gradients; bias gradients are equal, so compare weights only
        let zero = ParamVector::zeros(6);
        let pair = [sample(&[1.0, 2.0], 0), sample(&[-1.0, -2.0], 0)];
        let g = full_batch_gradient(&spec, &zero, &pair).unwrap();
        assert!(g.as_slice()[..4].iter().all(|v| *v == 0.0));
        assert!(full_batch_gradient(&spec, &zero, &[]).is_err());
    }

    #[test]
    fn opposite_gradients_cancel() {
        // same input, flipped label: at zero params p = (0.5, 0.5), so the
        // two per-sample gradients are exact negatives of each other
        let spec = ModelSpec::softmax(2, 2);
        let zero = ParamVector::zeros(spec.dimension());
        let a = sample(&[1.0, -3.0], 0);
        let b = sample(&[1.0, -3.0], 1);
        let ga = per_sample_gradient(&spec, &zero, &a).unwrap();
        let gb = per_sample_gradient(&spec, &zero, &b).unwrap();
        assert!(ga
            .as_slice()
            .iter()
            .zip(gb.as_slice())
            .all(|(x, y)| *x == -*y));
        let g = full_batch_gradient(&spec, &zero, &[a, b]).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplication_preserves_mean() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = spec.init_params(&mut rng);
        let data: Vec<LabeledSample> = (0..7)
            .map(|i| sample(&[rng.gen(), rng.gen(), rng.gen()], i % 3))
            .collect();
        let base = full_batch_gradient(&spec, &params, &data).unwrap();
        let mut tripled = data.clone();
        tripled.extend(data.iter().cloned());
        tripled.extend(data.iter().cloned());
        let g3 = full_batch_gradient(&spec, &params, &tripled).unwrap();
        for (a, b) in base.as_slice().iter().zip(g3.as_slice()) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    fn arb_case() -> impl Strategy<Value = (ModelSpec, Vec<f64>, Vec<f64>, usize)> {
        (1usize..5, 2usize..5, prop::option::of(1usize..5)).prop_flat_map(|(f, k, hidden)| {
            let spec = match hidden {
                Some(h) => ModelSpec::mlp(f, h, k),
                None => ModelSpec::softmax(f, k),
            };
            (
                Just(spec),
                prop::collection::vec(-1.0f64..1.0, spec.dimension()),
                prop::collection::vec(-2.0f64..2.0, f),
                0..k,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn gradient_matches_finite_differences((spec, p, x, y) in arb_case()) {
            let params = ParamVector::new(p).unwrap();
            let s = LabeledSample::new(x, y);
            let g = per_sample_gradient(&spec, &params, &s).unwrap();
            let fd = fd_gradient(&spec, &params, &s);
            prop_assert!(max_rel_err(g.as_slice(), &fd) <= 1e-5);
        }

        #[test]
        fn loss_is_nonnegative((spec, p, x, y) in arb_case()) {
            let l = loss(&spec, &ParamVector::new(p).unwrap(), &LabeledSample::new(x, y)).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }

        #[test]
        fn full_batch_is_permutation_invariant(
            (spec, p, _x, _y) in arb_case(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<LabeledSample> = (0..9)
                .map(|i| LabeledSample::new(
                    (0..spec.num_features).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    i % spec.num_classes,
                ))
                .collect();
            let params = ParamVector::new(p).unwrap();
            let g = full_batch_gradient(&spec, &params, &data).unwrap();
            let mut shuffled = data.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(g, full_batch_gradient(&spec, &params, &shuffled).unwrap());
        }
    }
}
