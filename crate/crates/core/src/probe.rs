//! Linear probe: a multinomial logistic-regression head trained on frozen
//! embeddings with full-batch gradient descent. Its held-out accuracy is
//! the supervised separability score.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::seed::rng_from;

const STD_FLOOR: f64 = 1e-8;
const MAX_RATE_HALVINGS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_count: 500,
            test_count: 360,
            learning_rate: 0.1,
            epochs: 200,
            l2_penalty: 1e-4,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    fn validate_training(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::Config(format!("l2_penalty must be >= 0, got {}", self.l2_penalty)));
        }
        Ok(())
    }
}

/// A labeled set of points fed to or scored by a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub features: EmbeddingMatrix,
    pub labels: LabelVector,
    /// Row indices into the data the set was drawn from.
    pub source_rows: Vec<usize>,
}

impl ProbeSet {
    pub fn new(features: EmbeddingMatrix, labels: LabelVector) -> Result<Self> {
        if features.n_points() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                labels.len(),
                features.n_points()
            )));
        }
        let source_rows = (0..labels.len()).collect();
        Ok(Self {
            features,
            labels,
            source_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Hamilton apportionment of `total` over `sizes` (proportional, integer),
/// never giving a group more than `caps[g]`.
fn apportion(total: usize, sizes: &[usize], caps: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut quota: Vec<usize> = sizes.iter().map(|&s| (total * s / n).min(s)).collect();
    for (q, &c) in quota.iter_mut().zip(caps) {
        *q = (*q).min(c);
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&g| std::cmp::Reverse(total * sizes[g] % n));
    let mut left = total - quota.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &g in &order {
            if left > 0 && quota[g] < caps[g] {
                quota[g] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    quota
}

/// Stratified, seeded train/test split. Each class contributes to both sets
/// in proportion to its size.
pub fn probe_split(
    data: &EmbeddingMatrix,
    labels: &LabelVector,
    config: &ProbeConfig,
) -> Result<(ProbeSet, ProbeSet)> {
    let n = data.n_points();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.as_slice().iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let n_classes = by_class.len();
    let (train_n, test_n) = (config.train_count, config.test_count);
    if train_n < n_classes.max(1) || test_n < n_classes.max(1) {
        return Err(Error::Config(format!(
            "train_count ({train_n}) and test_count ({test_n}) must each be at least the number of classes ({n_classes})"
        )));
    }
    if train_n + test_n > n {
        return Err(Error::Config(format!(
            "train_count + test_count = {} exceeds the {n} available points",
            train_n + test_n
        )));
    }

    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let train_q = apportion(train_n, &sizes, &sizes);
    let caps: Vec<usize> = sizes.iter().zip(&train_q).map(|(s, t)| s - t).collect();
    let test_q = apportion(test_n, &sizes, &caps);

    let mut train = Vec::with_capacity(train_n);
    let mut test = Vec::with_capacity(test_n);
    for (g, (&class, members)) in by_class.iter().enumerate() {
        if train_q[g] == 0 || test_q[g] == 0 {
            return Err(Error::Config(format!(
                "class {class} ({} points) cannot appear in both train and test sets",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_from(&[config.seed, u64::from(class)]));
        train.extend_from_slice(&shuffled[..train_q[g]]);
        test.extend_from_slice(&shuffled[train_q[g]..train_q[g] + test_q[g]]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let take = |rows: Vec<usize>| -> Result<ProbeSet> {
        Ok(ProbeSet {
            features: data.select_rows(&rows)?,
            labels: labels.select(&rows),
            source_rows: rows,
        })
    };
    Ok((take(train)?, take(test)?))
}

/// Per-feature affine map fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &EmbeddingMatrix) -> Self {
        let (n, d) = (data.n_points() as f64, data.dim());
        let mut mean = vec![0.0; d];
        for row in data.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }
}

/// Mean softmax cross-entropy plus `l2/2 ‖W‖²` over a design matrix.
///
/// Parameters are packed as `[W (classes × dim, row-major), b (classes)]`.
pub struct SoftmaxObjective<'a> {
    x: &'a [f64],
    y: &'a [usize],
    dim: usize,
    classes: usize,
    l2: f64,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(x: &'a [f64], y: &'a [usize], dim: usize, classes: usize, l2: f64) -> Self {
        assert_eq!(x.len(), y.len() * dim, "design matrix shape");
        assert!(y.iter().all(|&c| c < classes), "class index out of range");
        Self {
            x,
            y,
            dim,
            classes,
            l2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, None)
    }

    pub fn loss_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.n_params()];
        let loss = self.evaluate(theta, Some(&mut grad));
        (loss, grad)
    }

    fn evaluate(&self, theta: &[f64], mut grad: Option<&mut Vec<f64>>) -> f64 {
        let (d, c) = (self.dim, self.classes);
        assert_eq!(theta.len(), self.n_params(), "parameter vector length");
        let (w, b) = theta.split_at(c * d);
        let n = self.y.len();
        let inv_n = 1.0 / n as f64;
        let mut logits = vec![0.0; c];
        let mut data_loss = 0.0;

        for (x, &yi) in self.x.chunks_exact(d).zip(self.y) {
            for k in 0..c {
                logits[k] = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            data_loss += lse - logits[yi];

            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g.split_at_mut(c * d);
                for k in 0..c {
                    let p = (logits[k] - lse).exp();
                    let r = (p - if k == yi { 1.0 } else { 0.0 }) * inv_n;
                    gb[k] += r;
                    for (gv, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gv += r * v;
                    }
                }
            }
        }

        let penalty = 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad {
            for (gv, wv) in g[..c * d].iter_mut().zip(w) {
                *gv += self.l2 * wv;
            }
        }
        data_loss * inv_n + penalty
    }
}

/// A trained linear head. Predictions are original class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: Vec<u32>,
    dim: usize,
    /// `classes × dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    standardizer: Option<Standardizer>,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub learning_rate_used: f64,
    /// Loss before training and after every epoch.
    pub loss_trace: Vec<f64>,
    /// Whether the loss never increased between consecutive epochs.
    pub loss_monotone: bool,
}

impl LinearProbe {
    /// Wraps fixed parameters; mostly useful for scoring hand-built heads.
    pub fn from_parameters(
        classes: Vec<u32>,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        standardizer: Option<Standardizer>,
    ) -> Result<Self> {
        let c = classes.len();
        if c == 0 || weights.len() != c * dim || bias.len() != c {
            return Err(Error::Shape(format!(
                "{} weights / {} biases do not fit {c} classes × {dim} features",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
            standardizer,
            train_accuracy: f64::NAN,
            final_loss: f64::NAN,
            learning_rate_used: 0.0,
            loss_trace: Vec::new(),
            loss_monotone: true,
        })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights_shape(&self) -> (usize, usize) {
        (self.classes.len(), self.dim)
    }

    /// Arg-max class for each row; ties go to the lowest class id.
    pub fn predict(&self, data: &EmbeddingMatrix) -> Result<Vec<u32>> {
        if data.dim() != self.dim {
            return Err(Error::Shape(format!(
                "probe expects {} features, data has {}",
                self.dim,
                data.dim()
            )));
        }
        let d = self.dim;
        let mut buf = Vec::with_capacity(d);
        Ok(data
            .rows()
            .map(|row| {
                let x = match &self.standardizer {
                    Some(s) => {
                        buf.clear();
                        s.apply(row, &mut buf);
                        buf.as_slice()
                    }
                    None => row,
                };
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for k in 0..self.classes.len() {
                    let score = self.bias[k]
                        + self.weights[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    if score > best_score {
                        best = k;
                        best_score = score;
                    }
                }
                self.classes[best]
            })
            .collect())
    }

    pub fn accuracy(&self, set: &ProbeSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Config("cannot score an empty set".into()));
        }
        let pred = self.predict(&set.features)?;
        let correct = pred.iter().zip(set.labels.as_slice()).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / set.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub weights_shape: (usize, usize),
    pub test_count: usize,
}

fn design_matrix(set: &ProbeSet, standardizer: Option<&Standardizer>) -> Vec<f64> {
    match standardizer {
        None => set.features.values().to_vec(),
        Some(s) => {
            let mut out = Vec::with_capacity(set.features.values().len());
            for row in set.features.rows() {
                s.apply(row, &mut out);
            }
            out
        }
    }
}

struct Descent {
    theta: Vec<f64>,
    trace: Vec<f64>,
    monotone: bool,
}

fn descend(
    objective: &SoftmaxObjective<'_>,
    rate: f64,
    epochs: usize,
    stop_on_increase: bool,
) -> Result<Descent> {
    let non_finite = |epoch: usize| {
        Error::Numerical(format!(
            "non-finite probe loss at epoch {epoch} (learning rate {rate})"
        ))
    };
    let mut theta = vec![0.0; objective.n_params()];
    let (mut loss, mut grad) = objective.loss_and_gradient(&theta);
    if !loss.is_finite() {
        return Err(non_finite(0));
    }
    let mut trace = vec![loss];
    let mut monotone = true;
    for epoch in 1..=epochs {
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= rate * g;
        }
        let prev = loss;
        (loss, grad) = objective.loss_and_gradient(&theta);
        if !loss.is_finite() {
            return Err(non_finite(epoch));
        }
        trace.push(loss);
        if loss > prev + 1e-12 * prev.abs() {
            monotone = false;
            if stop_on_increase {
                break;
            }
        }
    }
    Ok(Descent {
        theta,
        trace,
        monotone,
    })
}

/// Fits the probe from zero weights. If the loss ever rises, training
/// restarts with half the learning rate, at most five times.
pub fn train_probe(train: &ProbeSet, config: &ProbeConfig) -> Result<LinearProbe> {
    config.validate_training()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let classes = train.labels.classes();
    let y: Vec<usize> = train
        .labels
        .as_slice()
        .iter()
        .map(|l| classes.binary_search(l).expect("class present"))
        .collect();
    let standardizer = config.standardize.then(|| Standardizer::fit(&train.features));
    let x = design_matrix(train, standardizer.as_ref());
    let d = train.features.dim();
    let objective = SoftmaxObjective::new(&x, &y, d, classes.len(), config.l2_penalty);

    let mut rate = config.learning_rate;
    let mut attempt = 0;
    let run = loop {
        let last_try = attempt == MAX_RATE_HALVINGS;
        let run = descend(&objective, rate, config.epochs, !last_try)?;
        if run.monotone || last_try {
            break run;
        }
        rate *= 0.5;
        attempt += 1;
    };

    let c = classes.len();
    let (w, b) = run.theta.split_at(c * d);
    let mut probe = LinearProbe::from_parameters(classes, d, w.to_vec(), b.to_vec(), standardizer)?;
    probe.final_loss = *run.trace.last().expect("trace has the initial loss");
    probe.loss_trace = run.trace;
    probe.loss_monotone = run.monotone;
    probe.learning_rate_used = rate;
    probe.train_accuracy = probe.accuracy(train)?;
    Ok(probe)
}

pub fn evaluate_probe(model: &LinearProbe, test: &ProbeSet) -> Result<ProbeResult> {
    if test.features.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "probe expects {} features, test set has {}",
            model.dim(),
            test.features.dim()
        )));
    }
    Ok(ProbeResult {
        accuracy: model.accuracy(test)?,
        train_accuracy: model.train_accuracy,
        final_loss: model.final_loss,
        weights_shape: model.weights_shape(),
        test_count: test.len(),
    })
}

/// Split, train and score in one go.
pub fn run_probe(data: &EmbeddingMatrix, labels: &LabelVector, config: &ProbeConfig) -> Result<ProbeResult> {
    let (train, test) = probe_split(data, labels, config)?;
    let model = train_probe(&train, config)?;
    evaluate_probe(&model, &test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn balanced(n_classes: u32, per_class: usize, dim: usize, seed: u64) -> (EmbeddingMatrix, LabelVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * n_classes as usize {
            let c = (i % n_classes as usize) as u32;
            for f in 0..dim {
                let centre = if f == c as usize % dim { 6.0 } else { 0.0 };
                values.push(centre + rng.gen::<f64>() - 0.5);
            }
            labels.push(c);
        }
        (
            EmbeddingMatrix::new(0, labels.len(), dim, values).unwrap(),
            LabelVector::new(labels),
        )
    }

    #[test]
    fn split_matches_the_500_360_protocol() {
        let (data, labels) = balanced(5, 172, 3, 1);
        let cfg = ProbeConfig::default();
        let (train, test) = probe_split(&data, &labels, &cfg).unwrap();
        assert_eq!(train.len(), 500);
        assert_eq!(test.len(), 360);
        for c in 0..5 {
            assert_eq!(train.labels.class_counts()[&c], 100);
            assert_eq!(test.labels.class_counts()[&c], 72);
        }
        let overlap = train.source_rows.iter().filter(|r| test.source_rows.contains(r)).count();
        assert_eq!(overlap, 0);
        let again = probe_split(&data, &labels, &cfg).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);
    }

    #[test]
    fn split_rejects_unsatisfiable_counts() {
        let (data, labels) = balanced(5, 10, 3, 1);
        for (train_count, test_count) in [(0, 10), (10, 3), (40, 20)] {
            let cfg = ProbeConfig {
                train_count,
                test_count,
                ..ProbeConfig::default()
            };
            assert!(matches!(probe_split(&data, &labels, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn imbalanced_split_stays_proportional() {
        let mut labels = vec![0u32; 70];
        labels.extend(vec![1u32; 20]);
        labels.extend(vec![2u32; 10]);
        let data = EmbeddingMatrix::new(0, 100, 1, (0..100).map(f64::from).collect()).unwrap();
        let labels = LabelVector::new(labels);
        let cfg = ProbeConfig {
            train_count: 55,
            test_count: 45,
            ..ProbeConfig::default()
        };
        let (train, test) = probe_split(&data, &labels, &cfg).unwrap();
        for (c, size) in [(0u32, 70.0), (1, 20.0), (2, 10.0)] {
            let tr = train.labels.class_counts()[&c] as f64;
            let te = test.labels.class_counts()[&c] as f64;
            assert!((tr - 55.0 * size / 100.0).abs() <= 1.0);
            assert!((te - 45.0 * size / 100.0).abs() <= 1.0);
        }
    }

    #[test]
    fn one_dimensional_separable() {
        let values: Vec<f64> = (0..100).map(|i| if i < 50 { -1.0 } else { 1.0 }).collect();
        let labels = LabelVector::new((0..100).map(|i| u32::from(i >= 50)).collect());
        let set = ProbeSet::new(EmbeddingMatrix::new(0, 100, 1, values).unwrap(), labels).unwrap();
        let model = train_probe(&set, &ProbeConfig::default()).unwrap();
        assert_eq!(model.train_accuracy, 1.0);
        assert!(model.loss_monotone);
        assert!(model.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_predictor_scores_class_prior() {
        let (data, labels) = balanced(5, 20, 3, 2);
        let test = ProbeSet::new(data, labels).unwrap();
        let model = LinearProbe::from_parameters(
            vec![0, 1, 2, 3, 4],
            3,
            vec![0.0; 15],
            vec![0.0; 5],
            None,
        )
        .unwrap();
        let result = evaluate_probe(&model, &test).unwrap();
        assert_eq!(result.accuracy, 0.2);
    }

    #[test]
    fn evaluate_errors() {
        let model = LinearProbe::from_parameters(vec![0, 1], 2, vec![0.0; 4], vec![0.0; 2], None).unwrap();
        let (data, labels) = balanced(2, 3, 3, 0);
        let wrong_dim = ProbeSet::new(data, labels).unwrap();
        assert!(matches!(evaluate_probe(&model, &wrong_dim), Err(Error::Shape(_))));
        let (data, _) = balanced(2, 3, 2, 0);
        let empty = ProbeSet {
            features: data,
            labels: LabelVector::new(vec![]),
            source_rows: vec![],
        };
        assert!(matches!(evaluate_probe(&model, &empty), Err(Error::Config(_))));
    }

    #[test]
    fn exploding_rate_is_reported() {
        let (data, labels) = balanced(3, 20, 2, 0);
        let set = ProbeSet::new(data, labels).unwrap();
        let cfg = ProbeConfig {
            learning_rate: 1e300,
            standardize: false,
            ..ProbeConfig::default()
        };
        let err = train_probe(&set, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("learning rate"));
    }

    #[test]
    fn scaled_features_give_same_accuracy_when_standardized() {
        let (data, labels) = balanced(5, 172, 6, 3);
        let cfg = ProbeConfig::default();
        let base = run_probe(&data, &labels, &cfg).unwrap();
        let scaled = data.map_rows(|r| r.iter().map(|v| v * 1000.0).collect()).unwrap();
        let big = run_probe(&scaled, &labels, &cfg).unwrap();
        assert!((base.accuracy - big.accuracy).abs() <= 0.01);
        assert!(base.accuracy >= 0.99);
    }
}
