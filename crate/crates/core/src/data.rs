//! Datasets, synthetic generation, CSV ingestion and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::LabeledSample;
use crate::rng::purpose_rng;

const PURPOSE_SYNTHETIC: u64 = 1;
const PURPOSE_SPLIT: u64 = 2;
const PURPOSE_PARTITION: u64 = 3;

/// Maximum Dirichlet redraws before the move-one repair kicks in.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_features: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize) -> Result<Self> {
        let num_features = samples.first().ok_or(Error::EmptyDataset)?.features.len();
        for s in &samples {
            Error::check_len("sample features", num_features, s.features.len())?;
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    num_classes,
                });
            }
        }
        Ok(Self {
            samples,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Holds out `test_fraction` of the samples (rounded down) after a
    /// seeded shuffle. Returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!(
                "test fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut purpose_rng(seed, PURPOSE_SPLIT));
        let n_test = (self.len() as f64 * test_fraction).floor() as usize;
        let pick = |ids: &[usize]| Dataset {
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        };
        Ok((pick(&idx[n_test..]), pick(&idx[..n_test])))
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub samples: Vec<LabeledSample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Gaussian blobs with unit covariance, one per class.
///
/// Class means sit on the vertices of a regular simplex scaled by
/// `separation` (`separation · e_k`) when there are at least as many
/// features as classes. With fewer features the means are spread evenly on
/// a circle of radius `separation` in the first two coordinates, or on a
/// line for a single feature. Samples are emitted class by class.
pub fn generate_synthetic(
    num_classes: usize,
    num_features: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_features == 0 || samples_per_class == 0 {
        return Err(Error::invalid(
            "class, feature and sample counts must be at least 1",
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            let mut m = vec![0.0; num_features];
            if num_features >= num_classes {
                m[k] = separation;
            } else if num_features == 1 {
                m[0] = separation * k as f64;
            } else {
                let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
                m[0] = separation * angle.cos();
                m[1] = separation * angle.sin();
            }
            m
        })
        .collect();
    let mut rng = purpose_rng(seed, PURPOSE_SYNTHETIC);
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + z
                })
                .collect();
            samples.push(LabeledSample { features, label });
        }
    }
    Dataset::new(samples, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

/// Splits `dataset` across clients.
///
/// IID shuffles and deals equal shares, the first `n mod N` clients taking
/// one extra sample. Dirichlet draws one `Dir(β)` vector over clients per
/// class and cuts that class's (shuffled) samples by its cumulative
/// proportions. A Dirichlet draw that leaves a client empty is redrawn up
/// to 100 times; after that each empty client receives one sample moved
/// from the currently largest client.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let n = spec.num_clients;
    if n == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if dataset.len() < n {
        return Err(Error::invalid(format!(
            "dataset has {} samples, fewer than {n} clients",
            dataset.len()
        )));
    }
    let mut rng = purpose_rng(spec.seed, PURPOSE_PARTITION);
    let assignment: Vec<Vec<usize>> = match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (dataset.len() / n, dataset.len() % n);
            let mut out = Vec::with_capacity(n);
            let mut start = 0;
            for i in 0..n {
                let len = base + usize::from(i < extra);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            out
        }
        PartitionScheme::Dirichlet { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::invalid(format!(
                    "dirichlet beta must be positive, got {beta}"
                )));
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
            for (i, s) in dataset.samples.iter().enumerate() {
                by_class[s.label].push(i);
            }
            let mut attempt = 0;
            loop {
                let out = dirichlet_assignment(&by_class, n, beta, &mut rng)?;
                attempt += 1;
                if out.iter().all(|c| !c.is_empty()) || attempt >= MAX_REDRAWS {
                    break repair_empty(out);
                }
            }
        }
    };
    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(id, ids)| ClientDataset {
            id,
            samples: ids
                .into_iter()
                .map(|i| dataset.samples[i].clone())
                .collect(),
        })
        .collect())
}

fn dirichlet_assignment<R: Rng + ?Sized>(
    by_class: &[Vec<usize>],
    n: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); n];
    for class in by_class {
        let mut idx = class.clone();
        idx.shuffle(rng);
        let p = sample_dirichlet(beta, n, rng)?;
        let mut cum = 0.0;
        let mut start = 0;
        for (i, pi) in p.iter().enumerate() {
            cum += pi;
            let end = if i + 1 == n {
                idx.len()
            } else {
                ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
            };
            out[i].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for ids in &mut out {
        ids.sort_unstable();
    }
    Ok(out)
}

fn repair_empty(mut out: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    while let Some(empty) = out.iter().position(|c| c.is_empty()) {
        let largest = (0..out.len())
            .max_by_key(|&i| (out[i].len(), std::cmp::Reverse(i)))
            .unwrap();
        let moved = out[largest]
            .pop()
            .expect("dataset has at least as many samples as clients");
        out[empty].push(moved);
    }
    out
}

/// Symmetric `Dir(β)` draw of length `n`.
///
/// Small concentrations underflow plain Gamma draws, so each component is
/// sampled in log space as `ln G + ln(U)/β` with `G ~ Gamma(β + 1)`,
/// `U ~ Uniform(0, 1)`, then normalized with log-sum-exp.
pub fn sample_dirichlet<R: Rng + ?Sized>(beta: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta + 1.0, 1.0)
        .map_err(|e| Error::invalid(format!("gamma({}): {e}", beta + 1.0)))?;
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / beta
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    Ok(logs.iter().map(|l| (l - m).exp() / total).collect())
}

/// `p_i = |D_i| / |D|`.
pub fn client_weights(clients: &[ClientDataset]) -> Result<Vec<f64>> {
    let total: usize = clients.iter().map(ClientDataset::len).sum();
    if clients.is_empty() || total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(clients
        .iter()
        .map(|c| c.len() as f64 / total as f64)
        .collect())
}

/// Reads `label,f1,f2,...` rows. Lines starting with `#` are skipped, the
/// feature width is fixed by the first row, and labels must be below
/// `num_classes` when given (otherwise the class count is `max label + 1`).
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(
                line,
                "expected a label and at least one feature".into(),
            ));
        }
        let w = record.len() - 1;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(
                    line,
                    format!("expected {expected} features, found {w}"),
                ));
            }
            Some(_) => {}
        }
        let label: usize = record[0].parse().map_err(|_| {
            parse_err(
                line,
                format!("label {:?} is not a non-negative integer", &record[0]),
            )
        })?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(parse_err(
                    line,
                    format!("label {label} out of range for {k} classes"),
                ));
            }
        }
        let features = record
            .iter()
            .skip(1)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(
                    line,
                    format!("feature {f:?} is not a finite number"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(LabeledSample { features, label });
    }
    if samples.is_empty() {
        return Err(parse_err(1, "no samples".into()));
    }
    let k = num_classes.unwrap_or_else(|| samples.iter().map(|s| s.label).max().unwrap_or(0) + 1);
    Dataset::new(samples, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpsgd::{local_train, DpsgdHyper};
    use crate::model::{accuracy, ModelSpec, ParamVector};
    use crate::rng::RngStream;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let d = generate_synthetic(2, 3, 100, 2.0, 9).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.samples.iter().filter(|s| s.label == 0).count(), 100);
        assert_eq!(d, generate_synthetic(2, 3, 100, 2.0, 9).unwrap());
        assert_ne!(d, generate_synthetic(2, 3, 100, 2.0, 10).unwrap());
        assert!(generate_synthetic(2, 3, 100, 0.0, 9).is_err());
    }

    #[test]
    fn few_features_still_separate_means() {
        let d = generate_synthetic(5, 2, 50, 8.0, 1).unwrap();
        let mean = |k: usize| {
            let xs: Vec<&LabeledSample> = d.samples.iter().filter(|s| s.label == k).collect();
            let n = xs.len() as f64;
            (
                xs.iter().map(|s| s.features[0]).sum::<f64>() / n,
                xs.iter().map(|s| s.features[1]).sum::<f64>() / n,
            )
        };
        let (a, b) = (mean(0), mean(1));
        assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() > 3.0);
    }

    #[test]
    fn well_separated_blobs_are_learnable() {
        let d = generate_synthetic(4, 6, 100, 10.0, 4).unwrap();
        let spec = ModelSpec::softmax(6, 4);
        let hyper = DpsgdHyper::new(0.1, 1e9, 0.0, 1.0).unwrap();
        let out = local_train(
            &spec,
            &ParamVector::zeros(spec.dimension()),
            &d.samples,
            100,
            &hyper,
            RngStream::new(0, 0, 0),
        )
        .unwrap();
        assert!(accuracy(&spec, &out.params, &d.samples).unwrap() >= 0.99);
    }

    #[test]
    fn split_holds_out_a_fifth() {
        let d = generate_synthetic(2, 2, 50, 2.0, 1).unwrap();
        let (train, test) = d.split(0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!((train.clone(), test.clone()), d.split(0.2, 3).unwrap());
    }

    fn sorted_keys(samples: impl Iterator<Item = LabeledSample>) -> Vec<(usize, Vec<u64>)> {
        let mut v: Vec<(usize, Vec<u64>)> = samples
            .map(|s| (s.label, s.features.iter().map(|f| f.to_bits()).collect()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn iid_partition_is_balanced() {
        let d = generate_synthetic(3, 2, 11, 2.0, 1).unwrap();
        let parts = partition(
            &d,
            &PartitionSpec {
                scheme: PartitionScheme::Iid,
                num_clients: 4,
                seed: 5,
            },
        )
        .unwrap();
        let sizes: Vec<usize> = parts.iter().map(ClientDataset::len).collect();
        assert_eq!(sizes, vec![9, 8, 8, 8]);
        assert_eq!(
            sorted_keys(parts.into_iter().flat_map(|c| c.samples)),
            sorted_keys(d.samples.into_iter())
        );
    }

    #[test]
    fn dirichlet_conserves_and_fills_every_client() {
        let d = generate_synthetic(4, 3, 30, 2.0, 2).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::Dirichlet { beta: 0.05 },
            num_clients: 10,
            seed: 8,
        };
        let parts = partition(&d, &spec).unwrap();
        assert!(parts.iter().all(|c| !c.is_empty()));
        assert_eq!(parts.iter().map(ClientDataset::len).sum::<usize>(), d.len());
        assert_eq!(parts, partition(&d, &spec).unwrap());
        assert_eq!(
            sorted_keys(parts.into_iter().flat_map(|c| c.samples)),
            sorted_keys(d.samples.into_iter())
        );
    }

    #[test]
    fn partition_needs_enough_samples() {
        let d = generate_synthetic(2, 2, 2, 1.0, 0).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::Iid,
            num_clients: 5,
            seed: 0,
        };
        assert!(partition(&d, &spec).is_err());
    }

    #[test]
    fn repair_moves_from_largest() {
        let out = repair_empty(vec![vec![0, 1, 2], vec![], vec![3], vec![]]);
        assert!(out.iter().all(|c| !c.is_empty()));
        assert_eq!(out.iter().map(Vec::len).sum::<usize>(), 4);
    }

    #[test]
    fn dirichlet_draws_are_on_the_simplex() {
        let mut rng = purpose_rng(0, 0);
        for beta in [0.01, 0.05, 1.0, 1000.0] {
            let p = sample_dirichlet(beta, 10, &mut rng).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn weights_examples() {
        let mk = |sizes: &[usize]| -> Vec<ClientDataset> {
            sizes
                .iter()
                .enumerate()
                .map(|(id, &n)| ClientDataset {
                    id,
                    samples: vec![LabeledSample::new(vec![0.0], 0); n],
                })
                .collect()
        };
        assert_eq!(client_weights(&mk(&[100, 100])).unwrap(), vec![0.5, 0.5]);
        let w = client_weights(&mk(&[200, 600, 200])).unwrap();
        assert_eq!(w, vec![0.2, 0.6, 0.2]);
        assert_eq!(client_weights(&mk(&[7])).unwrap(), vec![1.0]);
        assert!(client_weights(&[]).is_err());
    }

    #[test]
    fn csv_rows_parse() {
        let f = write_tmp("# label,f1,f2\n1,0.5,0.25\n0,-1,2e-3\n");
        let d = load_csv(f.path(), None).unwrap();
        assert_eq!(d.samples[0], LabeledSample::new(vec![0.5, 0.25], 1));
        assert_eq!(d.samples[1], LabeledSample::new(vec![-1.0, 0.002], 0));
        assert_eq!((d.num_features, d.num_classes), (2, 2));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let empty = write_tmp("");
        assert!(load_csv(empty.path(), None).is_err());

        let ragged = write_tmp("1,0.5,0.25\n0,1,2,3\n");
        match load_csv(ragged.path(), None) {
            Err(Error::Parse {
                line: 2, message, ..
            }) => assert!(message.contains("expected 2 features")),
            other => panic!("unexpected {other:?}"),
        }

        let bad_num = write_tmp("1,0.5\n0,abc\n");
        assert!(matches!(
            load_csv(bad_num.path(), None),
            Err(Error::Parse { line: 2, .. })
        ));

        let bad_label = write_tmp("1,0.5\n3,0.1\n");
        assert!(matches!(
            load_csv(bad_label.path(), Some(3)),
            Err(Error::Parse { line: 2, .. })
        ));
        let neg_label = write_tmp("-1,0.5\n");
        assert!(matches!(
            load_csv(neg_label.path(), None),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
