//! Differentially private local training of one client.
//!
//! Each iteration Poisson-samples a batch, clips every per-sample gradient
//! to norm `C`, adds one Gaussian vector `N(0, σ²C² I)` to the clipped sum
//! and takes a step of size `η` on the batch average.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{l2_norm, per_sample_gradient, LabeledSample, ModelSpec, ParamVector};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpsgdHyper {
    pub learning_rate: f64,
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
}

impl DpsgdHyper {
    pub fn new(
        learning_rate: f64,
        clip_bound: f64,
        noise_multiplier: f64,
        sampling_rate: f64,
    ) -> Result<Self> {
        let h = Self {
            learning_rate,
            clip_bound,
            noise_multiplier,
            sampling_rate,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(Error::invalid(format!(
                "clip bound must be positive, got {}",
                self.clip_bound
            )));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "noise multiplier must be non-negative, got {}",
                self.noise_multiplier
            )));
        }
        check_rate(self.sampling_rate)
    }

    /// `false` for σ = 0, the non-private diagnostic mode.
    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0
    }
}

fn check_rate(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "sampling rate must be in (0, 1], got {q}"
        )))
    }
}

/// Poisson subsampling: every index is kept independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(
    dataset_size: usize,
    q: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_rate(q)?;
    if q == 1.0 {
        return Ok((0..dataset_size).collect());
    }
    Ok((0..dataset_size).filter(|_| rng.gen_bool(q)).collect())
}

/// Rescales `grad` onto the ball of radius `c` when it lies outside.
///
/// The computed norm of the result never exceeds `c`, which makes the
/// operation idempotent bit-for-bit.
pub fn clip(grad: &ParamVector, c: f64) -> ParamVector {
    let norm = grad.norm();
    if norm <= c {
        return grad.clone();
    }
    let mut factor = norm / c;
    loop {
        let out: Vec<f64> = grad.as_slice().iter().map(|g| g / factor).collect();
        if l2_norm(&out) <= c {
            return ParamVector::from_raw(out);
        }
        factor *= 1.0 + f64::EPSILON;
    }
}

/// Sum of clipped gradients plus one draw of `N(0, σ²C² I_d)`.
///
/// No random numbers are consumed when `sigma` is zero.
pub fn noisy_batch_sum<R: Rng + ?Sized>(
    dim: usize,
    clipped: &[ParamVector],
    sigma: f64,
    c: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    let mut sum = vec![0.0; dim];
    for g in clipped {
        Error::check_len("clipped gradient", dim, g.len())?;
        for (acc, v) in sum.iter_mut().zip(g.as_slice()) {
            *acc += v;
        }
    }
    if sigma > 0.0 {
        let std = sigma * c;
        for acc in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *acc += std * z;
        }
    }
    Ok(ParamVector::from_raw(sum))
}

/// `params - η · noisy_sum / |B|`; an empty batch leaves `params` untouched.
pub fn local_step(
    params: &ParamVector,
    noisy_sum: &ParamVector,
    batch_size: usize,
    eta: f64,
) -> ParamVector {
    if batch_size == 0 {
        return params.clone();
    }
    let scale = eta / batch_size as f64;
    ParamVector::from_raw(
        params
            .as_slice()
            .iter()
            .zip(noisy_sum.as_slice())
            .map(|(w, g)| w - scale * g)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutput {
    pub params: ParamVector,
    pub iterations: u64,
    /// Iterations whose Poisson batch was empty (update skipped).
    pub empty_batches: u64,
}

/// One DPSGD iteration. The stream's iteration index selects its randomness.
pub fn dpsgd_iteration(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[LabeledSample],
    hyper: &DpsgdHyper,
    stream: RngStream,
) -> Result<(ParamVector, usize)> {
    let mut rng = stream.rng();
    let batch = poisson_sample(samples.len(), hyper.sampling_rate, &mut rng)?;
    let clipped = batch
        .iter()
        .map(|&i| {
            Ok(clip(
                &per_sample_gradient(spec, params, &samples[i])?,
                hyper.clip_bound,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let noisy = noisy_batch_sum(
        spec.dimension(),
        &clipped,
        hyper.noise_multiplier,
        hyper.clip_bound,
        &mut rng,
    )?;
    Ok((
        local_step(params, &noisy, batch.len(), hyper.learning_rate),
        batch.len(),
    ))
}

/// Runs exactly `tau` DPSGD iterations starting from `params`.
///
/// Iteration `j` (0-based) draws from `start.at_iteration(start.iteration + j)`.
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[LabeledSample],
    tau: u64,
    hyper: &DpsgdHyper,
    start: RngStream,
) -> Result<LocalTrainOutput> {
    if tau == 0 {
        return Err(Error::invalid("local iteration count must be at least 1"));
    }
    Error::check_len("parameters", spec.dimension(), params.len())?;
    let mut w = params.clone();
    let mut empty_batches = 0;
    for j in 0..tau {
        let (next, batch) = dpsgd_iteration(
            spec,
            &w,
            samples,
            hyper,
            start.at_iteration(start.iteration + j),
        )?;
        if batch == 0 {
            empty_batches += 1;
        }
        w = next;
    }
    Ok(LocalTrainOutput {
        params: w,
        iterations: tau,
        empty_batches,
    })
}
