//! Random exponential tilts and random deletions of a measure.
//!
//! Both transforms only reweight atoms. Atoms keep their slots (a deleted
//! atom carries weight zero), so overlaps and labels stay aligned between a
//! measure and its transforms.

use rand::Rng;
use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::measure::{MeasureSample, WeightVector};
use crate::stats::CompensatedSum;

/// Fresh retention vectors tried after a deletion that keeps no mass.
pub const MAX_DELETION_RETRIES: usize = 100;

/// Per-atom signs, each exactly -1 or +1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return usage("signs must be exactly +1 or -1");
        }
        Ok(Self(signs))
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The coupled retention `eta = (eps + 1) / 2`.
    pub fn retention(&self) -> RetentionVector {
        RetentionVector {
            keep: self.0.iter().map(|&s| u8::from(s == 1)).collect(),
            exponent: 1,
        }
    }
}

/// Per-atom keep indicators; each atom is kept with probability 2^-exponent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetentionVector {
    keep: Vec<u8>,
    exponent: u32,
}

impl RetentionVector {
    pub fn new(keep: Vec<u8>, exponent: u32) -> Result<Self> {
        if keep.iter().any(|&k| k > 1) {
            return usage("retention indicators must be 0 or 1");
        }
        if exponent == 0 {
            return usage("retention exponent must be >= 1");
        }
        Ok(Self { keep, exponent })
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.keep
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Independent fair signs, 64 per generator word.
pub fn draw_signs<R: Rng + ?Sized>(atoms: usize, rng: &mut R) -> SignVector {
    let mut signs = Vec::with_capacity(atoms);
    while signs.len() < atoms {
        let bits = rng.next_u64();
        let take = (atoms - signs.len()).min(64);
        signs.extend((0..take).map(|b| if bits >> b & 1 == 1 { 1 } else { -1 }));
    }
    SignVector(signs)
}

pub fn draw_retention<R: Rng + ?Sized>(atoms: usize, exponent: u32, rng: &mut R) -> Result<RetentionVector> {
    if exponent == 0 || exponent > 63 {
        return usage(format!("retention exponent must lie in 1..=63, got {exponent}"));
    }
    // an atom survives when `exponent` fair bits are all ones
    let per_word = 64 / exponent as usize;
    let mask = (1u64 << exponent) - 1;
    let mut keep = Vec::with_capacity(atoms);
    while keep.len() < atoms {
        let bits = rng.next_u64();
        let take = (atoms - keep.len()).min(per_word);
        keep.extend((0..take).map(|i| u8::from(bits >> (i * exponent as usize) & mask == mask)));
    }
    Ok(RetentionVector { keep, exponent })
}

/// `w_t(a) = w(a) exp(t eps_a) / sum_g w(g) exp(t eps_g)`. The largest
/// exponent among atoms with mass is factored out before exponentiating.
pub fn tilt(sample: &MeasureSample, t: f64, eps: &SignVector) -> Result<MeasureSample> {
    let w = sample.weights().as_slice();
    if eps.len() != w.len() {
        return usage(format!("sign vector has {} entries for {} atoms", eps.len(), w.len()));
    }
    if !t.is_finite() {
        return usage("tilt parameter must be finite");
    }
    if t == 0.0 {
        return Ok(sample.clone());
    }
    let shift = w
        .iter()
        .zip(eps.as_slice())
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(_, &e)| t * e as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = w
        .iter()
        .zip(eps.as_slice())
        .map(|(&wi, &e)| wi * (t * e as f64 - shift).exp())
        .collect();
    let total: CompensatedSum = raw.iter().copied().collect();
    let total = total.value();
    let weights = raw.into_iter().map(|x| x / total).collect();
    sample.with_weights(WeightVector::from_normalized(weights))
}

/// `w'(a) = w(a) eta_a / sum_g w(g) eta_g`.
pub fn delete(sample: &MeasureSample, eta: &RetentionVector) -> Result<MeasureSample> {
    let w = sample.weights().as_slice();
    if eta.len() != w.len() {
        return usage(format!("retention vector has {} entries for {} atoms", eta.len(), w.len()));
    }
    let kept: CompensatedSum = w
        .iter()
        .zip(eta.as_slice())
        .map(|(&wi, &k)| if k == 1 { wi } else { 0.0 })
        .collect();
    let kept = kept.value();
    if kept <= 0.0 {
        return Err(Error::DegenerateDeletion { attempts: 1 });
    }
    let weights = w
        .iter()
        .zip(eta.as_slice())
        .map(|(&wi, &k)| if k == 1 { wi / kept } else { 0.0 })
        .collect();
    sample.with_weights(WeightVector::from_normalized(weights))
}

/// A deleted measure and the number of degenerate retention draws that were
/// discarded on the way.
#[derive(Debug, Clone)]
pub struct Deletion {
    pub sample: MeasureSample,
    pub retries: usize,
}

fn delete_with_retry<R: Rng + ?Sized>(sample: &MeasureSample, exponent: u32, rng: &mut R) -> Result<Deletion> {
    for attempt in 0..=MAX_DELETION_RETRIES {
        let eta = draw_retention(sample.atoms(), exponent, rng)?;
        match delete(sample, &eta) {
            Ok(out) => {
                return Ok(Deletion {
                    sample: out,
                    retries: attempt,
                })
            }
            Err(Error::DegenerateDeletion { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateDeletion {
        attempts: MAX_DELETION_RETRIES + 1,
    })
}

/// `s` successive fair deletions, each redrawn on a degenerate outcome.
pub fn iterated_delete<R: Rng + ?Sized>(sample: &MeasureSample, s: u32, rng: &mut R) -> Result<Deletion> {
    if s == 0 {
        return usage("deletion count s must be >= 1");
    }
    let mut current = sample.clone();
    let mut retries = 0;
    for _ in 0..s {
        let step = delete_with_retry(&current, 1, rng)?;
        retries += step.retries;
        current = step.sample;
    }
    Ok(Deletion {
        sample: current,
        retries,
    })
}

/// One deletion with retention probability 2^-s.
pub fn single_shot_delete<R: Rng + ?Sized>(sample: &MeasureSample, s: u32, rng: &mut R) -> Result<Deletion> {
    if s == 0 {
        return usage("deletion count s must be >= 1");
    }
    delete_with_retry(sample, s, rng)
}

/// Mass of the atoms kept by `eta`.
pub fn retained_mass(sample: &MeasureSample, eta: &RetentionVector) -> f64 {
    sample
        .weights()
        .as_slice()
        .iter()
        .zip(eta.as_slice())
        .filter(|(_, &k)| k == 1)
        .map(|(w, _)| *w)
        .collect::<CompensatedSum>()
        .value()
}
