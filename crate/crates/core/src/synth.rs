//! Synthetic reach-grasp-transport sequences with ground-truth segment labels.
//!
//! Image convention: y grows downward, so lifting the hand decreases y.
//! The wrist follows raised-cosine ramps between phase heights; the other
//! landmarks hang off the wrist at fixed offsets that contract while the hand
//! is closed around the object.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_sequence, Segment, Sequence};
use crate::error::{Error, Result};
use crate::ingest::{RawSequence, View, N_LANDMARKS};
use crate::refine::{refine_sequence, ManifestRow, RefineConfig, Refinement};

/// Inclusive frame-count range for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range(pub usize, pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationRanges {
    pub ip: Range,
    pub t: Range,
    pub mtr: Range,
    pub pr: Range,
}

impl Default for DurationRanges {
    fn default() -> Self {
        DurationRanges {
            ip: Range(40, 90),
            t: Range(15, 40),
            mtr: Range(50, 120),
            pr: Range(20, 60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub view: View,
    /// Consecutive sequences share a patient in blocks of this size.
    pub sequences_per_patient: usize,
    pub durations: DurationRanges,
    /// Standard deviation of landmark jitter, in pixels.
    pub noise_sd: f64,
    /// Per-frame probability that a source (hand, object) is undetected.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_sequences: 300,
            view: View::Contralateral,
            sequences_per_patient: 5,
            durations: DurationRanges::default(),
            noise_sd: 2.0,
            missing_rate: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.durations;
        for (name, r) in [("ip", d.ip), ("t", d.t), ("mtr", d.mtr), ("pr", d.pr)] {
            if r.0 == 0 || r.0 > r.1 {
                return Err(Error::Config(format!(
                    "duration range {name} = [{}, {}] must be positive and ordered",
                    r.0, r.1
                )));
            }
        }
        if self.sequences_per_patient == 0 {
            return Err(Error::Config("sequences_per_patient must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing_rate {} outside [0, 1]",
                self.missing_rate
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd {} is invalid", self.noise_sd)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub id: String,
    pub patient_id: String,
    pub raw: RawSequence,
    pub labels: Vec<Segment>,
}

/// Resting offset of each landmark below (+) or above (-) the wrist, in pixels.
const LANDMARK_OFFSETS: [f64; N_LANDMARKS] = [
    0.0, -8.0, -16.0, -24.0, -30.0, -28.0, -40.0, -48.0, -55.0, -30.0, -44.0, -53.0, -60.0,
    -28.0, -41.0, -49.0, -56.0, -24.0, -34.0, -41.0, -47.0,
];

/// Fraction of the resting offset kept while the hand is closed.
const GRASP_CLOSURE: f64 = 0.6;

/// Object center sits this far below the wrist while held.
const OBJECT_BELOW_WRIST: f64 = 20.0;

const PATIENT_STREAM: u64 = 1 << 40;

fn ramp(from: f64, to: f64, k: usize, len: usize) -> f64 {
    let u = (k + 1) as f64 / len as f64;
    from + (to - from) * (1.0 - (PI * u).cos()) / 2.0
}

struct PatientTraits {
    rest_y: f64,
    hand_scale: f64,
}

fn patient_traits(seed: u64, patient: usize) -> PatientTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PATIENT_STREAM + patient as u64);
    PatientTraits {
        rest_y: rng.random_range(390.0..430.0),
        hand_scale: rng.random_range(0.85..1.15),
    }
}

/// Generates `config.n_sequences` sequences. Sequence `i` draws from its own
/// counter-derived stream, so output does not depend on generation order.
pub fn generate(config: &SynthConfig) -> Result<Vec<SyntheticSequence>> {
    config.validate()?;
    (0..config.n_sequences)
        .map(|i| generate_one(config, i))
        .collect()
}

pub fn generate_one(config: &SynthConfig, index: usize) -> Result<SyntheticSequence> {
    let patient = index / config.sequences_per_patient;
    let traits = patient_traits(config.seed, patient);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let d = &config.durations;
    let mut draw = |r: Range| rng.random_range(r.0..=r.1);
    let n_ip = draw(d.ip);
    let n_t = draw(d.t);
    let n_mtr = draw(d.mtr);
    let n_pr = if config.view == View::Top { draw(d.pr) } else { 0 };

    let rest_y = traits.rest_y;
    let object_y = rest_y - rng.random_range(60.0..100.0);
    let shelf_y = object_y - rng.random_range(100.0..160.0);
    let withdraw_y = shelf_y + rng.random_range(40.0..80.0);

    // Wrist height, finger closure, and object height per frame.
    let total = n_ip + n_t + n_mtr + n_pr;
    let mut wrist = Vec::with_capacity(total);
    let mut closure = Vec::with_capacity(total);
    let mut object = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let object_rest = object_y + OBJECT_BELOW_WRIST;
    for k in 0..n_ip {
        wrist.push(ramp(rest_y, object_y, k, n_ip));
        closure.push(1.0);
        object.push(object_rest);
        labels.push(Segment::IP);
    }
    for k in 0..n_t {
        wrist.push(object_y);
        closure.push(ramp(1.0, GRASP_CLOSURE, k, n_t));
        object.push(object_rest);
        labels.push(Segment::T);
    }
    for k in 0..n_mtr {
        let y = ramp(object_y, shelf_y, k, n_mtr);
        wrist.push(y);
        closure.push(GRASP_CLOSURE);
        object.push(y + OBJECT_BELOW_WRIST);
        labels.push(Segment::MTR);
    }
    let hold = n_pr / 2;
    for k in 0..n_pr {
        if k < hold {
            wrist.push(shelf_y);
            closure.push(ramp(GRASP_CLOSURE, 1.0, k, hold.max(1)));
        } else {
            wrist.push(ramp(shelf_y, withdraw_y, k - hold, n_pr - hold));
            closure.push(1.0);
        }
        object.push(shelf_y + OBJECT_BELOW_WRIST);
        labels.push(Segment::PR);
    }

    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let view = config.view;
    let c = view.n_channels();
    let mut values = Vec::with_capacity(total * c);
    for f in 0..total {
        let hand_missing = rng.random::<f64>() < config.missing_rate;
        for offset in LANDMARK_OFFSETS.iter() {
            let jitter = noise.sample(&mut rng);
            let y = wrist[f] + offset * traits.hand_scale * closure[f] + jitter;
            values.push((!hand_missing).then_some(y));
        }
        if view.has_object_channel() {
            let object_missing = rng.random::<f64>() < config.missing_rate;
            values.push((!object_missing).then_some(object[f]));
        }
    }

    Ok(SyntheticSequence {
        id: format!("seq{index:05}"),
        patient_id: format!("patient{patient:03}"),
        raw: RawSequence::new(view, total, values)?,
        labels,
    })
}

/// Refined, standardized training set built from synthetic sequences.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub sequences: Vec<Sequence>,
    /// One row per generated sequence, accepted or not.
    pub manifest: Vec<ManifestRow>,
}

/// Generates, refines and standardizes a dataset in one step.
pub fn synthesize_dataset(config: &SynthConfig, refine: &RefineConfig) -> Result<SyntheticDataset> {
    let mut sequences = Vec::new();
    let mut manifest = Vec::new();
    for s in generate(config)? {
        match refine_sequence(&s.raw, refine)? {
            Refinement::Accepted(refined) => {
                let fr = crate::refine::missing_fraction(&s.raw);
                manifest.push(ManifestRow::new(&s.id, fr, true));
                sequences.push(build_sequence(&s.id, &s.patient_id, &refined, &s.labels)?);
            }
            Refinement::Rejected(fr) => manifest.push(ManifestRow::new(&s.id, fr, false)),
        }
    }
    Ok(SyntheticDataset { sequences, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::{accept, missing_fraction, RefineConfig};

    fn noiseless(view: View) -> SynthConfig {
        SynthConfig {
            n_sequences: 6,
            view,
            noise_sd: 0.0,
            missing_rate: 0.0,
            ..SynthConfig::default()
        }
    }

    fn runs(labels: &[Segment]) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for &l in labels {
            if out.last() != Some(&l) {
                out.push(l);
            }
        }
        out
    }

    #[test]
    fn phase_order_per_view() {
        for view in View::ALL {
            for s in generate(&noiseless(view)).unwrap() {
                let expected: Vec<Segment> = if view == View::Top {
                    Segment::ALL.to_vec()
                } else {
                    vec![Segment::IP, Segment::T, Segment::MTR]
                };
                assert_eq!(runs(&s.labels), expected);
                assert_eq!(s.raw.n_frames(), s.labels.len());
                assert_eq!(s.raw.n_channels(), view.n_channels());
            }
        }
    }

    #[test]
    fn noiseless_sequences_are_complete_and_smooth() {
        for s in generate(&noiseless(View::Top)).unwrap() {
            assert_eq!(s.raw.missing_count(), 0);
            let wrist = s.raw.channel(0);
            for w in wrist.windows(2) {
                let step = (w[1].unwrap() - w[0].unwrap()).abs();
                assert!(step < 10.0, "jump of {step} px");
            }
        }
    }

    #[test]
    fn durations_within_ranges() {
        let d = DurationRanges::default();
        for s in generate(&noiseless(View::Top)).unwrap() {
            let count = |seg| s.labels.iter().filter(|&&l| l == seg).count();
            assert!((d.ip.0..=d.ip.1).contains(&count(Segment::IP)));
            assert!((d.t.0..=d.t.1).contains(&count(Segment::T)));
            assert!((d.mtr.0..=d.mtr.1).contains(&count(Segment::MTR)));
            assert!((d.pr.0..=d.pr.1).contains(&count(Segment::PR)));
        }
    }

    #[test]
    fn object_constant_until_lift() {
        let cfg = SynthConfig {
            noise_sd: 2.0,
            ..noiseless(View::Contralateral)
        };
        for s in generate(&cfg).unwrap() {
            let first_mtr = s.labels.iter().position(|&l| l == Segment::MTR).unwrap();
            let obj = s.raw.channel(N_LANDMARKS);
            assert!(obj[..first_mtr].iter().all(|&v| v == obj[0]));
            assert_ne!(obj[first_mtr + 5], obj[0]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_sequences: 8,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn patients_assigned_in_blocks() {
        let cfg = SynthConfig {
            n_sequences: 12,
            sequences_per_patient: 5,
            ..SynthConfig::default()
        };
        let ids: Vec<String> = generate(&cfg).unwrap().into_iter().map(|s| s.patient_id).collect();
        assert!(ids[..5].iter().all(|p| p == "patient000"));
        assert!(ids[5..10].iter().all(|p| p == "patient001"));
        assert_eq!(ids[10], "patient002");
    }

    #[test]
    fn half_missing_rejects_most_sequences() {
        let cfg = SynthConfig {
            n_sequences: 40,
            missing_rate: 0.5,
            ..SynthConfig::default()
        };
        let refine = RefineConfig::default();
        let rejected = generate(&cfg)
            .unwrap()
            .iter()
            .filter(|s| !accept(missing_fraction(&s.raw), &refine))
            .count();
        assert!(rejected > 20, "only {rejected} of 40 rejected");
    }

    #[test]
    fn default_missing_rate_keeps_most_sequences() {
        let cfg = SynthConfig {
            n_sequences: 40,
            ..SynthConfig::default()
        };
        let refine = RefineConfig::default();
        let kept = generate(&cfg)
            .unwrap()
            .iter()
            .filter(|s| accept(missing_fraction(&s.raw), &refine))
            .count();
        assert_eq!(kept, 40);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.durations.t = Range(10, 5);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
