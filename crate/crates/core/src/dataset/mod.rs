//! Labeled cycle data: expert votes, stratified splitting, and a synthetic
//! pressure-cycle generator.
//!
//! A cycle enters the pipeline as a full-resolution [`PressureCycle`], gets
//! cropped to the combustion window, and is paired with five binary expert
//! votes. All derived labels (vote sum, scaled probability, binary class)
//! are computed from the votes at construction time so they can never drift
//! apart.

mod io;
mod synth;

pub use io::{
    load_cycles, load_labels, load_raw_cycles, load_synthetic_config, save_cycles, save_labels,
};
pub(crate) use io::{atomic_write, parse_err, parse_num};
pub use synth::{synthesize_cycles, synthesize_dataset};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KnockError, Result};
use crate::signal::{AnalysisWindow, EngineGeometry};

/// Five independent binary knock votes for one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertVotes(pub [u8; 5]);

impl ExpertVotes {
    /// Every vote must be 0 or 1.
    pub fn new(votes: [u8; 5]) -> Result<Self> {
        if votes.iter().any(|&v| v > 1) {
            return Err(KnockError::Domain(format!(
                "expert votes must be 0 or 1, got {:?}",
                votes
            )));
        }
        Ok(Self(votes))
    }

    /// Number of knock votes, 0..=5.
    pub fn sum(&self) -> u8 {
        self.0.iter().sum()
    }
}

/// Majority-vote binary class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryLabel {
    Normal,
    Knocking,
}

/// Derives all three label views from raw votes.
///
/// Returns `(relative, scaled, binary)`: the vote sum, the sum divided by
/// five, and `Knocking` iff at least three experts voted knock.
pub fn labels_from_votes(votes: ExpertVotes) -> (u8, f64, BinaryLabel) {
    let relative = votes.sum();
    let scaled = f64::from(relative) / 5.0;
    let binary = if relative >= 3 {
        BinaryLabel::Knocking
    } else {
        BinaryLabel::Normal
    };
    (relative, scaled, binary)
}

/// Maps a probability in [0, 1] to one of six intensity classes.
///
/// The bins are half-open, `[0, 0.1)`, `[0.1, 0.3)`, `[0.3, 0.5)`,
/// `[0.5, 0.7)`, `[0.7, 0.9)`, with the last bin closed at 1.0, so a class
/// boundary always belongs to the higher class.
pub fn probability_to_class(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(KnockError::Domain(format!(
            "probability {} outside [0, 1]",
            p
        )));
    }
    Ok(match p {
        p if p < 0.1 => 0,
        p if p < 0.3 => 1,
        p if p < 0.5 => 2,
        p if p < 0.7 => 3,
        p if p < 0.9 => 4,
        _ => 5,
    })
}

/// One combustion window together with its expert votes and derived labels.
#[derive(Debug, Clone)]
pub struct LabeledCycle {
    pub cycle_id: String,
    pub window: AnalysisWindow,
    pub votes: ExpertVotes,
    /// Vote sum, 0..=5.
    pub relative_label: u8,
    /// Vote sum / 5.
    pub scaled_label: f64,
    pub binary_label: BinaryLabel,
    /// Opaque grouping key for stratified splitting (operating point,
    /// measurement campaign, generator batch, whatever the source defines).
    pub subset_tag: String,
}

impl LabeledCycle {
    /// Labels are always recomputed from the votes here; there is no way to
    /// construct a cycle whose stored labels disagree with them.
    pub fn new(
        cycle_id: impl Into<String>,
        window: AnalysisWindow,
        votes: ExpertVotes,
        subset_tag: impl Into<String>,
    ) -> Self {
        let (relative_label, scaled_label, binary_label) = labels_from_votes(votes);
        Self {
            cycle_id: cycle_id.into(),
            window,
            votes,
            relative_label,
            scaled_label,
            binary_label,
            subset_tag: subset_tag.into(),
        }
    }
}

/// Per-subset train fractions plus the shuffle seed.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    /// subset_tag -> fraction of that subset's cycles that go to training.
    pub fractions: BTreeMap<String, f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: BTreeMap<String, f64>, seed: u64) -> Result<Self> {
        for (tag, &f) in &fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(KnockError::Domain(format!(
                    "train fraction {} for subset {:?} outside [0, 1]",
                    f, tag
                )));
            }
        }
        Ok(Self { fractions, seed })
    }

    /// Same fraction for every listed subset.
    pub fn uniform<I, S>(tags: I, fraction: f64, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let fractions = tags.into_iter().map(|t| (t.into(), fraction)).collect();
        Self::new(fractions, seed)
    }
}

/// Splits cycles into (train, test), stratified by subset tag and binary label.
///
/// Within each subset the knocking and normal pools are shuffled separately
/// with a deterministic RNG and the first `floor(fraction * pool)` cycles of
/// each pool go to training, so the binary class ratio of every subset is
/// preserved on both sides up to one cycle per pool. Cycles whose tag is not
/// named in the spec are a configuration error.
pub fn stratified_split(
    cycles: &[LabeledCycle],
    spec: &SplitSpec,
) -> Result<(Vec<LabeledCycle>, Vec<LabeledCycle>)> {
    // tag -> (knocking indices, normal indices), tags iterated in sorted order
    let mut pools: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, c) in cycles.iter().enumerate() {
        if !spec.fractions.contains_key(&c.subset_tag) {
            return Err(KnockError::Domain(format!(
                "cycle {:?} has subset tag {:?} with no train fraction",
                c.cycle_id, c.subset_tag
            )));
        }
        let entry = pools.entry(&c.subset_tag).or_default();
        match c.binary_label {
            BinaryLabel::Knocking => entry.0.push(i),
            BinaryLabel::Normal => entry.1.push(i),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (tag, (knocking, normal)) in &mut pools {
        let fraction = spec.fractions[*tag];
        for pool in [knocking, normal] {
            pool.shuffle(&mut rng);
            let n_train = (fraction * pool.len() as f64).floor() as usize;
            train_idx.extend_from_slice(&pool[..n_train]);
            test_idx.extend_from_slice(&pool[n_train..]);
        }
    }
    // Present both sides in original input order; membership is what the
    // shuffle decides, not sequence.
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| cycles[i].clone()).collect();
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// Keeps every knocking cycle of `subset_tag` untouched elsewhere, but only a
/// random `fraction` of that subset's normal cycles.
///
/// This is the class-rebalancing step used when one operating point drowns
/// the knock examples in normal cycles.
pub fn filter_nonknock(
    cycles: &[LabeledCycle],
    subset_tag: &str,
    fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledCycle>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(KnockError::Domain(format!(
            "keep fraction {} outside [0, 1]",
            fraction
        )));
    }
    let mut candidates: Vec<usize> = cycles
        .iter()
        .enumerate()
        .filter(|(_, c)| c.subset_tag == subset_tag && c.binary_label == BinaryLabel::Normal)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let n_keep = (fraction * candidates.len() as f64).floor() as usize;
    let kept: std::collections::BTreeSet<usize> = candidates[..n_keep].iter().copied().collect();

    Ok(cycles
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            c.subset_tag != subset_tag
                || c.binary_label == BinaryLabel::Knocking
                || kept.contains(i)
        })
        .map(|(_, c)| c.clone())
        .collect())
}

/// Everything the synthetic generator needs to produce one labeled batch.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub geometry: EngineGeometry,
    pub n_cycles: usize,
    /// Relative weight of each knock intensity class 0..=5; normalized
    /// internally, so only ratios matter.
    pub class_weights: [f64; 6],
    /// Standard deviation of the additive sensor noise, bar.
    pub noise_level: f64,
    /// Knock onset is drawn uniformly from this range, degrees after TDC.
    pub knock_onset_range: (f64, f64),
    pub seed: u64,
    /// Subset tag stamped on every generated cycle.
    pub source_tag: String,
    /// Scales the whole knock amplitude ladder; 1.0 reproduces the default
    /// severity. Useful for making one synthetic operating point milder or
    /// harsher than another.
    pub knock_amp_scale: f64,
}

impl SyntheticConfig {
    /// Defaults for everything except the bore, which has no sensible default
    /// because it decides the resonance frequencies.
    pub fn new(bore_mm: f64) -> Result<Self> {
        let geometry = EngineGeometry::new(bore_mm);
        geometry.validate()?;
        Ok(Self {
            geometry,
            n_cycles: 1000,
            class_weights: [1.0; 6],
            noise_level: 0.10,
            knock_onset_range: (5.0, 25.0),
            seed: 0,
            source_tag: "synth".to_string(),
            knock_amp_scale: 1.0,
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_cycles == 0 {
            return Err(KnockError::Domain("n_cycles must be positive".to_string()));
        }
        if self.class_weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(KnockError::Domain(format!(
                "class weights must be finite and non-negative, got {:?}",
                self.class_weights
            )));
        }
        if self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(KnockError::Domain(
                "class weights must not all be zero".to_string(),
            ));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(KnockError::Domain(format!(
                "noise level {} must be finite and non-negative",
                self.noise_level
            )));
        }
        let (lo, hi) = self.knock_onset_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 || hi >= crate::signal::WINDOW_DEG
        {
            return Err(KnockError::Domain(format!(
                "knock onset range ({}, {}) must lie inside the analysis window",
                lo, hi
            )));
        }
        if !self.knock_amp_scale.is_finite() || self.knock_amp_scale <= 0.0 {
            return Err(KnockError::Domain(format!(
                "knock amplitude scale {} must be positive",
                self.knock_amp_scale
            )));
        }
        Ok(())
    }
}
