//! Shared data plumbing: loading instance files and applying the
//! normalization fitted at training time.
//!
//! The trainer fits per-channel statistics (and optionally time bounds) on
//! its training split and stores them in the checkpoint manifest, so
//! `eval`, `sample`, and `audit` reproduce exactly the transform the model
//! was trained under instead of refitting on whatever file they are given.

use std::path::Path;

use marconflow::series::{ChannelStats, TimeBounds, TimeSeriesInstance};
use marconflow::{Error, Result};
use serde::{Deserialize, Serialize};

/// The value/time transforms fitted on a training split. `None` means the
/// corresponding transform is the identity.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Normalizer {
    pub stats: Option<ChannelStats>,
    pub bounds: Option<TimeBounds>,
}

/// Manifest key under which the normalizer travels in checkpoints.
pub const NORMALIZER_KEY: &str = "normalizer";

impl Normalizer {
    /// Fits the requested transforms on `train`.
    pub fn fit(
        train: &[TimeSeriesInstance],
        channels: usize,
        standardize: bool,
        normalize_time: bool,
    ) -> Result<Normalizer> {
        let stats =
            if standardize { Some(ChannelStats::from_instances(train, channels)?) } else { None };
        let bounds = if normalize_time { Some(TimeBounds::from_instances(train)?) } else { None };
        Ok(Normalizer { stats, bounds })
    }

    /// Applies the transforms in place (times first, values second; the
    /// two act on disjoint fields, so the order is cosmetic).
    pub fn apply(&self, instances: &mut [TimeSeriesInstance]) {
        if let Some(bounds) = &self.bounds {
            bounds.normalize_instances(instances);
        }
        if let Some(stats) = &self.stats {
            stats.standardize_instances(instances);
        }
    }

    /// Maps a model-space value for channel `c` back to data space.
    pub fn destandardize(&self, c: usize, v: f64) -> f64 {
        match &self.stats {
            Some(stats) => stats.destandardize(c, v),
            None => v,
        }
    }

    /// Reads the normalizer back out of a checkpoint manifest. Its absence
    /// (identity transforms) is not an error.
    pub fn from_manifest(manifest: &serde_json::Value) -> Result<Normalizer> {
        match manifest.get(NORMALIZER_KEY) {
            Some(value) => serde_json::from_value(value.clone())
                .map_err(|e| Error::Validation(format!("checkpoint normalizer entry: {e}"))),
            None => Ok(Normalizer::default()),
        }
    }

    /// The manifest entry for [`Self::from_manifest`].
    pub fn to_manifest(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self)
            .map_err(|e| Error::Validation(format!("serialize normalizer: {e}")))
    }
}

/// Loads a JSONL instance file, requiring it to be nonempty.
pub fn load_nonempty(path: &Path) -> Result<Vec<TimeSeriesInstance>> {
    let instances = marconflow::series::load_jsonl(path)?;
    if instances.is_empty() {
        return Err(Error::Validation(format!("{}: no instances", path.display())));
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use marconflow::series::generate_blast;

    #[test]
    fn normalizer_round_trips_through_a_manifest() {
        let train = generate_blast(64, 3).unwrap();
        let norm = Normalizer::fit(&train, 2, true, true).unwrap();
        let manifest = serde_json::json!({ NORMALIZER_KEY: norm.to_manifest().unwrap() });
        let back = Normalizer::from_manifest(&manifest).unwrap();
        assert_eq!(back.stats, norm.stats);
        assert_eq!(back.bounds, norm.bounds);
    }

    #[test]
    fn missing_manifest_entry_means_identity() {
        let norm = Normalizer::from_manifest(&serde_json::json!({})).unwrap();
        assert!(norm.stats.is_none() && norm.bounds.is_none());
        assert_eq!(norm.destandardize(1, 2.5), 2.5);
    }

    #[test]
    fn apply_then_destandardize_recovers_answers() {
        let mut data = generate_blast(32, 5).unwrap();
        let norm = Normalizer::fit(&data, 2, true, false).unwrap();
        let original: Vec<f64> = data[0].answer.clone();
        norm.apply(&mut data);
        for (i, q) in data[0].query.iter().enumerate() {
            let back = norm.destandardize(q.c, data[0].answer[i]);
            assert!((back - original[i]).abs() < 1e-12);
        }
    }
}
