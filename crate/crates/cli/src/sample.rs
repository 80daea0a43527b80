//! `sample`: draws joint predictive samples for every instance in a file.
//!
//! One CSV with `n × K` rows per instance. Each row carries the mixture
//! component the draw came from — when a mixture collapses or a component
//! hogs the weight, this column is where it shows. Values are written in
//! the data's original units (the checkpoint's normalizer is inverted),
//! and times/channels come from the input file untouched.

use std::fmt::Write as _;
use std::path::Path;

use marconflow::train::load_checkpoint;
use marconflow::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::data::{load_nonempty, Normalizer};

/// Draws `n` joint samples per instance and writes `samples.csv`.
pub fn run(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    let data_path = data
        .or(cfg.dataset.test.as_deref())
        .ok_or_else(|| Error::Validation("no data file: pass --data or set dataset.test".into()))?;
    let (model, _, manifest) = load_checkpoint(checkpoint)?;
    let normalizer = Normalizer::from_manifest(&manifest)?;
    let raw = load_nonempty(data_path)?;
    let mut prepared = raw.clone();
    normalizer.apply(&mut prepared);

    let mut csv = String::from("instance,draw,component,k,t,c,value\n");
    for (i, (original, inst)) in raw.iter().zip(&prepared).enumerate() {
        // Per-instance stream: output is independent of instance order.
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let codes = model.codes(&inst.context, &inst.query)?;
        for draw in 0..n {
            let (component, values) = codes.sample_with_component(&mut rng)?;
            for (k, value) in values.iter().enumerate() {
                let q = &original.query[k];
                let y = normalizer.destandardize(q.c, *value);
                let _ = writeln!(csv, "{i},{draw},{component},{k},{},{},{y}", q.t, q.c);
            }
        }
    }
    cfg.write_resolved()?;
    let out = cfg.out.join("samples.csv");
    std::fs::write(&out, csv)?;
    log::info!("wrote {n} draws per instance for {} instances to {}", raw.len(), out.display());
    Ok(())
}
