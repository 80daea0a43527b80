//! `gen-toy`: writes one of the built-in toy datasets as JSONL.

use std::path::Path;

use marconflow::series::{generate_blast, generate_circle, save_jsonl};
use marconflow::{Error, Result};

/// Generates `n` instances of the named toy dataset and writes them to
/// `out`. The generator is seeded, so equal arguments produce equal bytes.
pub fn run(name: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let instances = match name {
        "blast" => generate_blast(n, seed)?,
        "circle" => generate_circle(n, seed)?,
        other => {
            return Err(Error::Validation(format!(
                "unknown toy dataset {other:?}; expected blast or circle"
            )))
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_jsonl(out, &instances)?;
    log::info!("wrote {} {name} instances to {}", instances.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_write_equal_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        run("blast", 50, 9, &a).unwrap();
        run("blast", 50, 9, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let c = dir.path().join("c.jsonl");
        run("blast", 50, 10, &c).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn line_count_matches_n() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("circle.jsonl");
        run("circle", 120, 0, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 120);
    }

    #[test]
    fn unknown_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = run("spiral", 10, 0, &dir.path().join("x.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
