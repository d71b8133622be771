//! Corrupted test-set construction: every requested (kind, severity)
//! cell of every image, written as `<kind>/<severity>/<class>/<file>.png`
//! with a CSV manifest.
//!
//! Per-image seeds derive from (global seed, kind, severity, relative
//! path), so the output is bit-identical regardless of worker count or
//! traversal order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use difta_core::corruption::{
    apply, severity_params, CorruptionKind, CorruptionSpec, ALL_KINDS, SEVERITY_TABLE_VERSION,
};
use difta_core::rng::derive_seed;
use rayon::prelude::*;

use crate::dataset::scan_labeled_tree;
use crate::pngio;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct CorruptOptions {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seed: u64,
}

impl Default for CorruptOptions {
    fn default() -> Self {
        CorruptOptions {
            kinds: ALL_KINDS.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            seed: 0,
        }
    }
}

/// One output file of a corruption run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub relative_path: PathBuf,
    pub kind: CorruptionKind,
    pub severity: u8,
    pub derived_seed: u64,
    pub source_path: PathBuf,
}

/// The per-image seed rule shared by the runner and its tests.
pub fn corruption_seed(global: u64, kind: CorruptionKind, severity: u8, relative: &Path) -> u64 {
    derive_seed(
        global,
        &[
            b"corrupt",
            kind.name().as_bytes(),
            &[severity],
            relative.to_string_lossy().as_bytes(),
        ],
    )
}

/// Corrupt every image of a class-per-directory tree into
/// `output_dir/<kind>/<severity>/<class>/<file>.png` and write
/// `manifest.csv`. Returns the manifest rows in deterministic order.
pub fn corrupt_dataset(
    input_dir: &Path,
    output_dir: &Path,
    opts: &CorruptOptions,
) -> Result<Vec<ManifestRow>, CliError> {
    if opts.kinds.is_empty() || opts.severities.is_empty() {
        return Err(CliError::Data("no corruption kinds or severities requested".into()));
    }
    for &s in &opts.severities {
        if !(1..=5).contains(&s) {
            return Err(CliError::Data(format!("severity {s} out of range 1..=5")));
        }
    }
    let tree = scan_labeled_tree(input_dir)?;
    let originals: Vec<(PathBuf, difta_core::image::Image)> = tree
        .items
        .par_iter()
        .map(|item| Ok((item.relative.clone(), tree.load_image(item)?)))
        .collect::<Result<_, CliError>>()?;

    let mut jobs = Vec::new();
    for &kind in &opts.kinds {
        for &severity in &opts.severities {
            for (rel, img) in &originals {
                jobs.push((kind, severity, rel, img));
            }
        }
    }

    // collision check on output paths before doing any work
    let mut seen = BTreeSet::new();
    for (kind, severity, rel, _) in &jobs {
        let out_rel = PathBuf::from(kind.name())
            .join(severity.to_string())
            .join(rel);
        if !seen.insert(out_rel.clone()) {
            return Err(CliError::Data(format!(
                "output path collision at {}",
                out_rel.display()
            )));
        }
    }

    let rows: Vec<Result<ManifestRow, CliError>> = jobs
        .par_iter()
        .map(|&(kind, severity, rel, img)| {
            let seed = corruption_seed(opts.seed, kind, severity, rel);
            let spec = CorruptionSpec::new(kind, severity, seed)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let corrupted = apply(img, &spec).map_err(|e| CliError::Data(e.to_string()))?;
            let out_rel = PathBuf::from(kind.name())
                .join(severity.to_string())
                .join(rel);
            pngio::save_image(&corrupted, &output_dir.join(&out_rel))?;
            Ok(ManifestRow {
                relative_path: out_rel,
                kind,
                severity,
                derived_seed: seed,
                source_path: rel.clone(),
            })
        })
        .collect();
    let mut manifest = Vec::with_capacity(rows.len());
    for r in rows {
        manifest.push(r?);
    }
    manifest.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));

    write_manifest(&manifest, &output_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["relative_path", "kind", "severity", "derived_seed", "source_path"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for row in rows {
        w.write_record([
            row.relative_path.to_string_lossy().to_string(),
            row.kind.name().to_string(),
            row.severity.to_string(),
            row.derived_seed.to_string(),
            row.source_path.to_string_lossy().to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// The frozen severity table as CSV (kind, severity, parameter, value).
pub fn severity_table_csv() -> String {
    let mut out = String::from("table_version,kind,severity,parameter,value\n");
    for kind in ALL_KINDS {
        for severity in 1..=5u8 {
            let params = severity_params(kind, severity).expect("valid severity");
            for (name, value) in kind.param_names().iter().zip(params) {
                out.push_str(&format!(
                    "{SEVERITY_TABLE_VERSION},{},{severity},{name},{value}\n",
                    kind.name()
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use difta_core::image::Image;
    use tempfile::TempDir;

    fn write_source_tree(root: &Path, images_per_class: usize) {
        for class in ["class_a", "class_b"] {
            for i in 0..images_per_class {
                let mut rng = difta_core::rng::Philox::seed(derive_seed(
                    5,
                    &[class.as_bytes(), &(i as u64).to_le_bytes()],
                ));
                let img = Image::from_fn(32, 32, 3, |_, _, _| rng.next_f64());
                pngio::save_image(&img, &root.join(class).join(format!("im{i}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn counts_match_kinds_times_severities() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        write_source_tree(src.path(), 1);
        let opts = CorruptOptions {
            kinds: vec![CorruptionKind::GaussianNoise],
            severities: vec![1, 2, 3, 4, 5],
            seed: 1,
        };
        let manifest = corrupt_dataset(src.path(), dst.path(), &opts).unwrap();
        // 2 images x 1 kind x 5 severities
        assert_eq!(manifest.len(), 10);
        assert!(dst.path().join("manifest.csv").exists());
        assert!(dst
            .path()
            .join("gaussian_noise/3/class_a/im0.png")
            .exists());
    }

    #[test]
    fn rerun_is_bit_identical_across_worker_counts() {
        let src = TempDir::new().unwrap();
        write_source_tree(src.path(), 2);
        let opts = CorruptOptions {
            kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::GlassBlur],
            severities: vec![2, 4],
            seed: 9,
        };
        let mut digests = Vec::new();
        for workers in [1usize, 3] {
            let dst = TempDir::new().unwrap();
            let pool = crate::exec::thread_pool(workers).unwrap();
            pool.install(|| corrupt_dataset(src.path(), dst.path(), &opts)).unwrap();
            let mut all = Vec::new();
            let mut paths = Vec::new();
            collect_files(dst.path(), &mut paths);
            paths.sort();
            for p in &paths {
                all.push((
                    p.strip_prefix(dst.path()).unwrap().to_path_buf(),
                    fs::read(p).unwrap(),
                ));
            }
            digests.push(all);
        }
        assert_eq!(digests[0], digests[1]);
    }

    fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                collect_files(&p, out);
            } else {
                out.push(p);
            }
        }
    }

    #[test]
    fn full_matrix_yields_seventy_variants_per_image() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        write_source_tree(src.path(), 1);
        let opts = CorruptOptions {
            seed: 3,
            ..CorruptOptions::default()
        };
        let manifest = corrupt_dataset(src.path(), dst.path(), &opts).unwrap();
        // 14 kinds x 5 severities = 70 per image, 2 images
        assert_eq!(manifest.len(), 140);
        let per_image: Vec<_> = manifest
            .iter()
            .filter(|r| r.source_path == PathBuf::from("class_a/im0.png"))
            .collect();
        assert_eq!(per_image.len(), 70);
    }

    #[test]
    fn severity_table_lists_every_cell() {
        let csv = severity_table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        // 14 kinds x 5 severities, at least one parameter each, plus header
        assert!(lines.len() > 14 * 5);
        assert!(csv.contains("gaussian_noise,3,sigma,0.18"));
        assert!(csv.contains("jpeg_compression,5,quality,7"));
    }

    #[test]
    fn empty_input_tree_is_an_error() {
        let src = TempDir::new().unwrap();
        let dst = TempDir::new().unwrap();
        let opts = CorruptOptions::default();
        assert!(corrupt_dataset(src.path(), dst.path(), &opts).is_err());
    }
}
