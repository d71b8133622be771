//! Dataset trees on disk.
//!
//! A labeled tree is class-per-subdirectory: `root/<class>/<file>.png`.
//! Class indices follow the sorted class-directory names. A corrupted
//! tree adds two levels on top: `root/<kind>/<severity>/<class>/<file>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use difta_core::corruption::CorruptionKind;
use difta_core::image::Image;

use crate::pngio;
use crate::CliError;

/// One image in a labeled tree, addressed relative to the tree root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeItem {
    /// `<class>/<file>.png`
    pub relative: PathBuf,
    pub class_index: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledTree {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<TreeItem>,
}

impl LabeledTree {
    pub fn load_image(&self, item: &TreeItem) -> Result<Image, CliError> {
        pngio::load_image(&self.root.join(&item.relative))
    }

    pub fn load_all(&self) -> Result<Vec<(Image, usize)>, CliError> {
        self.items
            .iter()
            .map(|it| Ok((self.load_image(it)?, it.class_index)))
            .collect()
    }
}

fn sorted_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn name_of(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Scan a class-per-subdirectory PNG tree. Errors when no images exist.
pub fn scan_labeled_tree(root: &Path) -> Result<LabeledTree, CliError> {
    let class_dirs = sorted_dirs(root)?;
    let classes: Vec<String> = class_dirs.iter().map(|d| name_of(d)).collect();
    let mut items = Vec::new();
    for (class_index, dir) in class_dirs.iter().enumerate() {
        for file in sorted_pngs(dir)? {
            items.push(TreeItem {
                relative: PathBuf::from(&classes[class_index]).join(name_of(&file)),
                class_index,
            });
        }
    }
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no class-per-directory PNG images found",
            root.display()
        )));
    }
    Ok(LabeledTree {
        root: root.to_path_buf(),
        classes,
        items,
    })
}

/// One image of a corrupted tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedItem {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub class_index: usize,
    /// `<kind>/<severity>/<class>/<file>.png`
    pub relative: PathBuf,
    /// `<class>/<file>.png`, keying back into the original tree.
    pub source_relative: PathBuf,
}

/// Scan a `<kind>/<severity>/<class>/<file>.png` tree. Class indices
/// come from `classes` (the original tree's sorted names) so they match
/// the classifier's label order; unknown class directories are an error.
pub fn scan_corrupted_tree(root: &Path, classes: &[String]) -> Result<Vec<CorruptedItem>, CliError> {
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut items = Vec::new();
    for kind_dir in sorted_dirs(root)? {
        let kind = CorruptionKind::parse(&name_of(&kind_dir))
            .map_err(|e| CliError::Data(format!("{}: {e}", kind_dir.display())))?;
        for sev_dir in sorted_dirs(&kind_dir)? {
            let severity: u8 = name_of(&sev_dir).parse().map_err(|_| {
                CliError::Data(format!(
                    "{}: severity directory is not an integer",
                    sev_dir.display()
                ))
            })?;
            for class_dir in sorted_dirs(&sev_dir)? {
                let class_name = name_of(&class_dir);
                let &ci = class_index.get(class_name.as_str()).ok_or_else(|| {
                    CliError::Data(format!(
                        "{}: class '{class_name}' not present in the original tree",
                        class_dir.display()
                    ))
                })?;
                for file in sorted_pngs(&class_dir)? {
                    let file_name = name_of(&file);
                    items.push(CorruptedItem {
                        kind,
                        severity,
                        class_index: ci,
                        relative: PathBuf::from(kind.name())
                            .join(severity.to_string())
                            .join(&class_name)
                            .join(&file_name),
                        source_relative: PathBuf::from(&class_name).join(&file_name),
                    });
                }
            }
        }
    }
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no corrupted images found",
            root.display()
        )));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn scans_classes_in_sorted_order() {
        let dir = TempDir::new().unwrap();
        for class in ["melanoma", "acne", "eczema"] {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            pngio::save_image(&Image::zeros(4, 4, 1), &d.join("a.png")).unwrap();
            pngio::save_image(&Image::zeros(4, 4, 1), &d.join("b.png")).unwrap();
        }
        let tree = scan_labeled_tree(dir.path()).unwrap();
        assert_eq!(tree.classes, vec!["acne", "eczema", "melanoma"]);
        assert_eq!(tree.items.len(), 6);
        assert_eq!(tree.items[0].class_index, 0);
        assert_eq!(tree.items[0].relative, PathBuf::from("acne/a.png"));
    }

    #[test]
    fn empty_tree_is_an_error() {
        let dir = TempDir::new().unwrap();
        assert!(scan_labeled_tree(dir.path()).is_err());
        fs::create_dir_all(dir.path().join("empty_class")).unwrap();
        assert!(scan_labeled_tree(dir.path()).is_err());
    }

    #[test]
    fn corrupted_tree_round_trip() {
        let dir = TempDir::new().unwrap();
        let p = dir
            .path()
            .join("gaussian_noise")
            .join("3")
            .join("acne");
        fs::create_dir_all(&p).unwrap();
        pngio::save_image(&Image::zeros(4, 4, 1), &p.join("x.png")).unwrap();
        let classes = vec!["acne".to_string(), "eczema".to_string()];
        let items = scan_corrupted_tree(dir.path(), &classes).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].kind, CorruptionKind::GaussianNoise);
        assert_eq!(items[0].severity, 3);
        assert_eq!(items[0].class_index, 0);
        assert_eq!(items[0].source_relative, PathBuf::from("acne/x.png"));
    }
}
