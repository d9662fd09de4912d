//! Plain-text point and label files, and the per-category dataset layout:
//!
//! ```text
//! <root>/<category>/points/<id>.pts          one "x y z" line per point
//! <root>/<category>/points_label/<id>.seg    one part id per line
//! <root>/<category>/{train,val,test}.txt     one shape id per line
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::PointCloud;
use crate::error::{Error, Result};

fn parse_points(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad coordinate '{f}': {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate '{f}'")));
            }
        }
        points.push(p);
    }
    Ok(points)
}

fn parse_labels(path: &Path, text: &str, base: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let raw: usize = line.parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad part id '{line}': {e}"),
        })?;
        let label = raw.checked_sub(base).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("part id {raw} is below the label base {base}"),
        })?;
        labels.push(label);
    }
    Ok(labels)
}

/// Loads a point file and, optionally, its label file. `label_base` is
/// subtracted from every stored label (1 for files that number parts from 1).
pub fn load_cloud_with_base(
    points_path: &Path,
    labels_path: Option<&Path>,
    label_base: usize,
) -> Result<PointCloud> {
    let text = fs::read_to_string(points_path).map_err(|e| Error::io(points_path, e))?;
    let points = parse_points(points_path, &text)?;
    let labels = match labels_path {
        Some(lp) => {
            let text = fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
            let labels = parse_labels(lp, &text, label_base)?;
            if labels.len() != points.len() {
                return Err(Error::Data(format!(
                    "{} has {} labels but {} has {} points",
                    lp.display(),
                    labels.len(),
                    points_path.display(),
                    points.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let id = points_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let category = points_path
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PointCloud {
        points,
        labels,
        category,
        id,
    })
}

pub fn load_cloud(points_path: &Path, labels_path: Option<&Path>) -> Result<PointCloud> {
    load_cloud_with_base(points_path, labels_path, 0)
}

/// Writes a cloud's points (and labels, when present) in the text formats above.
pub fn write_cloud(cloud: &PointCloud, points_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 32);
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    write_text(points_path, &out)?;
    if let (Some(lp), Some(labels)) = (labels_path, &cloud.labels) {
        let mut out = String::with_capacity(labels.len() * 3);
        for l in labels {
            out.push_str(&format!("{l}\n"));
        }
        write_text(lp, &out)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// File locations of one annotated shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRecord {
    pub id: String,
    pub category: String,
    pub points: PathBuf,
    pub labels: PathBuf,
}

impl ShapeRecord {
    pub fn load(&self, label_base: usize) -> Result<PointCloud> {
        let mut cloud = load_cloud_with_base(&self.points, Some(&self.labels), label_base)?;
        cloud.category = self.category.clone();
        cloud.id = self.id.clone();
        Ok(cloud)
    }
}

/// Train/val/test shape lists of one category.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub category: String,
    pub train: Vec<ShapeRecord>,
    pub val: Vec<ShapeRecord>,
    pub test: Vec<ShapeRecord>,
}

impl DatasetSplit {
    /// Reads the split manifests of `category` under `root`. `train.txt` is
    /// required; missing `val.txt`/`test.txt` mean empty splits. The three
    /// id sets must be disjoint.
    pub fn load(root: &Path, category: &str) -> Result<Self> {
        let dir = root.join(category);
        let read = |name: &str, required: bool| -> Result<Vec<ShapeRecord>> {
            let path = dir.join(name);
            if !required && !path.exists() {
                return Ok(Vec::new());
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|id| ShapeRecord {
                    id: id.to_string(),
                    category: category.to_string(),
                    points: dir.join("points").join(format!("{id}.pts")),
                    labels: dir.join("points_label").join(format!("{id}.seg")),
                })
                .collect())
        };
        let split = Self {
            category: category.to_string(),
            train: read("train.txt", true)?,
            val: read("val.txt", false)?,
            test: read("test.txt", false)?,
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let mut here = HashSet::new();
            for r in part {
                if !here.insert(r.id.as_str()) {
                    continue;
                }
                if !seen.insert(r.id.as_str()) {
                    return Err(Error::Data(format!(
                        "shape '{}' of category '{}' appears in the {name} split and an earlier split",
                        r.id, self.category
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[ShapeRecord]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }

    pub fn load_clouds(records: &[ShapeRecord], label_base: usize) -> Result<Vec<PointCloud>> {
        records.iter().map(|r| r.load(label_base)).collect()
    }
}

/// Category directories under `root` that contain a `train.txt`, sorted.
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("train.txt").is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Writes clouds into the dataset layout and the split manifests.
pub fn write_dataset(
    root: &Path,
    category: &str,
    train: &[PointCloud],
    val: &[PointCloud],
    test: &[PointCloud],
) -> Result<DatasetSplit> {
    let dir = root.join(category);
    for (manifest, clouds) in [("train.txt", train), ("val.txt", val), ("test.txt", test)] {
        let mut list = String::new();
        for c in clouds {
            if c.id.is_empty() {
                return Err(Error::Usage("cannot write a shape without an id".into()));
            }
            write_cloud(
                c,
                &dir.join("points").join(format!("{}.pts", c.id)),
                Some(&dir.join("points_label").join(format!("{}.seg", c.id))),
            )?;
            list.push_str(&c.id);
            list.push('\n');
        }
        write_text(&dir.join(manifest), &list)?;
    }
    DatasetSplit::load(root, category)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud {
            points: vec![[0.1, -2.5, 3.0], [1.0 / 3.0, 0.0, 1e-7]],
            labels: Some(vec![0, 2]),
            category: "cat".into(),
            id: "s0".into(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        let l = dir.path().join("a.seg");
        let c = sample();
        write_cloud(&c, &p, Some(&l)).unwrap();
        let back = load_cloud(&p, Some(&l)).unwrap();
        assert_eq!(back.labels, c.labels);
        for (a, b) in back.points.iter().zip(&c.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pts");
        fs::write(&p, "0 0 0\n1 2 3\n4 5\n").unwrap();
        match load_cloud(&p, None) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, p);
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "0 0 0\n1 x 3\n").unwrap();
        assert!(matches!(load_cloud(&p, None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        let l = dir.path().join("a.seg");
        fs::write(&p, "0 0 0\n1 1 1\n").unwrap();
        fs::write(&l, "0\n").unwrap();
        assert!(matches!(load_cloud(&p, Some(&l)), Err(Error::Data(_))));
    }

    #[test]
    fn label_base_is_subtracted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pts");
        let l = dir.path().join("a.seg");
        fs::write(&p, "0 0 0\n1 1 1\n").unwrap();
        fs::write(&l, "1\n3\n").unwrap();
        let c = load_cloud_with_base(&p, Some(&l), 1).unwrap();
        assert_eq!(c.labels, Some(vec![0, 2]));
        fs::write(&l, "0\n3\n").unwrap();
        assert!(load_cloud_with_base(&p, Some(&l), 1).is_err());
    }

    #[test]
    fn dataset_layout_and_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample();
        a.id = "a".into();
        let mut b = sample();
        b.id = "b".into();
        let split = write_dataset(dir.path(), "cat", &[a.clone()], &[b], &[]).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.val.len(), 1);
        assert!(split.test.is_empty());
        let clouds = DatasetSplit::load_clouds(&split.train, 0).unwrap();
        assert_eq!(clouds[0].id, "a");
        assert_eq!(clouds[0].category, "cat");
        assert_eq!(list_categories(dir.path()).unwrap(), vec!["cat".to_string()]);

        fs::write(dir.path().join("cat").join("test.txt"), "a\n").unwrap();
        assert!(matches!(DatasetSplit::load(dir.path(), "cat"), Err(Error::Data(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DatasetSplit::load(dir.path(), "none"), Err(Error::Io { .. })));
    }
}
