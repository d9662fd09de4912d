//! ASCII PLY export of a cloud colored by part id.

use std::fs;
use std::path::Path;

use crate::data::PointCloud;
use crate::error::{Error, Result};

/// RGB color per part id (taken modulo the palette length).
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [128, 128, 128],
];

/// Writes `cloud` with one vertex per point, colored by `parts[i]`.
pub fn write_ply(path: &Path, cloud: &PointCloud, parts: &[usize]) -> Result<()> {
    if parts.len() != cloud.len() {
        return Err(Error::Data(format!(
            "{} part ids for {} points",
            parts.len(),
            cloud.len()
        )));
    }
    let mut out = format!(
        "ply\nformat ascii 1.0\ncomment shape {} ({})\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.id,
        cloud.category,
        cloud.len()
    );
    for (p, &part) in cloud.points.iter().zip(parts) {
        let [r, g, b] = PALETTE[part % PALETTE.len()];
        out.push_str(&format!("{:.6} {:.6} {:.6} {r} {g} {b}\n", p[0], p[1], p[2]));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        let c = PointCloud::new(vec![[0.0, 1.0, 2.0], [0.5, 0.5, 0.5]], None, "lamp").unwrap();
        write_ply(&path, &c, &[1, 9]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ply");
        assert!(lines.contains(&"element vertex 2"));
        let body = &lines[lines.iter().position(|l| *l == "end_header").unwrap() + 1..];
        assert_eq!(body, &["0.000000 1.000000 2.000000 60 180 75", "0.500000 0.500000 0.500000 60 180 75"]);
        assert!(write_ply(&path, &c, &[0]).is_err());
    }
}
