//! Stage 3: a vision-only anchor-based detector trained on self-annotations.

pub mod boxes;
pub mod losses;
pub mod model;
pub mod train;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub use boxes::{generate_anchors, iou, nms, Anchor, Detection, ASPECT_RATIOS};
pub use losses::{det_losses, rpn_losses, MatchConfig, Target};
pub use model::{DetectorArch, DetectorModel};
pub use train::{train_detector, train_items, DetEpochRecord, DetectorConfig, TrainItem};

use crate::error::{Error, Result};

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for d in detections {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::BBox;

    #[test]
    fn detections_jsonl_round_trip() {
        let d = vec![Detection {
            scene_id: 7,
            bbox: BBox::new(1.0, 2.0, 3.5, 4.25),
            label: 2,
            score: 0.625,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_detections(&p, &d).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap().trim(),
            r#"{"scene_id":7,"box":[1.0,2.0,3.5,4.25],"label":2,"score":0.625}"#
        );
        assert_eq!(read_detections(&p).unwrap(), d);
        assert!(matches!(read_detections(&dir.path().join("x")), Err(Error::MissingArtifact(_))));
    }
}
