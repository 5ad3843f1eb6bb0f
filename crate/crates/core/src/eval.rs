//! Region similarity (intersection over union) between predicted and ground-truth masks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// File written next to predicted masks with per-frame segmentation time.
pub const TIMING_FILE: &str = "timing.csv";

/// `|A & B| / |A | B|`, and 1 when both masks are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimMismatch(format!(
            "masks of {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: String,
    pub j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub frames: Vec<FrameScore>,
    pub mean_j: f64,
    /// Predicted frames without ground truth.
    pub skipped: Vec<String>,
    /// Ground-truth frames without a prediction (at most one is tolerated).
    pub unpredicted: Vec<String>,
    /// Mean seconds per frame from the prediction directory's timing file.
    pub seconds_per_frame: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceReport>,
    /// Mean of the per-sequence means.
    pub mean_j: f64,
    pub seconds_per_frame: Option<f64>,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Sort key: trailing frame number when there is one, then the stem itself.
fn frame_key(stem: &str) -> (Option<u64>, String) {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    (digits.parse().ok(), stem.to_string())
}

fn list_keyed(dir: &Path, extension: &str) -> Result<BTreeMap<(Option<u64>, String), PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(frame_key(stem), path.clone());
            }
        }
    }
    Ok(out)
}

fn list_masks(dir: &Path) -> Result<BTreeMap<(Option<u64>, String), PathBuf>> {
    list_keyed(dir, "pgm")
}

/// Files in `dir` with the given extension, ordered by trailing frame number.
pub fn list_frames(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    Ok(list_keyed(dir, extension)?.into_values().collect())
}

pub fn evaluate_sequence(pred_dir: &Path, gt_dir: &Path) -> Result<SequenceReport> {
    let preds = list_masks(pred_dir)?;
    let gts = list_masks(gt_dir)?;
    if preds.is_empty() {
        return Err(Error::EmptyDir(pred_dir.to_path_buf()));
    }
    if gts.is_empty() {
        return Err(Error::EmptyDir(gt_dir.to_path_buf()));
    }
    let unpredicted: Vec<String> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(|k| k.1.clone())
        .collect();
    if unpredicted.len() > 1 {
        return Err(Error::FrameCountMismatch(format!(
            "{} ground-truth frames in {} have no prediction in {}",
            unpredicted.len(),
            gt_dir.display(),
            pred_dir.display()
        )));
    }
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for (key, pred_path) in &preds {
        match gts.get(key) {
            Some(gt_path) => {
                let j = jaccard(&Mask::load_pgm(pred_path)?, &Mask::load_pgm(gt_path)?)?;
                frames.push(FrameScore {
                    frame: key.1.clone(),
                    j,
                });
            }
            None => skipped.push(key.1.clone()),
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} predicted frames have no ground truth: {:?}", skipped.len(), skipped);
    }
    let name = gt_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SequenceReport {
        name,
        mean_j: mean(frames.iter().map(|f| f.j)),
        frames,
        skipped,
        unpredicted,
        seconds_per_frame: read_timing(&pred_dir.join(TIMING_FILE))?,
    })
}

/// Evaluates either one sequence (directories holding `.pgm` files) or a dataset
/// whose sequences are the subdirectories of `gt_root`.
pub fn evaluate(pred_root: &Path, gt_root: &Path) -> Result<EvalReport> {
    let sequences = if list_masks(gt_root)?.is_empty() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(gt_root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_dir())
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::EmptyDir(gt_root.to_path_buf()));
        }
        names
            .iter()
            .map(|gt| evaluate_sequence(&pred_root.join(gt.file_name().unwrap()), gt))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![evaluate_sequence(pred_root, gt_root)?]
    };
    let timings: Vec<f64> = sequences.iter().filter_map(|s| s.seconds_per_frame).collect();
    Ok(EvalReport {
        mean_j: mean(sequences.iter().map(|s| s.mean_j)),
        seconds_per_frame: (!timings.is_empty()).then(|| mean(timings.into_iter())),
        sequences,
    })
}

/// Reads `frame,seconds` rows; a missing file is not an error.
fn read_timing(path: &Path) -> Result<Option<f64>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut secs = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let value = line
            .rsplit(',')
            .next()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Parse(format!("bad timing row {line:?}")))?;
        secs.push(value);
    }
    Ok((!secs.is_empty()).then(|| mean(secs.into_iter())))
}

impl EvalReport {
    /// `sequence,frame,J` per frame.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "sequence,frame,J")?;
        for s in &self.sequences {
            for f in &s.frames {
                writeln!(writer, "{},{},{}", s.name, f.frame, f.j)?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            out.push_str(&format!(
                "{}: mean J {:.4} over {} frames\n",
                s.name,
                s.mean_j,
                s.frames.len()
            ));
            if !s.skipped.is_empty() {
                out.push_str(&format!("  skipped (no ground truth): {}\n", s.skipped.join(" ")));
            }
            if !s.unpredicted.is_empty() {
                out.push_str(&format!("  no prediction: {}\n", s.unpredicted.join(" ")));
            }
        }
        out.push_str(&format!("mean J {:.4}\n", self.mean_j));
        if let Some(t) = self.seconds_per_frame {
            out.push_str(&format!("seconds/frame {t:.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(bits.len(), 1, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(jaccard(&mask(&[1, 0, 0]), &mask(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(jaccard(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(jaccard(&mask(&[1, 1, 0, 0]), &mask(&[0, 1, 1, 0])).unwrap(), 1.0 / 3.0);
        assert!(jaccard(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn frame_keys_sort_numerically() {
        let mut keys = vec![frame_key("frame10"), frame_key("frame9"), frame_key("00002")];
        keys.sort();
        let stems: Vec<_> = keys.into_iter().map(|k| k.1).collect();
        assert_eq!(stems, ["00002", "frame9", "frame10"]);
    }

    fn write(dir: &Path, stem: &str, m: &Mask) {
        m.save_pgm(&dir.join(format!("{stem}.pgm"))).unwrap();
    }

    #[test]
    fn sequence_mean_and_gaps() {
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1]);
        for i in 0..5 {
            write(gt.path(), &format!("{i:05}"), &a);
            write(pred.path(), &format!("{i:05}"), if i == 2 { &b } else { &a });
        }
        write(pred.path(), "00009", &a);
        let r = evaluate_sequence(pred.path(), gt.path()).unwrap();
        assert!((r.mean_j - 0.8).abs() < 1e-15);
        assert_eq!(r.skipped, vec!["00009".to_string()]);

        std::fs::remove_file(pred.path().join("00000.pgm")).unwrap();
        assert_eq!(evaluate_sequence(pred.path(), gt.path()).unwrap().unpredicted.len(), 1);
        std::fs::remove_file(pred.path().join("00001.pgm")).unwrap();
        assert!(matches!(
            evaluate_sequence(pred.path(), gt.path()),
            Err(Error::FrameCountMismatch(_))
        ));
    }

    #[test]
    fn empty_dirs_and_timing() {
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        assert!(matches!(
            evaluate_sequence(pred.path(), gt.path()),
            Err(Error::EmptyDir(_))
        ));
        write(gt.path(), "00000", &mask(&[1]));
        write(pred.path(), "00000", &mask(&[1]));
        std::fs::write(pred.path().join(TIMING_FILE), "frame,seconds\n00000,0.5\n00001,1.5\n").unwrap();
        let r = evaluate(pred.path(), gt.path()).unwrap();
        assert_eq!(r.mean_j, 1.0);
        assert_eq!(r.seconds_per_frame, Some(1.0));
    }
}
