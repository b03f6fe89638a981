//! Animation export: proxy-marker trajectories or the raw motion-json.

use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::motion::{fk_positions, BodyPose, MotionSequence, ProxySkeleton};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    /// One `frame,marker,x,y,z` row per marker per frame.
    Csv,
    /// The motion-json layout, readable by `MotionSequence::read_json`.
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown export format {s:?} (csv or json)"))),
        }
    }
}

/// Writes `motion` to `path`; CSV rows hold forward-kinematics marker
/// positions including the global translation.
pub fn export_animation(motion: &MotionSequence, skeleton: &ProxySkeleton, path: &Path, format: ExportFormat) -> Result<()> {
    motion.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    match format {
        ExportFormat::Json => motion.write_json(path),
        ExportFormat::Csv => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(w, "frame,marker,x,y,z")?;
            for f in 0..motion.frames() {
                let row = |a: &ndarray::Array2<f32>| a.row(f).to_vec();
                let (hands, upper, lower) = (row(&motion.parts.hands), row(&motion.parts.upper), row(&motion.parts.lower));
                let pose = BodyPose {
                    hands: &hands,
                    upper: &upper,
                    lower: &lower,
                };
                let t = motion.translation.row(f);
                let markers = fk_positions(&pose, skeleton, [t[0] as f64, t[1] as f64, t[2] as f64])?;
                for (m, p) in markers.iter().enumerate() {
                    writeln!(w, "{f},{m},{},{},{}", p[0], p[1], p[2])?;
                }
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerRow {
    pub frame: usize,
    pub marker: usize,
    pub position: [f64; 3],
}

/// Reads back a CSV written by [`export_animation`].
pub fn read_marker_csv(path: &Path) -> Result<Vec<MarkerRow>> {
    let bad = |line: usize, reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: format!("line {line}: {reason}"),
    };
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = vec![];
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "frame,marker,x,y,z" {
                return Err(bad(1, "unexpected header"));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        out.push(MarkerRow {
            frame: int(cols[0])?,
            marker: int(cols[1])?,
            position: [num(cols[2])?, num(cols[3])?, num(cols[4])?],
        });
    }
    Ok(out)
}
