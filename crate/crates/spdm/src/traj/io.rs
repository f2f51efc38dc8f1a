//! JSONL dataset I/O.
//!
//! One trajectory per line: `{"points": [[lng, lat, time], ...]}`. Numbers are
//! plain decimal floats; serde's shortest-round-trip printing keeps the
//! save/load cycle lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrajPoint, Trajectory};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TrajLine {
    points: Vec<[f64; 3]>,
}

/// Loads every trajectory in a JSONL file. Malformed lines report their line
/// number; non-monotone timestamps report the trajectory index. An empty file
/// yields an empty list.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let points = parsed
            .points
            .into_iter()
            .map(|[lng, lat, time]| TrajPoint::new(lng, lat, time))
            .collect();
        let traj = Trajectory::new(points).map_err(|e| {
            Error::Validation(format!("trajectory {} invalid: {e}", out.len()))
        })?;
        out.push(traj);
    }
    Ok(out)
}

/// Writes trajectories to a JSONL file, one per line.
pub fn save_jsonl(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for t in trajs {
        let line = TrajLine {
            points: t.points().iter().map(|p| [p.lng, p.lat, p.time]).collect(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
