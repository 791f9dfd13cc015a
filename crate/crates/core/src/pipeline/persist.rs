//! Score files: JSON lines, one schema-versioned record per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::stats::ScoreRecord;

pub const SCORE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a ScoreRecord,
}

#[derive(Deserialize)]
struct LineIn {
    schema_version: u32,
    #[serde(flatten)]
    record: ScoreRecord,
}

pub fn persist_scores(records: &[ScoreRecord], path: &Path) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&LineOut {
            schema_version: SCORE_SCHEMA_VERSION,
            record,
        })
        .map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
        writeln!(w, "{line}").map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |m: String| PipelineError::Artifact(format!("{} line {}: {m}", path.display(), i + 1));
        let parsed: LineIn = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if parsed.schema_version != SCORE_SCHEMA_VERSION {
            return Err(fail(format!(
                "schema version {} (expected {SCORE_SCHEMA_VERSION})",
                parsed.schema_version
            )));
        }
        out.push(parsed.record);
    }
    Ok(out)
}
