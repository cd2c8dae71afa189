//! JSON-lines corpus manifests. A record points either at a WAV file or at
//! the generator parameters that reproduce the utterance.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{synth_utterance, CorpusConfig};
use super::{wav, Utterance};
use crate::error::{AtmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub corpus: CorpusConfig,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenParams>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
    pub domain: String,
}

impl ManifestRecord {
    /// Materialises the utterance; relative paths resolve against `base`.
    pub fn resolve(&self, base: &Path) -> Result<Utterance> {
        let samples = match (&self.path, &self.generate) {
            (Some(p), _) => wav::read_wav(&base.join(p))?,
            (None, Some(g)) => synth_utterance(&g.corpus, g.index)?.0.samples,
            (None, None) => {
                return Err(AtmError::Data(format!("{}: record has neither path nor generate", self.id)))
            }
        };
        Ok(Utterance {
            id: self.id.clone(),
            samples,
            sample_rate: wav::SAMPLE_RATE,
            labels: self.labels.clone(),
            domain: self.domain.clone(),
        })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| AtmError::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| AtmError::io(path, e))?;
    f.write_all(&out).map_err(|e| AtmError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| AtmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| AtmError::json(path, e)))
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?.iter().map(|r| r.resolve(base)).collect()
}
