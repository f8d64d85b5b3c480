//! Versioned JSON snapshot of the engine, written by atomic rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use leakwatch_core::detect::engine::{Engine, EngineSettings, EngineState};
use leakwatch_core::md::CoefficientTable;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA: &str = "leakwatch.snapshot/v1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("cannot read snapshot {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("corrupt snapshot {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("snapshot {path} has schema {found}, expected {SCHEMA}")]
    Schema { path: PathBuf, found: String },
    #[error("snapshot {path} was written under a different configuration (fingerprint {found}, current {expected})")]
    Fingerprint {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("cannot write snapshot {path}: {message}")]
    Write { path: PathBuf, message: String },
}

/// Hash of everything that shapes the learned state.
pub fn fingerprint(settings: &EngineSettings, coefficients: &CoefficientTable) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    h.update(b"\n");
    h.update(coefficients.to_csv().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema: String,
    pub fingerprint: String,
    pub settings: EngineSettings,
    pub coefficients: CoefficientTable,
    pub engine: EngineState,
}

impl Snapshot {
    pub fn of(engine: &Engine) -> Self {
        Self {
            schema: SCHEMA.into(),
            fingerprint: fingerprint(engine.settings(), engine.coefficients()),
            settings: engine.settings().clone(),
            coefficients: engine.coefficients().clone(),
            engine: engine.state().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("snapshot serializes");
        v.push(b'\n');
        v
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, SnapshotError> {
        #[derive(Deserialize)]
        struct Head {
            schema: String,
        }
        let head: Head = serde_json::from_slice(bytes).map_err(|e| SnapshotError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if head.schema != SCHEMA {
            return Err(SnapshotError::Schema {
                path: path.to_path_buf(),
                found: head.schema,
            });
        }
        let snap: Snapshot = serde_json::from_slice(bytes).map_err(|e| SnapshotError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let expected = fingerprint(&snap.settings, &snap.coefficients);
        if snap.fingerprint != expected {
            return Err(SnapshotError::Corrupt {
                path: path.to_path_buf(),
                message: "fingerprint does not match its own settings".into(),
            });
        }
        Ok(snap)
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        let bytes = std::fs::read(path).map_err(|e| SnapshotError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuild the engine, refusing state learned under other settings.
    pub fn restore(
        self,
        path: &Path,
        settings: EngineSettings,
        coefficients: CoefficientTable,
    ) -> Result<Engine, SnapshotError> {
        let expected = fingerprint(&settings, &coefficients);
        if self.fingerprint != expected {
            return Err(SnapshotError::Fingerprint {
                path: path.to_path_buf(),
                found: self.fingerprint,
                expected,
            });
        }
        Engine::from_state(settings, coefficients, self.engine).map_err(|e| {
            SnapshotError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn persist(&self, path: &Path) -> Result<(), SnapshotError> {
        let err = |e: std::io::Error| SnapshotError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp).map_err(err)?;
            f.write_all(&self.to_bytes()).map_err(err)?;
            f.sync_all().map_err(err)?;
        }
        std::fs::rename(&tmp, path).map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_settings() {
        let s = EngineSettings::default();
        let t = CoefficientTable::defaults();
        let a = fingerprint(&s, &t);
        assert_eq!(a.len(), 64);
        assert_eq!(a, fingerprint(&s.clone(), &t.clone()));
        let mut s2 = s.clone();
        s2.detector.sd = 0.1;
        assert_ne!(a, fingerprint(&s2, &t));
    }

    #[test]
    fn corrupt_and_foreign_files_are_named() {
        let p = Path::new("state/x.json");
        let e = Snapshot::from_bytes(b"{not json", p).unwrap_err();
        assert!(e.to_string().contains("state/x.json"));
        let e = Snapshot::from_bytes(br#"{"schema":"other/v9"}"#, p).unwrap_err();
        assert!(matches!(e, SnapshotError::Schema { .. }));
    }
}
