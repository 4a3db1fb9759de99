//! Checkpoint directories: `metadata.json` plus one `<group>.bin` blob per
//! parameter group.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamSet};
use crate::schedules::ScheduleSpec;

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `plip` or `assistant`.
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    pub config: serde_json::Value,
    pub schedules: BTreeMap<String, ScheduleSpec>,
    /// SHA-256 of each group blob, checked on load.
    pub groups: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        seed: u64,
        step: u64,
        config: serde_json::Value,
        schedules: BTreeMap<String, ScheduleSpec>,
        params: ParamSet,
    ) -> Self {
        let groups = params.hashes();
        Self {
            meta: CheckpointMeta {
                kind: kind.to_string(),
                seed,
                step,
                config,
                schedules,
                groups,
            },
            params,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, group) in self.params.groups() {
            let path = dir.join(format!("{name}.bin"));
            fs::write(&path, group.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(METADATA_FILE);
        let mut json = serde_json::to_string_pretty(&self.meta)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let mut params = ParamSet::new();
        for (name, expected) in &meta.groups {
            let path = dir.join(format!("{name}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let group = ParamGroup::from_bytes(&bytes)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            let actual = group.content_hash();
            if &actual != expected {
                return Err(Error::Checkpoint(format!(
                    "group `{name}` hash mismatch: metadata {expected}, blob {actual}"
                )));
            }
            params.insert_group(name.clone(), group);
        }
        Ok(Self { meta, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = ParamSet::new();
        let mut g = ParamGroup::new();
        g.insert("w", array![[0.1, 0.2], [0.3, 1.0 / 3.0]]);
        set.insert_group("connector", g);
        let ck = Checkpoint::new(
            "test",
            7,
            3,
            serde_json::json!({"k": 1}),
            BTreeMap::new(),
            set,
        );
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);

        let blob = dir.path().join("connector.bin");
        let mut bytes = fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
