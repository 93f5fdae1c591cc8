//! Desk-scale synthetic dataset: an annotation file, placeholder view files,
//! and a manifest whose frames carry known labels, so the synthetic encoder
//! can stand in for real footage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::manifest::{
    render_path_template, Annotation, ClassId, DatasetManifest, Phase, SessionKey, SessionRecord,
    DEFAULT_PATH_TEMPLATE, NUM_CLASSES, VIEWS,
};
use crate::util::{create_dir_all, mix_seed, write_atomic};

pub const ANNOTATION_FILE: &str = "annotations.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetConfig {
    pub num_participants: usize,
    pub num_classes: usize,
    /// Frames per class summed over all participants.
    pub frames_per_class: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            num_participants: 7,
            num_classes: NUM_CLASSES,
            frames_per_class: 200,
            sample_rate_hz: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_participants == 0 || self.num_classes == 0 {
            return Err(Error::Config("synthetic dataset needs participants and classes".into()));
        }
        if self.num_classes > NUM_CLASSES {
            return Err(Error::Config(format!("at most {NUM_CLASSES} classes are defined")));
        }
        if self.frames_per_class < self.num_participants {
            return Err(Error::Config(
                "synthetic.frames_per_class must give every participant at least one frame per class".into(),
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config("synthetic.sample_rate_hz must be positive".into()));
        }
        Ok(())
    }

    /// Frames of class segments for participant `p`: the class total is
    /// spread as evenly as possible, earlier participants taking the remainder.
    pub fn segment_frames(&self, p: usize) -> usize {
        let base = self.frames_per_class / self.num_participants;
        base + usize::from(p < self.frames_per_class % self.num_participants)
    }
}

pub fn participant_id(p: usize) -> String {
    format!("p{:02}", p + 1)
}

/// One unobstructed session per participant, holding one contiguous segment
/// per class in a seeded random order. Segment boundaries fall on frame
/// timestamps so every frame is labeled.
pub fn synthetic_manifest(cfg: &SyntheticDatasetConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let rate = cfg.sample_rate_hz;
    let mut sessions = Vec::with_capacity(cfg.num_participants);
    let mut participants = BTreeSet::new();
    for p in 0..cfg.num_participants {
        let key = SessionKey {
            participant_id: participant_id(p),
            phase: Phase::Unobstructed,
            session_id: "s1".into(),
        };
        let mut order: Vec<ClassId> = (0..cfg.num_classes as ClassId).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, p as u64])));
        let len = cfg.segment_frames(p);
        let annotations = order
            .iter()
            .enumerate()
            .map(|(i, &class_id)| Annotation {
                start_sec: (i * len) as f64 / rate,
                end_sec: ((i + 1) * len) as f64 / rate,
                class_id,
            })
            .collect();
        let view_paths = VIEWS.map(|v| root.join(render_path_template(DEFAULT_PATH_TEMPLATE, &key, v)));
        participants.insert(key.participant_id.clone());
        sessions.push(SessionRecord {
            key,
            view_paths,
            annotations,
        });
    }
    let manifest = DatasetManifest {
        sessions,
        participants,
        sample_rate_hz: rate,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes the annotation CSV and empty placeholder view files under `root`,
/// so the dataset also loads through the regular ingest path.
pub fn write_synthetic_dataset(cfg: &SyntheticDatasetConfig, root: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = synthetic_manifest(cfg, root)?;
    let mut csv = String::from("participant_id,phase,session_id,start_sec,end_sec,class_id\n");
    for s in &manifest.sessions {
        for a in &s.annotations {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.key.participant_id, s.key.phase, s.key.session_id, a.start_sec, a.end_sec, a.class_id
            ));
        }
        for path in &s.view_paths {
            if let Some(parent) = path.parent() {
                create_dir_all(parent)?;
            }
            if !path.exists() {
                std::fs::write(path, b"").io_context(|| format!("creating {}", path.display()))?;
            }
        }
    }
    let ann = root.join(ANNOTATION_FILE);
    write_atomic(&ann, csv.as_bytes())?;
    Ok((manifest, ann))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    #[test]
    fn every_class_gets_its_frame_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig::default();
        let m = synthetic_manifest(&cfg, dir.path()).unwrap();
        assert_eq!(m.participants.len(), 7);
        let mut per_class = [0usize; NUM_CLASSES];
        for s in 0..m.sessions.len() {
            for t in m.frames_for_session(s).unwrap() {
                per_class[t.label.expect("every frame is labeled") as usize] += 1;
            }
        }
        assert!(per_class.iter().all(|&c| c == 200), "{per_class:?}");
        assert_eq!(m.total_frames(), 3200);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig {
            num_participants: 3,
            frames_per_class: 10,
            ..Default::default()
        };
        let (m, ann) = write_synthetic_dataset(&cfg, dir.path()).unwrap();
        let loaded = load_manifest(dir.path(), &ann).unwrap();
        assert_eq!(loaded.sessions.len(), m.sessions.len());
        assert_eq!(loaded.total_frames(), m.total_frames());
        for (a, b) in loaded.sessions.iter().zip(&m.sessions) {
            assert_eq!(a.annotations, b.annotations);
        }
    }

    #[test]
    fn manifest_cache_keeps_frame_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthetic_manifest(&SyntheticDatasetConfig::default(), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        crate::manifest::save_manifest(&path, &m).unwrap();
        let back = crate::manifest::read_manifest_cache(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.total_frames(), 3200);
    }

    #[test]
    fn seeded_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig::default();
        let a = synthetic_manifest(&cfg, dir.path()).unwrap();
        let b = synthetic_manifest(&cfg, dir.path()).unwrap();
        assert_eq!(a, b);
        let c = synthetic_manifest(&SyntheticDatasetConfig { seed: 1, ..cfg }, dir.path()).unwrap();
        assert_ne!(a.sessions[0].annotations, c.sessions[0].annotations);
    }
}
