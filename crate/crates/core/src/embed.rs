//! Populates an [`EmbeddingStore`] with one vector per (session, view, frame).

use std::time::Instant;

use crate::encoder::frames::FrameSource;
use crate::encoder::{EncoderBackend, ImageEncoder};
use crate::error::Result;
use crate::manifest::{DatasetManifest, VIEWS};
use crate::store::{EmbeddingKey, EmbeddingStore};
use crate::util::{fnv1a64, mix_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmbedOptions {
    /// Seeds the synthetic backend's per-frame noise.
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EmbedSummary {
    pub written: usize,
    pub already_present: usize,
    /// Unlabeled frames skipped by the synthetic backend, which derives
    /// vectors from labels.
    pub skipped_unlabeled: usize,
    pub failures: Vec<(EmbeddingKey, String)>,
    pub elapsed_sec: f64,
}

impl EmbedSummary {
    pub fn frames_per_sec(&self) -> f64 {
        if self.elapsed_sec > 0.0 {
            self.written as f64 / self.elapsed_sec
        } else {
            0.0
        }
    }
}

/// Store key of a manifest session.
pub fn session_name(manifest: &DatasetManifest, session: usize) -> String {
    manifest.sessions[session].key.to_string()
}

/// Seed of the synthetic noise for one frame of one view.
pub fn synthetic_frame_seed(seed: u64, session: &str, view: usize, frame: u32) -> u64 {
    mix_seed(&[seed, fnv1a64(session.as_bytes()), view as u64, u64::from(frame)])
}

/// Embeds every frame the store does not already hold. Decode and encode
/// failures are collected per key and do not stop the run.
pub fn embed_manifest(
    manifest: &DatasetManifest,
    store: &mut EmbeddingStore,
    backend: &EncoderBackend,
    frames: &dyn FrameSource,
    opts: &EmbedOptions,
) -> Result<EmbedSummary> {
    let started = Instant::now();
    let mut summary = EmbedSummary::default();
    for (s, record) in manifest.sessions.iter().enumerate() {
        let name = session_name(manifest, s);
        let triplets = manifest.frames_for_session(s)?;
        let session_start = Instant::now();
        let before = summary.written;
        for view in VIEWS {
            let v = view.index();
            let todo: Vec<_> = triplets
                .iter()
                .filter(|t| {
                    let present = store.contains(&EmbeddingKey::new(name.clone(), v as u8, t.frame_index));
                    summary.already_present += usize::from(present);
                    !present
                })
                .collect();
            if todo.is_empty() {
                continue;
            }
            if let Some(synth) = backend.as_synthetic() {
                for t in todo {
                    let key = EmbeddingKey::new(name.clone(), v as u8, t.frame_index);
                    let Some(label) = t.label else {
                        summary.skipped_unlabeled += 1;
                        continue;
                    };
                    let seed = synthetic_frame_seed(opts.seed, &name, v, t.frame_index);
                    let e = synth.synthetic_encode(label as usize, v, seed)?;
                    store.put(&key, &e)?;
                    summary.written += 1;
                }
                continue;
            }
            let mut stream = match frames.open(record.view_path(view), manifest.sample_rate_hz) {
                Ok(stream) => stream,
                Err(e) => {
                    log::warn!("{name} {view}: {e}");
                    for t in todo {
                        let key = EmbeddingKey::new(name.clone(), v as u8, t.frame_index);
                        summary.failures.push((key, e.to_string()));
                    }
                    continue;
                }
            };
            for t in todo {
                let key = EmbeddingKey::new(name.clone(), v as u8, t.frame_index);
                match stream.frame(t.frame_index).and_then(|img| backend.encode_image(&img)) {
                    Ok(e) => {
                        store.put(&key, &e)?;
                        summary.written += 1;
                    }
                    Err(e) => {
                        log::warn!("{key}: {e}");
                        summary.failures.push((key, e.to_string()));
                    }
                }
            }
        }
        store.flush()?;
        let secs = session_start.elapsed().as_secs_f64();
        log::info!(
            "{name}: {} vectors in {secs:.1}s ({:.1}/s)",
            summary.written - before,
            (summary.written - before) as f64 / secs.max(1e-9)
        );
    }
    summary.elapsed_sec = started.elapsed().as_secs_f64();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{write_random_weights, ClipBackend, ClipVisionSettings, Pooling};
    use crate::encoder::frames::DefaultFrameSource;
    use crate::encoder::SyntheticSettings;
    use crate::encoder::{EncoderConfig, EncoderKind};
    use crate::manifest::{Annotation, Phase, SessionKey, SessionRecord};
    use image::{Rgb, RgbImage};
    use std::collections::BTreeSet;
    use std::path::Path;

    fn one_session(root: &Path, seconds: f64, rate: f64) -> DatasetManifest {
        let key = SessionKey {
            participant_id: "p1".into(),
            phase: Phase::Unobstructed,
            session_id: "s1".into(),
        };
        let view_paths = VIEWS.map(|v| root.join(v.as_str()));
        DatasetManifest {
            sessions: vec![SessionRecord {
                key,
                view_paths,
                annotations: vec![Annotation {
                    start_sec: 0.0,
                    end_sec: seconds,
                    class_id: 3,
                }],
            }],
            participants: BTreeSet::from(["p1".to_string()]),
            sample_rate_hz: rate,
        }
    }

    #[test]
    fn synthetic_embedding_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = one_session(dir.path(), 2.0, 5.0);
        let cfg = EncoderConfig {
            kind: EncoderKind::Synthetic,
            embed_dim: 8,
            synthetic: SyntheticSettings::default(),
            ..Default::default()
        };
        let backend = EncoderBackend::from_config(&cfg, 16, 3).unwrap();
        let mut store = EmbeddingStore::open_or_create(&dir.path().join("store"), 8).unwrap();
        let src = DefaultFrameSource::default();
        let first = embed_manifest(&manifest, &mut store, &backend, &src, &EmbedOptions::default()).unwrap();
        assert_eq!(first.written, 10 * 3);
        assert_eq!(store.len(), 30);
        let again = embed_manifest(&manifest, &mut store, &backend, &src, &EmbedOptions::default()).unwrap();
        assert_eq!(again.written, 0);
        assert_eq!(again.already_present, 30);
    }

    #[test]
    fn corrupt_frame_is_reported_and_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = one_session(dir.path(), 1.0, 3.0);
        for v in VIEWS {
            let vd = dir.path().join(v.as_str());
            std::fs::create_dir_all(&vd).unwrap();
            for i in 0..3u8 {
                RgbImage::from_pixel(40, 30, Rgb([i * 50, 20 + v.index() as u8, 90]))
                    .save(vd.join(format!("{i:06}.png")))
                    .unwrap();
            }
        }
        std::fs::write(dir.path().join("rear").join("000001.png"), b"garbage").unwrap();
        let settings = ClipVisionSettings {
            hidden_size: 16,
            intermediate_size: 32,
            num_hidden_layers: 1,
            num_attention_heads: 2,
            image_size: 32,
            patch_size: 16,
            projection_dim: 8,
            ..Default::default()
        };
        let weights = write_random_weights(&dir.path().join("clip"), &settings, 1).unwrap();
        let backend = EncoderBackend::PretrainedVl(ClipBackend::load(&weights, Pooling::Cls).unwrap());
        let dim = backend.embed_dim();
        let mut store = EmbeddingStore::open_or_create(&dir.path().join("store"), dim).unwrap();
        let summary = embed_manifest(
            &manifest,
            &mut store,
            &backend,
            &DefaultFrameSource::default(),
            &EmbedOptions::default(),
        )
        .unwrap();
        assert_eq!(summary.written, 8);
        assert_eq!(summary.failures.len(), 1);
        assert_eq!(summary.failures[0].0, EmbeddingKey::new("p1/unobstructed/s1", 1, 1));
    }
}
