//! Dataset ingestion: annotation intervals, session records, frame triplets
//! and subject-wise fold partitions.
//!
//! A dataset is a set of recording sessions. Every session has one video (or
//! frame directory) per camera view and a list of annotated activity
//! intervals. Intervals are half-open `[start, end)` in seconds; frames that
//! fall outside every interval are unlabeled and never trained on or scored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Number of activity classes in the default label set.
pub const NUM_CLASSES: usize = 16;

/// Default frame sampling rate.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 30.0;

/// Default layout of view files below the dataset root.
pub const DEFAULT_PATH_TEMPLATE: &str = "{participant}/{phase}/{view}.mp4";

pub type ClassId = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivityClass {
    pub id: ClassId,
    pub name: &'static str,
}

pub const ACTIVITY_CLASSES: [ActivityClass; NUM_CLASSES] = [
    ActivityClass { id: 0, name: "Normal Forward Driving" },
    ActivityClass { id: 1, name: "Drinking" },
    ActivityClass { id: 2, name: "Phone Call (right)" },
    ActivityClass { id: 3, name: "Phone Call (left)" },
    ActivityClass { id: 4, name: "Eating" },
    ActivityClass { id: 5, name: "Text (right)" },
    ActivityClass { id: 6, name: "Text (left)" },
    ActivityClass { id: 7, name: "Reaching behind" },
    ActivityClass { id: 8, name: "Adjust control panel" },
    ActivityClass { id: 9, name: "Pick up from floor (driver)" },
    ActivityClass { id: 10, name: "Pick up from floor (passenger)" },
    ActivityClass { id: 11, name: "Talk to passenger at the right" },
    ActivityClass { id: 12, name: "Talk to passenger at backseat" },
    ActivityClass { id: 13, name: "Yawning" },
    ActivityClass { id: 14, name: "Hand on head" },
    ActivityClass { id: 15, name: "Singing or dancing with music" },
];

pub fn class_name(id: ClassId) -> Option<&'static str> {
    ACTIVITY_CLASSES.get(id as usize).map(|c| c.name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Unobstructed,
    Obstructed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Unobstructed => "unobstructed",
            Phase::Obstructed => "obstructed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unobstructed" => Ok(Phase::Unobstructed),
            "obstructed" => Ok(Phase::Obstructed),
            other => Err(Error::Validation(format!(
                "unknown phase {other:?} (expected unobstructed or obstructed)"
            ))),
        }
    }
}

/// Camera views, in the fixed order the network consumes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Dashboard = 0,
    Rear = 1,
    Side = 2,
}

pub const VIEWS: [View; 3] = [View::Dashboard, View::Rear, View::Side];

impl View {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<View> {
        VIEWS.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Dashboard => "dashboard",
            View::Rear => "rear",
            View::Side => "side",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub start_sec: f64,
    pub end_sec: f64,
    pub class_id: ClassId,
}

impl Annotation {
    pub fn contains(&self, t: f64) -> bool {
        self.start_sec <= t && t < self.end_sec
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub participant_id: String,
    pub phase: Phase,
    pub session_id: String,
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.participant_id, self.phase, self.session_id)
    }
}

impl FromStr for SessionKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, '/');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(phase), Some(sid)) if !p.is_empty() && !sid.is_empty() => Ok(SessionKey {
                participant_id: p.to_string(),
                phase: phase.parse()?,
                session_id: sid.to_string(),
            }),
            _ => Err(Error::Validation(format!("malformed session key {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub key: SessionKey,
    /// Indexed by [`View::index`].
    pub view_paths: [PathBuf; 3],
    /// Sorted by start time, pairwise non-overlapping.
    pub annotations: Vec<Annotation>,
}

impl SessionRecord {
    pub fn participant_id(&self) -> &str {
        &self.key.participant_id
    }

    pub fn view_path(&self, view: View) -> &Path {
        &self.view_paths[view.index()]
    }

    /// End of the last annotated interval, in seconds.
    pub fn duration_sec(&self) -> f64 {
        self.annotations.iter().map(|a| a.end_sec).fold(0.0, f64::max)
    }

    pub fn label_at(&self, t: f64) -> Option<ClassId> {
        self.annotations.iter().find(|a| a.contains(t)).map(|a| a.class_id)
    }

    fn validate(&self) -> Result<()> {
        let name = self.key.to_string();
        for a in &self.annotations {
            if !(a.start_sec.is_finite() && a.end_sec.is_finite()) || a.start_sec < 0.0 {
                return Err(Error::Validation(format!(
                    "session {name}: interval [{}, {}) has negative or non-finite bounds",
                    a.start_sec, a.end_sec
                )));
            }
            if a.end_sec <= a.start_sec {
                return Err(Error::Validation(format!(
                    "session {name}: interval [{}, {}) must end after it starts",
                    a.start_sec, a.end_sec
                )));
            }
            if a.class_id as usize >= NUM_CLASSES {
                return Err(Error::UnknownClass(a.class_id as i64));
            }
        }
        for pair in self.annotations.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.start_sec < a.start_sec {
                return Err(Error::Validation(format!("session {name}: annotations not sorted")));
            }
            if a.end_sec > b.start_sec {
                return Err(Error::OverlappingIntervals {
                    session: name,
                    a_start: a.start_sec,
                    a_end: a.end_sec,
                    b_start: b.start_sec,
                    b_end: b.end_sec,
                });
            }
        }
        Ok(())
    }
}

/// Number of frames `i >= 0` whose timestamp `i / rate` lies before `duration`.
///
/// Equal to `ceil(duration * rate)` up to floating-point rounding of the
/// product, which this resolves against the timestamps actually emitted.
pub fn frame_count(duration_sec: f64, rate_hz: f64) -> usize {
    if duration_sec <= 0.0 {
        return 0;
    }
    let mut n = (duration_sec * rate_hz).ceil() as usize;
    while n > 0 && (n - 1) as f64 / rate_hz >= duration_sec {
        n -= 1;
    }
    while (n as f64) / rate_hz < duration_sec {
        n += 1;
    }
    n
}

/// Reference to one decoded frame of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub view: View,
    pub frame_index: u32,
}

/// One synchronized frame from each view.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    /// Index into [`DatasetManifest::sessions`].
    pub session: usize,
    pub frame_index: u32,
    pub timestamp: f64,
    pub views: [FrameRef; 3],
    /// `None` marks an unlabeled frame.
    pub label: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sessions: Vec<SessionRecord>,
    pub participants: BTreeSet<String>,
    pub sample_rate_hz: f64,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Placeholders: `{participant}`, `{phase}`, `{session}`, `{view}`.
    pub path_template: String,
    pub sample_rate_hz: f64,
    /// Keep only sessions from this phase.
    pub phase: Option<Phase>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            path_template: DEFAULT_PATH_TEMPLATE.to_string(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            phase: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    participant_id: String,
    phase: String,
    session_id: String,
    start_sec: f64,
    end_sec: f64,
    class_id: i64,
}

pub fn render_path_template(template: &str, key: &SessionKey, view: View) -> String {
    template
        .replace("{participant}", &key.participant_id)
        .replace("{phase}", key.phase.as_str())
        .replace("{session}", &key.session_id)
        .replace("{view}", view.as_str())
}

pub fn load_manifest(root: &Path, annotation_path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(root, annotation_path, &LoadOptions::default())
}

pub fn load_manifest_with(root: &Path, annotation_path: &Path, opts: &LoadOptions) -> Result<DatasetManifest> {
    if !(opts.sample_rate_hz > 0.0 && opts.sample_rate_hz.is_finite()) {
        return Err(Error::Validation(format!(
            "sample rate must be positive, got {}",
            opts.sample_rate_hz
        )));
    }
    if !root.is_dir() {
        return Err(Error::Validation(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let file = std::fs::File::open(annotation_path)
        .io_context(|| format!("opening annotation file {}", annotation_path.display()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);

    let expected = ["participant_id", "phase", "session_id", "start_sec", "end_sec", "class_id"];
    let headers = reader.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Validation(format!(
            "annotation header must be {:?}, found {:?}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut grouped: BTreeMap<SessionKey, Vec<Annotation>> = BTreeMap::new();
    for row in reader.deserialize::<AnnotationRow>() {
        let row = row?;
        if row.class_id < 0 || row.class_id as usize >= NUM_CLASSES {
            return Err(Error::UnknownClass(row.class_id));
        }
        let key = SessionKey {
            participant_id: row.participant_id,
            phase: row.phase.parse()?,
            session_id: row.session_id,
        };
        if key.participant_id.is_empty() || key.participant_id.contains('/') || key.session_id.contains('/') {
            return Err(Error::Validation(format!("invalid participant or session id in {key}")));
        }
        grouped.entry(key).or_default().push(Annotation {
            start_sec: row.start_sec,
            end_sec: row.end_sec,
            class_id: row.class_id as ClassId,
        });
    }

    let mut sessions = Vec::with_capacity(grouped.len());
    for (key, mut annotations) in grouped {
        if opts.phase.is_some_and(|p| p != key.phase) {
            continue;
        }
        annotations.sort_by(|a, b| a.start_sec.total_cmp(&b.start_sec));
        let view_paths = VIEWS.map(|v| root.join(render_path_template(&opts.path_template, &key, v)));
        for v in VIEWS {
            let path = &view_paths[v.index()];
            if !path.exists() {
                return Err(Error::MissingView {
                    session: key.to_string(),
                    view: v.to_string(),
                    path: path.clone(),
                });
            }
        }
        let record = SessionRecord {
            key,
            view_paths,
            annotations,
        };
        record.validate()?;
        sessions.push(record);
    }

    let participants = sessions.iter().map(|s| s.key.participant_id.clone()).collect();
    let manifest = DatasetManifest {
        sessions,
        participants,
        sample_rate_hz: opts.sample_rate_hz,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Validation(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sessions {
            if !self.participants.contains(&s.key.participant_id) {
                return Err(Error::Validation(format!(
                    "session {} names participant {} missing from the participant set",
                    s.key, s.key.participant_id
                )));
            }
            if !seen.insert(&s.key) {
                return Err(Error::Validation(format!("duplicate session {}", s.key)));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn session_index(&self, key: &SessionKey) -> Option<usize> {
        self.sessions.iter().position(|s| &s.key == key)
    }

    /// Drops sessions of the other phase and participants left without sessions.
    pub fn filter_phase(&self, phase: Phase) -> DatasetManifest {
        let sessions: Vec<_> = self.sessions.iter().filter(|s| s.key.phase == phase).cloned().collect();
        let participants = sessions.iter().map(|s| s.key.participant_id.clone()).collect();
        DatasetManifest {
            sessions,
            participants,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn session_frame_count(&self, session: usize) -> usize {
        frame_count(self.sessions[session].duration_sec(), self.sample_rate_hz)
    }

    pub fn total_frames(&self) -> usize {
        (0..self.sessions.len()).map(|i| self.session_frame_count(i)).sum()
    }

    /// Frame triplets of one session at the manifest's sampling rate, from
    /// `t = 0` up to the end of the last annotation.
    pub fn frames_for_session(&self, session: usize) -> Result<Vec<FrameTriplet>> {
        let record = self.sessions.get(session).ok_or_else(|| {
            Error::Validation(format!(
                "session index {session} out of range ({} sessions)",
                self.sessions.len()
            ))
        })?;
        let n = self.session_frame_count(session);
        let rate = self.sample_rate_hz;
        let mut cursor = 0usize;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let timestamp = i as f64 / rate;
            while cursor < record.annotations.len() && record.annotations[cursor].end_sec <= timestamp {
                cursor += 1;
            }
            let label = record
                .annotations
                .get(cursor)
                .filter(|a| a.contains(timestamp))
                .map(|a| a.class_id);
            let frame_index = i as u32;
            out.push(FrameTriplet {
                session,
                frame_index,
                timestamp,
                views: VIEWS.map(|view| FrameRef { view, frame_index }),
                label,
            });
        }
        Ok(out)
    }
}

/// Assignment of participants to `k` disjoint test folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.assignment.get(participant).copied()
    }

    pub fn participants_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Builds the fold partition, either verbatim from `fold_file` or by
/// round-robin over the lexicographically sorted participant ids.
pub fn make_folds(manifest: &DatasetManifest, k: usize, fold_file: Option<&Path>) -> Result<FoldSpec> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    let assignment = match fold_file {
        None => manifest
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i % k))
            .collect(),
        Some(path) => read_fold_file(path, k, &manifest.participants)?,
    };
    Ok(FoldSpec { k, assignment })
}

fn read_fold_file(path: &Path, k: usize, participants: &BTreeSet<String>) -> Result<BTreeMap<String, usize>> {
    #[derive(Deserialize)]
    struct Row {
        participant_id: String,
        fold_index: i64,
    }
    let file = std::fs::File::open(path).io_context(|| format!("opening fold file {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut assignment = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        if row.fold_index < 0 || row.fold_index as usize >= k {
            return Err(Error::Validation(format!(
                "fold file assigns {} to fold {} outside [0, {k})",
                row.participant_id, row.fold_index
            )));
        }
        if !participants.contains(&row.participant_id) {
            return Err(Error::Validation(format!(
                "fold file names unknown participant {}",
                row.participant_id
            )));
        }
        if assignment.insert(row.participant_id.clone(), row.fold_index as usize).is_some() {
            return Err(Error::Validation(format!(
                "fold file assigns participant {} more than once",
                row.participant_id
            )));
        }
    }
    if let Some(missing) = participants.iter().find(|p| !assignment.contains_key(*p)) {
        return Err(Error::Validation(format!("fold file does not assign participant {missing}")));
    }
    Ok(assignment)
}

pub fn write_fold_file(path: &Path, folds: &FoldSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["participant_id", "fold_index"])?;
    for (p, f) in &folds.assignment {
        w.write_record([p.as_str(), &f.to_string()])?;
    }
    w.flush().io_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Frame-level random split into (train, validation) index sets.
///
/// The validation set holds `round(n * val_fraction)` indices; both halves
/// come back sorted ascending.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::Validation("cannot split an empty frame set".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(items.len(), val_fraction, seed)?;
    Ok((
        train.into_iter().map(|i| items[i].clone()).collect(),
        val.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    crate::util::write_atomic(path, &json)
}

pub fn read_manifest_cache(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).io_context(|| format!("reading manifest cache {}", path.display()))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch_views(root: &Path, participant: &str, phase: &str) {
        let dir = root.join(participant).join(phase);
        fs::create_dir_all(&dir).unwrap();
        for v in VIEWS {
            fs::write(dir.join(format!("{v}.mp4")), b"").unwrap();
        }
    }

    fn write_csv(path: &Path, rows: &[&str]) {
        let mut body = String::from("participant_id,phase,session_id,start_sec,end_sec,class_id\n");
        for r in rows {
            body.push_str(r);
            body.push('\n');
        }
        fs::write(path, body).unwrap();
    }

    #[test]
    fn minimal_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        touch_views(dir.path(), "p1", "unobstructed");
        touch_views(dir.path(), "p1", "obstructed");
        let csv = dir.path().join("ann.csv");
        write_csv(
            &csv,
            &["p1,unobstructed,s1,0,5,0", "p1,unobstructed,s1,5,8,3", "p1,obstructed,s2,0,4,1"],
        );
        let m = load_manifest(dir.path(), &csv).unwrap();
        assert_eq!(m.participants.len(), 1);
        assert_eq!(m.sessions.len(), 2);
        assert_eq!(m.sample_rate_hz, 30.0);
    }

    #[test]
    fn class_16_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        touch_views(dir.path(), "p1", "unobstructed");
        let csv = dir.path().join("ann.csv");
        write_csv(&csv, &["p1,unobstructed,s1,0,5,16"]);
        let err = load_manifest(dir.path(), &csv).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(16)), "{err}");
        assert!(err.to_string().contains("unknown class"));
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch_views(dir.path(), "p1", "unobstructed");
        let csv = dir.path().join("ann.csv");
        write_csv(&csv, &["p1,unobstructed,s1,0,5,0", "p1,unobstructed,s1,4,8,1"]);
        match load_manifest(dir.path(), &csv).unwrap_err() {
            Error::OverlappingIntervals { a_start, a_end, b_start, b_end, .. } => {
                assert_eq!((a_start, a_end, b_start, b_end), (0.0, 5.0, 4.0, 8.0));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_view_names_session_and_view() {
        let dir = tempfile::tempdir().unwrap();
        touch_views(dir.path(), "p1", "unobstructed");
        fs::remove_file(dir.path().join("p1/unobstructed/rear.mp4")).unwrap();
        let csv = dir.path().join("ann.csv");
        write_csv(&csv, &["p1,unobstructed,s1,0,5,0"]);
        let err = load_manifest(dir.path(), &csv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("p1/unobstructed/s1") && msg.contains("rear"), "{msg}");
    }

    #[test]
    fn bad_header_and_reversed_interval() {
        let dir = tempfile::tempdir().unwrap();
        touch_views(dir.path(), "p1", "unobstructed");
        let csv = dir.path().join("ann.csv");
        fs::write(&csv, "p,phase,s,a,b,c\np1,unobstructed,s1,0,5,0\n").unwrap();
        assert!(load_manifest(dir.path(), &csv).is_err());
        write_csv(&csv, &["p1,unobstructed,s1,5,5,0"]);
        assert!(matches!(load_manifest(dir.path(), &csv), Err(Error::Validation(_))));
        write_csv(&csv, &["p1,unobstructed,s1,-1,5,0"]);
        assert!(matches!(load_manifest(dir.path(), &csv), Err(Error::Validation(_))));
    }

    #[test]
    fn phase_filter_and_template() {
        let dir = tempfile::tempdir().unwrap();
        for v in VIEWS {
            let p = dir.path().join(format!("clips/p1_s1_{v}"));
            fs::create_dir_all(&p).unwrap();
        }
        touch_views(dir.path(), "p1", "obstructed");
        let csv = dir.path().join("ann.csv");
        write_csv(&csv, &["p1,unobstructed,s1,0,5,0", "p1,obstructed,s2,0,5,0"]);
        let opts = LoadOptions {
            path_template: "clips/{participant}_{session}_{view}".into(),
            phase: Some(Phase::Unobstructed),
            ..LoadOptions::default()
        };
        let m = load_manifest_with(dir.path(), &csv, &opts).unwrap();
        assert_eq!(m.sessions.len(), 1);
        assert!(m.sessions[0].view_path(View::Side).ends_with("clips/p1_s1_side"));
    }

    fn one_session(annotations: Vec<Annotation>) -> DatasetManifest {
        let key = SessionKey {
            participant_id: "p".into(),
            phase: Phase::Unobstructed,
            session_id: "s".into(),
        };
        DatasetManifest {
            sessions: vec![SessionRecord {
                key,
                view_paths: VIEWS.map(|v| PathBuf::from(v.as_str())),
                annotations,
            }],
            participants: ["p".to_string()].into(),
            sample_rate_hz: 30.0,
        }
    }

    #[test]
    fn one_second_at_30hz_gives_30_labeled_frames() {
        let m = one_session(vec![Annotation { start_sec: 0.0, end_sec: 1.0, class_id: 3 }]);
        let frames = m.frames_for_session(0).unwrap();
        assert_eq!(frames.len(), 30);
        assert!(frames.iter().all(|f| f.label == Some(3)));
    }

    #[test]
    fn ten_seconds_gives_300_indexed_frames() {
        let m = one_session(vec![Annotation { start_sec: 0.0, end_sec: 10.0, class_id: 0 }]);
        let frames = m.frames_for_session(0).unwrap();
        assert_eq!(frames.len(), 300);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.frame_index as usize, i);
            assert_eq!(f.timestamp, i as f64 / 30.0);
            assert_eq!(f.views.len(), 3);
        }
    }

    #[test]
    fn interval_end_is_exclusive() {
        let m = one_session(vec![
            Annotation { start_sec: 0.0, end_sec: 1.0, class_id: 3 },
            Annotation { start_sec: 1.0, end_sec: 2.0, class_id: 5 },
            Annotation { start_sec: 3.0, end_sec: 4.0, class_id: 7 },
        ]);
        let frames = m.frames_for_session(0).unwrap();
        assert_eq!(frames[29].label, Some(3));
        assert_eq!(frames[30].label, Some(5));
        assert_eq!(frames[60].label, None);
        assert_eq!(frames[89].label, None);
        assert_eq!(frames[90].label, Some(7));
        assert_eq!(frames.len(), 120);
    }

    #[test]
    fn frame_count_matches_ceil() {
        assert_eq!(frame_count(0.0, 30.0), 0);
        assert_eq!(frame_count(1.0, 30.0), 30);
        assert_eq!(frame_count(1.01, 30.0), 31);
        assert_eq!(frame_count(464.0 / 30.0, 30.0), 464);
    }

    fn participants(n: usize) -> DatasetManifest {
        DatasetManifest {
            sessions: vec![],
            participants: (0..n).map(|i| format!("p{i:03}")).collect(),
            sample_rate_hz: 30.0,
        }
    }

    #[test]
    fn sixty_nine_participants_in_seven_folds() {
        let folds = make_folds(&participants(69), 7, None).unwrap();
        let mut sizes = folds.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![9, 10, 10, 10, 10, 10, 10]);
        assert_eq!(folds.assignment.len(), 69);
    }

    #[test]
    fn seven_participants_one_per_fold() {
        let folds = make_folds(&participants(7), 7, None).unwrap();
        assert_eq!(folds.sizes(), vec![1; 7]);
    }

    #[test]
    fn fold_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = participants(3);
        let path = dir.path().join("folds.csv");
        fs::write(&path, "participant_id,fold_index\np000,0\np001,1\np002,1\n").unwrap();
        let f = make_folds(&m, 2, Some(&path)).unwrap();
        assert_eq!(f.fold_of("p002"), Some(1));

        fs::write(&path, "participant_id,fold_index\np000,0\np000,1\np001,1\np002,0\n").unwrap();
        assert!(matches!(make_folds(&m, 2, Some(&path)), Err(Error::Validation(_))));
        fs::write(&path, "participant_id,fold_index\np000,0\np001,1\n").unwrap();
        assert!(matches!(make_folds(&m, 2, Some(&path)), Err(Error::Validation(_))));
        fs::write(&path, "participant_id,fold_index\np000,0\np001,1\np002,0\nzzz,1\n").unwrap();
        assert!(matches!(make_folds(&m, 2, Some(&path)), Err(Error::Validation(_))));
        assert!(make_folds(&m, 1, None).is_err());
    }

    #[test]
    fn split_eighty_twenty() {
        let items: Vec<u32> = (0..100).collect();
        let (train, val) = split_train_val(&items, 0.2, 7).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        let all: BTreeSet<_> = train.iter().chain(&val).copied().collect();
        assert_eq!(all.len(), 100);
        assert_eq!(split_train_val(&items, 0.2, 7).unwrap(), (train, val));
        assert!(split_train_val(&items, 0.0, 7).is_err());
        assert!(split_train_val::<u32>(&[], 0.2, 7).is_err());
    }

    #[test]
    fn session_key_round_trips_through_display() {
        let key = SessionKey {
            participant_id: "user_1".into(),
            phase: Phase::Obstructed,
            session_id: "Rear_3".into(),
        };
        assert_eq!(key.to_string().parse::<SessionKey>().unwrap(), key);
    }
}
