//! Feature files, annotations, and dataset loading.
//!
//! Feature file layout (little-endian): magic "MRFF", version u8 = 1,
//! dtype u8 = 0 (f32), reserved u16 = 0, T u32, D u32, stride_seconds f32,
//! then T*D f32 values row-major in time-major order.
//!
//! Dataset directory layout:
//!   root/visual/<id>.mrff
//!   root/audio/<id>.mrff
//!   root/annotations.json

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::ActionInstance;

pub const FEATURE_MAGIC: &[u8; 4] = b"MRFF";
pub const FEATURE_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_BYTES: u64 = 20;

/// Writes a time-major [T, D] feature sequence.
pub fn write_feature_file(path: &Path, features: &Tensor<f32>, stride_seconds: f32) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!(
            "feature file expects a [T, D] tensor, got {:?}",
            features.shape()
        )));
    }
    if stride_seconds <= 0.0 {
        return Err(Error::Contract("stride_seconds must be positive".into()));
    }
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&[FEATURE_VERSION, DTYPE_F32])?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&stride_seconds.to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file, returning the channel-major [D, T] tensor the
/// model consumes plus the declared stride.
pub fn read_feature_file(path: &Path) -> Result<(Tensor<f32>, f32)> {
    let f = File::open(path)?;
    let size = f.metadata()?.len();
    let mut r = BufReader::new(f);

    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|e| Error::Format {
        offset: 0,
        message: format!("truncated header: {e}"),
    })?;
    if &head[0..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", &head[0..4], FEATURE_MAGIC),
        });
    }
    if head[4] != FEATURE_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", head[4]),
        });
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::Format {
            offset: 5,
            message: format!("unsupported dtype {}", head[5]),
        });
    }
    let t = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let d = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
    let stride = f32::from_le_bytes([head[16], head[17], head[18], head[19]]);
    if stride <= 0.0 || !stride.is_finite() {
        return Err(Error::Format {
            offset: 16,
            message: format!("stride_seconds must be positive, got {stride}"),
        });
    }
    let expected = t as u64 * d as u64 * 4;
    let actual = size - HEADER_BYTES.min(size);
    if actual != expected {
        return Err(Error::Format {
            offset: HEADER_BYTES,
            message: format!(
                "payload length mismatch: header declares {t}x{d} ({expected} bytes), file holds {actual}"
            ),
        });
    }
    let mut bytes = vec![0u8; expected as usize];
    r.read_exact(&mut bytes).map_err(|e| Error::Format {
        offset: HEADER_BYTES,
        message: format!("truncated payload: {e}"),
    })?;
    // transpose time-major [T, D] to channel-major [D, T]
    let mut data = vec![0.0f32; t * d];
    for ti in 0..t {
        for di in 0..d {
            let o = (ti * d + di) * 4;
            data[di * t + ti] = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        }
    }
    Ok((Tensor::new(vec![d, t], data)?, stride))
}

// ── Annotations ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionRecord {
    pub start_s: f64,
    pub end_s: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub id: String,
    pub duration_s: f64,
    pub actions: Vec<ActionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub videos: Vec<VideoAnnotation>,
    pub labels: Vec<String>,
}

impl AnnotationSet {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        let set: AnnotationSet = serde_json::from_reader(BufReader::new(f))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            if !seen.insert(&v.id) {
                return Err(Error::Validation(format!("duplicate video id {:?}", v.id)));
            }
            if v.duration_s <= 0.0 {
                return Err(Error::Validation(format!(
                    "video {:?}: duration {} must be positive",
                    v.id, v.duration_s
                )));
            }
            for (i, a) in v.actions.iter().enumerate() {
                if !(a.start_s < a.end_s) {
                    return Err(Error::Validation(format!(
                        "video {:?} action {i}: start {} must precede end {}",
                        v.id, a.start_s, a.end_s
                    )));
                }
                if a.start_s < 0.0 || a.end_s > v.duration_s {
                    return Err(Error::Validation(format!(
                        "video {:?} action {i}: [{}, {}] outside [0, {}]",
                        v.id, a.start_s, a.end_s, v.duration_s
                    )));
                }
                if a.label >= self.labels.len() {
                    return Err(Error::Validation(format!(
                        "video {:?} action {i}: label {} not indexed in labels (len {})",
                        v.id,
                        a.label,
                        self.labels.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Dataset ─────────────────────────────────────────────────────────────

/// One fully loaded video: channel-major features plus its annotations.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub id: String,
    /// [D_v, T]
    pub visual: Tensor<f32>,
    /// [D_a, A]
    pub audio: Tensor<f32>,
    pub visual_stride: f64,
    pub audio_stride: f64,
    pub duration: f64,
    pub actions: Vec<ActionInstance>,
}

/// A training/eval view of a video: possibly cropped, possibly padded.
/// Columns at index >= the valid length are masked (zeroed on entry to the
/// model, excluded from attention keys, loss, and decoding).
#[derive(Debug, Clone)]
pub struct Clip {
    pub video_id: String,
    pub visual: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub t_valid: usize,
    pub a_valid: usize,
    pub visual_stride: f64,
    pub audio_stride: f64,
    /// Seconds spanned by the valid region.
    pub duration: f64,
    pub actions: Vec<ActionInstance>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<LoadedVideo>,
    pub labels: Vec<String>,
}

pub fn feature_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        root.join("visual").join(format!("{id}.mrff")),
        root.join("audio").join(format!("{id}.mrff")),
    )
}

/// Loads every annotated video; missing feature files for any id are
/// reported together. Empty (T = 0) sequences are rejected here.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let ann = AnnotationSet::load(&root.join("annotations.json"))?;
    load_dataset_with(root, &ann)
}

pub fn load_dataset_with(root: &Path, ann: &AnnotationSet) -> Result<Dataset> {
    let missing: Vec<String> = ann
        .videos
        .iter()
        .filter(|v| {
            let (vp, ap) = feature_paths(root, &v.id);
            !vp.is_file() || !ap.is_file()
        })
        .map(|v| v.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing feature files for video ids: {}",
            missing.join(", ")
        )));
    }
    let mut videos = Vec::with_capacity(ann.videos.len());
    for v in &ann.videos {
        let (vp, ap) = feature_paths(root, &v.id);
        let (visual, vs) = read_feature_file(&vp)?;
        let (audio, asr) = read_feature_file(&ap)?;
        if visual.shape()[1] == 0 || audio.shape()[1] == 0 {
            return Err(Error::Data(format!("video {:?}: empty sequence", v.id)));
        }
        let actions = v
            .actions
            .iter()
            .map(|a| ActionInstance::new(a.start_s, a.end_s, a.label))
            .collect::<Result<Vec<_>>>()?;
        videos.push(LoadedVideo {
            id: v.id.clone(),
            visual,
            audio,
            visual_stride: vs as f64,
            audio_stride: asr as f64,
            duration: v.duration_s,
            actions,
        });
    }
    Ok(Dataset {
        videos,
        labels: ann.labels.clone(),
    })
}

impl LoadedVideo {
    /// The whole video as one clip, no padding.
    pub fn full_clip(&self) -> Clip {
        let t = self.visual.shape()[1];
        let a = self.audio.shape()[1];
        Clip {
            video_id: self.id.clone(),
            visual: self.visual.clone(),
            audio: self.audio.clone(),
            t_valid: t,
            a_valid: a,
            visual_stride: self.visual_stride,
            audio_stride: self.audio_stride,
            duration: self.duration,
            actions: self.actions.clone(),
        }
    }

    /// Crops to `max_len` visual instants starting at `start_instant`.
    /// Actions fully outside the window are dropped; partial overlaps are
    /// clipped to the window bounds. The audio window covers the same time
    /// span.
    pub fn cropped_clip(&self, start_instant: usize, max_len: usize) -> Result<Clip> {
        let t_total = self.visual.shape()[1];
        if max_len == 0 {
            return Err(Error::Config("crop length must be positive".into()));
        }
        if start_instant >= t_total {
            return Err(Error::Contract(format!(
                "crop start {start_instant} outside sequence of length {t_total}"
            )));
        }
        let len = max_len.min(t_total - start_instant);
        let t0_sec = start_instant as f64 * self.visual_stride;
        let t1_sec = (start_instant + len) as f64 * self.visual_stride;

        let visual = slice_time(&self.visual, start_instant, len);
        let a_total = self.audio.shape()[1];
        let a0 = ((t0_sec / self.audio_stride).floor() as usize).min(a_total.saturating_sub(1));
        let a1 = ((t1_sec / self.audio_stride).ceil() as usize).clamp(a0 + 1, a_total);
        let audio = slice_time(&self.audio, a0, a1 - a0);

        let mut actions = Vec::new();
        for a in &self.actions {
            let s = a.start.max(t0_sec);
            let e = a.end.min(t1_sec);
            if s < e {
                actions.push(ActionInstance {
                    start: s - t0_sec,
                    end: e - t0_sec,
                    label: a.label,
                });
            }
        }
        let (t_valid, a_valid) = (visual.shape()[1], audio.shape()[1]);
        Ok(Clip {
            video_id: self.id.clone(),
            visual,
            audio,
            t_valid,
            a_valid,
            visual_stride: self.visual_stride,
            audio_stride: self.audio_stride,
            duration: t1_sec - t0_sec,
            actions,
        })
    }
}

impl Clip {
    /// Zero-pads both modalities along time; the valid lengths keep marking
    /// the real data.
    pub fn pad_to(&mut self, target_t: usize, target_a: usize) -> Result<()> {
        if target_t < self.t_valid || target_a < self.a_valid {
            return Err(Error::Contract(format!(
                "pad target ({target_t}, {target_a}) below valid lengths ({}, {})",
                self.t_valid, self.a_valid
            )));
        }
        self.visual = pad_time(&self.visual, target_t);
        self.audio = pad_time(&self.audio, target_a);
        Ok(())
    }
}

fn slice_time(x: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let (d, t) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(d * len);
    for ch in 0..d {
        out.extend_from_slice(&x.data()[ch * t + start..ch * t + start + len]);
    }
    Tensor::new(vec![d, len], out).expect("slice shape consistent")
}

fn pad_time(x: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let (d, t) = (x.shape()[0], x.shape()[1]);
    if t >= target {
        return x.clone();
    }
    let mut out = vec![0.0f32; d * target];
    for ch in 0..d {
        out[ch * target..ch * target + t].copy_from_slice(&x.data()[ch * t..(ch + 1) * t]);
    }
    Tensor::new(vec![d, target], out).expect("pad shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn time_major(t: usize, d: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        let mut data = Vec::with_capacity(t * d);
        for ti in 0..t {
            for di in 0..d {
                data.push(f(ti, di));
            }
        }
        Tensor::new(vec![t, d], data).unwrap()
    }

    #[test]
    fn feature_file_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mrff");
        let feats = time_major(5, 3, |t, d| (t * 10 + d) as f32 * 0.125 - 1.0);
        write_feature_file(&path, &feats, 0.96).unwrap();
        let (loaded, stride) = read_feature_file(&path).unwrap();
        assert_eq!(stride, 0.96);
        assert_eq!(loaded.shape(), &[3, 5]);
        for t in 0..5 {
            for d in 0..3 {
                assert_eq!(loaded.at2(d, t), feats.at2(t, d));
            }
        }
    }

    #[test]
    fn zero_length_file_reads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.mrff");
        write_feature_file(&path, &Tensor::zeros(vec![0, 4]), 0.5).unwrap();
        let (t, _) = read_feature_file(&path).unwrap();
        assert_eq!(t.shape(), &[4, 0]);
    }

    #[test]
    fn corrupt_length_names_expected_and_actual() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mrff");
        write_feature_file(&path, &time_major(4, 2, |_, _| 1.0), 0.5).unwrap();
        // truncate two payload bytes
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32 bytes") && msg.contains("30"), "got: {msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.mrff");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn annotation_validation() {
        let mut set = AnnotationSet {
            videos: vec![VideoAnnotation {
                id: "v0".into(),
                duration_s: 10.0,
                actions: vec![ActionRecord {
                    start_s: 3.0,
                    end_s: 3.0,
                    label: 0,
                }],
            }],
            labels: vec!["a".into()],
        };
        let err = set.validate().unwrap_err().to_string();
        assert!(err.contains("v0") && err.contains("precede"), "got {err}");
        set.videos[0].actions[0].end_s = 4.0;
        set.validate().unwrap();
        set.videos[0].actions[0].label = 3;
        assert!(set.validate().is_err());
    }

    fn toy_video() -> LoadedVideo {
        // visual instants at stride 1s, channel value = time index
        let visual = {
            let mut data = Vec::new();
            for ch in 0..2 {
                for t in 0..10 {
                    data.push((ch * 100 + t) as f32);
                }
            }
            Tensor::new(vec![2, 10], data).unwrap()
        };
        let audio = Tensor::new(vec![1, 5], (0..5).map(|x| x as f32).collect()).unwrap();
        LoadedVideo {
            id: "v".into(),
            visual,
            audio,
            visual_stride: 1.0,
            audio_stride: 2.0,
            duration: 10.0,
            actions: vec![
                ActionInstance::new(0.5, 2.0, 0).unwrap(),
                ActionInstance::new(4.0, 9.5, 1).unwrap(),
                ActionInstance::new(8.5, 10.0, 0).unwrap(),
            ],
        }
    }

    #[test]
    fn crop_drops_and_clips_actions() {
        let v = toy_video();
        let clip = v.cropped_clip(3, 4).unwrap(); // window [3s, 7s)
        assert_eq!(clip.t_valid, 4);
        assert_eq!(clip.visual.shape(), &[2, 4]);
        // action 0 entirely before: dropped; action 2 entirely after: dropped
        assert_eq!(clip.actions.len(), 1);
        let a = &clip.actions[0];
        assert_eq!(a.label, 1);
        assert!((a.start - 1.0).abs() < 1e-9); // 4.0 - 3.0
        assert!((a.end - 4.0).abs() < 1e-9); // clipped at 7.0 - 3.0
        // audio window [3s,7s) at stride 2 -> indices 1..4
        assert_eq!(clip.a_valid, 3);
        assert_eq!(clip.audio.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mismatched_lengths_load_intact() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("visual")).unwrap();
        std::fs::create_dir_all(root.join("audio")).unwrap();
        let ann = AnnotationSet {
            videos: vec![VideoAnnotation {
                id: "v0".into(),
                duration_s: 8.0,
                actions: vec![],
            }],
            labels: vec!["a".into()],
        };
        ann.save(&root.join("annotations.json")).unwrap();
        write_feature_file(&root.join("visual/v0.mrff"), &time_major(256, 4, |_, _| 0.0), 0.03125)
            .unwrap();
        write_feature_file(&root.join("audio/v0.mrff"), &time_major(60, 2, |_, _| 0.0), 0.1333)
            .unwrap();
        let ds = load_dataset(root).unwrap();
        assert_eq!(ds.videos[0].visual.shape(), &[4, 256]);
        assert_eq!(ds.videos[0].audio.shape(), &[2, 60]);
        // empty action list is a valid clip
        assert!(ds.videos[0].full_clip().actions.is_empty());
    }

    #[test]
    fn missing_files_listed_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("visual")).unwrap();
        std::fs::create_dir_all(root.join("audio")).unwrap();
        let ann = AnnotationSet {
            videos: vec![
                VideoAnnotation {
                    id: "v0".into(),
                    duration_s: 1.0,
                    actions: vec![],
                },
                VideoAnnotation {
                    id: "v1".into(),
                    duration_s: 1.0,
                    actions: vec![],
                },
            ],
            labels: vec![],
        };
        ann.save(&root.join("annotations.json")).unwrap();
        let err = load_dataset(root).unwrap_err().to_string();
        assert!(err.contains("v0") && err.contains("v1"), "got: {err}");
    }

    #[test]
    fn pad_marks_valid_region() {
        let v = toy_video();
        let mut clip = v.full_clip();
        clip.pad_to(16, 8).unwrap();
        assert_eq!(clip.visual.shape(), &[2, 16]);
        assert_eq!(clip.t_valid, 10);
        assert_eq!(clip.visual.at2(0, 12), 0.0);
        assert_eq!(clip.visual.at2(0, 9), 9.0);
    }
}
