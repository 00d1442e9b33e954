//! Pose-sequence ingestion, preprocessing, windowing, subject splits, and
//! synthetic desk-scale motion.
//!
//! Sequences are 3-D joint coordinates in millimeters. The on-disk format is
//! line-oriented text:
//!
//! ```text
//! MSRSEQ1 J=<n> FPS=<f> SUBJECT=<s> ACTION=<a>
//! x0 y0 z0 x1 y1 z1 ...            # one frame per line, 3*J values
//! ```
//!
//! `#` comment lines are allowed before the header only.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::training::Sample;

/// A motion-capture sequence: `frames` holds T x J x 3 coordinates flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    fps: f64,
    subject: String,
    action: String,
    frames: Vec<f64>,
}

impl PoseSequence {
    pub fn new(
        joints: usize,
        fps: f64,
        subject: impl Into<String>,
        action: impl Into<String>,
        frames: Vec<f64>,
    ) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Data("sequence must have at least one joint".into()));
        }
        if fps <= 0.0 || !fps.is_finite() {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        if frames.is_empty() || frames.len() % (joints * 3) != 0 {
            return Err(Error::Data(format!(
                "frame data length {} is not a positive multiple of 3*J = {}",
                frames.len(),
                joints * 3
            )));
        }
        if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite coordinate at flat index {bad}"
            )));
        }
        Ok(PoseSequence {
            joints,
            fps,
            subject: subject.into(),
            action: action.into(),
            frames,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn action(&self) -> &str {
        &self.action
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / (self.joints * 3)
    }

    #[inline]
    pub fn coord(&self, frame: usize, joint: usize, axis: usize) -> f64 {
        self.frames[(frame * self.joints + joint) * 3 + axis]
    }

    /// Node-major view: `(3*J) x T`, row `3*j + axis`.
    pub fn as_matrix(&self) -> Matrix<f64> {
        let (j, t) = (self.joints, self.num_frames());
        Matrix::from_fn(3 * j, t, |r, c| self.coord(c, r / 3, r % 3))
    }

    /// Inverse of [`PoseSequence::as_matrix`].
    pub fn from_matrix(
        m: &Matrix<f64>,
        fps: f64,
        subject: impl Into<String>,
        action: impl Into<String>,
    ) -> Result<Self> {
        if m.rows() % 3 != 0 {
            return Err(Error::Data(format!(
                "matrix rows {} not divisible by 3",
                m.rows()
            )));
        }
        let joints = m.rows() / 3;
        let mut frames = Vec::with_capacity(m.len());
        for t in 0..m.cols() {
            for j in 0..joints {
                for axis in 0..3 {
                    frames.push(m.get(3 * j + axis, t));
                }
            }
        }
        PoseSequence::new(joints, fps, subject, action, frames)
    }

    /// Canonical file text (round-trips through [`parse_sequence`] exactly).
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "MSRSEQ1 J={} FPS={} SUBJECT={} ACTION={}\n",
            self.joints, self.fps, self.subject, self.action
        );
        let width = self.joints * 3;
        for frame in self.frames.chunks(width) {
            let row: Vec<String> = frame.iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn load_sequence(path: &Path) -> Result<PoseSequence> {
    let text = std::fs::read_to_string(path)?;
    parse_sequence(&text)
}

pub fn parse_sequence(text: &str) -> Result<PoseSequence> {
    let mut lines = text.lines().enumerate();

    // Comments and blank lines may precede the header.
    let (header_line, header) = loop {
        match lines.next() {
            Some((i, l)) => {
                let t = l.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                break (i + 1, t.to_string());
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        }
    };

    let tokens: Vec<&str> = header.split_whitespace().collect();
    let bad_header = |message: String| Error::Parse {
        line: header_line,
        message,
    };
    if tokens.len() != 5 || tokens[0] != "MSRSEQ1" {
        return Err(bad_header(format!(
            "expected `MSRSEQ1 J=<n> FPS=<f> SUBJECT=<s> ACTION=<a>`, got `{header}`"
        )));
    }
    let field = |idx: usize, key: &str| -> Result<String> {
        tokens[idx]
            .strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| bad_header(format!("expected {key}=<value>, got `{}`", tokens[idx])))
    };
    let joints: usize = field(1, "J")?
        .parse()
        .map_err(|_| bad_header("bad J value".into()))?;
    let fps: f64 = field(2, "FPS")?
        .parse()
        .map_err(|_| bad_header("bad FPS value".into()))?;
    let subject = field(3, "SUBJECT")?;
    let action = field(4, "ACTION")?;

    let width = joints * 3;
    let mut frames = Vec::new();
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('#') {
            return Err(Error::Parse {
                line: i + 1,
                message: "comments are only allowed before the header".into(),
            });
        }
        let mut count = 0usize;
        for tok in t.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad coordinate `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite coordinate `{tok}` at line {}",
                    i + 1
                )));
            }
            frames.push(v);
            count += 1;
        }
        if count != width {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {width} values per frame, got {count}"),
            });
        }
    }
    PoseSequence::new(joints, fps, subject, action, frames)
}

/// Loads every `.msrseq` file under `dir`, sorted by name for determinism.
pub fn load_dir(dir: &Path) -> Result<Vec<PoseSequence>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("not a directory: {}", dir.display())));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "msrseq"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_sequence(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitRole::Train => write!(f, "train"),
            SplitRole::Val => write!(f, "val"),
            SplitRole::Test => write!(f, "test"),
        }
    }
}

/// Dataset preprocessing and windowing configuration.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    /// Kept source joints, in order. Empty keeps all joints.
    pub joint_selection: Vec<usize>,
    /// Temporal downsampling factor (keep every factor-th frame).
    pub temporal_downsample: usize,
    /// Subject to split-role assignment.
    pub split: HashMap<String, SplitRole>,
    /// Role for subjects not listed in `split`; `None` makes them an error.
    pub default_role: Option<SplitRole>,
    pub t_history: usize,
    pub t_future: usize,
    pub stride: usize,
}

impl Default for DatasetConfig {
    /// The H3.6M protocol: downsample by 2, S5 test, S11 val, rest train.
    fn default() -> Self {
        let mut split = HashMap::new();
        split.insert("S5".to_string(), SplitRole::Test);
        split.insert("S11".to_string(), SplitRole::Val);
        DatasetConfig {
            joint_selection: Vec::new(),
            temporal_downsample: 2,
            split,
            default_role: Some(SplitRole::Train),
            t_history: 10,
            t_future: 25,
            stride: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate_for(&self, seq: &PoseSequence) -> Result<()> {
        if self.temporal_downsample == 0 {
            return Err(Error::Config("temporal_downsample must be >= 1".into()));
        }
        let mut seen = vec![false; seq.joints()];
        for &j in &self.joint_selection {
            if j >= seq.joints() {
                return Err(Error::Config(format!(
                    "joint selection index {j} out of range for {} joints",
                    seq.joints()
                )));
            }
            if seen[j] {
                return Err(Error::Config(format!("joint {j} selected twice")));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

/// Temporal downsampling (keep frames 0, f, 2f, ...) and joint selection;
/// fps is divided by the factor.
pub fn preprocess(seq: &PoseSequence, cfg: &DatasetConfig) -> Result<PoseSequence> {
    cfg.validate_for(seq)?;
    let keep: Vec<usize> = if cfg.joint_selection.is_empty() {
        (0..seq.joints()).collect()
    } else {
        cfg.joint_selection.clone()
    };
    let t_out = (seq.num_frames() + cfg.temporal_downsample - 1) / cfg.temporal_downsample;
    let mut frames = Vec::with_capacity(t_out * keep.len() * 3);
    for ti in 0..t_out {
        let t = ti * cfg.temporal_downsample;
        for &j in &keep {
            for axis in 0..3 {
                frames.push(seq.coord(t, j, axis));
            }
        }
    }
    PoseSequence::new(
        keep.len(),
        seq.fps() / cfg.temporal_downsample as f64,
        seq.subject(),
        seq.action(),
        frames,
    )
}

/// Sliding windows of (history, future) pairs at the given stride.
/// A sequence shorter than one window yields an empty list with a warning.
pub fn window(seq: &PoseSequence, t_history: usize, t_future: usize, stride: usize) -> Vec<Sample> {
    assert!(stride > 0, "stride must be positive");
    let total = t_history + t_future;
    let t = seq.num_frames();
    if t < total {
        log::warn!(
            "sequence {}/{} has {t} frames, shorter than one {total}-frame window",
            seq.subject(),
            seq.action()
        );
        return Vec::new();
    }
    let m = seq.as_matrix();
    let k = m.rows();
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + total <= t {
        let history = Matrix::from_fn(k, t_history, |r, c| m.get(r, start + c));
        let future = Matrix::from_fn(k, t_future, |r, c| m.get(r, start + t_history + c));
        out.push(Sample {
            history,
            future,
            action: seq.action().to_string(),
        });
        start += stride;
    }
    out
}

#[derive(Debug, Default)]
pub struct SplitSets {
    pub train: Vec<PoseSequence>,
    pub val: Vec<PoseSequence>,
    pub test: Vec<PoseSequence>,
}

/// Partitions sequences by subject id per the configured map.
pub fn split_by_subject(sequences: Vec<PoseSequence>, cfg: &DatasetConfig) -> Result<SplitSets> {
    let mut sets = SplitSets::default();
    for seq in sequences {
        let role = cfg
            .split
            .get(seq.subject())
            .copied()
            .or(cfg.default_role)
            .ok_or_else(|| {
                Error::Config(format!("subject {} not mapped to a split", seq.subject()))
            })?;
        match role {
            SplitRole::Train => sets.train.push(seq),
            SplitRole::Val => sets.val.push(seq),
            SplitRole::Test => sets.test.push(seq),
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Sinusoid,
    Linear,
    Static,
}

impl MotionKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sinusoid" => Ok(MotionKind::Sinusoid),
            "linear" => Ok(MotionKind::Linear),
            "static" => Ok(MotionKind::Static),
            other => Err(Error::Config(format!("unknown motion kind `{other}`"))),
        }
    }
}

/// Seeded synthetic motion for desk-scale experiments, in millimeters.
///
/// Sinusoids use low frequencies and per-joint phases so a 10-frame history
/// determines the continuation; that is what makes learning demonstrable.
pub fn synthetic_motion(
    kind: MotionKind,
    joints: usize,
    frames: usize,
    fps: f64,
    seed: u64,
) -> PoseSequence {
    assert!(joints >= 2, "need at least 2 joints");
    assert!(frames >= 1 && fps > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<[f64; 3]> = (0..joints)
        .map(|_| {
            [
                rng.gen::<f64>() * 600.0 - 300.0,
                rng.gen::<f64>() * 600.0 - 300.0,
                rng.gen::<f64>() * 600.0 - 300.0,
            ]
        })
        .collect();

    let mut frames_out = Vec::with_capacity(frames * joints * 3);
    match kind {
        MotionKind::Static => {
            for _ in 0..frames {
                for b in &base {
                    frames_out.extend_from_slice(b);
                }
            }
        }
        MotionKind::Linear => {
            let vel: Vec<[f64; 3]> = (0..joints)
                .map(|_| {
                    [
                        rng.gen::<f64>() * 6.0 - 3.0,
                        rng.gen::<f64>() * 6.0 - 3.0,
                        rng.gen::<f64>() * 6.0 - 3.0,
                    ]
                })
                .collect();
            for t in 0..frames {
                for (b, v) in base.iter().zip(&vel) {
                    for axis in 0..3 {
                        frames_out.push(b[axis] + v[axis] * t as f64);
                    }
                }
            }
        }
        MotionKind::Sinusoid => {
            struct Osc {
                amp: f64,
                freq: f64,
                phase: f64,
            }
            let oscs: Vec<[Osc; 3]> = (0..joints)
                .map(|_| {
                    std::array::from_fn(|_| Osc {
                        amp: 20.0 + rng.gen::<f64>() * 60.0,
                        freq: 0.3 + rng.gen::<f64>() * 0.7,
                        phase: rng.gen::<f64>() * std::f64::consts::TAU,
                    })
                })
                .collect();
            for t in 0..frames {
                let time = t as f64 / fps;
                for (b, osc) in base.iter().zip(&oscs) {
                    for axis in 0..3 {
                        let o = &osc[axis];
                        frames_out.push(
                            b[axis] + o.amp * (std::f64::consts::TAU * o.freq * time + o.phase).sin(),
                        );
                    }
                }
            }
        }
    }
    let action = match kind {
        MotionKind::Sinusoid => "sinusoid",
        MotionKind::Linear => "linear",
        MotionKind::Static => "static",
    };
    PoseSequence::new(joints, fps, "SYN", action, frames_out).expect("synthetic data is finite")
}
