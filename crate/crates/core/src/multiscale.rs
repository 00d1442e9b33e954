//! Joint-grouping pose abstraction: the fine-to-coarse pyramid used for
//! model inputs, ground truth, and global residuals.
//!
//! A coarse joint is the centroid of its group, per axis. Abstraction is
//! therefore linear and permutation-invariant within a group.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// One scale transition: `groups[coarse]` lists the finer-scale joints
/// replaced by coarse joint `coarse`.
pub type Partition = Vec<Vec<usize>>;

/// Ordered chain of joint counts with one partition per adjacent pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    scales: Vec<usize>,
    maps: Vec<Partition>,
}

/// A single constraint violation found by [`validate_grouping`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Unassigned { transition: usize, joint: usize },
    Duplicate { transition: usize, joint: usize },
    EmptyGroup { transition: usize, group: usize },
    OutOfRange { transition: usize, joint: usize },
    NotDecreasing { transition: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned { transition, joint } => {
                write!(f, "transition {transition}: joint {joint} unassigned")
            }
            Violation::Duplicate { transition, joint } => {
                write!(f, "transition {transition}: joint {joint} assigned twice")
            }
            Violation::EmptyGroup { transition, group } => {
                write!(f, "transition {transition}: group {group} empty")
            }
            Violation::OutOfRange { transition, joint } => {
                write!(f, "transition {transition}: joint {joint} out of range")
            }
            Violation::NotDecreasing { transition } => {
                write!(f, "transition {transition}: scales not strictly decreasing")
            }
        }
    }
}

/// Checks that a partition totally covers `fine` joints with `groups.len()`
/// non-empty groups. Violations are data, not faults.
pub fn validate_partition(transition: usize, fine: usize, groups: &Partition) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = vec![0usize; fine];
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            violations.push(Violation::EmptyGroup {
                transition,
                group: gi,
            });
        }
        for &j in group {
            if j >= fine {
                violations.push(Violation::OutOfRange {
                    transition,
                    joint: j,
                });
            } else {
                seen[j] += 1;
            }
        }
    }
    for (j, &count) in seen.iter().enumerate() {
        match count {
            0 => violations.push(Violation::Unassigned {
                transition,
                joint: j,
            }),
            1 => {}
            _ => violations.push(Violation::Duplicate {
                transition,
                joint: j,
            }),
        }
    }
    violations
}

/// Full-scheme validation: every transition is a total partition and the
/// joint counts strictly decrease.
pub fn validate_grouping(scheme: &GroupingScheme) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (t, map) in scheme.maps.iter().enumerate() {
        if map.len() >= scheme.scales[t] {
            violations.push(Violation::NotDecreasing { transition: t });
        }
        violations.extend(validate_partition(t, scheme.scales[t], map));
    }
    violations
}

impl GroupingScheme {
    /// Builds and validates a scheme from the finest joint count and the
    /// partition chain.
    pub fn new(finest_joints: usize, maps: Vec<Partition>) -> Result<Self> {
        let mut scales = vec![finest_joints];
        for map in &maps {
            scales.push(map.len());
        }
        let scheme = GroupingScheme { scales, maps };
        let violations = validate_grouping(&scheme);
        if violations.is_empty() {
            Ok(scheme)
        } else {
            let list = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::InvalidGrouping(list))
        }
    }

    /// Joint counts per scale, finest first.
    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// Node counts per scale (3 coordinates per joint).
    pub fn node_counts(&self) -> Vec<usize> {
        self.scales.iter().map(|j| j * 3).collect()
    }

    pub fn maps(&self) -> &[Partition] {
        &self.maps
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// The finest `levels` scales of this scheme.
    pub fn truncated(&self, levels: usize) -> Result<Self> {
        if levels == 0 || levels > self.num_scales() {
            return Err(Error::Config(format!(
                "levels {levels} outside 1..={}",
                self.num_scales()
            )));
        }
        Ok(GroupingScheme {
            scales: self.scales[..levels].to_vec(),
            maps: self.maps[..levels - 1].to_vec(),
        })
    }

    /// Canonical text form (the grouping file format).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, map) in self.maps.iter().enumerate() {
            if t > 0 {
                out.push('\n');
            }
            for (coarse, group) in map.iter().enumerate() {
                let fine: Vec<String> = group.iter().map(|j| j.to_string()).collect();
                out.push_str(&format!("{coarse}: {}\n", fine.join(", ")));
            }
        }
        out
    }
}

/// Parses the grouping file format: one scale transition per blank-line
/// separated block, each line `coarse_index: fine, fine, ...`, `#` comments.
pub fn parse_grouping(text: &str) -> Result<GroupingScheme> {
    let mut blocks: Vec<Vec<(usize, Vec<usize>, usize)>> = Vec::new();
    let mut current: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (coarse, fine) = line.split_once(':').ok_or(Error::Parse {
            line: lineno + 1,
            message: "expected `coarse: fine, fine, ...`".into(),
        })?;
        let coarse: usize = coarse.trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("bad coarse index `{}`", coarse.trim()),
        })?;
        let mut joints = Vec::new();
        for tok in fine.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            joints.push(tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("bad joint index `{tok}`"),
            })?);
        }
        current.push((coarse, joints, lineno + 1));
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    if blocks.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no transitions found".into(),
        });
    }

    let mut maps = Vec::new();
    for block in &blocks {
        let mut map: Partition = vec![Vec::new(); block.len()];
        for (coarse, joints, lineno) in block {
            if *coarse >= map.len() {
                return Err(Error::Parse {
                    line: *lineno,
                    message: format!(
                        "coarse index {coarse} out of range (block has {} lines)",
                        map.len()
                    ),
                });
            }
            if !map[*coarse].is_empty() {
                return Err(Error::Parse {
                    line: *lineno,
                    message: format!("coarse index {coarse} defined twice"),
                });
            }
            map[*coarse] = joints.clone();
        }
        maps.push(map);
    }

    let finest = maps[0].iter().map(|g| g.len()).sum();
    GroupingScheme::new(finest, maps)
}

pub fn load_grouping(path: &Path) -> Result<GroupingScheme> {
    let text = std::fs::read_to_string(path)?;
    parse_grouping(&text)
}

/// Built-in grouping tables shipped with the crate.
pub fn builtin_grouping(name: &str) -> Option<GroupingScheme> {
    let text = match name {
        "h36m_22_12_7_4" => include_str!("../assets/groupings/h36m_22_12_7_4.grouping"),
        "cmu_25_12_7_4" => include_str!("../assets/groupings/cmu_25_12_7_4.grouping"),
        "cmu_25_10_5_3" => include_str!("../assets/groupings/cmu_25_10_5_3.grouping"),
        _ => return None,
    };
    Some(parse_grouping(text).expect("built-in grouping is valid"))
}

pub fn builtin_grouping_names() -> &'static [&'static str] {
    &["h36m_22_12_7_4", "cmu_25_12_7_4", "cmu_25_10_5_3"]
}

/// Replaces each group of a `J x 3` pose with its centroid.
pub fn abstract_pose<T: Scalar>(pose: &Matrix<T>, map: &Partition) -> Result<Matrix<T>> {
    if pose.cols() != 3 {
        return Err(Error::shape("abstract_pose", pose.dims(), (pose.rows(), 3)));
    }
    let violations = validate_partition(0, pose.rows(), map);
    if !violations.is_empty() {
        return Err(Error::InvalidGrouping(violations[0].to_string()));
    }
    let mut out = Matrix::zeros(map.len(), 3);
    for (coarse, group) in map.iter().enumerate() {
        let inv = T::from_f64(1.0 / group.len() as f64);
        for axis in 0..3 {
            let mut s = T::zero();
            for &j in group {
                s += pose.get(j, axis);
            }
            out.set(coarse, axis, s * inv);
        }
    }
    Ok(out)
}

/// Frame-wise abstraction of a `(3J) x T` sequence to `(3J') x T`.
pub fn abstract_sequence<T: Scalar>(seq: &Matrix<T>, map: &Partition) -> Result<Matrix<T>> {
    if seq.rows() % 3 != 0 {
        return Err(Error::Data(format!(
            "sequence rows {} not divisible by 3",
            seq.rows()
        )));
    }
    let fine_joints = seq.rows() / 3;
    let violations = validate_partition(0, fine_joints, map);
    if !violations.is_empty() {
        return Err(Error::InvalidGrouping(violations[0].to_string()));
    }
    let mut out = Matrix::zeros(map.len() * 3, seq.cols());
    for (coarse, group) in map.iter().enumerate() {
        let inv = T::from_f64(1.0 / group.len() as f64);
        for axis in 0..3 {
            for t in 0..seq.cols() {
                let mut s = T::zero();
                for &j in group {
                    s += seq.get(3 * j + axis, t);
                }
                out.set(3 * coarse + axis, t, s * inv);
            }
        }
    }
    Ok(out)
}

/// Per-scale representations of one sequence; scale 0 is the input itself.
#[derive(Debug, Clone)]
pub struct ScalePyramid<T> {
    scales: Vec<Matrix<T>>,
}

impl<T: Scalar> ScalePyramid<T> {
    pub fn scale(&self, s: usize) -> &Matrix<T> {
        &self.scales[s]
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[Matrix<T>] {
        &self.scales
    }
}

/// Applies the abstraction chain frame by frame down every scale.
pub fn build_pyramid<T: Scalar>(
    seq: &Matrix<T>,
    scheme: &GroupingScheme,
) -> Result<ScalePyramid<T>> {
    let expected = scheme.scales()[0] * 3;
    if seq.rows() != expected {
        return Err(Error::shape("build_pyramid", seq.dims(), (expected, seq.cols())));
    }
    let mut scales = vec![seq.clone()];
    for map in scheme.maps() {
        let next = abstract_sequence(scales.last().unwrap(), map)?;
        scales.push(next);
    }
    Ok(ScalePyramid { scales })
}

/// Uniformly random partition of `j` joints into `target` non-empty groups,
/// deterministic per seed. Groups are canonicalized (sorted by smallest
/// member) so every unlabeled partition maps to exactly one output.
pub fn random_grouping(j: usize, target: usize, seed: u64) -> Result<Partition> {
    if target == 0 || target > j {
        return Err(Error::Config(format!(
            "cannot partition {j} joints into {target} groups"
        )));
    }
    if j > 100 {
        return Err(Error::Config(
            "random_grouping supports at most 100 joints (Stirling table range)".into(),
        ));
    }
    // Stirling numbers of the second kind, S[n][k].
    let mut table = vec![vec![0.0f64; target + 1]; j + 1];
    table[0][0] = 1.0;
    for n in 1..=j {
        for k in 1..=target.min(n) {
            table[n][k] = k as f64 * table[n - 1][k] + table[n - 1][k - 1];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = sample_partition(j, target, &table, &mut rng);
    for group in &mut part {
        group.sort_unstable();
    }
    part.sort_by_key(|g| g[0]);
    Ok(part)
}

fn sample_partition(
    n: usize,
    k: usize,
    table: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Partition {
    if n == k {
        return (0..n).map(|j| vec![j]).collect();
    }
    if k == 1 {
        return vec![(0..n).collect()];
    }
    // Element n-1 starts its own block with probability S(n-1,k-1)/S(n,k),
    // otherwise it joins one of the k blocks of a partition of n-1 elements.
    let p_single = table[n - 1][k - 1] / table[n][k];
    if rng.gen::<f64>() < p_single {
        let mut part = sample_partition(n - 1, k - 1, table, rng);
        part.push(vec![n - 1]);
        part
    } else {
        let mut part = sample_partition(n - 1, k, table, rng);
        let slot = rng.gen_range(0..k);
        part[slot].push(n - 1);
        part
    }
}
