//! Assembly of the full multi-scale residual GCN and its ablation variants.
//!
//! The architecture is one start GCN, per-scale descending and ascending
//! stacks of residual blocks joined by linear resampling layers, and one
//! end GCN per scale that decodes fused features back to a pose sequence,
//! optionally adding the abstracted input sequence (global residual).

mod checkpoint;
mod forward;
mod layout;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, ForwardPass, MultiScaleOutput, NormUpdate, TraceRow};
pub(crate) use layout::Layout;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, NormKind};
use crate::multiscale::GroupingScheme;
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Gcn,
    Fcl,
}

/// How the descending and ascending features of one scale are combined
/// before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    Add,
    ConcatProject,
}

/// Everything that determines the architecture and its variants.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub grouping: GroupingScheme,
    /// Active scale count; must not exceed the grouping chain length.
    pub levels: usize,
    /// Feature width per active scale.
    pub scale_widths: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub t_history: usize,
    pub t_future: usize,
    pub use_inter_loss: bool,
    pub use_global_residual: bool,
    pub layer_kind: LayerKind,
    pub fuse: FuseMode,
    pub dropout: f64,
    pub norm: NormKind,
}

impl ModelConfig {
    /// The default four-scale H3.6M configuration.
    pub fn default_h36m() -> Self {
        ModelConfig {
            grouping: crate::multiscale::builtin_grouping("h36m_22_12_7_4").unwrap(),
            levels: 4,
            scale_widths: vec![64, 128, 256, 512],
            res_blocks_per_stage: 3,
            t_history: 10,
            t_future: 25,
            use_inter_loss: true,
            use_global_residual: true,
            layer_kind: LayerKind::Gcn,
            fuse: FuseMode::Add,
            dropout: layers::DEFAULT_DROPOUT,
            norm: NormKind::Entry,
        }
    }

    /// Gradient-check configuration: 6 joints, two scales, widths 4/8,
    /// T = 5, dropout off, normalization passthrough.
    pub fn tiny() -> Self {
        let grouping =
            GroupingScheme::new(6, vec![vec![vec![0, 1], vec![2, 3], vec![4, 5]]]).unwrap();
        ModelConfig {
            grouping,
            levels: 2,
            scale_widths: vec![4, 8],
            res_blocks_per_stage: 3,
            t_history: 2,
            t_future: 3,
            use_inter_loss: true,
            use_global_residual: true,
            layer_kind: LayerKind::Gcn,
            fuse: FuseMode::Add,
            dropout: 0.0,
            norm: NormKind::Passthrough,
        }
    }

    pub fn t_total(&self) -> usize {
        self.t_history + self.t_future
    }

    /// Node counts (3 per joint) of the active scales.
    pub fn node_counts(&self) -> Vec<usize> {
        self.grouping.node_counts()[..self.levels].to_vec()
    }

    /// The grouping chain truncated to the active levels.
    pub fn active_grouping(&self) -> GroupingScheme {
        self.grouping
            .truncated(self.levels)
            .expect("validated levels")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > self.grouping.num_scales() {
            return Err(Error::Config(format!(
                "levels {} outside 1..={}",
                self.levels,
                self.grouping.num_scales()
            )));
        }
        if self.scale_widths.len() != self.levels {
            return Err(Error::Config(format!(
                "scale_widths has {} entries for {} levels",
                self.scale_widths.len(),
                self.levels
            )));
        }
        if self.scale_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("scale widths must be positive".into()));
        }
        if self.res_blocks_per_stage == 0 {
            return Err(Error::Config("res_blocks_per_stage must be >= 1".into()));
        }
        if self.t_history == 0 || self.t_future == 0 {
            return Err(Error::Config("t_history and t_future must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Canonical architecture description hashed into checkpoints.
    pub fn canonical_description(&self) -> String {
        let maps: Vec<String> = self
            .active_grouping()
            .maps()
            .iter()
            .map(|m| {
                m.iter()
                    .map(|g| {
                        g.iter()
                            .map(|j| j.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .collect();
        format!(
            "scales={:?};maps={:?};widths={:?};blocks={};th={};tf={};layer={:?};fuse={:?};norm={:?};gr={}",
            &self.grouping.scales()[..self.levels],
            maps,
            self.scale_widths,
            self.res_blocks_per_stage,
            self.t_history,
            self.t_future,
            self.layer_kind,
            self.fuse,
            self.norm,
            self.use_global_residual,
        )
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_description().as_bytes())
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One named tensor in the registry.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub path: String,
    pub value: Matrix<T>,
    /// Running statistics are stored but not optimized.
    pub learnable: bool,
}

/// Named registry of every model tensor, in deterministic construction order.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.path.clone(), i))
            .collect();
        ModelParams { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub(crate) fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub(crate) fn entry_mut(&mut self, id: usize) -> &mut ParamEntry<T> {
        &mut self.entries[id]
    }

    pub fn id_of(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn get(&self, path: &str) -> Option<&Matrix<T>> {
        self.id_of(path).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Matrix<T>> {
        let id = self.id_of(path)?;
        Some(&mut self.entries[id].value)
    }

    /// Total learnable scalar count.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.value.clear_grad();
        }
    }

    /// Zeroes the final weight and normalization shift of every end decoder,
    /// turning the model (with global residual) into the exact identity on
    /// its padded input.
    pub fn zero_decoder_outputs(&mut self) {
        let targets: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                e.path.starts_with("end/")
                    && (e.path.ends_with("/out/W") || e.path.ends_with("/out/beta"))
            })
            .map(|(i, _)| i)
            .collect();
        for id in targets {
            let dims = self.entries[id].value.dims();
            self.entries[id].value = Matrix::zeros(dims.0, dims.1);
        }
    }

    /// Converts every entry to another precision (gradients dropped).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_entries(
            self.entries
                .iter()
                .map(|e| ParamEntry {
                    path: e.path.clone(),
                    value: e.value.cast(),
                    learnable: e.learnable,
                })
                .collect(),
        )
    }
}

/// Allocates and initializes every layer of the configured architecture.
/// Deterministic per seed: parameters are created and drawn in a fixed order.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let (_, specs) = Layout::build(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = specs
        .into_iter()
        .map(|spec| {
            let value = spec.init.materialize::<T>(spec.rows, spec.cols, &mut rng);
            ParamEntry {
                path: spec.path,
                value,
                learnable: spec.learnable,
            }
        })
        .collect();
    Ok(ModelParams::from_entries(entries))
}

/// Applies running-statistic updates produced by a train-mode forward pass.
/// `momentum` is the weight of the new batch statistic (0.1 by default).
pub fn apply_norm_updates<T: Scalar>(
    params: &mut ModelParams<T>,
    updates: &[NormUpdate<T>],
    momentum: f64,
) {
    let keep = T::from_f64(1.0 - momentum);
    let take = T::from_f64(momentum);
    for u in updates {
        for (id, stat) in [(u.mean_id, &u.stats.mean), (u.var_id, &u.stats.var)] {
            let value = &mut params.entries[id].value;
            for (v, s) in value.data_mut().iter_mut().zip(stat.data()) {
                *v = keep * *v + take * *s;
            }
        }
    }
}
