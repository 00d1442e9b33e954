//! Deterministic map from a [`ModelConfig`] to the parameter registry and
//! the id structure the forward pass walks.
//!
//! Path scheme: `start/gcl/A`, `stage/D2/block1/gcl0/W`,
//! `down0/node_map`, `up1/feat_map`, `end/E0/out/beta`,
//! `fuse/F1/W`, with `fcl0`/`fcl1` replacing `gcl0`/`gcl1` in the FCL
//! variant. Running statistics live beside their affine parameters as
//! non-learnable entries.

use rand::RngCore;

use crate::layers::{self, NormKind};
use crate::model::{FuseMode, LayerKind, ModelConfig};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// U[-1/sqrt(K), 1/sqrt(K)] for a K x K adjacency.
    Adjacency,
    /// U[-1/sqrt(rows), 1/sqrt(rows)].
    FanIn,
    Zeros,
    Ones,
}

impl Init {
    pub(crate) fn materialize<T: Scalar>(
        self,
        rows: usize,
        cols: usize,
        rng: &mut dyn RngCore,
    ) -> Matrix<T> {
        match self {
            Init::Adjacency => layers::init_adjacency(rows, rng),
            Init::FanIn => layers::init_weight(rows, cols, rng),
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub learnable: bool,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GclIds {
    pub adjacency: usize,
    pub weight: usize,
    pub norm: NormIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FclIds {
    pub weight: usize,
    pub norm: NormIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum LayerIds {
    Gcl(GclIds),
    Fcl(FclIds),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub first: LayerIds,
    pub second: LayerIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ResampleIds {
    pub node_map: usize,
    pub feat_map: usize,
}

/// The final decode projection of an end GCN: a plain graph convolution
/// back to pose space, with no normalization, activation, or dropout —
/// predictions are unbounded coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjIds {
    pub adjacency: usize,
    pub weight: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EndIds {
    pub res: BlockIds,
    pub out: ProjIds,
}

/// Ids of every layer, in the order the forward pass uses them.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub start_gcl: GclIds,
    pub start_res: BlockIds,
    /// `descend[s]` holds the res blocks of stage D{s}.
    pub descend: Vec<Vec<BlockIds>>,
    /// `down[s]` maps scale s to s+1.
    pub down: Vec<ResampleIds>,
    pub ascend: Vec<Vec<BlockIds>>,
    /// `up[s]` maps scale s+1 to s.
    pub up: Vec<ResampleIds>,
    /// Projection after concatenation, per scale, in `concat_project` mode.
    pub fuse_proj: Vec<Option<usize>>,
    pub end: Vec<EndIds>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    norm: NormKind,
}

impl Builder {
    fn push(&mut self, path: String, rows: usize, cols: usize, learnable: bool, init: Init) -> usize {
        self.specs.push(ParamSpec {
            path,
            rows,
            cols,
            learnable,
            init,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, nodes: usize, feats: usize) -> NormIds {
        // Passthrough still allocates entry-shaped affine so variants share
        // one registry layout.
        let (r, c) = match self.norm {
            NormKind::Feature => (1, feats),
            NormKind::Entry | NormKind::Passthrough => (nodes, feats),
        };
        NormIds {
            gamma: self.push(format!("{prefix}/gamma"), r, c, true, Init::Ones),
            beta: self.push(format!("{prefix}/beta"), r, c, true, Init::Zeros),
            mean: self.push(format!("{prefix}/running_mean"), r, c, false, Init::Zeros),
            var: self.push(format!("{prefix}/running_var"), r, c, false, Init::Ones),
        }
    }

    fn gcl(&mut self, prefix: &str, nodes: usize, f_in: usize, f_out: usize) -> GclIds {
        GclIds {
            adjacency: self.push(format!("{prefix}/A"), nodes, nodes, true, Init::Adjacency),
            weight: self.push(format!("{prefix}/W"), f_in, f_out, true, Init::FanIn),
            norm: self.norm(prefix, nodes, f_out),
        }
    }

    fn proj(&mut self, prefix: &str, nodes: usize, f_in: usize, f_out: usize) -> ProjIds {
        ProjIds {
            adjacency: self.push(format!("{prefix}/A"), nodes, nodes, true, Init::Adjacency),
            weight: self.push(format!("{prefix}/W"), f_in, f_out, true, Init::FanIn),
        }
    }

    fn fcl(&mut self, prefix: &str, nodes: usize, feats: usize) -> FclIds {
        let flat = nodes * feats;
        FclIds {
            weight: self.push(format!("{prefix}/W"), flat, flat, true, Init::FanIn),
            norm: self.norm(prefix, nodes, feats),
        }
    }

    fn block(&mut self, prefix: &str, kind: LayerKind, nodes: usize, feats: usize) -> BlockIds {
        let layer = |b: &mut Self, i: usize| match kind {
            LayerKind::Gcn => LayerIds::Gcl(b.gcl(&format!("{prefix}/gcl{i}"), nodes, feats, feats)),
            LayerKind::Fcl => LayerIds::Fcl(b.fcl(&format!("{prefix}/fcl{i}"), nodes, feats)),
        };
        BlockIds {
            first: layer(self, 0),
            second: layer(self, 1),
        }
    }

    fn stage(
        &mut self,
        name: &str,
        blocks: usize,
        kind: LayerKind,
        nodes: usize,
        feats: usize,
    ) -> Vec<BlockIds> {
        (0..blocks)
            .map(|i| self.block(&format!("stage/{name}/block{i}"), kind, nodes, feats))
            .collect()
    }
}

impl Layout {
    /// Walks the architecture in table order (start, D0..D_{L-1} with
    /// downsampling, A_{L-1}..A0 with upsampling, E0..E_{L-1}) emitting specs.
    pub(crate) fn build(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
        let nodes = cfg.node_counts();
        let widths = &cfg.scale_widths;
        let levels = cfg.levels;
        let t = cfg.t_total();
        let mut b = Builder {
            specs: Vec::new(),
            norm: cfg.norm,
        };

        let start_gcl = b.gcl("start/gcl", nodes[0], t, widths[0]);
        let start_res = b.block("start/res", cfg.layer_kind, nodes[0], widths[0]);

        let mut descend = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels.saturating_sub(1));
        for s in 0..levels {
            descend.push(b.stage(
                &format!("D{s}"),
                cfg.res_blocks_per_stage,
                cfg.layer_kind,
                nodes[s],
                widths[s],
            ));
            if s + 1 < levels {
                down.push(ResampleIds {
                    node_map: b.push(
                        format!("down{s}/node_map"),
                        nodes[s],
                        nodes[s + 1],
                        true,
                        Init::FanIn,
                    ),
                    feat_map: b.push(
                        format!("down{s}/feat_map"),
                        widths[s],
                        widths[s + 1],
                        true,
                        Init::FanIn,
                    ),
                });
            }
        }

        let mut ascend: Vec<Vec<BlockIds>> = (0..levels).map(|_| Vec::new()).collect();
        let mut up: Vec<Option<ResampleIds>> = vec![None; levels.saturating_sub(1)];
        for s in (0..levels).rev() {
            ascend[s] = b.stage(
                &format!("A{s}"),
                cfg.res_blocks_per_stage,
                cfg.layer_kind,
                nodes[s],
                widths[s],
            );
            if s > 0 {
                up[s - 1] = Some(ResampleIds {
                    node_map: b.push(
                        format!("up{}/node_map", s - 1),
                        nodes[s],
                        nodes[s - 1],
                        true,
                        Init::FanIn,
                    ),
                    feat_map: b.push(
                        format!("up{}/feat_map", s - 1),
                        widths[s],
                        widths[s - 1],
                        true,
                        Init::FanIn,
                    ),
                });
            }
        }
        let up: Vec<ResampleIds> = up.into_iter().map(|u| u.unwrap()).collect();

        let fuse_proj: Vec<Option<usize>> = (0..levels)
            .map(|s| match cfg.fuse {
                FuseMode::Add => None,
                FuseMode::ConcatProject => Some(b.push(
                    format!("fuse/F{s}/W"),
                    2 * widths[s],
                    widths[s],
                    true,
                    Init::FanIn,
                )),
            })
            .collect();

        let end = (0..levels)
            .map(|s| EndIds {
                res: b.block(&format!("end/E{s}/res"), cfg.layer_kind, nodes[s], widths[s]),
                out: b.proj(&format!("end/E{s}/out"), nodes[s], widths[s], t),
            })
            .collect();

        (
            Layout {
                start_gcl,
                start_res,
                descend,
                down,
                ascend,
                up,
                fuse_proj,
                end,
            },
            b.specs,
        )
    }
}

pub(crate) fn layer_norm_ids(layer: &LayerIds) -> NormIds {
    match layer {
        LayerIds::Gcl(g) => g.norm,
        LayerIds::Fcl(f) => f.norm,
    }
}
