//! Forward pass over the configured architecture and the matching backward.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::layers::{
    self, FclWire, GclWire, LayerSettings, LayerWire, MaybeRng, Mode, NormWire, ResBlockWire,
};
use crate::model::layout::{
    layer_norm_ids, BlockIds, GclIds, LayerIds, Layout, ProjIds, ResampleIds,
};
use crate::model::{ModelConfig, ModelParams};
use crate::multiscale::ScalePyramid;
use crate::tensor::{BatchStats, Matrix, Scalar, Tape, Var};

/// Predicted sequences, one per active scale; scale 0 has the padded-input
/// shape.
#[derive(Debug, Clone)]
pub struct MultiScaleOutput<T> {
    pub scales: Vec<Matrix<T>>,
}

/// Running-statistic refresh for one normalization layer.
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub mean_id: usize,
    pub var_id: usize,
    pub stats: BatchStats<T>,
}

/// (stage name, rows, cols) of a realized intermediate output.
pub type TraceRow = (String, usize, usize);

/// The recorded forward pass: holds the tape so gradients can be taken.
pub struct ForwardPass<T> {
    tape: Tape<T>,
    bound: Vec<Option<Var>>,
    outputs: Vec<Vec<Var>>,
    pub norm_updates: Vec<NormUpdate<T>>,
    pub trace: Vec<TraceRow>,
}

struct Ctx<'p, T> {
    params: &'p ModelParams<T>,
    tape: Tape<T>,
    bound: Vec<Option<Var>>,
    settings: LayerSettings,
    updates: Vec<NormUpdate<T>>,
    trace: Vec<TraceRow>,
    want_trace: bool,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    fn bind(&mut self, id: usize) -> Var {
        match self.bound[id] {
            Some(v) => v,
            None => {
                let v = self.tape.leaf(self.params.entry(id).value.clone());
                self.bound[id] = Some(v);
                v
            }
        }
    }

    fn gcl_wire(&mut self, ids: &GclIds) -> GclWire<'p, T> {
        let params = self.params;
        GclWire {
            adjacency: self.bind(ids.adjacency),
            weight: self.bind(ids.weight),
            norm: NormWire {
                gamma: self.bind(ids.norm.gamma),
                beta: self.bind(ids.norm.beta),
                running_mean: &params.entry(ids.norm.mean).value,
                running_var: &params.entry(ids.norm.var).value,
            },
        }
    }

    fn layer_wire(&mut self, ids: &LayerIds) -> LayerWire<'p, T> {
        let params = self.params;
        match ids {
            LayerIds::Gcl(g) => LayerWire::Gcl(self.gcl_wire(g)),
            LayerIds::Fcl(f) => LayerWire::Fcl(FclWire {
                weight: self.bind(f.weight),
                norm: NormWire {
                    gamma: self.bind(f.norm.gamma),
                    beta: self.bind(f.norm.beta),
                    running_mean: &params.entry(f.norm.mean).value,
                    running_var: &params.entry(f.norm.var).value,
                },
            }),
        }
    }

    fn note_stats(&mut self, layer: &LayerIds, stats: Option<BatchStats<T>>) {
        if let Some(stats) = stats {
            let n = layer_norm_ids(layer);
            self.updates.push(NormUpdate {
                mean_id: n.mean,
                var_id: n.var,
                stats,
            });
        }
    }

    fn run_gcl(&mut self, xs: &[Var], ids: &GclIds, rng: MaybeRng) -> Result<Vec<Var>> {
        let wire = self.gcl_wire(ids);
        let out = layers::gcl_forward(&mut self.tape, xs, &wire, self.settings, rng)?;
        self.note_stats(&LayerIds::Gcl(*ids), out.stats);
        Ok(out.ys)
    }

    fn run_block(&mut self, xs: &[Var], ids: &BlockIds, rng: MaybeRng) -> Result<Vec<Var>> {
        let wire = ResBlockWire {
            first: self.layer_wire(&ids.first),
            second: self.layer_wire(&ids.second),
        };
        let out = layers::res_block_forward(&mut self.tape, xs, &wire, self.settings, rng)?;
        let mut stats = out.stats.into_iter();
        self.note_stats(&ids.first, stats.next().flatten());
        self.note_stats(&ids.second, stats.next().flatten());
        Ok(out.ys)
    }

    fn run_resample(&mut self, xs: &[Var], ids: &ResampleIds, name: &str) -> Result<Vec<Var>> {
        let node = self.bind(ids.node_map);
        let feat = self.bind(ids.feat_map);
        if self.want_trace {
            let mid = (
                self.params.entry(ids.node_map).value.cols(),
                self.tape.value(xs[0]).cols(),
            );
            self.trace.push((format!("{name}/node"), mid.0, mid.1));
        }
        let out = layers::resample(&mut self.tape, xs, node, feat)?;
        self.note(&format!("{name}/feat"), out[0]);
        Ok(out)
    }

    fn note(&mut self, name: &str, sample0: Var) {
        if self.want_trace {
            let (r, c) = self.tape.value(sample0).dims();
            self.trace.push((name.to_string(), r, c));
        }
    }
}



/// Runs the model over a batch of input pyramids. Train-mode normalization
/// couples the batch, so the whole batch shares one tape.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    pyramids: &[ScalePyramid<T>],
    mode: Mode,
    mut rng: Option<&mut dyn RngCore>,
    want_trace: bool,
) -> Result<ForwardPass<T>> {
    let rng = &mut rng;
    cfg.validate()?;
    if pyramids.is_empty() {
        return Err(Error::Config("forward on an empty batch".into()));
    }
    let nodes = cfg.node_counts();
    let t = cfg.t_total();
    for p in pyramids {
        if p.num_scales() < cfg.levels {
            return Err(Error::Config(format!(
                "pyramid has {} scales, model needs {}",
                p.num_scales(),
                cfg.levels
            )));
        }
        if p.scale(0).dims() != (nodes[0], t) {
            return Err(Error::shape("forward input", p.scale(0).dims(), (nodes[0], t)));
        }
    }
    let (layout, specs) = Layout::build(cfg);
    if specs.len() != params.len()
        || specs
            .iter()
            .zip(params.entries())
            .any(|(s, e)| s.path != e.path || (s.rows, s.cols) != e.value.dims())
    {
        return Err(Error::Config(
            "parameters do not match the configured architecture".into(),
        ));
    }

    let mut ctx = Ctx {
        params,
        tape: Tape::new(),
        bound: vec![None; params.len()],
        settings: LayerSettings {
            mode,
            norm: cfg.norm,
            dropout: cfg.dropout,
            eps: layers::NORM_EPS,
        },
        updates: Vec::new(),
        trace: Vec::new(),
        want_trace,
    };

    let xs0: Vec<Var> = pyramids
        .iter()
        .map(|p| ctx.tape.leaf(p.scale(0).clone()))
        .collect();

    let h = ctx.run_gcl(&xs0, &layout.start_gcl, rng)?;
    ctx.note("start/gcl", h[0]);
    let h = ctx.run_block(&h, &layout.start_res, rng)?;
    ctx.note("start/res", h[0]);

    // Descending path.
    let mut d_feats: Vec<Vec<Var>> = Vec::with_capacity(cfg.levels);
    let mut cur = h;
    for s in 0..cfg.levels {
        if s > 0 {
            cur = ctx.run_resample(&cur, &layout.down[s - 1], &format!("down{}", s - 1))?;
        }
        for block in &layout.descend[s] {
            cur = ctx.run_block(&cur, block, rng)?;
        }
        ctx.note(&format!("stage/D{s}"), cur[0]);
        d_feats.push(cur.clone());
    }

    // Ascending path, coarse to fine.
    let mut a_feats: Vec<Vec<Var>> = vec![Vec::new(); cfg.levels];
    for s in (0..cfg.levels).rev() {
        if s + 1 < cfg.levels {
            cur = ctx.run_resample(&cur, &layout.up[s], &format!("up{s}"))?;
        }
        for block in &layout.ascend[s] {
            cur = ctx.run_block(&cur, block, rng)?;
        }
        ctx.note(&format!("stage/A{s}"), cur[0]);
        a_feats[s] = cur.clone();
    }

    // Per-scale fusion, decoding, and global residual.
    let mut outputs: Vec<Vec<Var>> = vec![Vec::new(); pyramids.len()];
    for s in 0..cfg.levels {
        let fused: Vec<Var> = match layout.fuse_proj[s] {
            None => d_feats[s]
                .iter()
                .zip(&a_feats[s])
                .map(|(&d, &a)| ctx.tape.add(d, a))
                .collect::<Result<_>>()?,
            Some(proj) => {
                let w = ctx.bind(proj);
                d_feats[s]
                    .iter()
                    .zip(&a_feats[s])
                    .map(|(&d, &a)| {
                        let cat = ctx.tape.concat_cols(d, a)?;
                        ctx.tape.matmul(cat, w)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let e = ctx.run_block(&fused, &layout.end[s].res, rng)?;
        ctx.note(&format!("end/E{s}/res"), e[0]);
        let decoded = ctx.run_gcl(&e, &layout.end[s].out, rng)?;
        let outs: Vec<Var> = if cfg.use_global_residual {
            decoded
                .iter()
                .zip(pyramids)
                .map(|(&y, p)| {
                    let residual = ctx.tape.leaf(p.scale(s).clone());
                    ctx.tape.add(y, residual)
                })
                .collect::<Result<_>>()?
        } else {
            decoded
        };
        ctx.note(&format!("end/E{s}/out"), outs[0]);
        for (n, &o) in outs.iter().enumerate() {
            outputs[n].push(o);
        }
    }

    Ok(ForwardPass {
        tape: ctx.tape,
        bound: ctx.bound,
        outputs,
        norm_updates: ctx.updates,
        trace: ctx.trace,
    })
}

impl<T: Scalar> ForwardPass<T> {
    pub fn num_samples(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_scales(&self) -> usize {
        self.outputs.first().map_or(0, |o| o.len())
    }

    /// Extracts the predicted sequences, per sample.
    pub fn outputs(&self) -> Vec<MultiScaleOutput<T>> {
        self.outputs
            .iter()
            .map(|per_scale| MultiScaleOutput {
                scales: per_scale
                    .iter()
                    .map(|&v| self.tape.value(v).clone())
                    .collect(),
            })
            .collect()
    }

    /// Reverse pass from per-sample, per-scale loss gradients. Every
    /// parameter that participated gets a populated gradient buffer;
    /// non-participating parameters keep their gradient absent.
    pub fn backward(
        &self,
        params: &mut ModelParams<T>,
        seeds: &[Vec<Option<Matrix<T>>>],
    ) -> Result<()> {
        if seeds.len() != self.outputs.len() {
            return Err(Error::Config(format!(
                "{} seed rows for {} samples",
                seeds.len(),
                self.outputs.len()
            )));
        }
        let mut pairs = Vec::new();
        for (per_scale, out_vars) in seeds.iter().zip(&self.outputs) {
            if per_scale.len() != out_vars.len() {
                return Err(Error::Config(format!(
                    "{} seed scales for {} outputs",
                    per_scale.len(),
                    out_vars.len()
                )));
            }
            for (seed, &var) in per_scale.iter().zip(out_vars) {
                if let Some(m) = seed {
                    pairs.push((var, m.clone()));
                }
            }
        }
        let grads = self.tape.backward(pairs)?;
        params.clear_grads();
        for (id, var) in self.bound.iter().enumerate() {
            let Some(v) = var else { continue };
            if let Some(g) = grads[v.index()].as_ref() {
                params.entry_mut(id).value.set_grad(g.data().to_vec());
            }
        }
        Ok(())
    }
}
