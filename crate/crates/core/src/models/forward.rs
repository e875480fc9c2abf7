//! Forward graph construction: set encoders, latent heads, deterministic
//! cross-attention, and decoding.
//!
//! Per-task tensors travel in the `[B*T, ..]` layout (task inner). The
//! across-task attention stages regroup to `[B*n, T, ..]` rows so tasks
//! attend to each other at a fixed family or target index, then regroup
//! back. Task-specific variants instead carry one tensor per task and stack
//! only where an across-task stage needs them side by side.

use super::view::StackedBatch;
use super::{
    decoder_input, row_width, Model, ModelError, ModelFamily, LatentStructure, OutputKind,
    ACROSS_BLOCKS, DECODER_TRUNK_LAYERS, EMBED_LAYERS, LATENT_TRUNK_LAYERS, QUERY_LAYERS,
    SET_BLOCKS,
};
use crate::autodiff::{
    attention_stack, cross_attention_stack, mlp_forward, pool, AttnStackSpec, BoundParams, Graph,
    MlpSpec, Real, Var,
};

/// Which side of the conditioning split an encoder pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Context,
    Target,
}

/// Mean and variance of a diagonal Gaussian, shape-matched.
#[derive(Debug, Clone, Copy)]
pub struct GaussPair {
    pub mean: Var,
    pub var: Var,
}

/// Per-task summary vectors in the layout the sharing mode produces.
#[derive(Debug, Clone)]
pub enum TaskRep {
    /// `[B, T, w]`.
    Stacked(Var),
    /// `T` entries of `[B, 1, w]`.
    PerTask(Vec<Var>),
}

impl TaskRep {
    /// View as one `[B, T, w]` tensor.
    pub fn stacked<F: Real>(&self, g: &mut Graph<F>, b: usize, t: usize, w: usize) -> Var {
        match self {
            TaskRep::Stacked(v) => *v,
            TaskRep::PerTask(list) => {
                let cat = g.concat_last(list);
                g.reshape(cat, vec![b, t, w])
            }
        }
    }
}

/// Latent-path summaries of one conditioning side.
#[derive(Debug, Clone)]
pub struct Encoding {
    /// Per-task summaries; absent for the joint family.
    pub per_task: Option<TaskRep>,
    /// Pooled across-task (or joint-set) summary `[B, 1, w]`; present when
    /// the variant infers a global latent.
    pub global: Option<Var>,
}

/// Deterministic target-point representations per family layout.
#[derive(Debug, Clone)]
pub enum DetRep {
    /// `[B*T, n, w]`.
    Stacked(Var),
    /// `T` entries of `[B, n, w]`.
    PerTask(Vec<Var>),
    /// `[B, n, w]`.
    Joint(Var),
}

/// Predictive distribution parameters for one decoded parameter set.
#[derive(Debug, Clone)]
pub enum Predictive {
    /// Gaussian mean and variance `[B*T, n, 1]`.
    Stacked { mean: Var, var: Var },
    /// One head per task, each over `[B, n, ..]`.
    PerTask(Vec<TaskPredictive>),
    /// Gaussian mean and variance `[B, n, T]`.
    Joint { mean: Var, var: Var },
}

/// One task's predictive head output.
#[derive(Debug, Clone)]
pub enum TaskPredictive {
    Gaussian { mean: Var, var: Var },
    Categorical { probs: Var },
}

/// Maps a raw head output to a variance with standard deviation in
/// `0.1 + 0.9*softplus(raw)`, keeping every variance at or above 0.01.
pub fn bounded_var<F: Real>(g: &mut Graph<F>, raw: Var) -> Var {
    let sp = g.softplus(raw);
    let scaled = g.scale(sp, F::from_f64(0.9));
    let sigma = g.add_scalar(scaled, F::from_f64(0.1));
    g.square(sigma)
}

/// Trunk plus mean and raw-variance heads. `spec.output` is the head output
/// width; the trunk itself ends at `spec.hidden`.
fn gaussian_head<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    spec: MlpSpec,
    x: Var,
) -> GaussPair {
    let trunk_spec = MlpSpec::new(spec.input, spec.hidden, spec.hidden, spec.layers);
    let head_spec = MlpSpec::new(spec.hidden, spec.hidden, spec.output, 1);
    let trunk = mlp_forward(g, bp, &format!("{prefix}.trunk"), trunk_spec, x);
    let h = g.relu(trunk);
    let mean = mlp_forward(g, bp, &format!("{prefix}.mean"), head_spec, h);
    let raw = mlp_forward(g, bp, &format!("{prefix}.rawvar"), head_spec, h);
    GaussPair {
        mean,
        var: bounded_var(g, raw),
    }
}

impl<F: Real> Model<F> {
    fn w(&self) -> usize {
        self.dims.width
    }

    fn embed_spec(&self) -> MlpSpec {
        MlpSpec::new(row_width(self.variant, self.dims), self.w(), self.w(), EMBED_LAYERS)
    }

    fn query_spec(&self) -> MlpSpec {
        MlpSpec::new(self.dims.x_dim, self.w(), self.w(), QUERY_LAYERS)
    }

    fn set_spec(&self) -> AttnStackSpec {
        AttnStackSpec::new(self.w(), self.dims.heads, SET_BLOCKS)
    }

    fn across_spec(&self) -> AttnStackSpec {
        AttnStackSpec::new(self.w(), self.dims.heads, ACROSS_BLOCKS)
    }

    fn hierarchical_v(&self) -> bool {
        self.variant.family == ModelFamily::Mtnp
            && self.variant.latent_structure == LatentStructure::Hierarchical
    }

    /// Task embedding rows fanned to the `[B*T, w]` layout.
    fn task_embed_rows(&self, g: &mut Graph<F>, bp: &BoundParams<F>, b: usize) -> Var {
        let (t, w) = (self.dims.n_tasks, self.w());
        let table = bp.var("task_embed");
        let one = g.reshape(table, vec![1, t, w]);
        let tiled = g.tile_dim0(one, b);
        g.reshape(tiled, vec![b * t, w])
    }

    /// Builds latent-path summaries of one side: per-task vectors, plus the
    /// pooled across-task (or joint) summary when the variant has a global
    /// latent.
    pub fn encode_latent_summaries(
        &self,
        g: &mut Graph<F>,
        bp: &BoundParams<F>,
        sb: &StackedBatch<F>,
        side: Side,
    ) -> Result<Encoding, ModelError> {
        if !self.variant.has_latent_path() {
            return Err(ModelError::Config {
                message: "this variant has no latent path".into(),
            });
        }
        let (b, t, w) = (sb.b, sb.t, self.w());
        let pool_mode = self.variant.pooling.mode();
        if self.variant.family == ModelFamily::Jtnp {
            let rows = match side {
                Side::Context => sb.ctx_xy_joint.as_ref(),
                Side::Target => sb.tgt_xy_joint.as_ref(),
            }
            .ok_or(ModelError::IncompleteContext)?;
            let x = g.leaf(rows.clone());
            let mut h = mlp_forward(g, bp, "psi_s", self.embed_spec(), x);
            if self.variant.pre_pool_self_attention {
                h = attention_stack(g, bp, "set_lat", self.set_spec(), h, None);
            }
            let global = pool(g, bp, "pool_lat", pool_mode, w, self.dims.heads, h, None);
            return Ok(Encoding {
                per_task: None,
                global: Some(global),
            });
        }

        let scopes = self.scopes();
        let per_task = if scopes.len() == 1 {
            let (rows, mask) = match side {
                Side::Context => (&sb.ctx_xy, &sb.ctx_mask),
                Side::Target => (&sb.tgt_xy, &sb.tgt_mask),
            };
            let x = g.leaf(rows.clone());
            let mut h = mlp_forward(g, bp, "psi_s", self.embed_spec(), x);
            let e = self.task_embed_rows(g, bp, b);
            h = g.add_batch_vec(h, e);
            if self.variant.pre_pool_self_attention {
                h = attention_stack(g, bp, "set_lat", self.set_spec(), h, Some(mask));
            }
            let pooled = pool(g, bp, "pool_lat", pool_mode, w, self.dims.heads, h, Some(mask));
            TaskRep::Stacked(g.reshape(pooled, vec![b, t, w]))
        } else {
            let mut list = Vec::with_capacity(t);
            for (task, scope) in scopes.iter().enumerate() {
                let (rows, mask) = match side {
                    Side::Context => (&sb.ctx_xy_t[task], &sb.ctx_mask_t[task]),
                    Side::Target => (&sb.tgt_xy_t[task], &sb.tgt_mask_t[task]),
                };
                let x = g.leaf(rows.clone());
                let mut h = mlp_forward(g, bp, &format!("psi_s{scope}"), self.embed_spec(), x);
                if self.variant.pre_pool_self_attention {
                    h = attention_stack(
                        g,
                        bp,
                        &format!("set_lat{scope}"),
                        self.set_spec(),
                        h,
                        Some(mask),
                    );
                }
                list.push(pool(
                    g,
                    bp,
                    &format!("pool_lat{scope}"),
                    pool_mode,
                    w,
                    self.dims.heads,
                    h,
                    Some(mask),
                ));
            }
            TaskRep::PerTask(list)
        };

        let global = if self.variant.family == ModelFamily::Mtnp
            && self.variant.latent_structure != LatentStructure::TaskOnly
        {
            let stacked = per_task.stacked(g, b, t, w);
            let mixed = attention_stack(g, bp, "set_task", self.across_spec(), stacked, None);
            Some(pool(
                g,
                bp,
                "pool_task",
                pool_mode,
                w,
                self.dims.heads,
                mixed,
                None,
            ))
        } else {
            None
        };

        Ok(Encoding {
            per_task: Some(per_task),
            global,
        })
    }

    /// Global latent distribution from a side's pooled summary, `[B, 1, w]`.
    pub fn z_dist(&self, g: &mut Graph<F>, bp: &BoundParams<F>, enc: &Encoding) -> GaussPair {
        let global = enc.global.expect("variant has no global latent");
        gaussian_head(
            g,
            bp,
            "psi_z",
            MlpSpec::new(self.w(), self.w(), self.w(), LATENT_TRUNK_LAYERS),
            global,
        )
    }

    /// Per-task latent distributions, stacked `[B, T, w]`. A hierarchical
    /// variant conditions on the supplied global sample; flat variants must
    /// pass `None`.
    pub fn v_dist(
        &self,
        g: &mut Graph<F>,
        bp: &BoundParams<F>,
        enc: &Encoding,
        z_sample: Option<Var>,
        b: usize,
    ) -> GaussPair {
        assert_eq!(
            z_sample.is_some(),
            self.hierarchical_v(),
            "global sample exactly when the per-task latent is conditioned on one"
        );
        let (t, w) = (self.dims.n_tasks, self.w());
        let v_in = if self.hierarchical_v() { 2 * w } else { w };
        let rep = enc.per_task.as_ref().expect("variant has no per-task path");
        match rep {
            TaskRep::Stacked(s) => {
                let input = match z_sample {
                    Some(z) => {
                        let zt = g.tile_dim1(z, t);
                        g.concat_last(&[*s, zt])
                    }
                    None => *s,
                };
                gaussian_head(
                    g,
                    bp,
                    "psi_v",
                    MlpSpec::new(v_in, w, w, LATENT_TRUNK_LAYERS),
                    input,
                )
            }
            TaskRep::PerTask(list) => {
                let mut means = Vec::with_capacity(t);
                let mut vars = Vec::with_capacity(t);
                for (task, scope) in self.scopes().iter().enumerate() {
                    let input = match z_sample {
                        Some(z) => g.concat_last(&[list[task], z]),
                        None => list[task],
                    };
                    let pair = gaussian_head(
                        g,
                        bp,
                        &format!("psi_v{scope}"),
                        MlpSpec::new(v_in, w, w, LATENT_TRUNK_LAYERS),
                        input,
                    );
                    means.push(pair.mean);
                    vars.push(pair.var);
                }
                let mean = g.concat_last(&means);
                let var = g.concat_last(&vars);
                GaussPair {
                    mean: g.reshape(mean, vec![b, t, w]),
                    var: g.reshape(var, vec![b, t, w]),
                }
            }
        }
    }

    /// Cross-attention from target inputs over context rows, producing one
    /// representation per (task, target point).
    pub fn encode_deterministic(
        &self,
        g: &mut Graph<F>,
        bp: &BoundParams<F>,
        sb: &StackedBatch<F>,
    ) -> Result<DetRep, ModelError> {
        if !self.variant.has_det_path() {
            return Err(ModelError::Config {
                message: "this variant has no deterministic path".into(),
            });
        }
        let (b, t, n, w) = (sb.b, sb.t, sb.n, self.w());
        if self.variant.family == ModelFamily::Jtnp {
            let rows = sb.ctx_xy_joint.as_ref().ok_or(ModelError::IncompleteContext)?;
            let rows = g.leaf(rows.clone());
            let d = mlp_forward(g, bp, "psi_d", self.embed_spec(), rows);
            let cx = g.leaf(sb.ctx_x.clone());
            let tx = g.leaf(sb.tgt_x.clone());
            let k = mlp_forward(g, bp, "psi_q", self.query_spec(), cx);
            let q = mlp_forward(g, bp, "psi_q", self.query_spec(), tx);
            let r = cross_attention_stack(g, bp, "det_cross", self.set_spec(), q, k, d, None);
            return Ok(DetRep::Joint(r));
        }

        let scopes = self.scopes();
        if scopes.len() == 1 {
            let rows = g.leaf(sb.ctx_xy.clone());
            let mut d = mlp_forward(g, bp, "psi_d", self.embed_spec(), rows);
            let e = self.task_embed_rows(g, bp, b);
            d = g.add_batch_vec(d, e);
            let cx = g.leaf(sb.ctx_x.clone());
            let tx = g.leaf(sb.tgt_x.clone());
            let k1 = mlp_forward(g, bp, "psi_q", self.query_spec(), cx);
            let q1 = mlp_forward(g, bp, "psi_q", self.query_spec(), tx);
            let k = g.repeat_interleave0(k1, t);
            let q = g.repeat_interleave0(q1, t);
            let u = cross_attention_stack(
                g,
                bp,
                "det_cross",
                self.set_spec(),
                q,
                k,
                d,
                Some(&sb.ctx_mask),
            );
            let r = if self.variant.family == ModelFamily::Mtnp {
                let r4 = g.reshape(u, vec![b, t, n, w]);
                let by_point = g.permute_0213(r4);
                let rows = g.reshape(by_point, vec![b * n, t, w]);
                let mixed = attention_stack(g, bp, "det_task", self.across_spec(), rows, None);
                let back4 = g.reshape(mixed, vec![b, n, t, w]);
                let back = g.permute_0213(back4);
                g.reshape(back, vec![b * t, n, w])
            } else {
                u
            };
            Ok(DetRep::Stacked(r))
        } else {
            let cx = g.leaf(sb.ctx_x.clone());
            let tx = g.leaf(sb.tgt_x.clone());
            let mut per_task = Vec::with_capacity(t);
            for (task, scope) in scopes.iter().enumerate() {
                let rows = g.leaf(sb.ctx_xy_t[task].clone());
                let d = mlp_forward(g, bp, &format!("psi_d{scope}"), self.embed_spec(), rows);
                let k = mlp_forward(g, bp, &format!("psi_q{scope}"), self.query_spec(), cx);
                let q = mlp_forward(g, bp, &format!("psi_q{scope}"), self.query_spec(), tx);
                per_task.push(cross_attention_stack(
                    g,
                    bp,
                    &format!("det_cross{scope}"),
                    self.set_spec(),
                    q,
                    k,
                    d,
                    Some(&sb.ctx_mask_t[task]),
                ));
            }
            if self.variant.family == ModelFamily::Mtnp {
                let cat = g.concat_last(&per_task);
                let rows = g.reshape(cat, vec![b * n, t, w]);
                let mixed = attention_stack(g, bp, "det_task", self.across_spec(), rows, None);
                let wide = g.reshape(mixed, vec![b, n, t * w]);
                per_task = (0..t)
                    .map(|task| g.slice_last(wide, task * w, w))
                    .collect();
            }
            Ok(DetRep::PerTask(per_task))
        }
    }

    /// Fans a global sample `[B, 1, w]` out to the per-task shape the
    /// decoder consumes when no per-task latent exists.
    pub fn fan_global_to_tasks(&self, g: &mut Graph<F>, z: Var) -> Var {
        g.tile_dim1(z, self.dims.n_tasks)
    }

    /// Decodes predictive parameters at the target inputs from a latent
    /// (`[B, T, w]`, or `[B, 1, w]` for the joint family) and the
    /// deterministic representations.
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        bp: &BoundParams<F>,
        sb: &StackedBatch<F>,
        lat: Option<Var>,
        det: Option<&DetRep>,
    ) -> Result<Predictive, ModelError> {
        if self.variant.has_det_path() && det.is_none() {
            return Err(ModelError::MissingDeterministic);
        }
        assert!(
            !self.variant.has_latent_path() || lat.is_some(),
            "latent path enabled but no latent supplied"
        );
        assert!(
            self.variant.has_det_path() || det.is_none(),
            "deterministic representations supplied to a latent-only variant"
        );
        let (b, t, n, w) = (sb.b, sb.t, sb.n, self.w());
        let dec_in = decoder_input(self.variant, self.dims);

        if self.variant.family == ModelFamily::Jtnp {
            let tx = g.leaf(sb.tgt_x.clone());
            let base = mlp_forward(g, bp, "psi_w", self.query_spec(), tx);
            let mut parts = vec![base];
            if let Some(z) = lat {
                assert_eq!(g.shape(z), &[b, 1, w], "joint latent shape");
                parts.push(g.tile_dim1(z, n));
            }
            if let Some(DetRep::Joint(r)) = det {
                parts.push(*r);
            } else if det.is_some() {
                panic!("joint family needs joint deterministic layout");
            }
            let cat = g.concat_last(&parts);
            let pair = gaussian_head(
                g,
                bp,
                "psi_y",
                MlpSpec::new(dec_in, w, t, DECODER_TRUNK_LAYERS),
                cat,
            );
            return Ok(Predictive::Joint {
                mean: pair.mean,
                var: pair.var,
            });
        }

        let scopes = self.scopes();
        if scopes.len() == 1 {
            let tx = g.leaf(sb.tgt_x.clone());
            let base1 = mlp_forward(g, bp, "psi_w", self.query_spec(), tx);
            let fanned = g.repeat_interleave0(base1, t);
            let e = self.task_embed_rows(g, bp, b);
            let base = g.add_batch_vec(fanned, e);
            let mut parts = vec![base];
            if let Some(v) = lat {
                assert_eq!(g.shape(v), &[b, t, w], "per-task latent shape");
                let rows = g.reshape(v, vec![b * t, 1, w]);
                parts.push(g.tile_dim1(rows, n));
            }
            if let Some(DetRep::Stacked(r)) = det {
                parts.push(*r);
            } else if det.is_some() {
                panic!("shared paths need the stacked deterministic layout");
            }
            let cat = g.concat_last(&parts);
            let pair = gaussian_head(
                g,
                bp,
                "psi_y",
                MlpSpec::new(dec_in, w, 1, DECODER_TRUNK_LAYERS),
                cat,
            );
            Ok(Predictive::Stacked {
                mean: pair.mean,
                var: pair.var,
            })
        } else {
            let lat_wide = lat.map(|v| {
                assert_eq!(g.shape(v), &[b, t, w], "per-task latent shape");
                g.reshape(v, vec![b, t * w])
            });
            let det_list = match det {
                Some(DetRep::PerTask(list)) => Some(list),
                None => None,
                Some(_) => panic!("task-specific paths need the per-task deterministic layout"),
            };
            let tx = g.leaf(sb.tgt_x.clone());
            let mut heads = Vec::with_capacity(t);
            for (task, scope) in scopes.iter().enumerate() {
                let base = mlp_forward(g, bp, &format!("psi_w{scope}"), self.query_spec(), tx);
                let mut parts = vec![base];
                if let Some(wide) = lat_wide {
                    let row = g.slice_last(wide, task * w, w);
                    let one = g.reshape(row, vec![b, 1, w]);
                    parts.push(g.tile_dim1(one, n));
                }
                if let Some(list) = det_list {
                    parts.push(list[task]);
                }
                let cat = g.concat_last(&parts);
                match self.task_kinds[task] {
                    OutputKind::Continuous => {
                        let pair = gaussian_head(
                            g,
                            bp,
                            &format!("psi_y{scope}"),
                            MlpSpec::new(dec_in, w, 1, DECODER_TRUNK_LAYERS),
                            cat,
                        );
                        heads.push(TaskPredictive::Gaussian {
                            mean: pair.mean,
                            var: pair.var,
                        });
                    }
                    OutputKind::Categorical(classes) => {
                        let trunk = mlp_forward(
                            g,
                            bp,
                            &format!("psi_y{scope}.trunk"),
                            MlpSpec::new(dec_in, w, w, DECODER_TRUNK_LAYERS),
                            cat,
                        );
                        let h = g.relu(trunk);
                        let logits = mlp_forward(
                            g,
                            bp,
                            &format!("psi_y{scope}.logits"),
                            MlpSpec::new(w, w, classes, 1),
                            h,
                        );
                        let probs = g.softmax_masked(logits, None);
                        heads.push(TaskPredictive::Categorical { probs });
                    }
                }
            }
            Ok(Predictive::PerTask(heads))
        }
    }
}
