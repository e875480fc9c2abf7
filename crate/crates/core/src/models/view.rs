//! Rectangular tensor views over function-family batches.
//!
//! Forward graphs consume fixed-shape tensors, so a step's families are
//! stacked along the leading dimension. Per-task rows use the `[B*T, ..]`
//! layout with task as the inner index (row `b*T + t`); task-specific paths
//! read the per-task layout (`T` tensors of `[B, ..]`); the joint family
//! reads rows carrying all task labels at once. Labels the context mask
//! marks unobserved enter the tensors as zero placeholders, never as the
//! stored poison values.

use super::ModelError;
use crate::autodiff::{Real, Tensor};
use crate::datasets::MultiTaskBatch;

/// A stack of families with identical target size, context size, task
/// count, and input dimension.
#[derive(Debug, Clone)]
pub struct StackedBatch<F> {
    pub b: usize,
    pub t: usize,
    pub m: usize,
    pub n: usize,
    pub x_dim: usize,
    /// True when every family's context observes every task at every row.
    pub complete: bool,

    /// Context rows `(x, y^t)` per (family, task), `[B*T, m, x_dim+1]`.
    pub ctx_xy: Tensor<F>,
    /// Flat `[B*T*m]` context observation mask matching `ctx_xy` rows.
    pub ctx_mask: Vec<bool>,
    /// Target rows `(x, y^t)` per (family, task), `[B*T, n, x_dim+1]`.
    pub tgt_xy: Tensor<F>,
    /// Target labels `[B*T, n, 1]`.
    pub tgt_y: Tensor<F>,
    /// Flat `[B*T*n]` target observation mask.
    pub tgt_mask: Vec<bool>,
    /// Context inputs `[B, m, x_dim]`.
    pub ctx_x: Tensor<F>,
    /// Target inputs `[B, n, x_dim]`.
    pub tgt_x: Tensor<F>,

    /// Per-task context rows, `T` tensors of `[B, m, x_dim+1]`.
    pub ctx_xy_t: Vec<Tensor<F>>,
    /// Per-task flat `[B*m]` context masks.
    pub ctx_mask_t: Vec<Vec<bool>>,
    /// Per-task target rows, `T` tensors of `[B, n, x_dim+1]`.
    pub tgt_xy_t: Vec<Tensor<F>>,
    /// Per-task target labels, `T` tensors of `[B, n, 1]`.
    pub tgt_y_t: Vec<Tensor<F>>,
    /// Per-task flat `[B*n]` target masks.
    pub tgt_mask_t: Vec<Vec<bool>>,

    /// Joint context rows `(x, y^1..y^T)`, `[B, m, x_dim+T]`; present only
    /// when the context is complete.
    pub ctx_xy_joint: Option<Tensor<F>>,
    /// Joint target rows, `[B, n, x_dim+T]`; present only when every target
    /// label is observed.
    pub tgt_xy_joint: Option<Tensor<F>>,
    /// Joint target labels `[B, n, T]`, gated like `tgt_xy_joint`.
    pub tgt_y_joint: Option<Tensor<F>>,
}

fn tensor<F: Real>(shape: Vec<usize>, values: Vec<F>) -> Tensor<F> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    Tensor {
        shape,
        values,
        requires_grad: false,
    }
}

impl<F: Real> StackedBatch<F> {
    /// Stacks families into graph-ready tensors. Fails when the families
    /// disagree on shape, the context is empty, or some task has no
    /// observed context point in some family.
    pub fn stack(batches: &[MultiTaskBatch<f64>]) -> Result<Self, ModelError> {
        let b = batches.len();
        if b == 0 {
            return Err(ModelError::Config {
                message: "cannot stack zero families".into(),
            });
        }
        let first = &batches[0];
        let (x_dim, t, m, n) = (
            first.x_dim,
            first.n_tasks,
            first.n_context(),
            first.n_target(),
        );
        for batch in batches {
            if batch.x_dim != x_dim
                || batch.n_tasks != t
                || batch.n_context() != m
                || batch.n_target() != n
            {
                return Err(ModelError::Config {
                    message: "stacked families must share x_dim, task count, and set sizes".into(),
                });
            }
        }
        if m == 0 {
            return Err(ModelError::EmptyTaskContext { task: 0 });
        }
        for batch in batches {
            for task in 0..t {
                if !batch.context_mask[task].iter().any(|&o| o) {
                    return Err(ModelError::EmptyTaskContext { task });
                }
            }
        }
        let complete = batches.iter().all(|batch| batch.is_complete());
        let targets_complete = batches
            .iter()
            .all(|batch| batch.target_mask.iter().all(|col| col.iter().all(|&o| o)));

        let f = |v: f64| F::from_f64(v);
        let row_w = x_dim + 1;

        let mut ctx_xy = Vec::with_capacity(b * t * m * row_w);
        let mut ctx_mask = Vec::with_capacity(b * t * m);
        let mut tgt_xy = Vec::with_capacity(b * t * n * row_w);
        let mut tgt_y = Vec::with_capacity(b * t * n);
        let mut tgt_mask = Vec::with_capacity(b * t * n);
        for batch in batches {
            for task in 0..t {
                for j in 0..m {
                    for d in 0..x_dim {
                        ctx_xy.push(f(batch.x_context[j * x_dim + d]));
                    }
                    ctx_xy.push(f(batch.context_label_or_zero(task, j)));
                    ctx_mask.push(batch.context_mask[task][j]);
                }
                for i in 0..n {
                    for d in 0..x_dim {
                        tgt_xy.push(f(batch.x_target[i * x_dim + d]));
                    }
                    tgt_xy.push(f(batch.y_target[task][i]));
                    tgt_y.push(f(batch.y_target[task][i]));
                    tgt_mask.push(batch.target_mask[task][i]);
                }
            }
        }

        let mut ctx_x = Vec::with_capacity(b * m * x_dim);
        let mut tgt_x = Vec::with_capacity(b * n * x_dim);
        for batch in batches {
            ctx_x.extend(batch.x_context.iter().map(|&v| f(v)));
            tgt_x.extend(batch.x_target.iter().map(|&v| f(v)));
        }

        let mut ctx_xy_t = Vec::with_capacity(t);
        let mut ctx_mask_t = Vec::with_capacity(t);
        let mut tgt_xy_t = Vec::with_capacity(t);
        let mut tgt_y_t = Vec::with_capacity(t);
        let mut tgt_mask_t = Vec::with_capacity(t);
        for task in 0..t {
            let mut cxy = Vec::with_capacity(b * m * row_w);
            let mut cm = Vec::with_capacity(b * m);
            let mut txy = Vec::with_capacity(b * n * row_w);
            let mut ty = Vec::with_capacity(b * n);
            let mut tm = Vec::with_capacity(b * n);
            for batch in batches {
                for j in 0..m {
                    for d in 0..x_dim {
                        cxy.push(f(batch.x_context[j * x_dim + d]));
                    }
                    cxy.push(f(batch.context_label_or_zero(task, j)));
                    cm.push(batch.context_mask[task][j]);
                }
                for i in 0..n {
                    for d in 0..x_dim {
                        txy.push(f(batch.x_target[i * x_dim + d]));
                    }
                    txy.push(f(batch.y_target[task][i]));
                    ty.push(f(batch.y_target[task][i]));
                    tm.push(batch.target_mask[task][i]);
                }
            }
            ctx_xy_t.push(tensor(vec![b, m, row_w], cxy));
            ctx_mask_t.push(cm);
            tgt_xy_t.push(tensor(vec![b, n, row_w], txy));
            tgt_y_t.push(tensor(vec![b, n, 1], ty));
            tgt_mask_t.push(tm);
        }

        let ctx_xy_joint = complete.then(|| {
            let mut rows = Vec::with_capacity(b * m * (x_dim + t));
            for batch in batches {
                for j in 0..m {
                    for d in 0..x_dim {
                        rows.push(f(batch.x_context[j * x_dim + d]));
                    }
                    for task in 0..t {
                        rows.push(f(batch.y_context[task][j]));
                    }
                }
            }
            tensor(vec![b, m, x_dim + t], rows)
        });
        let (tgt_xy_joint, tgt_y_joint) = if targets_complete {
            let mut rows = Vec::with_capacity(b * n * (x_dim + t));
            let mut labels = Vec::with_capacity(b * n * t);
            for batch in batches {
                for i in 0..n {
                    for d in 0..x_dim {
                        rows.push(f(batch.x_target[i * x_dim + d]));
                    }
                    for task in 0..t {
                        rows.push(f(batch.y_target[task][i]));
                        labels.push(f(batch.y_target[task][i]));
                    }
                }
            }
            (
                Some(tensor(vec![b, n, x_dim + t], rows)),
                Some(tensor(vec![b, n, t], labels)),
            )
        } else {
            (None, None)
        };

        Ok(StackedBatch {
            b,
            t,
            m,
            n,
            x_dim,
            complete,
            ctx_xy: tensor(vec![b * t, m, row_w], ctx_xy),
            ctx_mask,
            tgt_xy: tensor(vec![b * t, n, row_w], tgt_xy),
            tgt_y: tensor(vec![b * t, n, 1], tgt_y),
            tgt_mask,
            ctx_x: tensor(vec![b, m, x_dim], ctx_x),
            tgt_x: tensor(vec![b, n, x_dim], tgt_x),
            ctx_xy_t,
            ctx_mask_t,
            tgt_xy_t,
            tgt_y_t,
            tgt_mask_t,
            ctx_xy_joint,
            tgt_xy_joint,
            tgt_y_joint,
        })
    }

    /// Observed target labels across the stack.
    pub fn observed_target_count(&self) -> usize {
        self.tgt_mask.iter().filter(|&&o| o).count()
    }

    /// Target labels of task `task` as class indices, for categorical heads.
    pub fn target_classes(&self, task: usize) -> Vec<usize> {
        self.tgt_y_t[task]
            .values
            .iter()
            .map(|v| {
                let c = v.as_f64();
                debug_assert!(c >= 0.0 && c.fract() == 0.0, "class labels must be whole");
                c as usize
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::sample_context_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn family(seed: u64, n: usize, tasks: usize, m: usize, gamma: f64) -> MultiTaskBatch<f64> {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<Vec<f64>> = (0..tasks)
            .map(|t| x.iter().map(|&v| v + t as f64).collect())
            .collect();
        let target = MultiTaskBatch::from_complete_target(x, y, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_context_mask(&mut rng, &target, m, gamma).unwrap()
    }

    #[test]
    fn layouts_agree_on_every_element() {
        let batches = vec![family(1, 12, 3, 5, 0.4), family(2, 12, 3, 5, 0.4)];
        let sb = StackedBatch::<f64>::stack(&batches).unwrap();
        assert_eq!((sb.b, sb.t, sb.m, sb.n), (2, 3, 5, 12));
        for (b, batch) in batches.iter().enumerate() {
            for t in 0..3 {
                for j in 0..5 {
                    let row = (b * 3 + t) * 5 + j;
                    let flat = &sb.ctx_xy.values[row * 2..row * 2 + 2];
                    let per = &sb.ctx_xy_t[t].values[(b * 5 + j) * 2..(b * 5 + j) * 2 + 2];
                    assert_eq!(flat, per);
                    assert_eq!(sb.ctx_mask[row], sb.ctx_mask_t[t][b * 5 + j]);
                    assert_eq!(flat[0], batch.x_context[j]);
                    assert_eq!(flat[1], batch.context_label_or_zero(t, j));
                }
                for i in 0..12 {
                    let row = (b * 3 + t) * 12 + i;
                    assert_eq!(sb.tgt_y.values[row], batch.y_target[t][i]);
                    assert_eq!(sb.tgt_y.values[row], sb.tgt_y_t[t].values[b * 12 + i]);
                }
            }
        }
        assert!(sb.tgt_mask.iter().all(|&o| o));
        let joint = sb.tgt_xy_joint.unwrap();
        assert_eq!(joint.shape, vec![2, 12, 4]);
        for (b, batch) in batches.iter().enumerate() {
            for i in 0..12 {
                let row = &joint.values[(b * 12 + i) * 4..(b * 12 + i) * 4 + 4];
                assert_eq!(row[0], batch.x_target[i]);
                for t in 0..3 {
                    assert_eq!(row[1 + t], batch.y_target[t][i]);
                }
            }
        }
    }

    #[test]
    fn masked_labels_stack_as_zero_placeholders() {
        let batches = vec![family(3, 20, 4, 8, 0.6)];
        let sb = StackedBatch::<f32>::stack(&batches).unwrap();
        assert!(!sb.complete);
        assert!(sb.ctx_xy_joint.is_none());
        let mut saw_masked = false;
        for t in 0..4 {
            for j in 0..8 {
                let row = t * 8 + j;
                let label = sb.ctx_xy.values[row * 2 + 1];
                assert!(label.is_finite());
                if !sb.ctx_mask[row] {
                    saw_masked = true;
                    assert_eq!(label, 0.0);
                }
            }
        }
        assert!(saw_masked, "gamma 0.6 should drop something");
    }

    #[test]
    fn complete_context_exposes_joint_rows() {
        let batches = vec![family(4, 10, 2, 4, 0.0)];
        let sb = StackedBatch::<f64>::stack(&batches).unwrap();
        assert!(sb.complete);
        let joint = sb.ctx_xy_joint.unwrap();
        assert_eq!(joint.shape, vec![1, 4, 3]);
        for j in 0..4 {
            assert_eq!(joint.values[j * 3], batches[0].x_context[j]);
            assert_eq!(joint.values[j * 3 + 1], batches[0].y_context[0][j]);
            assert_eq!(joint.values[j * 3 + 2], batches[0].y_context[1][j]);
        }
    }

    #[test]
    fn mismatched_families_are_rejected() {
        let a = family(5, 12, 3, 5, 0.0);
        let b = family(6, 12, 3, 6, 0.0);
        match StackedBatch::<f64>::stack(&[a, b]) {
            Err(ModelError::Config { .. }) => {}
            other => panic!("expected config error, got {other:?}"),
        }
        match StackedBatch::<f64>::stack(&[]) {
            Err(ModelError::Config { .. }) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y = vec![x.clone(), x.clone()];
        let target = MultiTaskBatch::from_complete_target(x, y, 1);
        match StackedBatch::<f64>::stack(&[target]) {
            Err(ModelError::EmptyTaskContext { task: 0 }) => {}
            other => panic!("expected empty-context error, got {other:?}"),
        }
    }
}
