use super::full::FullGraph;
use super::metrics::{PartProbe, ProbeRecord};
use super::{AggWeighting, EngineError, TrainConfig};
use crate::nn::dense::l2;
use crate::nn::layer::delta;
use crate::nn::network::{backward, forward};
use crate::nn::{cross_entropy, normalize_rows, normalize_rows_backward, Dense, ForwardTrace, GcnModel};
use crate::partition::Subgraph;

/// How the fresh-halo hook treats gradients with respect to halo inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaloGradient {
    /// Halo inputs are constants, as in training.
    Detached,
    /// Halo input gradients are sent back to the owning parts and continue
    /// down their layers.
    Routed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreshOptions {
    pub normalize_live: bool,
    pub normalize_push: bool,
    pub aggregation: AggWeighting,
}

impl From<&TrainConfig> for FreshOptions {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            normalize_live: cfg.normalize_live,
            normalize_push: cfg.normalize_push,
            aggregation: cfg.aggregation,
        }
    }
}

/// Server-side averaging coefficients, one per part.
pub fn part_coefficients(subs: &[Subgraph], aggregation: AggWeighting) -> Vec<f64> {
    match aggregation {
        AggWeighting::Mean => vec![1.0 / subs.len() as f64; subs.len()],
        AggWeighting::NodeCount => {
            let total: usize = subs.iter().map(Subgraph::num_local).sum();
            subs.iter().map(|s| s.num_local() as f64 / total as f64).collect()
        }
    }
}

fn transform(h: &Dense, normalize: bool) -> Dense {
    if normalize {
        normalize_rows(h)
    } else {
        h.clone()
    }
}

/// Per-part forward passes whose halo inputs are the current values at
/// `model`, taken from a full-graph pass.
pub(crate) fn fresh_traces(
    full: &FullGraph<'_>,
    subs: &[Subgraph],
    model: &GcnModel,
    opts: FreshOptions,
) -> Result<(ForwardTrace, Vec<ForwardTrace>), EngineError> {
    let global = full.forward(model, opts.normalize_live)?;
    let traces = subs
        .iter()
        .map(|sub| {
            forward(model, sub.view(), opts.normalize_live, |k| {
                Ok::<_, EngineError>(transform(&global.inputs[k].select_rows(&sub.halo_nodes), opts.normalize_push))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((global, traces))
}

/// `Σ_m c_m ∇L_m` where every part sees current halo values instead of
/// stale ones. With [`HaloGradient::Routed`], equal parts, `Mean`
/// aggregation and no push normalisation this is the full-graph gradient.
pub fn fresh_halo_gradients(
    full: &FullGraph<'_>,
    subs: &[Subgraph],
    model: &GcnModel,
    opts: FreshOptions,
    routing: HaloGradient,
) -> Result<Vec<Dense>, EngineError> {
    let (_, traces) = fresh_traces(full, subs, model, opts)?;
    let coef = part_coefficients(subs, opts.aggregation);
    let layers = model.num_layers();
    let mut g_out = Vec::with_capacity(subs.len());
    for ((sub, trace), &c) in subs.iter().zip(&traces).zip(&coef) {
        let g = if sub.train_mask.iter().any(|&t| t) {
            let (_, g) = cross_entropy(&trace.logits, &sub.labels, &sub.train_mask)?;
            g.scale(c)
        } else {
            Dense::zeros(trace.logits.rows(), trace.logits.cols())
        };
        g_out.push(g);
    }

    let mut total: Vec<Dense> = model.weights().iter().map(|w| Dense::zeros(w.rows(), w.cols())).collect();
    if routing == HaloGradient::Detached {
        for ((sub, trace), g) in subs.iter().zip(&traces).zip(&g_out) {
            let grads = backward(model, sub.view(), trace, g, opts.normalize_live)?;
            for (t, gw) in total.iter_mut().zip(&grads.weights) {
                t.add_assign(gw)?;
            }
        }
        return Ok(total);
    }

    // owner[v] = (part, local row)
    let n: usize = subs.iter().map(Subgraph::num_local).sum();
    let mut owner = vec![(0, 0); n];
    for (m, sub) in subs.iter().enumerate() {
        for (i, &v) in sub.local_nodes.iter().enumerate() {
            owner[v] = (m, i);
        }
    }
    for k in (0..layers).rev() {
        let w = &model.weights()[k];
        let mut next: Vec<Dense> = subs.iter().map(|s| Dense::zeros(s.num_local(), w.rows())).collect();
        for (m, (sub, trace)) in subs.iter().zip(&traces).enumerate() {
            let g_act = if k + 1 < layers && opts.normalize_live {
                normalize_rows_backward(&trace.activated[k], &g_out[m])
            } else {
                g_out[m].clone()
            };
            let d = delta(&trace.preacts[k], &g_act, model.layer_activation(k))?;
            total[k].add_assign(&trace.aggregates[k].t_matmul(&d)?)?;
            if k == 0 {
                continue;
            }
            let dw = d.matmul_t(w)?;
            next[m].add_assign(&sub.p_in.t_matmul_dense(&dw)?)?;
            let gh = sub.p_out.t_matmul_dense(&dw)?;
            for (i, &h) in sub.halo_nodes.iter().enumerate() {
                let (o, li) = owner[h];
                let mut row = Dense::from_vec(1, gh.cols(), gh.row(i).to_vec())?;
                if opts.normalize_push {
                    let raw = traces[o].inputs[k].select_rows(&[li]);
                    row = normalize_rows_backward(&raw, &row);
                }
                for (a, b) in next[o].row_mut(li).iter_mut().zip(row.as_slice()) {
                    *a += b;
                }
            }
        }
        g_out = next;
    }
    Ok(total)
}

/// Assembles the probe for one sync epoch from what the workers used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_probe(
    full: &FullGraph<'_>,
    subs: &[Subgraph],
    model: &GcnModel,
    cfg: &TrainConfig,
    epoch: usize,
    traces: &[&ForwardTrace],
    part_grads: &[Vec<Dense>],
    grad_stale: Vec<Dense>,
) -> Result<ProbeRecord, EngineError> {
    let opts = FreshOptions::from(cfg);
    let global = full.forward(model, cfg.normalize_live)?;
    let grad_fresh = fresh_halo_gradients(full, subs, model, opts, HaloGradient::Detached)?;
    let (_, grad_full) = full.loss_and_gradient(model, cfg.normalize_live)?;
    let layers = model.num_layers();
    let mut parts = Vec::with_capacity(subs.len());
    for ((sub, trace), grad) in subs.iter().zip(traces).zip(part_grads) {
        let train_rows: Vec<usize> = (0..sub.num_local()).filter(|&i| sub.train_mask[i]).collect();
        let max_row_norm = |m: &Dense| train_rows.iter().map(|&i| l2(m.row(i))).fold(0.0, f64::max);
        let neighbor_row_sum_max = (0..sub.num_local())
            .map(|i| sub.p_in.row_sum(i) - sub.p_in.get(i, i) + sub.p_out.row_sum(i))
            .fold(0.0, f64::max);
        let mut prop_agg_norm_max = Vec::with_capacity(layers);
        for agg in &trace.aggregates {
            prop_agg_norm_max.push(max_row_norm(&sub.p_in.matmul_dense(agg)?));
        }
        parts.push(PartProbe {
            part_id: sub.part_id,
            halo_nodes: sub.halo_nodes.clone(),
            max_degree: sub.max_degree,
            train_count: train_rows.len(),
            stale: trace.halo_inputs[1..].to_vec(),
            fresh: (1..layers)
                .map(|k| transform(&global.inputs[k].select_rows(&sub.halo_nodes), cfg.normalize_push))
                .collect(),
            neighbor_row_sum_max,
            agg_norm_max: trace.aggregates.iter().map(max_row_norm).collect(),
            prop_agg_norm_max,
            grad: grad.clone(),
        });
    }
    Ok(ProbeRecord {
        epoch,
        activation: model.activation(),
        normalize_live: cfg.normalize_live,
        weights: model.weights().to_vec(),
        coefficients: part_coefficients(subs, cfg.aggregation),
        parts,
        grad_stale,
        grad_fresh,
        grad_full,
    })
}
