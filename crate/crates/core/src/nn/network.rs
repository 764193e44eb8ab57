//! Full forward and backward passes of a [`GcnModel`] over one subgraph.

use super::layer::{aggregate, delta, halo_input_gradient};
use super::norm::{normalize_rows, normalize_rows_backward};
use super::{Csr, Dense, GcnModel, ShapeError};

/// The part of the graph a worker computes on: propagation rows split into
/// local and halo columns, plus input features for both.
#[derive(Debug, Clone, Copy)]
pub struct LocalView<'a> {
    pub p_in: &'a Csr,
    pub p_out: &'a Csr,
    pub x_in: &'a Dense,
    pub x_halo: &'a Dense,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[k]` is the local input of 0-based layer `k` (`inputs[0]` = features).
    pub inputs: Vec<Dense>,
    /// Halo input of each layer (`halo_inputs[0]` = halo features).
    pub halo_inputs: Vec<Dense>,
    pub aggregates: Vec<Dense>,
    pub preacts: Vec<Dense>,
    /// `σ(Z)` before live normalisation.
    pub activated: Vec<Dense>,
    pub logits: Dense,
}

impl ForwardTrace {
    /// Local hidden representations `H^(1) … H^(L-1)`, as fed to the next layer.
    pub fn hidden(&self) -> &[Dense] {
        &self.inputs[1..]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Dense>,
    /// Gradient with respect to the halo input of each layer.
    pub halo: Vec<Dense>,
}

/// Runs all layers. `halo(k)` supplies the halo representations of hidden
/// layer `k` (1-based, `1..L`), i.e. the halo input of 0-based layer `k`.
pub fn forward<E>(
    model: &GcnModel,
    view: LocalView<'_>,
    normalize_live: bool,
    mut halo: impl FnMut(usize) -> Result<Dense, E>,
) -> Result<ForwardTrace, E>
where
    E: From<ShapeError>,
{
    let layers = model.num_layers();
    let mut inputs = vec![view.x_in.clone()];
    let mut halo_inputs = vec![view.x_halo.clone()];
    let mut aggregates = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers);
    let mut activated = Vec::with_capacity(layers);
    for k in 0..layers {
        if k > 0 {
            let h = halo(k)?;
            if h.rows() != view.p_out.cols() || (h.rows() > 0 && h.cols() != model.dims()[k]) {
                return Err(ShapeError::new(
                    "forward halo",
                    format!("{}x{}", view.p_out.cols(), model.dims()[k]),
                    format!("{}x{}", h.rows(), h.cols()),
                )
                .into());
            }
            halo_inputs.push(h);
        }
        let w = &model.weights()[k];
        if w.rows() != inputs[k].cols() {
            return Err(ShapeError::new(
                "forward",
                format!("input width {}", w.rows()),
                format!("{}", inputs[k].cols()),
            )
            .into());
        }
        let agg = aggregate(view.p_in, view.p_out, &inputs[k], &halo_inputs[k])?;
        let z = agg.matmul(w)?;
        let act = model.layer_activation(k);
        let a = z.map(|v| act.apply(v));
        if k + 1 < layers {
            let h = if normalize_live { normalize_rows(&a) } else { a.clone() };
            inputs.push(h);
        }
        aggregates.push(agg);
        preacts.push(z);
        activated.push(a);
    }
    let logits = activated.last().cloned().expect("at least one layer");
    Ok(ForwardTrace {
        inputs,
        halo_inputs,
        aggregates,
        preacts,
        activated,
        logits,
    })
}

/// Backpropagates `g_logits` through a trace. Halo inputs are constants, so
/// the in-subgraph path alone carries gradient between layers; the halo
/// gradients are returned separately for callers that route them.
pub fn backward(
    model: &GcnModel,
    view: LocalView<'_>,
    trace: &ForwardTrace,
    g_logits: &Dense,
    normalize_live: bool,
) -> Result<Gradients, ShapeError> {
    let layers = model.num_layers();
    let mut g_weights = vec![Dense::zeros(0, 0); layers];
    let mut g_halo = vec![Dense::zeros(0, 0); layers];
    let mut g_out = g_logits.clone();
    for k in (0..layers).rev() {
        let g_act = if k + 1 < layers && normalize_live {
            normalize_rows_backward(&trace.activated[k], &g_out)
        } else {
            g_out
        };
        let d = delta(&trace.preacts[k], &g_act, model.layer_activation(k))?;
        let w = &model.weights()[k];
        g_weights[k] = trace.aggregates[k].t_matmul(&d)?;
        g_halo[k] = halo_input_gradient(view.p_out, &d, w)?;
        g_out = view.p_in.t_matmul_dense(&d.matmul_t(w)?)?;
    }
    Ok(Gradients {
        weights: g_weights,
        halo: g_halo,
    })
}

/// Forward with an empty halo, for a view that already covers the whole graph.
pub fn forward_closed(model: &GcnModel, view: LocalView<'_>, normalize_live: bool) -> Result<ForwardTrace, ShapeError> {
    forward(model, view, normalize_live, |k| Ok(Dense::zeros(0, model.dims()[k])))
}
