//! Offline checks over recorded runs: the staleness error bound, measured
//! gradient errors, and the communication cost model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ColdStart, EpochRecord, ProbeRecord, TrainConfig};
use crate::nn::dense::dot;
use crate::nn::{stacked_distance, stacked_norm, Activation, Dense};
use crate::partition::Subgraph;
use crate::repstore::CounterSnapshot;

const F64_BYTES: u64 = 8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no probe data recorded")]
    NoProbeData,
    #[error("weights differ from the oracle's at epoch {epoch}")]
    WeightMismatch { epoch: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Constants from the modelling assumptions, kept for deriving the bound inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub c_loss: Option<f64>,
    pub l_loss: Option<f64>,
    pub c_sigma: Option<f64>,
    pub l_sigma: Option<f64>,
    pub k_w: Option<f64>,
    pub k_x: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness of the loss.
    pub tau: f64,
    /// Lipschitz constant of the aggregation.
    pub r1: f64,
    /// Lipschitz constant of the update.
    pub r2: f64,
    /// Staleness per hidden layer `1..L`.
    pub eps: Vec<f64>,
    /// Largest degree in each part.
    pub max_degrees: Vec<f64>,
    pub num_parts: usize,
    pub num_layers: usize,
    #[serde(default)]
    pub assumptions: AssumptionConstants,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.num_layers == 0 || self.num_parts == 0 {
            return Err(AnalysisError::Invalid("need at least one layer and one part".into()));
        }
        if self.eps.len() + 1 != self.num_layers {
            return Err(AnalysisError::Invalid(format!(
                "{} staleness values for {} layers",
                self.eps.len(),
                self.num_layers
            )));
        }
        if self.max_degrees.len() != self.num_parts {
            return Err(AnalysisError::Invalid(format!(
                "{} degrees for {} parts",
                self.max_degrees.len(),
                self.num_parts
            )));
        }
        let scalars = [self.tau, self.r1, self.r2];
        if scalars
            .iter()
            .chain(&self.eps)
            .chain(&self.max_degrees)
            .any(|&x| !(x >= 0.0 && x.is_finite()))
        {
            return Err(AnalysisError::Invalid("constants must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `(τ/M) Σ_ℓ ε_ℓ (r1 r2)^{L-ℓ} Σ_m Δ_m^{L-ℓ}`
pub fn theorem1_bound(b: &BoundInputs) -> Result<f64, AnalysisError> {
    b.validate()?;
    let l = b.num_layers as i32;
    let mut sum = 0.0;
    for (i, &e) in b.eps.iter().enumerate() {
        let power = l - (i as i32 + 1);
        let degrees: f64 = b.max_degrees.iter().map(|d| d.powi(power)).sum();
        sum += e * b.r1.powi(power) * b.r2.powi(power) * degrees;
    }
    Ok(b.tau / b.num_parts as f64 * sum)
}

/// Largest gap between used and current halo values, per hidden layer, at one probe.
pub fn probe_eps(p: &ProbeRecord) -> Vec<f64> {
    let layers = p.weights.len();
    (0..layers.saturating_sub(1))
        .map(|k| {
            p.parts
                .iter()
                .flat_map(|part| {
                    let (s, f) = (&part.stale[k], &part.fresh[k]);
                    (0..s.rows()).map(move |i| row_gap(s.row(i), f.row(i)))
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

fn row_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-layer staleness over every probe.
pub fn measure_staleness_eps(probes: &[ProbeRecord]) -> Result<Vec<f64>, AnalysisError> {
    let first = probes.first().ok_or(AnalysisError::NoProbeData)?;
    let mut eps = probe_eps(first);
    for p in &probes[1..] {
        for (e, x) in eps.iter_mut().zip(probe_eps(p)) {
            *e = e.max(x);
        }
    }
    Ok(eps)
}

/// `‖∇L − ∇L*‖` where the oracle gradient was taken at `oracle_weights`.
pub fn gradient_error_probe(probe: &ProbeRecord, oracle_weights: &[Dense], oracle_grad: &[Dense]) -> Result<f64, AnalysisError> {
    if probe.weights.len() != oracle_weights.len() || probe.weights.iter().zip(oracle_weights).any(|(a, b)| a != b) {
        return Err(AnalysisError::WeightMismatch { epoch: probe.epoch });
    }
    if oracle_grad.len() != probe.grad_stale.len() || oracle_grad.iter().zip(&probe.grad_stale).any(|(a, b)| a.shape() != b.shape()) {
        return Err(AnalysisError::Invalid("oracle gradient shape differs".into()));
    }
    Ok(stacked_distance(&probe.grad_stale, oracle_grad))
}

/// Bound constants read off a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConstants {
    pub tau: f64,
    pub r1: f64,
    pub r2: f64,
    pub max_degrees: Vec<f64>,
    /// True when the constants provably dominate the gradient error.
    pub certified: bool,
}

/// Constants for the bound at one probe.
///
/// For a two-layer identity network without live normalisation and a softmax
/// cross-entropy loss, a halo perturbation `δa` of a training row's output
/// aggregate moves that row's gradient contribution by at most
/// `κ_v ‖δa‖` with `κ_v = √2 + K_W (‖a_v‖ + ‖b_v‖ K_W) / 2`, where `a_v` is
/// the stale aggregate, `b_v` the row of `P_in` times the input aggregate
/// and `K_W = ‖W₂‖_F`. Also `‖δa‖ ≤ r1 ε` with `r1` the largest neighbour row
/// sum of `P`, so `τ = max_m M c_m κ_m / (r2 Δ_m)` with `r2 = K_W` makes the
/// bound hold. Other networks get the same expression as an estimate.
pub fn probe_constants(p: &ProbeRecord) -> Result<ProbeConstants, AnalysisError> {
    let layers = p.weights.len();
    if layers < 2 {
        return Err(AnalysisError::Invalid("no hidden layer".into()));
    }
    if p.coefficients.len() != p.parts.len() {
        return Err(AnalysisError::Invalid("probe lacks aggregation coefficients".into()));
    }
    let m = p.parts.len() as f64;
    let k_w = p.weights[layers - 1].frobenius_norm();
    let r1 = p.parts.iter().map(|x| x.neighbor_row_sum_max).fold(0.0, f64::max);
    let r2 = k_w;
    let mut tau: f64 = 0.0;
    for (part, &c) in p.parts.iter().zip(&p.coefficients) {
        if part.max_degree == 0 || part.train_count == 0 || part.halo_nodes.is_empty() {
            continue;
        }
        let a = part.agg_norm_max[layers - 1];
        let b = part.prop_agg_norm_max[layers - 2];
        let kappa = std::f64::consts::SQRT_2 + k_w * (a + b * k_w) / 2.0;
        if r2 == 0.0 {
            return Err(AnalysisError::Invalid("last weight matrix is zero".into()));
        }
        tau = tau.max(m * c * kappa / (r2 * part.max_degree as f64));
    }
    Ok(ProbeConstants {
        tau,
        r1,
        r2,
        max_degrees: p.parts.iter().map(|x| x.max_degree as f64).collect(),
        certified: layers == 2 && p.activation == Activation::Identity && !p.normalize_live,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCheck {
    pub epoch: usize,
    pub eps: Vec<f64>,
    pub constants: ProbeConstants,
    pub bound: f64,
    /// Against the same local objectives evaluated with current halo values.
    pub error_vs_fresh: f64,
    /// Against the full-graph gradient.
    pub error_vs_full: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub checks: Vec<ProbeCheck>,
    pub certified: bool,
    pub all_hold: bool,
}

pub fn bound_report(probes: &[ProbeRecord]) -> Result<BoundReport, AnalysisError> {
    if probes.is_empty() {
        return Err(AnalysisError::NoProbeData);
    }
    let mut checks = Vec::with_capacity(probes.len());
    for p in probes {
        let constants = probe_constants(p)?;
        let eps = probe_eps(p);
        let inputs = BoundInputs {
            tau: constants.tau,
            r1: constants.r1,
            r2: constants.r2,
            eps: eps.clone(),
            max_degrees: constants.max_degrees.clone(),
            num_parts: p.parts.len(),
            num_layers: p.weights.len(),
            assumptions: AssumptionConstants {
                k_w: Some(constants.r2),
                ..AssumptionConstants::default()
            },
        };
        let bound = theorem1_bound(&inputs)?;
        let error_vs_fresh = stacked_distance(&p.grad_stale, &p.grad_fresh);
        checks.push(ProbeCheck {
            epoch: p.epoch,
            eps,
            bound,
            error_vs_fresh,
            error_vs_full: stacked_distance(&p.grad_stale, &p.grad_full),
            holds: error_vs_fresh <= bound,
            constants,
        });
    }
    Ok(BoundReport {
        certified: checks.iter().all(|c| c.constants.certified),
        all_hold: checks.iter().all(|c| c.holds),
        checks,
    })
}

/// Empirical `V` and `β` of the bounded-dissimilarity assumption at one probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityEstimate {
    pub epoch: usize,
    /// `max_m ‖∇L_m‖ / ‖∇L‖`
    pub v: f64,
    /// `min_m ⟨∇L, ∇L_m⟩ / ‖∇L‖²`
    pub beta: f64,
}

pub fn dissimilarity(p: &ProbeRecord) -> Option<DissimilarityEstimate> {
    let full = stacked_norm(&p.grad_full);
    if full == 0.0 || p.parts.is_empty() {
        return None;
    }
    let mut v: f64 = 0.0;
    let mut beta = f64::INFINITY;
    for part in &p.parts {
        v = v.max(stacked_norm(&part.grad) / full);
        let inner: f64 = p.grad_full.iter().zip(&part.grad).map(|(a, b)| dot(a.as_slice(), b.as_slice())).sum();
        beta = beta.min(inner / (full * full));
    }
    Some(DissimilarityEstimate { epoch: p.epoch, v, beta })
}

/// Least-squares slope of `log(mean_{t≤T} ‖g_t‖²)` against `log T`.
/// Descriptive only.
pub fn convergence_slope(records: &[EpochRecord]) -> Option<f64> {
    let sq: Vec<f64> = records.iter().filter_map(|r| r.grad_norm).map(|g| g * g).collect();
    if sq.len() < 2 {
        return None;
    }
    let mut acc = 0.0;
    let mut pts = Vec::with_capacity(sq.len());
    for (t, s) in sq.iter().enumerate() {
        acc += s;
        let mean = acc / (t + 1) as f64;
        if mean > 0.0 {
            pts.push((((t + 1) as f64).ln(), mean.ln()));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Sizes that drive the communication cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub num_parts: usize,
    /// Layer widths `d_0 … d_L`.
    pub dims: Vec<usize>,
    pub num_nodes: usize,
    pub part_sizes: Vec<usize>,
    pub halo_sizes: Vec<usize>,
}

impl CostInputs {
    pub fn from_subgraphs(subs: &[Subgraph], dims: &[usize]) -> Self {
        let part_sizes: Vec<usize> = subs.iter().map(Subgraph::num_local).collect();
        Self {
            num_parts: subs.len(),
            dims: dims.to_vec(),
            num_nodes: part_sizes.iter().sum(),
            part_sizes,
            halo_sizes: subs.iter().map(Subgraph::num_halo).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    fn hidden_width_sum(&self) -> usize {
        let l = self.num_layers();
        if l < 2 {
            0
        } else {
            self.dims[1..l].iter().sum()
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.dims.len() < 2 {
            return Err(AnalysisError::Invalid("need at least one layer".into()));
        }
        if self.part_sizes.len() != self.num_parts || self.halo_sizes.len() != self.num_parts {
            return Err(AnalysisError::Invalid("one part size and halo size per part".into()));
        }
        if self.part_sizes.iter().sum::<usize>() != self.num_nodes {
            return Err(AnalysisError::Invalid("part sizes do not sum to the node count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub sync_interval: usize,
    pub cold_start: ColdStart,
}

impl From<&TrainConfig> for Schedule {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            sync_interval: cfg.sync_interval,
            cold_start: cfg.cold_start,
        }
    }
}

impl Schedule {
    pub fn pull_epochs(&self) -> usize {
        self.epochs / self.sync_interval
    }

    pub fn push_epochs(&self) -> usize {
        if self.epochs == 0 {
            0
        } else {
            (self.epochs - 1) / self.sync_interval + 1
        }
    }
}

/// Expected store and parameter traffic for a whole run, in the units of [`CounterSnapshot`].
pub fn predict_comm_cost(c: &CostInputs, s: &Schedule) -> Result<CounterSnapshot, AnalysisError> {
    c.validate()?;
    if s.sync_interval == 0 {
        return Err(AnalysisError::Invalid("sync_interval must be ≥ 1".into()));
    }
    let hidden = c.num_layers() as u64 - 1;
    let prime = u64::from(s.cold_start == ColdStart::FirstPushBlocking && hidden > 0);
    let m = c.num_parts as u64;
    let pulls = s.pull_epochs() as u64 + prime;
    let pushes = s.push_epochs() as u64 + prime;
    let halo: u64 = c.halo_sizes.iter().map(|&h| h as u64).sum();
    let nodes = c.num_nodes as u64;
    let widths = c.hidden_width_sum() as u64;
    Ok(CounterSnapshot {
        pull_ops: pulls * hidden * m,
        push_ops: pushes * hidden * m,
        pulled_values: pulls * halo * hidden,
        pushed_values: pushes * nodes * hidden,
        pulled_bytes: pulls * halo * widths * F64_BYTES,
        pushed_bytes: pushes * nodes * widths * F64_BYTES,
        param_sync_bytes: 2 * m * s.epochs as u64 * c.num_params() as u64 * F64_BYTES,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCheck {
    pub predicted: CounterSnapshot,
    pub observed: CounterSnapshot,
    pub exact_match: bool,
}

pub fn cross_check(c: &CostInputs, s: &Schedule, observed: CounterSnapshot) -> Result<CostCheck, AnalysisError> {
    let predicted = predict_comm_cost(c, s)?;
    Ok(CostCheck {
        exact_match: predicted == observed,
        predicted,
        observed,
    })
}

/// True when the points lie exactly on one line. Needs at least three points.
pub fn is_exactly_affine(points: &[(u64, u64)]) -> bool {
    points.len() >= 3
        && points.windows(3).all(|w| {
            let [(x1, y1), (x2, y2), (x3, y3)] = [w[0], w[1], w[2]].map(|(x, y)| (i128::from(x), i128::from(y)));
            (y2 - y1) * (x3 - x2) == (y3 - y2) * (x2 - x1)
        })
}

/// Pulled plus pushed scalars for the same partition at each depth, keeping
/// every hidden width equal to `width`.
pub fn rep_scalars_by_depth(c: &CostInputs, s: &Schedule, depths: &[usize], width: usize) -> Result<Vec<(u64, u64)>, AnalysisError> {
    let d_in = *c.dims.first().ok_or_else(|| AnalysisError::Invalid("need input width".into()))?;
    let d_out = *c.dims.last().expect("non-empty");
    depths
        .iter()
        .map(|&l| {
            if l == 0 {
                return Err(AnalysisError::Invalid("depth must be ≥ 1".into()));
            }
            let mut dims = vec![d_in];
            dims.extend(std::iter::repeat_n(width, l - 1));
            dims.push(d_out);
            let cost = predict_comm_cost(&CostInputs { dims, ..c.clone() }, s)?;
            Ok((l as u64, cost.rep_scalars()))
        })
        .collect()
}
