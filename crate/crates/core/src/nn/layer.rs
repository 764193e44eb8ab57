//! One GCN layer over a split propagation matrix.
//!
//! A subgraph sees its propagation rows as two blocks: `p_in` over its own
//! nodes and `p_out` over halo nodes owned by other parts. The layer computes
//!
//! ```text
//! Z = (P_in · H_in + P_out · H_out) · W,    H' = σ(Z)
//! ```
//!
//! where `H_out` holds whatever halo representations the caller supplies
//! (stale copies during training). In the backward pass `H_out` is a
//! constant: only the in-subgraph path produces an input gradient.

use serde::{Deserialize, Serialize};

use super::{Csr, Dense, ShapeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn check_operands(
    p_in: &Csr,
    p_out: &Csr,
    h_in: &Dense,
    h_out: &Dense,
    w: &Dense,
) -> Result<(), ShapeError> {
    if p_in.cols() != h_in.rows() {
        return Err(ShapeError::new(
            "layer",
            format!("H_in rows = P_in cols = {}", p_in.cols()),
            format!("H_in rows {}", h_in.rows()),
        ));
    }
    if p_out.rows() != p_in.rows() {
        return Err(ShapeError::new(
            "layer",
            format!("P_out rows = P_in rows = {}", p_in.rows()),
            format!("P_out rows {}", p_out.rows()),
        ));
    }
    if p_out.cols() != h_out.rows() {
        return Err(ShapeError::new(
            "layer",
            format!("H_out rows = P_out cols = {}", p_out.cols()),
            format!("H_out rows {}", h_out.rows()),
        ));
    }
    if h_out.rows() > 0 && h_out.cols() != h_in.cols() {
        return Err(ShapeError::new(
            "layer",
            format!("H_out width = H_in width = {}", h_in.cols()),
            format!("H_out width {}", h_out.cols()),
        ));
    }
    if w.rows() != h_in.cols() {
        return Err(ShapeError::new(
            "layer",
            format!("W rows = H width = {}", h_in.cols()),
            format!("W rows {}", w.rows()),
        ));
    }
    Ok(())
}

/// `P_in · H_in + P_out · H_out`, the neighbourhood aggregate before the weight product.
pub fn aggregate(p_in: &Csr, p_out: &Csr, h_in: &Dense, h_out: &Dense) -> Result<Dense, ShapeError> {
    let mut agg = p_in.matmul_dense(h_in)?;
    if p_out.cols() > 0 {
        let halo = p_out.matmul_dense(h_out)?;
        agg.add_assign(&halo)?;
    }
    Ok(agg)
}

/// Forward pass. Returns the activated output and the pre-activation `Z`.
pub fn layer_forward(
    p_in: &Csr,
    p_out: &Csr,
    h_in: &Dense,
    h_out: &Dense,
    w: &Dense,
    activation: Activation,
) -> Result<(Dense, Dense), ShapeError> {
    check_operands(p_in, p_out, h_in, h_out, w)?;
    let z = aggregate(p_in, p_out, h_in, h_out)?.matmul(w)?;
    let out = z.map(|v| activation.apply(v));
    Ok((out, z))
}

/// Backward pass for [`layer_forward`].
///
/// With `D = G_next ∘ σ'(Z)` this returns `G_W = (P_in H_in + P_out H_out)ᵀ D`
/// and `G_H_in = P_inᵀ D Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn layer_backward(
    z: &Dense,
    p_in: &Csr,
    p_out: &Csr,
    h_in: &Dense,
    h_out: &Dense,
    w: &Dense,
    g_next: &Dense,
    activation: Activation,
) -> Result<(Dense, Dense), ShapeError> {
    check_operands(p_in, p_out, h_in, h_out, w)?;
    let d = delta(z, g_next, activation)?;
    let agg = aggregate(p_in, p_out, h_in, h_out)?;
    let g_w = agg.t_matmul(&d)?;
    let g_h_in = p_in.t_matmul_dense(&d.matmul_t(w)?)?;
    Ok((g_w, g_h_in))
}

/// `G_next ∘ σ'(Z)`
pub fn delta(z: &Dense, g_next: &Dense, activation: Activation) -> Result<Dense, ShapeError> {
    if z.shape() != g_next.shape() {
        return Err(ShapeError::new(
            "delta",
            format!("{:?}", z.shape()),
            format!("{:?}", g_next.shape()),
        ));
    }
    let mut d = g_next.clone();
    for (dv, &zv) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *dv *= activation.derivative(zv);
    }
    Ok(d)
}

/// Gradient with respect to the halo input, `P_outᵀ D Wᵀ`. Training never
/// uses this (halo copies are constants); the exact-routing test hook does.
pub fn halo_input_gradient(p_out: &Csr, d: &Dense, w: &Dense) -> Result<Dense, ShapeError> {
    p_out.t_matmul_dense(&d.matmul_t(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Dense {
        Dense::from_vec(1, 1, vec![v]).unwrap()
    }

    fn half() -> Csr {
        Csr::from_rows(1, vec![vec![(0, 0.5)]]).unwrap()
    }

    #[test]
    fn scalar_forward_and_backward() {
        let (out, z) = layer_forward(&half(), &half(), &one(2.0), &one(4.0), &one(1.0), Activation::Identity).unwrap();
        assert_eq!(out, one(3.0));
        assert_eq!(z, one(3.0));
        let (g_w, g_h) = layer_backward(
            &z,
            &half(),
            &half(),
            &one(2.0),
            &one(4.0),
            &one(1.0),
            &one(1.0),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(g_w, one(3.0));
        assert_eq!(g_h, one(0.5));
    }

    #[test]
    fn relu_clamps_and_kills_gradient() {
        let (out, z) = layer_forward(&half(), &half(), &one(-2.0), &one(0.0), &one(1.0), Activation::Relu).unwrap();
        assert_eq!(z, one(-1.0));
        assert_eq!(out, one(0.0));
        let (g_w, g_h) = layer_backward(&z, &half(), &half(), &one(-2.0), &one(0.0), &one(1.0), &one(1.0), Activation::Relu)
            .unwrap();
        assert_eq!(g_w, one(0.0));
        assert_eq!(g_h, one(0.0));
    }

    #[test]
    fn empty_halo_reduces_to_plain_gcn() {
        let p = Csr::from_rows(2, vec![vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]]).unwrap();
        let h = Dense::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let w = Dense::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let (out, _) = layer_forward(&p, &Csr::empty(2, 0), &h, &Dense::zeros(0, 2), &w, Activation::Relu).unwrap();
        let expect = p.to_dense().matmul(&h).unwrap().matmul(&w).unwrap().map(|v| v.max(0.0));
        assert_eq!(out, expect);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let err = layer_forward(&half(), &half(), &Dense::zeros(2, 1), &one(1.0), &one(1.0), Activation::Relu);
        assert!(err.is_err());
        let err = layer_forward(&half(), &half(), &one(1.0), &one(1.0), &Dense::zeros(2, 1), Activation::Relu);
        assert!(err.is_err());
    }
}
