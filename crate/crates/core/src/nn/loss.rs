use super::{Dense, NnError, ShapeError};

/// Mean softmax cross-entropy over the masked rows.
///
/// Returns the loss and its gradient with respect to the logits. Unmasked rows
/// get a zero gradient; masked rows get `(softmax - onehot) / |mask|`.
pub fn cross_entropy(logits: &Dense, labels: &[usize], mask: &[bool]) -> Result<(f64, Dense), NnError> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(ShapeError::new(
            "cross_entropy",
            format!("{} labels and mask entries", logits.rows()),
            format!("{} labels, {} mask entries", labels.len(), mask.len()),
        )
        .into());
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let classes = logits.cols();
    let scale = 1.0 / count as f64;
    let mut grad = Dense::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, (&label, &on)) in labels.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let top = Dense::argmax_row(row);
        let max = row[top];
        // log-sum-exp as max + ln(1 + Σ_{j≠top} e^{z_j - max}) keeps tiny losses accurate
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &z)| (z - max).exp())
            .sum();
        let tail = rest.ln_1p();
        let log_norm = max + tail;
        total += (max - row[label]) + tail;
        let g = grad.row_mut(i);
        for (gc, &z) in g.iter_mut().zip(row) {
            *gc = (z - log_norm).exp() * scale;
        }
        g[label] -= scale;
    }
    Ok((total * scale, grad))
}

/// Fraction of masked rows whose argmax equals the label. For single-label
/// multiclass prediction this is micro-averaged F1.
pub fn micro_f1(logits: &Dense, labels: &[usize], mask: &[bool]) -> Result<f64, NnError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let pred = logits.argmax_rows();
    let hits = pred
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|((p, l), &m)| m && p == l)
        .count();
    Ok(hits as f64 / count as f64)
}
