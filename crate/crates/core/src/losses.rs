//! Training objectives: contrastive (ITC), matching (ITM) and masked
//! next-token (LM) losses, plus similarity-weighted hard-negative sampling.
//!
//! The `*_graph` builders are what the trainers use; the plain functions
//! evaluate the same graphs on constant inputs.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{invalid, Result};

const UNIT_NORM_TOL: f64 = 1e-4;

fn check_unit_rows(m: &Mat, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid!("{what} row {i} has norm {n}, expected unit norm"));
        }
    }
    Ok(())
}

fn check_itc_inputs(img: &Mat, txt: &Mat, tau: f64) -> Result<()> {
    if img.nrows() == 0 {
        return Err(invalid!("contrastive batch is empty"));
    }
    if img.nrows() != txt.nrows() {
        return Err(invalid!(
            "image batch has {} rows but text batch has {}",
            img.nrows(),
            txt.nrows()
        ));
    }
    if img.ncols() != txt.ncols() {
        return Err(invalid!(
            "embedding widths differ: {} vs {}",
            img.ncols(),
            txt.ncols()
        ));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    check_unit_rows(img, "image embedding")?;
    check_unit_rows(txt, "text embedding")
}

/// Symmetric InfoNCE on `S = img · txtᵀ / τ` with diagonal targets.
pub fn itc_graph(g: &mut Graph, img: Var, txt: Var, tau: Var) -> Var {
    let n = g.value(img).nrows();
    let targets: Vec<usize> = (0..n).collect();
    let weights = vec![1.0; n];
    let sim = g.matmul_t(img, txt);
    let logits = g.div_scalar(sim, tau);
    let i2t = g.cross_entropy(logits, &targets, &weights);
    let logits_t = g.transpose(logits);
    let t2i = g.cross_entropy(logits_t, &targets, &weights);
    let both = g.add(i2t, t2i);
    g.scale(both, 0.5)
}

pub fn itc_loss(img: &Mat, txt: &Mat, tau: f64) -> Result<f64> {
    Ok(itc_loss_with_grad(img, txt, tau)?.0)
}

/// Loss and its gradients with respect to both embedding batches.
pub fn itc_loss_with_grad(img: &Mat, txt: &Mat, tau: f64) -> Result<(f64, Mat, Mat)> {
    check_itc_inputs(img, txt, tau)?;
    let mut g = Graph::new();
    let iv = g.variable(img.clone());
    let tv = g.variable(txt.clone());
    let tau_v = g.constant(Array2::from_elem((1, 1), tau));
    let loss = itc_graph(&mut g, iv, tv, tau_v);
    let mut grads = g.backward(loss);
    Ok((
        g.scalar(loss),
        grads.take(iv).expect("tracked"),
        grads.take(tv).expect("tracked"),
    ))
}

/// Draws one in-batch negative per row and per column of `sim`, with
/// probability proportional to the softmax of the off-diagonal entries.
/// Returns `(negative text index per image, negative image index per text)`.
pub fn sample_hard_negatives<R: Rng + ?Sized>(
    sim: &Mat,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = sim.nrows();
    if sim.ncols() != n {
        return Err(invalid!(
            "similarity matrix must be square, got {:?}",
            sim.dim()
        ));
    }
    if n < 2 {
        return Err(invalid!(
            "hard negatives need a batch of at least 2, got {n}"
        ));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("similarity matrix has non-finite entries"));
    }
    let draw = |rng: &mut R, exclude: usize, score: &dyn Fn(usize) -> f64| -> usize {
        let max = (0..n)
            .filter(|&j| j != exclude)
            .map(score)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..n)
            .map(|j| {
                if j == exclude {
                    0.0
                } else {
                    (score(j) - max).exp()
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut last = exclude;
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            last = j;
            if u < *w {
                return j;
            }
            u -= w;
        }
        last
    };
    let neg_text = (0..n).map(|i| draw(rng, i, &|j| sim[[i, j]])).collect();
    let neg_img = (0..n).map(|j| draw(rng, j, &|i| sim[[i, j]])).collect();
    Ok((neg_text, neg_img))
}

fn check_itm_inputs(logits: &[f64], labels: &[f64]) -> Result<()> {
    if logits.is_empty() || !logits.len().is_multiple_of(3) {
        return Err(invalid!(
            "matching batch must hold 3N logits, got {}",
            logits.len()
        ));
    }
    if logits.len() != labels.len() {
        return Err(invalid!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        ));
    }
    if let Some(l) = labels.iter().find(|l| **l != 0.0 && **l != 1.0) {
        return Err(invalid!("matching label {l} is not 0 or 1"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(invalid!("matching logits must be finite"));
    }
    Ok(())
}

/// Labels for the `[N positives | N image→negative-text | N negative-image→text]` layout.
pub fn itm_labels(n: usize) -> Vec<f64> {
    let mut labels = vec![1.0; n];
    labels.extend(std::iter::repeat_n(0.0, 2 * n));
    labels
}

pub fn itm_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    Ok(itm_loss_with_grad(logits, labels)?.0)
}

pub fn itm_loss_with_grad(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_itm_inputs(logits, labels)?;
    let mut g = Graph::new();
    let z = g.variable(Array2::from_shape_vec((logits.len(), 1), logits.to_vec()).expect("shape"));
    let loss = g.bce_with_logits(z, labels);
    let grads = g.backward(loss);
    Ok((
        g.scalar(loss),
        grads.get(z).expect("tracked").iter().copied().collect(),
    ))
}

fn check_lm_inputs(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<()> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(invalid!(
            "logits rows {}, targets {}, mask {} must agree",
            logits.nrows(),
            targets.len(),
            mask.len()
        ));
    }
    if !mask.iter().any(|m| *m) {
        return Err(invalid!("loss mask selects no positions"));
    }
    if let Some(t) = targets.iter().find(|t| **t >= logits.ncols()) {
        return Err(invalid!("target {t} outside vocabulary {}", logits.ncols()));
    }
    Ok(())
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect()
}

/// Mean cross-entropy over masked rows only. Row `t` of `logits` scores
/// `targets[t]`; the caller aligns logits with next tokens.
pub fn lm_loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    Ok(lm_loss_with_grad(logits, targets, mask)?.0)
}

pub fn lm_loss_with_grad(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<(f64, Mat)> {
    check_lm_inputs(logits, targets, mask)?;
    let mut g = Graph::new();
    let z = g.variable(logits.clone());
    let loss = g.cross_entropy(z, targets, &mask_weights(mask));
    let mut grads = g.backward(loss);
    Ok((g.scalar(loss), grads.take(z).expect("tracked")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn itc_single_pair_is_zero() {
        let e = array![[0.6, 0.8]];
        assert_eq!(itc_loss(&e, &e, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn itc_identical_rows_is_ln_n() {
        let e = Array2::from_shape_fn((4, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let l = itc_loss(&e, &e, 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn itc_rejects_bad_inputs() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 0.0]];
        assert!(itc_loss(&a, &b, 0.07).is_err());
        let unnorm = array![[2.0, 0.0], [0.0, 1.0]];
        assert!(itc_loss(&unnorm, &a, 0.07).is_err());
        assert!(itc_loss(&a, &a, 0.0).is_err());
    }

    #[test]
    fn negatives_for_pair_batch_are_forced() {
        let sim = array![[0.3, -5.0], [2.0, 0.1]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (t, i) = sample_hard_negatives(&sim, &mut rng).unwrap();
            assert_eq!(t, vec![1, 0]);
            assert_eq!(i, vec![1, 0]);
        }
        assert!(sample_hard_negatives(&array![[1.0]], &mut rng).is_err());
    }

    #[test]
    fn itm_simple_values() {
        let labels = itm_labels(2);
        assert!((itm_loss(&[0.0; 6], &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        let sat: Vec<f64> = labels
            .iter()
            .map(|y| if *y == 1.0 { 20.0 } else { -20.0 })
            .collect();
        assert!(itm_loss(&sat, &labels).unwrap() < 1e-8);
        assert!(itm_loss(&[0.0; 4], &[1.0; 4]).is_err());
        assert!(itm_loss(&[0.0; 3], &[1.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn lm_loss_uniform_and_saturated() {
        let v = 7;
        let logits = Array2::zeros((3, v));
        let l = lm_loss(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut sat = Array2::zeros((2, v));
        sat[[0, 4]] = 30.0;
        sat[[1, 5]] = 30.0;
        assert!(lm_loss(&sat, &[4, 5], &[true, true]).unwrap() < 1e-8);
        assert!(lm_loss(&sat, &[4, 5], &[false, false]).is_err());
    }
}
