//! Ideal affinity maps and the affinity loss that supervises the prior map.
//!
//! For a label map downsampled to the feature resolution, the ideal affinity
//! map `A` is the `N×N` matrix with `A[i][j] = 1` when pixels `i` and `j`
//! carry the same class. The prior map `P` is trained towards `A` by a
//! per-entry binary cross-entropy (the unary term) plus, for every row, the
//! negative logs of its intra-class precision, recall and inter-class
//! specificity (the global term).
//!
//! Ignored pixels contribute no rows or columns anywhere. All sums run over
//! valid columns only, and a row's global term skips any ratio whose
//! denominator is zero.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::LabelMap;
use crate::ops::{linalg, loss};
use crate::tensor::{Real, Tensor};

/// Clamp applied to probabilities and ratios before taking logs.
pub const AFFINITY_EPS: f64 = 1e-7;

/// Nearest-neighbour downsampling anchored at the top-left pixel of each
/// stride cell: `out[i][j] = gt[i·sh][j·sw]`.
pub fn downsample_labels(gt: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 || !gt.height().is_multiple_of(out_h) || !gt.width().is_multiple_of(out_w) {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} labels to {out_h}x{out_w} with an integer stride",
            gt.height(),
            gt.width()
        )));
    }
    let (sh, sw) = (gt.height() / out_h, gt.width() / out_w);
    let labels = (0..out_h)
        .flat_map(|i| (0..out_w).map(move |j| (i, j)))
        .map(|(i, j)| gt.get(i * sh, j * sw))
        .collect();
    LabelMap::with_ignore(out_h, out_w, labels, gt.ignore_index())
}

/// Binary same-class matrix over the `N = H·W` pixels of a label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdealAffinityMap {
    n: usize,
    values: Vec<u8>,
    valid: Vec<bool>,
}

impl IdealAffinityMap {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.n, self.n],
            self.values.iter().map(|&v| T::from_u8(v).unwrap()).collect(),
        )
        .expect("n > 0")
    }

    /// Row-major 8-bit image: 255 where `A = 1`, 0 elsewhere.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v * 255).collect()
    }
}

/// `A = L̂·L̂ᵀ` for the one-hot matrix `L̂` of `gt_small` (`N×C`). Ignored
/// pixels have all-zero one-hot rows, so their rows and columns of `A` are
/// zero.
pub fn ideal_affinity_map(gt_small: &LabelMap, num_classes: usize) -> Result<IdealAffinityMap> {
    let n = gt_small.len();
    let encoded = loss::one_hot::<f32>(gt_small, num_classes)?.reshape(&[n, num_classes])?;
    let mut transposed = vec![0f32; n * num_classes];
    for i in 0..n {
        for c in 0..num_classes {
            transposed[c * n + i] = encoded.data()[i * num_classes + c];
        }
    }
    let transposed = Tensor::new(vec![num_classes, n], transposed)?;
    let product = linalg::matmul(&encoded, &transposed)?;
    Ok(IdealAffinityMap {
        n,
        values: product.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
        valid: (0..n).map(|i| !gt_small.is_ignored(i)).collect(),
    })
}

/// Square matrix of pairwise same-class probabilities, row `i` belonging to
/// the query pixel `i`. Entries produced by the prior head lie in (0, 1);
/// the loss functions accept any values and clamp where logs are taken.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Real> PriorMap<T> {
    pub fn new(n: usize, values: Vec<T>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::shape("prior map", &[n, n], &[values.len()]));
        }
        Ok(PriorMap { n, values })
    }

    pub fn filled(n: usize, value: T) -> Self {
        PriorMap::new(n, vec![value; n * n]).expect("n > 0")
    }

    /// The ideal map itself, as probabilities 0 and 1.
    pub fn from_affinity(a: &IdealAffinityMap) -> Self {
        PriorMap::new(a.n, a.values.iter().map(|&v| T::from_u8(v).unwrap()).collect())
            .expect("n > 0")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    /// Splits a `[B, N, N]` tensor into one map per batch element.
    pub fn from_batch(t: &Tensor<T>) -> Result<Vec<Self>> {
        match *t.shape() {
            [_, n, m] if n == m => Ok(t
                .data()
                .chunks(n * n)
                .map(|c| PriorMap {
                    n,
                    values: c.to_vec(),
                })
                .collect()),
            _ => Err(Error::shape("prior map batch", t.shape(), &[])),
        }
    }

    /// Row-major 8-bit image with values `round(255·p)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// `1 − P`.
    pub fn reversed(&self) -> Self {
        PriorMap {
            n: self.n,
            values: self.values.iter().map(|&p| T::one() - p).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityLossTerms<T> {
    pub unary: T,
    pub global: T,
    /// Sums over valid rows of the log precision, recall and specificity.
    pub precision_sum: T,
    pub recall_sum: T,
    pub specificity_sum: T,
    pub total: T,
    pub lambda_u: T,
    pub lambda_g: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalTerms<T> {
    pub loss: T,
    pub precision_sum: T,
    pub recall_sum: T,
    pub specificity_sum: T,
    pub rows: usize,
}

fn check_pairs<T: Real>(p: &[PriorMap<T>], a: &[IdealAffinityMap]) -> Result<()> {
    if p.len() != a.len() {
        return Err(Error::shape("affinity batch", &[p.len()], &[a.len()]));
    }
    for (pm, am) in p.iter().zip(a) {
        if pm.n != am.n {
            return Err(Error::shape("affinity map size", &[pm.n, pm.n], &[am.n, am.n]));
        }
    }
    Ok(())
}

/// Unary term pooled over a batch, and its gradient per map.
pub fn unary_loss_and_grad<T: Real>(
    p: &[PriorMap<T>],
    a: &[IdealAffinityMap],
) -> Result<(T, Vec<Vec<T>>)> {
    check_pairs(p, a)?;
    let eps = T::lit(AFFINITY_EPS);
    let hi = T::one() - eps;
    let count: usize = a.iter().map(|m| m.num_valid() * m.num_valid()).sum();
    if count == 0 {
        return Err(Error::Degenerate("no valid pixels for the affinity loss".into()));
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(p.len());
    for (pm, am) in p.iter().zip(a) {
        let n = pm.n;
        let mut g = vec![T::zero(); n * n];
        for i in (0..n).filter(|&i| am.valid[i]) {
            for j in (0..n).filter(|&j| am.valid[j]) {
                let k = i * n + j;
                let raw = pm.values[k];
                let pc = raw.max(eps).min(hi);
                let inside = raw > eps && raw < hi;
                if am.values[k] == 1 {
                    total -= pc.ln();
                    if inside {
                        g[k] = -inv / pc;
                    }
                } else {
                    total -= (T::one() - pc).ln();
                    if inside {
                        g[k] = inv / (T::one() - pc);
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok((total * inv, grads))
}

/// Global term pooled over every valid row of a batch, and its gradient.
pub fn global_loss_and_grad<T: Real>(
    p: &[PriorMap<T>],
    a: &[IdealAffinityMap],
) -> Result<(GlobalTerms<T>, Vec<Vec<T>>)> {
    check_pairs(p, a)?;
    let rows: usize = a.iter().map(IdealAffinityMap::num_valid).sum();
    if rows == 0 {
        return Err(Error::Degenerate("no valid rows for the affinity loss".into()));
    }
    let eps = T::lit(AFFINITY_EPS);
    let scale = -T::one() / T::from_usize(rows).unwrap();
    let (mut tp, mut tr, mut ts) = (T::zero(), T::zero(), T::zero());
    let mut grads = Vec::with_capacity(p.len());

    // log(num/den) clamped to [eps, 1]; None when den == 0. The flag says
    // whether the clamp is inactive, i.e. whether gradient flows.
    let log_ratio = |num: T, den: T| -> Option<(T, bool)> {
        if den == T::zero() {
            return None;
        }
        let r = num / den;
        let inside = r >= eps && r <= T::one();
        Some((r.max(eps).min(T::one()).ln(), inside))
    };

    for (pm, am) in p.iter().zip(a) {
        let n = pm.n;
        let mut g = vec![T::zero(); n * n];
        for i in (0..n).filter(|&i| am.valid[i]) {
            let row = &pm.values[i * n..(i + 1) * n];
            let arow = &am.values[i * n..(i + 1) * n];
            let (mut s_ap, mut s_p, mut s_a, mut s_n, mut s_na) =
                (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for j in (0..n).filter(|&j| am.valid[j]) {
                let pv = row[j];
                if arow[j] == 1 {
                    s_ap += pv;
                    s_a += T::one();
                } else {
                    s_n += T::one() - pv;
                    s_na += T::one();
                }
                s_p += pv;
            }
            let grow = &mut g[i * n..(i + 1) * n];
            if let Some((v, live)) = log_ratio(s_ap, s_p) {
                tp += v;
                if live {
                    for j in (0..n).filter(|&j| am.valid[j]) {
                        let a_j = T::from_u8(arow[j]).unwrap();
                        grow[j] += scale * (a_j / s_ap - T::one() / s_p);
                    }
                }
            }
            if let Some((v, live)) = log_ratio(s_ap, s_a) {
                tr += v;
                if live {
                    for j in (0..n).filter(|&j| am.valid[j] && arow[j] == 1) {
                        grow[j] += scale / s_ap;
                    }
                }
            }
            if let Some((v, live)) = log_ratio(s_n, s_na) {
                ts += v;
                if live {
                    for j in (0..n).filter(|&j| am.valid[j] && arow[j] == 0) {
                        grow[j] -= scale / s_n;
                    }
                }
            }
        }
        grads.push(g);
    }
    let terms = GlobalTerms {
        loss: scale * (tp + tr + ts),
        precision_sum: tp,
        recall_sum: tr,
        specificity_sum: ts,
        rows,
    };
    Ok((terms, grads))
}

pub fn unary_affinity_loss<T: Real>(p: &PriorMap<T>, a: &IdealAffinityMap) -> Result<T> {
    Ok(unary_loss_and_grad(std::slice::from_ref(p), std::slice::from_ref(a))?.0)
}

pub fn global_affinity_loss<T: Real>(p: &PriorMap<T>, a: &IdealAffinityMap) -> Result<GlobalTerms<T>> {
    Ok(global_loss_and_grad(std::slice::from_ref(p), std::slice::from_ref(a))?.0)
}

/// `λu·L_u + λg·L_g` over a batch, with the gradient w.r.t. every map.
pub fn affinity_loss_batch<T: Real>(
    p: &[PriorMap<T>],
    a: &[IdealAffinityMap],
    lambda_u: T,
    lambda_g: T,
) -> Result<(AffinityLossTerms<T>, Vec<Vec<T>>)> {
    let (unary, gu) = unary_loss_and_grad(p, a)?;
    let (global, gg) = global_loss_and_grad(p, a)?;
    let grads = gu
        .into_iter()
        .zip(gg)
        .map(|(u, g)| u.iter().zip(&g).map(|(&x, &y)| lambda_u * x + lambda_g * y).collect())
        .collect();
    let terms = AffinityLossTerms {
        unary,
        global: global.loss,
        precision_sum: global.precision_sum,
        recall_sum: global.recall_sum,
        specificity_sum: global.specificity_sum,
        total: lambda_u * unary + lambda_g * global.loss,
        lambda_u,
        lambda_g,
    };
    Ok((terms, grads))
}

pub fn affinity_loss<T: Real>(
    p: &PriorMap<T>,
    a: &IdealAffinityMap,
    lambda_u: T,
    lambda_g: T,
) -> Result<AffinityLossTerms<T>> {
    Ok(affinity_loss_batch(std::slice::from_ref(p), std::slice::from_ref(a), lambda_u, lambda_g)?.0)
}

/// Records the affinity loss of a `[B, N, N]` prior-map node on the graph.
pub fn affinity_loss_node<T: Real>(
    g: &mut Graph<T>,
    prior: Var,
    maps: &[IdealAffinityMap],
    lambda_u: T,
    lambda_g: T,
) -> Result<(Var, AffinityLossTerms<T>)> {
    let priors = PriorMap::from_batch(g.value(prior))?;
    let (terms, grads) = affinity_loss_batch(&priors, maps, lambda_u, lambda_g)?;
    let grad = Tensor::new(g.shape(prior).to_vec(), grads.concat())?;
    let node = g.scalar_loss(prior, terms.total, grad)?;
    Ok((node, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn two_class() -> IdealAffinityMap {
        let lm = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        ideal_affinity_map(&lm, 2).unwrap()
    }

    #[test]
    fn two_by_two_two_class_map() {
        let a = two_class();
        assert_eq!(
            a.values(),
            &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]
        );
    }

    #[test]
    fn all_distinct_is_identity() {
        let lm = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let a = ideal_affinity_map(&lm, 3).unwrap();
        assert_eq!(a.values(), &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn ignored_rows_and_columns_are_zero() {
        let lm = LabelMap::new(1, 3, vec![1, 255, 1]).unwrap();
        let a = ideal_affinity_map(&lm, 2).unwrap();
        assert_eq!(a.values(), &[1, 0, 1, 0, 0, 0, 1, 0, 1]);
        assert_eq!(a.valid_mask(), &[true, false, true]);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let lm = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            ideal_affinity_map(&lm, 3),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn downsample_constant_and_identity() {
        let lm = LabelMap::filled(4, 4, 3);
        assert_eq!(downsample_labels(&lm, 2, 2).unwrap(), LabelMap::filled(2, 2, 3));
        let lm = LabelMap::new(2, 3, vec![0, 1, 2, 255, 4, 5]).unwrap();
        assert_eq!(downsample_labels(&lm, 2, 3).unwrap(), lm);
        assert!(downsample_labels(&lm, 2, 2).is_err());
    }

    #[test]
    fn unary_analytic_values() {
        let a = two_class();
        let perfect = PriorMap::<f64>::from_affinity(&a);
        assert!(unary_affinity_loss(&perfect, &a).unwrap() <= 3e-6);
        let half = PriorMap::filled(4, 0.5f64);
        assert!((unary_affinity_loss(&half, &a).unwrap() - LN2).abs() < 1e-12);
        let wrong = PriorMap::<f64>::from_affinity(&a).reversed();
        let expect = -(1e-7f64).ln();
        assert!((unary_affinity_loss(&wrong, &a).unwrap() - expect).abs() < 1e-6);
        assert!((expect - 16.1181).abs() < 1e-4);
    }

    #[test]
    fn global_analytic_values() {
        let a = two_class();
        let perfect = PriorMap::<f64>::from_affinity(&a);
        assert!(global_affinity_loss(&perfect, &a).unwrap().loss.abs() <= 3e-6);
        let half = PriorMap::filled(4, 0.5f64);
        let g = global_affinity_loss(&half, &a).unwrap();
        assert!((g.loss - 3.0 * LN2).abs() < 1e-12);
        assert_eq!(g.rows, 4);
    }

    #[test]
    fn combined_loss_and_weights() {
        let a = two_class();
        let half = PriorMap::filled(4, 0.5f64);
        let t = affinity_loss(&half, &a, 1.0, 1.0).unwrap();
        assert!((t.total - 4.0 * LN2).abs() < 1e-12);
        let t2 = affinity_loss(&half, &a, 2.0, 0.0).unwrap();
        assert_eq!(t2.total, 2.0 * t2.unary);
        let perfect = PriorMap::<f64>::from_affinity(&a);
        assert!(affinity_loss(&perfect, &a, 1.0, 1.0).unwrap().total <= 6e-6);
    }

    #[test]
    fn single_class_skips_specificity() {
        let lm = LabelMap::filled(2, 2, 1);
        let a = ideal_affinity_map(&lm, 2).unwrap();
        assert!(a.values().iter().all(|&v| v == 1));
        let half = PriorMap::filled(4, 0.5f64);
        let g = global_affinity_loss(&half, &a).unwrap();
        assert_eq!(g.specificity_sum, 0.0);
        // precision is 1 for every row, recall 0.5
        assert!((g.loss - LN2).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_and_empty() {
        let a = two_class();
        let p = PriorMap::filled(3, 0.5f64);
        assert!(matches!(unary_affinity_loss(&p, &a), Err(Error::Shape { .. })));
        let lm = LabelMap::filled(1, 2, 255);
        let empty = ideal_affinity_map(&lm, 2).unwrap();
        let p = PriorMap::filled(2, 0.5f64);
        assert!(matches!(global_affinity_loss(&p, &empty), Err(Error::Degenerate(_))));
    }
}
