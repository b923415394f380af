//! Cosine prototype classifier with temperature scaling. Prototype rows
//! are stored unnormalized; cosine normalizes at prediction time, which
//! keeps incremental averaging simple.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapter::parse_class_ids;
use crate::data::write_tensor;
use crate::error::{KanetError, Result};
use crate::tensor::{softmax_row_inplace, Scalar, Tensor, COSINE_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights<T> {
    rows: Tensor<T>,
    class_ids: Vec<u32>,
}

impl<T: Scalar> ClassifierWeights<T> {
    pub fn empty(dim: usize) -> Self {
        ClassifierWeights { rows: Tensor::zeros(vec![0, dim]), class_ids: Vec::new() }
    }

    pub fn from_rows(rows: Tensor<T>, class_ids: Vec<u32>) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[0] != class_ids.len() {
            return Err(KanetError::shape(
                "classifier",
                format!("{:?} rows for {} ids", rows.shape(), class_ids.len()),
            ));
        }
        Ok(ClassifierWeights { rows, class_ids })
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    /// Rows for the given ids, keeping this classifier's row order.
    pub fn select(&self, ids: &[u32]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut class_ids = Vec::new();
        for (row, &id) in self.class_ids.iter().enumerate() {
            if ids.contains(&id) {
                data.extend_from_slice(self.rows.row(row));
                class_ids.push(id);
            }
        }
        if class_ids.len() != ids.len() {
            return Err(KanetError::Argument(format!(
                "{} of {} requested classes present in classifier",
                class_ids.len(),
                ids.len()
            )));
        }
        ClassifierWeights::from_rows(Tensor::new(vec![class_ids.len(), dim], data)?, class_ids)
    }

    pub fn save(&self, tensor_path: &Path, ids_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &self.rows)?;
        fs::write(tensor_path, buf)?;
        let ids: String = self.class_ids.iter().map(|id| format!("{id}\n")).collect();
        fs::write(ids_path, ids)?;
        Ok(())
    }

    pub fn load(tensor_path: &Path, ids_path: &Path) -> Result<Self> {
        let rows = crate::data::load_tensor::<T>(tensor_path)?;
        let class_ids = parse_class_ids(&fs::read_to_string(ids_path)?)?;
        ClassifierWeights::from_rows(rows, class_ids)
    }
}

/// Per-class mean rows in ascending class-id order.
pub fn prototypes<T: Scalar>(features: &Tensor<T>, labels: &[u32]) -> Result<ClassifierWeights<T>> {
    let (n, d) = features.as_matrix()?;
    if labels.len() != n {
        return Err(KanetError::shape(
            "prototypes",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    if n == 0 {
        return Err(KanetError::Argument("prototypes of an empty feature set".into()));
    }
    let mut sums: BTreeMap<u32, (Vec<T>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let entry = sums.entry(label).or_insert_with(|| (vec![T::zero(); d], 0));
        for (a, &v) in entry.0.iter_mut().zip(features.row(i)) {
            *a += v;
        }
        entry.1 += 1;
    }
    let mut data = Vec::with_capacity(sums.len() * d);
    let mut class_ids = Vec::with_capacity(sums.len());
    for (class, (sum, count)) in sums {
        let inv = T::one() / T::from_f64(count as f64);
        data.extend(sum.into_iter().map(|v| v * inv));
        class_ids.push(class);
    }
    ClassifierWeights::from_rows(Tensor::new(vec![class_ids.len(), d], data)?, class_ids)
}

/// Temperature-scaled cosine prediction: softmax(alpha * <f, row>) over
/// seen classes, aligned with `weights.class_ids()`.
pub fn predict<T: Scalar>(
    feature: &Tensor<T>,
    weights: &ClassifierWeights<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    if alpha <= T::zero() {
        return Err(KanetError::Argument("alpha must be positive".into()));
    }
    if weights.is_empty() {
        return Err(KanetError::Argument("predict with no classifier rows".into()));
    }
    let d = weights.dim();
    if feature.numel() != d {
        return Err(KanetError::shape(
            "predict",
            format!("feature dim {} vs classifier dim {d}", feature.numel()),
        ));
    }
    let eps = T::from_f64(COSINE_EPS);
    let f = feature.data();
    let nf = f.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
    let mut logits: Vec<T> = (0..weights.len())
        .map(|r| {
            let row = weights.rows.row(r);
            let nr = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            let dot = f.iter().zip(row).fold(T::zero(), |s, (&a, &b)| s + a * b);
            alpha * dot / (nf * nr).max(eps)
        })
        .collect();
    softmax_row_inplace(&mut logits);
    Ok(Tensor::from_vec(logits))
}

/// Concatenates old and new rows; old rows stay bitwise identical and
/// class-id sets must be disjoint.
pub fn extend<T: Scalar>(
    old: &ClassifierWeights<T>,
    new: &ClassifierWeights<T>,
) -> Result<ClassifierWeights<T>> {
    if old.is_empty() {
        return Ok(new.clone());
    }
    if new.is_empty() {
        return Ok(old.clone());
    }
    if old.dim() != new.dim() {
        return Err(KanetError::shape("extend", "dim mismatch".to_string()));
    }
    if let Some(&dup) = old.class_ids.iter().find(|id| new.class_ids.contains(id)) {
        return Err(KanetError::DuplicateClass(dup));
    }
    let mut data = old.rows.data().to_vec();
    data.extend_from_slice(new.rows.data());
    let mut class_ids = old.class_ids.clone();
    class_ids.extend_from_slice(&new.class_ids);
    ClassifierWeights::from_rows(Tensor::new(vec![class_ids.len(), old.dim()], data)?, class_ids)
}

/// Index of the most probable class; exact ties resolve to the lowest
/// class id for reproducible metrics.
pub fn argmax_class<T: Scalar>(probs: &Tensor<T>, class_ids: &[u32]) -> Result<u32> {
    if probs.numel() != class_ids.len() || class_ids.is_empty() {
        return Err(KanetError::shape(
            "argmax_class",
            format!("{} probabilities for {} ids", probs.numel(), class_ids.len()),
        ));
    }
    let mut best = (class_ids[0], probs.data()[0]);
    for (&p, &id) in probs.data().iter().zip(class_ids).skip(1) {
        if p > best.1 || (p == best.1 && id < best.0) {
            best = (id, p);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn prototypes_single_feature_per_class_copies_rows() {
        let feats = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = prototypes(&feats, &[5, 2]).unwrap();
        assert_eq!(w.class_ids(), &[2, 5]);
        assert_eq!(w.rows().row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(w.rows().row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn prototypes_opposite_features_cancel() {
        let feats = Tensor::<f64>::new(vec![2, 2], vec![0.4, -0.9, -0.4, 0.9]).unwrap();
        let w = prototypes(&feats, &[0, 0]).unwrap();
        assert_eq!(w.rows().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn prototypes_match_averaging_oracle() {
        let mut r = rng(4);
        let k = 5;
        let classes = 3usize;
        let d = 6;
        let feats = Tensor::<f64>::randn(vec![classes * k, d], 1.0, &mut r);
        let labels: Vec<u32> = (0..classes * k).map(|i| (i / k) as u32).collect();
        let w = prototypes(&feats, &labels).unwrap();
        for c in 0..classes {
            for j in 0..d {
                let want: f64 =
                    (0..k).map(|s| feats.row(c * k + s)[j]).sum::<f64>() / k as f64;
                assert!((w.rows().row(c)[j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predict_prefers_matching_prototype() {
        // Feature equals prototype 1; the others are orthogonal.
        let rows = Tensor::<f64>::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let w = ClassifierWeights::from_rows(rows, vec![10, 11, 12]).unwrap();
        let f = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        let p = predict(&f, &w, 16.0).unwrap();
        assert_eq!(argmax_class(&p, w.class_ids()).unwrap(), 11);

        // Hand evaluation: cosines are (0, 1, 0), so softmax([0, 16, 0]).
        let e16 = 16.0f64.exp();
        let denom = e16 + 2.0;
        assert!((p.data()[1] - e16 / denom).abs() < 1e-9);
        assert!((p.data()[0] - 1.0 / denom).abs() < 1e-9);
    }

    #[test]
    fn predict_is_scale_invariant_in_the_query() {
        let mut r = rng(8);
        let rows = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut r);
        let w = ClassifierWeights::from_rows(rows, vec![0, 1, 2, 3]).unwrap();
        let f = Tensor::<f64>::randn(vec![5], 1.0, &mut r);
        let scaled = Tensor::from_vec(f.data().iter().map(|v| v * 37.5).collect());
        let a = predict(&f, &w, 16.0).unwrap();
        let b = predict(&scaled, &w, 16.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn extend_preserves_old_rows_and_checks_ids() {
        let mut r = rng(9);
        let old = ClassifierWeights::from_rows(
            Tensor::<f64>::randn(vec![60, 4], 1.0, &mut r),
            (0..60).collect(),
        )
        .unwrap();
        let new = ClassifierWeights::from_rows(
            Tensor::<f64>::randn(vec![5, 4], 1.0, &mut r),
            (60..65).collect(),
        )
        .unwrap();

        let merged = extend(&old, &new).unwrap();
        assert_eq!(merged.len(), 65);
        let old_bytes = old.rows().to_le_bytes();
        assert_eq!(&merged.rows().to_le_bytes()[..old_bytes.len()], &old_bytes[..]);

        let same = extend(&old, &ClassifierWeights::empty(4)).unwrap();
        assert_eq!(same, old);

        assert!(matches!(extend(&old, &old), Err(KanetError::DuplicateClass(0))));
    }

    #[test]
    fn extended_argmax_agrees_with_direct_union() {
        let mut r = rng(10);
        let a = ClassifierWeights::from_rows(Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r), vec![0, 1, 2]).unwrap();
        let b = ClassifierWeights::from_rows(Tensor::<f64>::randn(vec![2, 4], 1.0, &mut r), vec![3, 4]).unwrap();
        let merged = extend(&a, &b).unwrap();
        for trial in 0..20 {
            let f = Tensor::<f64>::randn(vec![4], 1.0, &mut rng(100 + trial));
            let via_extend = argmax_class(&predict(&f, &merged, 16.0).unwrap(), merged.class_ids()).unwrap();

            // Direct union: score every row independently.
            let mut best = (u32::MAX, f64::NEG_INFINITY);
            for w in [&a, &b] {
                for row in 0..w.len() {
                    let rdata = w.rows().row(row);
                    let dot: f64 = f.data().iter().zip(rdata).map(|(x, y)| x * y).sum();
                    let nf: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nr: f64 = rdata.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = dot / (nf * nr).max(1e-12);
                    if cos > best.1 {
                        best = (w.class_ids()[row], cos);
                    }
                }
            }
            assert_eq!(via_extend, best.0);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        let p = Tensor::<f64>::from_vec(vec![0.4, 0.1, 0.4, 0.1]);
        // Rows listed for ids 7 and 3 in an unsorted order.
        assert_eq!(argmax_class(&p, &[7, 1, 3, 2]).unwrap(), 3);

        let distinct = Tensor::<f64>::from_vec(vec![0.1, 0.8, 0.1]);
        assert_eq!(argmax_class(&distinct, &[5, 6, 7]).unwrap(), 6);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let mut r = rng(12);
        for _ in 0..50 {
            let p = Tensor::<f64>::randn(vec![6], 1.0, &mut r);
            let ids: Vec<u32> = (0..6).collect();
            let got = argmax_class(&p, &ids).unwrap();
            let mut want = 0usize;
            for i in 1..6 {
                if p.data()[i] > p.data()[want] {
                    want = i;
                }
            }
            assert_eq!(got, ids[want]);
        }
    }

    proptest! {
        #[test]
        fn sharper_alpha_never_lowers_the_top_probability(
            seed in 0u64..100,
            alpha_low in 1.0f64..8.0,
            bump in 0.1f64..8.0,
        ) {
            let mut r = rng(seed);
            let rows = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut r);
            let w = ClassifierWeights::from_rows(rows, (0..5).collect()).unwrap();
            let f = Tensor::<f64>::randn(vec![4], 1.0, &mut r);
            let low = predict(&f, &w, alpha_low).unwrap();
            let high = predict(&f, &w, alpha_low + bump).unwrap();
            let max_low = low.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_high = high.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(max_high >= max_low - 1e-12);
        }

        #[test]
        fn prototype_row_scaling_preserves_predictions(
            seed in 0u64..100,
            scale in 0.05f64..20.0,
        ) {
            let mut r = rng(seed);
            let rows = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut r);
            let mut scaled_data = rows.data().to_vec();
            for v in scaled_data[5..10].iter_mut() {
                *v *= scale; // rescale one prototype row
            }
            let w = ClassifierWeights::from_rows(rows, (0..4).collect()).unwrap();
            let ws = ClassifierWeights::from_rows(
                Tensor::new(vec![4, 5], scaled_data).unwrap(),
                (0..4).collect(),
            ).unwrap();
            let f = Tensor::<f64>::randn(vec![5], 1.0, &mut r);
            let a = predict(&f, &w, 16.0).unwrap();
            let b = predict(&f, &ws, 16.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
