//! Class-aware frequency-domain feature selection.
//!
//! Each class accumulates a signature (the sum of its samples' low-frequency
//! subbands). When a new task starts, cosine similarity between new and old
//! signatures picks the most similar (`y_plus`) and least similar
//! (`y_minus`) earlier class per new class, and the frequency-dropout
//! keep-probabilities blend "avoid y_minus's features" against "reuse
//! y_plus's features". Later epochs switch to semantic dropout, which
//! reinforces the features a class has already been selecting. On top of the
//! sampled dropout mask, only the top fraction of surviving features by
//! magnitude is kept for classification, and every selection is tallied in a
//! per-class counter that drives both schedules.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::dwt::SubbandSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Alpha ratios are clamped here; near-zero or negative cosines would
/// otherwise produce unusable dropout strengths.
pub const ALPHA_CLAMP: (f64, f64) = (1e-3, 1e3);

/// Binary feature mask, one flag per backbone output feature.
pub type Mask = Vec<bool>;

pub fn mask_popcount(mask: &Mask) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Hex encoding of the mask bits (bit j of the mask is bit j % 8 of byte
/// j / 8); doubles as the audit digest in step logs.
pub fn mask_to_hex(mask: &Mask) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (j, &b) in mask.iter().enumerate() {
        if b {
            bytes[j / 8] |= 1 << (j % 8);
        }
    }
    crate::ffe::hex_string(&bytes)
}

pub fn mask_from_hex(hex: &str, len: usize) -> Result<Mask> {
    if hex.len() != len.div_ceil(8) * 2 {
        return Err(Error::Format(format!(
            "mask hex length {} does not match {len} features",
            hex.len()
        )));
    }
    let mut bytes = Vec::with_capacity(hex.len() / 2);
    for i in (0..hex.len()).step_by(2) {
        bytes.push(
            u8::from_str_radix(&hex[i..i + 2], 16)
                .map_err(|e| Error::Format(format!("bad mask hex: {e}")))?,
        );
    }
    Ok((0..len).map(|j| bytes[j / 8] & (1 << (j % 8)) != 0).collect())
}

/// Running sum of a class's flattened low-frequency subbands.
#[derive(Debug, Clone)]
pub struct ClassSignature<F: Scalar> {
    pub class_id: usize,
    pub sum_ll: Array1<F>,
    pub sample_count: u64,
}

impl<F: Scalar> ClassSignature<F> {
    pub fn empty(class_id: usize, dim: usize) -> Self {
        Self {
            class_id,
            sum_ll: Array1::zeros(dim),
            sample_count: 0,
        }
    }
}

/// Flatten the ll planes of per-channel subbands, channel order preserved;
/// the signature space for similarity.
pub fn flatten_ll<F: Scalar>(subbands: &[SubbandSet<F>]) -> Array1<F> {
    let per = subbands[0].ll.len();
    let mut out = Array1::zeros(per * subbands.len());
    for (c, set) in subbands.iter().enumerate() {
        for (i, v) in set.ll.iter().enumerate() {
            out[c * per + i] = *v;
        }
    }
    out
}

/// Add one sample's ll vector to the class signature.
pub fn update_signature<F: Scalar>(
    sig: &mut ClassSignature<F>,
    ll_flat: ArrayView1<F>,
) -> Result<()> {
    if ll_flat.len() != sig.sum_ll.len() {
        return Err(Error::ShapeMismatch {
            context: "class signature update",
            expected: format!("{}", sig.sum_ll.len()),
            got: format!("{}", ll_flat.len()),
        });
    }
    sig.sum_ll += &ll_flat;
    sig.sample_count += 1;
    Ok(())
}

/// Plain cosine similarity; errors on a zero-norm vector so the caller can
/// fall back explicitly.
pub fn cosine_similarity<F: Scalar>(f_i: ArrayView1<F>, f_j: ArrayView1<F>) -> Result<F> {
    if f_i.len() != f_j.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine similarity",
            expected: format!("{}", f_i.len()),
            got: format!("{}", f_j.len()),
        });
    }
    let dot = f_i.dot(&f_j);
    let ni = f_i.dot(&f_i).sqrt();
    let nj = f_j.dot(&f_j).sqrt();
    if ni == F::zero() || nj == F::zero() {
        return Err(Error::DegenerateSignature);
    }
    let raw = dot / (ni * nj);
    // Rounding can push |s| marginally above 1.
    Ok(raw.max(-F::one()).min(F::one()))
}

/// Per current class: similarities to all previous classes plus the derived
/// anchors and strengths used by frequency dropout.
#[derive(Debug, Clone)]
pub struct SimilarityRow<F: Scalar> {
    pub class_id: usize,
    /// (previous class id, similarity), ascending class id.
    pub similarities: Vec<(usize, F)>,
    pub y_plus: usize,
    pub y_minus: usize,
    pub s_bar: F,
    pub alpha_plus: F,
    pub alpha_minus: F,
}

#[derive(Debug, Clone)]
pub struct SimilarityTable<F: Scalar> {
    pub rows: Vec<SimilarityRow<F>>,
}

impl<F: Scalar> SimilarityTable<F> {
    pub fn row(&self, class_id: usize) -> Option<&SimilarityRow<F>> {
        self.rows.iter().find(|r| r.class_id == class_id)
    }
}

fn clamp_alpha<F: Scalar>(ratio: F) -> F {
    let ratio = if ratio.is_finite() { ratio } else { F::one() };
    ratio.max(F::real(ALPHA_CLAMP.0)).min(F::real(ALPHA_CLAMP.1))
}

/// Build the similarity table for the classes of a new task against all
/// previously seen classes. Ties select the lowest class id; a degenerate
/// (zero-norm) signature contributes similarity 0.
pub fn build_similarity<F: Scalar>(
    current: &[&ClassSignature<F>],
    previous: &[&ClassSignature<F>],
) -> Result<SimilarityTable<F>> {
    if previous.is_empty() {
        return Err(Error::Precondition(
            "similarity table needs at least one previously seen class".into(),
        ));
    }
    let mut prev_sorted: Vec<&ClassSignature<F>> = previous.to_vec();
    prev_sorted.sort_by_key(|s| s.class_id);

    let mut rows = Vec::with_capacity(current.len());
    for sig in current {
        let mut similarities = Vec::with_capacity(prev_sorted.len());
        for prev in &prev_sorted {
            let s = match cosine_similarity(sig.sum_ll.view(), prev.sum_ll.view()) {
                Ok(s) => s,
                Err(Error::DegenerateSignature) => F::zero(),
                Err(e) => return Err(e),
            };
            similarities.push((prev.class_id, s));
        }
        let (mut y_plus, mut best) = (similarities[0].0, similarities[0].1);
        let (mut y_minus, mut worst) = (similarities[0].0, similarities[0].1);
        for &(id, s) in &similarities[1..] {
            if s > best {
                best = s;
                y_plus = id;
            }
            if s < worst {
                worst = s;
                y_minus = id;
            }
        }
        let s_bar =
            similarities.iter().map(|&(_, s)| s).sum::<F>() / F::from_count(similarities.len());
        let alpha_minus = clamp_alpha(s_bar / worst);
        let alpha_plus = clamp_alpha(best / s_bar);
        rows.push(SimilarityRow {
            class_id: sig.class_id,
            similarities,
            y_plus,
            y_minus,
            s_bar,
            alpha_plus,
            alpha_minus,
        });
    }
    Ok(SimilarityTable { rows })
}

/// Per-class, per-feature selection tally.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCounter {
    counts: Vec<Vec<u64>>,
    n_features: usize,
}

impl SelectionCounter {
    pub fn new(n_classes: usize, n_features: usize) -> Self {
        Self {
            counts: vec![vec![0; n_features]; n_classes],
            n_features,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, class_id: usize) -> Result<&[u64]> {
        self.counts
            .get(class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Precondition(format!("unknown class id {class_id}")))
    }

    pub fn row_max(&self, class_id: usize) -> Result<u64> {
        Ok(*self.row(class_id)?.iter().max().unwrap_or(&0))
    }

    /// Tally one selection mask for a class.
    pub fn update(&mut self, class_id: usize, mask: &Mask) -> Result<()> {
        if mask.len() != self.n_features {
            return Err(Error::ShapeMismatch {
                context: "counter update",
                expected: format!("{}", self.n_features),
                got: format!("{}", mask.len()),
            });
        }
        let row = self
            .counts
            .get_mut(class_id)
            .ok_or_else(|| Error::Precondition(format!("unknown class id {class_id}")))?;
        for (c, &m) in row.iter_mut().zip(mask.iter()) {
            *c += m as u64;
        }
        Ok(())
    }

    /// CSV export: `class,feature_index,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema: clfd.counter.v1")?;
        writeln!(w, "class,feature_index,count")?;
        for (c, row) in self.counts.iter().enumerate() {
            for (j, count) in row.iter().enumerate() {
                writeln!(w, "{c},{j},{count}")?;
            }
        }
        Ok(())
    }
}

fn normalized_ratio<F: Scalar>(count: u64, row_max: u64) -> F {
    // Zero row max: normalizer treated as 1, ratios collapse to 0 and the
    // formulas reproduce their all-ones initialization semantics.
    if row_max == 0 {
        F::zero()
    } else {
        F::real(count as f64 / row_max as f64)
    }
}

/// Frequency-dropout keep-probabilities for one class (one value per
/// feature): `lambda * exp(-n_minus * a_minus) + (1 - lambda) * (1 -
/// exp(-n_plus * a_plus))` where `n_*` are the counter rows of the
/// least/most similar earlier classes normalized by their row maxima.
pub fn frequency_keep_probs<F: Scalar>(
    counter: &SelectionCounter,
    row: &SimilarityRow<F>,
    lambda: F,
) -> Result<Array1<F>> {
    if lambda < F::zero() || lambda > F::one() {
        return Err(Error::Precondition(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let minus_row = counter.row(row.y_minus)?;
    let plus_row = counter.row(row.y_plus)?;
    let minus_max = counter.row_max(row.y_minus)?;
    let plus_max = counter.row_max(row.y_plus)?;

    let one = F::one();
    let mut out = Array1::zeros(counter.n_features());
    for j in 0..counter.n_features() {
        let x_minus: F = normalized_ratio(minus_row[j], minus_max);
        let x_plus: F = normalized_ratio(plus_row[j], plus_max);
        let keep = lambda * (-x_minus * row.alpha_minus).exp()
            + (one - lambda) * (one - (-x_plus * row.alpha_plus).exp());
        out[j] = keep;
    }
    Ok(out)
}

/// Semantic-dropout keep-probabilities: `1 - exp(-n_c * beta)` with `n_c`
/// the class's own normalized counter row.
pub fn semantic_keep_probs<F: Scalar>(
    counter: &SelectionCounter,
    class_id: usize,
    beta: F,
) -> Result<Array1<F>> {
    if beta <= F::zero() {
        return Err(Error::Precondition(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let row = counter.row(class_id)?;
    let row_max = counter.row_max(class_id)?;
    let one = F::one();
    let mut out = Array1::zeros(counter.n_features());
    for j in 0..counter.n_features() {
        let x: F = normalized_ratio(row[j], row_max);
        out[j] = one - (-x * beta).exp();
    }
    Ok(out)
}

/// Bernoulli keep-mask: feature j survives with probability `keep_probs[j]`.
pub fn sample_mask<F: Scalar, R: Rng>(keep_probs: ArrayView1<F>, rng: &mut R) -> Mask {
    keep_probs
        .iter()
        .map(|&p| rng.random::<f64>() < p.as_f64())
        .collect()
}

/// Among surviving features, keep the `floor(fraction * N)` with the largest
/// magnitudes (ties resolved toward the lowest index). `k` is computed from
/// the full feature count, so if dropout left fewer survivors they are all
/// kept.
pub fn topk_select<F: Scalar>(features: ArrayView1<F>, surviving: &Mask, fraction: f64) -> Mask {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "selection fraction must be in (0, 1]"
    );
    let n = features.len();
    debug_assert_eq!(surviving.len(), n);
    let k = (fraction * n as f64).floor() as usize;

    let mut candidates: Vec<usize> = (0..n).filter(|&j| surviving[j]).collect();
    if candidates.len() > k {
        candidates.sort_by(|&a, &b| {
            features[b]
                .abs()
                .partial_cmp(&features[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        candidates.truncate(k);
    }
    let mut mask = vec![false; n];
    for j in candidates {
        mask[j] = true;
    }
    mask
}

/// Both keep-probability matrices plus the schedule parameters. Rows start
/// at all-ones and are rewritten as tasks and epochs progress.
#[derive(Debug, Clone)]
pub struct DropoutSchedule<F: Scalar> {
    pub p_f: Array2<F>,
    pub p_s: Array2<F>,
    pub lambda: F,
    pub beta: F,
    /// Frequency-regime epoch count for the task in progress.
    pub epochs_freq: usize,
}

impl<F: Scalar> DropoutSchedule<F> {
    pub fn new(n_classes: usize, n_features: usize, lambda: F, beta: F) -> Result<Self> {
        if lambda < F::zero() || lambda > F::one() {
            return Err(Error::Precondition(format!(
                "lambda must be in [0, 1], got {lambda}"
            )));
        }
        if beta <= F::zero() {
            return Err(Error::Precondition(format!(
                "beta must be positive, got {beta}"
            )));
        }
        Ok(Self {
            p_f: Array2::ones((n_classes, n_features)),
            p_s: Array2::ones((n_classes, n_features)),
            lambda,
            beta,
            epochs_freq: 0,
        })
    }

    pub fn freq_row(&self, class_id: usize) -> ArrayView1<'_, F> {
        self.p_f.row(class_id)
    }

    pub fn sem_row(&self, class_id: usize) -> ArrayView1<'_, F> {
        self.p_s.row(class_id)
    }

    /// Rebuild frequency rows for the given table's classes.
    pub fn update_freq(
        &mut self,
        counter: &SelectionCounter,
        table: &SimilarityTable<F>,
    ) -> Result<()> {
        for row in &table.rows {
            let probs = frequency_keep_probs(counter, row, self.lambda)?;
            self.p_f.row_mut(row.class_id).assign(&probs);
        }
        Ok(())
    }

    /// Rebuild semantic rows for all the given classes.
    pub fn update_sem(&mut self, counter: &SelectionCounter, classes: &[usize]) -> Result<()> {
        for &c in classes {
            let probs = semantic_keep_probs(counter, c, self.beta)?;
            self.p_s.row_mut(c).assign(&probs);
        }
        Ok(())
    }

    /// CSV export: `class,feature_index,p_f,p_s`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema: clfd.schedule.v1")?;
        writeln!(w, "class,feature_index,p_f,p_s")?;
        for c in 0..self.p_f.nrows() {
            for j in 0..self.p_f.ncols() {
                writeln!(
                    w,
                    "{c},{j},{},{}",
                    self.p_f[[c, j]].as_f64(),
                    self.p_s[[c, j]].as_f64()
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sig(id: usize, values: &[f64]) -> ClassSignature<f64> {
        ClassSignature {
            class_id: id,
            sum_ll: arr1(values),
            sample_count: 1,
        }
    }

    #[test]
    fn signature_updates_accumulate() {
        let mut s = ClassSignature::<f64>::empty(0, 12);
        update_signature(&mut s, Array1::ones(12).view()).unwrap();
        assert_eq!(s.sample_count, 1);
        assert_eq!(s.sum_ll, Array1::ones(12));

        let v = Array1::from_elem(12, -1.0);
        update_signature(&mut s, v.view()).unwrap();
        assert_eq!(s.sample_count, 2);
        assert!(s.sum_ll.iter().all(|&x| x == 0.0));

        let mut s = ClassSignature::<f64>::empty(1, 12);
        for _ in 0..100 {
            update_signature(&mut s, Array1::ones(12).view()).unwrap();
        }
        assert_eq!(s.sum_ll, Array1::from_elem(12, 100.0));
        assert!(update_signature(&mut s, Array1::ones(5).view()).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = arr1(&[1.0f64, 0.0]);
        let b = arr1(&[0.0f64, 1.0]);
        assert_eq!(cosine_similarity(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(cosine_similarity(a.view(), b.view()).unwrap(), 0.0);
        let c = arr1(&[3.0f64, 4.0]);
        let d = arr1(&[4.0, 3.0]);
        let s = cosine_similarity(c.view(), d.view()).unwrap();
        assert!((s - 0.96).abs() < 1e-12);
        // Scale invariance: direction only.
        let scaled = &c * 17.5;
        assert!((cosine_similarity(c.view(), scaled.view()).unwrap() - 1.0).abs() < 1e-12);
        let zero = Array1::<f64>::zeros(2);
        assert!(matches!(
            cosine_similarity(a.view(), zero.view()),
            Err(Error::DegenerateSignature)
        ));
    }

    #[test]
    fn similarity_single_previous_class_forces_unit_alphas() {
        let current = sig(2, &[1.0, 2.0]);
        let prev = sig(0, &[2.0, 1.0]);
        let table = build_similarity(&[&current], &[&prev]).unwrap();
        let row = table.row(2).unwrap();
        assert_eq!(row.y_plus, 0);
        assert_eq!(row.y_minus, 0);
        assert!((row.alpha_plus - 1.0).abs() < 1e-12);
        assert!((row.alpha_minus - 1.0).abs() < 1e-12);
        assert!((row.s_bar - row.similarities[0].1).abs() < 1e-12);
    }

    #[test]
    fn similarity_row_hand_values() {
        // Unit vectors placed so the similarities to the two previous
        // classes are exactly 0.9 and 0.3.
        let c_angle = 0.9f64.acos();
        let current = sig(4, &[c_angle.cos(), c_angle.sin()]);
        let p0 = sig(0, &[1.0, 0.0]);
        let p1_angle = c_angle + 0.3f64.acos();
        let p1 = sig(1, &[p1_angle.cos(), p1_angle.sin()]);
        let table = build_similarity(&[&current], &[&p0, &p1]).unwrap();
        let row = table.row(4).unwrap();
        let s0 = row.similarities[0].1;
        let s1 = row.similarities[1].1;
        assert!((s0 - 0.9).abs() < 1e-9, "s0 {s0}");
        assert!((s1 - 0.3).abs() < 1e-9, "s1 {s1}");
        assert_eq!(row.y_plus, 0);
        assert_eq!(row.y_minus, 1);
        assert!((row.s_bar - 0.6).abs() < 1e-9);
        assert!((row.alpha_minus - 2.0).abs() < 1e-8);
        assert!((row.alpha_plus - 1.5).abs() < 1e-8);
    }

    #[test]
    fn similarity_ties_pick_lowest_id() {
        let current = sig(9, &[1.0, 1.0]);
        let p0 = sig(3, &[2.0, 2.0]);
        let p1 = sig(5, &[4.0, 4.0]);
        let table = build_similarity(&[&current], &[&p1, &p0]).unwrap();
        let row = table.row(9).unwrap();
        // All similarities equal 1; tie-break selects the lowest id.
        assert_eq!(row.y_plus, 3);
        assert_eq!(row.y_minus, 3);
    }

    #[test]
    fn similarity_requires_previous_classes() {
        let current = sig(0, &[1.0, 0.0]);
        assert!(build_similarity(&[&current], &[]).is_err());
    }

    fn table_with(
        alpha_plus: f64,
        alpha_minus: f64,
        y_plus: usize,
        y_minus: usize,
    ) -> SimilarityRow<f64> {
        SimilarityRow {
            class_id: 2,
            similarities: vec![],
            y_plus,
            y_minus,
            s_bar: 0.5,
            alpha_plus,
            alpha_minus,
        }
    }

    #[test]
    fn frequency_probs_hand_values() {
        // Class 0 = y_minus row, class 1 = y_plus row; three features probe
        // count-at-max, count-zero and mixed cases.
        let mut counter = SelectionCounter::new(2, 3);
        counter.update(0, &vec![true, false, false]).unwrap(); // y- counts [1,0,0]
        counter.update(1, &vec![true, false, true]).unwrap(); // y+ counts [1,0,1]
        let row = table_with(1.0, 1.0, 1, 0);
        let probs = frequency_keep_probs(&counter, &row, 0.5).unwrap();

        // j=0: both at row max -> 0.5 exactly.
        assert!((probs[0] - 0.5).abs() < 1e-12);
        // j=1: both zero -> lambda = 0.5.
        assert!((probs[1] - 0.5).abs() < 1e-12);
        // j=2: y- zero, y+ at max -> 0.5 + 0.5 (1 - e^-1).
        let expected = 0.5 + 0.5 * (1.0 - (-1.0f64).exp());
        assert!((probs[2] - expected).abs() < 1e-12);
        assert!((expected - 0.8161).abs() < 1e-4);
    }

    #[test]
    fn frequency_probs_zero_rows_collapse_to_lambda() {
        let counter = SelectionCounter::new(2, 4);
        let row = table_with(2.0, 3.0, 1, 0);
        let probs = frequency_keep_probs(&counter, &row, 0.25).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn frequency_probs_reject_bad_lambda() {
        let counter = SelectionCounter::new(2, 4);
        let row = table_with(1.0, 1.0, 1, 0);
        assert!(frequency_keep_probs(&counter, &row, 1.5).is_err());
        assert!(frequency_keep_probs(&counter, &row, -0.1).is_err());
    }

    #[test]
    fn semantic_probs_hand_values() {
        let mut counter = SelectionCounter::new(1, 3);
        // counts [2, 0, 1]; row max 2.
        counter.update(0, &vec![true, false, true]).unwrap();
        counter.update(0, &vec![true, false, false]).unwrap();
        let probs = semantic_keep_probs(&counter, 0, 2.0).unwrap();
        assert_eq!(probs[1], 0.0);
        assert!((probs[0] - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!((probs[0] - 0.8647).abs() < 1e-4);
        assert!((probs[2] - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((probs[2] - 0.6321).abs() < 1e-4);
        assert!(semantic_keep_probs(&counter, 0, 0.0).is_err());
    }

    #[test]
    fn mask_sampling_degenerate_and_rate() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let ones = Array1::<f64>::ones(64);
        assert!(sample_mask(ones.view(), &mut rng).iter().all(|&b| b));
        let zeros = Array1::<f64>::zeros(64);
        assert!(sample_mask(zeros.view(), &mut rng).iter().all(|&b| !b));

        let half = Array1::<f64>::from_elem(100_000, 0.5);
        let mask = sample_mask(half.view(), &mut rng);
        let rate = mask_popcount(&mask) as f64 / mask.len() as f64;
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn mask_sampling_deterministic_under_seed() {
        let probs = Array1::<f64>::from_elem(256, 0.3);
        let a = sample_mask(probs.view(), &mut ChaCha12Rng::seed_from_u64(9));
        let b = sample_mask(probs.view(), &mut ChaCha12Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn topk_hand_cases() {
        let values = arr1(&[0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let all = vec![true; 10];
        let mask = topk_select(values.view(), &all, 0.6);
        let selected: Vec<usize> = (0..10).filter(|&j| mask[j]).collect();
        assert_eq!(selected, vec![4, 5, 6, 7, 8, 9]);

        let values512 = Array1::<f64>::from_shape_fn(512, |j| j as f64);
        let mask = topk_select(values512.view(), &vec![true; 512], 0.6);
        assert_eq!(mask_popcount(&mask), 307);

        // Fewer survivors than k: all survivors returned.
        let mut surviving = vec![false; 10];
        surviving[1] = true;
        surviving[4] = true;
        surviving[7] = true;
        let mask = topk_select(values.view(), &surviving, 0.6);
        assert_eq!(mask, surviving);
    }

    #[test]
    fn topk_ties_prefer_lowest_index() {
        let values = arr1(&[1.0f64, 1.0, 1.0, 1.0, 1.0]);
        let mask = topk_select(values.view(), &vec![true; 5], 0.6);
        assert_eq!(mask, vec![true, true, true, false, false]);
    }

    #[test]
    fn topk_mask_is_subset_of_surviving() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = 37;
            let values = Array1::<f64>::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
            let surviving: Mask = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            let mask = topk_select(values.view(), &surviving, 0.6);
            for j in 0..n {
                assert!(!mask[j] || surviving[j]);
            }
            let expected = ((0.6 * n as f64).floor() as usize).min(mask_popcount(&surviving));
            assert_eq!(mask_popcount(&mask), expected);
        }
    }

    #[test]
    fn counter_updates_and_errors() {
        let mut counter = SelectionCounter::new(2, 4);
        let mask = vec![true, false, true, false];
        counter.update(0, &mask).unwrap();
        assert_eq!(counter.row(0).unwrap().iter().sum::<u64>(), 2);
        counter.update(0, &mask).unwrap();
        assert_eq!(counter.row(0).unwrap(), &[2, 0, 2, 0]);
        assert!(counter.update(7, &mask).is_err());
        assert!(counter.update(1, &vec![true]).is_err());
    }

    #[test]
    fn counter_csv_shape() {
        let mut counter = SelectionCounter::new(2, 2);
        counter.update(1, &vec![true, true]).unwrap();
        let mut buf = Vec::new();
        counter.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(lines.next().unwrap(), "class,feature_index,count");
        assert_eq!(lines.next().unwrap(), "0,0,0");
        assert_eq!(text.lines().count(), 2 + 4);
    }

    #[test]
    fn schedule_starts_all_ones_and_updates_rows() {
        let mut counter = SelectionCounter::new(3, 4);
        counter.update(0, &vec![true, true, false, false]).unwrap();
        counter.update(1, &vec![false, true, true, false]).unwrap();
        let mut schedule = DropoutSchedule::<f64>::new(3, 4, 0.5, 2.0).unwrap();
        assert!(schedule.p_f.iter().all(|&p| p == 1.0));
        assert!(schedule.p_s.iter().all(|&p| p == 1.0));

        let table = SimilarityTable {
            rows: vec![table_with(1.0, 1.0, 1, 0)],
        };
        schedule.update_freq(&counter, &table).unwrap();
        // Row 2 rewritten, others untouched.
        assert!(schedule.freq_row(0).iter().all(|&p| p == 1.0));
        assert!(schedule.freq_row(2).iter().any(|&p| p != 1.0));

        schedule.update_sem(&counter, &[0, 1]).unwrap();
        assert!(schedule.sem_row(0)[0] > 0.0);
        assert_eq!(schedule.sem_row(0)[2], 0.0);
        assert!(schedule.sem_row(2).iter().all(|&p| p == 1.0));
    }

    #[test]
    fn probability_bounds_random_sweep() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = 16;
            let mut counter = SelectionCounter::new(3, n);
            for c in 0..3 {
                for _ in 0..rng.random_range(0..8) {
                    let mask: Mask = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
                    counter.update(c, &mask).unwrap();
                }
            }
            let row = table_with(
                rng.random_range(0.001..1000.0),
                rng.random_range(0.001..1000.0),
                1,
                0,
            );
            let lambda = rng.random_range(0.0..=1.0);
            let pf = frequency_keep_probs(&counter, &row, lambda).unwrap();
            assert!(pf.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let ps = semantic_keep_probs(&counter, 2, rng.random_range(0.001..10.0)).unwrap();
            assert!(ps.iter().all(|&p| (0.0..1.0).contains(&p)));
        }
    }

    #[test]
    fn mask_hex_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for len in [1usize, 7, 8, 80, 513] {
            let mask: Mask = (0..len).map(|_| rng.random::<f64>() < 0.5).collect();
            let hex = mask_to_hex(&mask);
            assert_eq!(mask_from_hex(&hex, len).unwrap(), mask);
        }
    }
}
