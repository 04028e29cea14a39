//! Zero-shot retrieval and its evaluation: encode queries and gallery into
//! the code space, rank by distance, and score with AP / mAP / Prec@K.
//! Also hosts the exact 1-D Wasserstein diagnostic used to watch the
//! cross-modal code gap during training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, Modality};
use crate::error::{Error, Result};
use crate::losses::Model;
use crate::matrix::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceMetric::Euclidean => write!(f, "euclidean"),
            DistanceMetric::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Lookup {
                kind: "distance metric",
                name: other.to_string(),
            }),
        }
    }
}

impl DistanceMetric {
    fn distance(self, a: &[Real], b: &[Real]) -> Real {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<Real>()
                .sqrt(),
            DistanceMetric::Cosine => {
                let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: Real = a.iter().map(|x| x * x).sum::<Real>().sqrt();
                let nb: Real = b.iter().map(|x| x * x).sum::<Real>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// How mAP aggregates per-query APs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapAveraging {
    /// Mean of per-class means (each class counts once).
    ClassMean,
    /// Plain mean over queries.
    QueryMean,
}

impl fmt::Display for MapAveraging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapAveraging::ClassMean => write!(f, "class_mean"),
            MapAveraging::QueryMean => write!(f, "query_mean"),
        }
    }
}

/// Encoded gallery: one code row per image, ids and classes aligned.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    codes: Matrix,
    ids: Vec<String>,
    classes: Vec<String>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn codes(&self) -> &Matrix {
        &self.codes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

/// Encodes image records through the image-branch encoder.
pub fn build_index(model: &Model, images: &[FeatureRecord]) -> Result<RetrievalIndex> {
    if let Some(bad) = images.iter().find(|r| r.modality != Modality::Image) {
        return Err(Error::Validation(format!(
            "gallery record {:?} is not an image",
            bad.id
        )));
    }
    let codes = if images.is_empty() {
        Matrix::zeros(0, model.code_dim())
    } else {
        let features: Vec<&[Real]> = images.iter().map(|r| r.feature.as_slice()).collect();
        model.enc_image.infer(&Matrix::from_row_slices(&features)?)?
    };
    Ok(RetrievalIndex {
        codes,
        ids: images.iter().map(|r| r.id.clone()).collect(),
        classes: images.iter().map(|r| r.class.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub id: String,
    pub distance: Real,
    pub relevant: bool,
}

/// One query's ranking. Entries are sorted by non-decreasing distance with
/// ties broken by gallery id; `total_relevant` counts class matches over
/// the full gallery even when the entry list is truncated.
#[derive(Debug, Clone)]
pub struct RankedRetrieval {
    pub query_id: String,
    pub query_class: String,
    pub entries: Vec<RankedEntry>,
    pub total_relevant: usize,
}

/// Ranks the gallery against an already-encoded query code.
pub fn rank(
    query_code: &[Real],
    query_id: &str,
    query_class: &str,
    index: &RetrievalIndex,
    metric: DistanceMetric,
    k: Option<usize>,
) -> Result<RankedRetrieval> {
    if index.is_empty() {
        return Err(Error::Validation("retrieval gallery is empty".into()));
    }
    if query_code.len() != index.codes.cols() {
        return Err(Error::shape("rank query code", index.codes.cols(), query_code.len()));
    }
    let mut entries: Vec<RankedEntry> = (0..index.len())
        .map(|i| RankedEntry {
            id: index.ids[i].clone(),
            distance: metric.distance(query_code, index.codes.row(i)),
            relevant: index.classes[i] == query_class,
        })
        .collect();
    let total_relevant = entries.iter().filter(|e| e.relevant).count();
    entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    if let Some(k) = k {
        entries.truncate(k);
    }
    Ok(RankedRetrieval {
        query_id: query_id.to_string(),
        query_class: query_class.to_string(),
        entries,
        total_relevant,
    })
}

/// Encodes a sketch query and ranks the gallery by distance in code space.
pub fn retrieve(
    model: &Model,
    index: &RetrievalIndex,
    sketch: &FeatureRecord,
    metric: DistanceMetric,
    k: Option<usize>,
) -> Result<RankedRetrieval> {
    if sketch.modality != Modality::Sketch {
        return Err(Error::Validation(format!("query record {:?} is not a sketch", sketch.id)));
    }
    let code = model
        .enc_sketch
        .infer(&Matrix::from_row_slices(&[sketch.feature.as_slice()])?)?;
    rank(code.row(0), &sketch.id, &sketch.class, index, metric, k)
}

/// `AP(N) = sum_{s=1..N} P(s) * delta_r(s)` with `P(s)` the precision at
/// cutoff `s` and `delta_r(s) = 1/R` when entry `s` is relevant, where `R`
/// is the relevant count over the full gallery. `R = 0` yields 0.
pub fn average_precision(ranked: &RankedRetrieval, n: usize) -> Result<Real> {
    if n > ranked.entries.len() {
        return Err(Error::Validation(format!(
            "AP cutoff {n} exceeds ranked list length {}",
            ranked.entries.len()
        )));
    }
    if ranked.total_relevant == 0 {
        return Ok(0.0);
    }
    let r = ranked.total_relevant as Real;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (s, entry) in ranked.entries[..n].iter().enumerate() {
        if entry.relevant {
            hits += 1;
            ap += hits as Real / (s + 1) as Real / r;
        }
    }
    Ok(ap)
}

/// Fraction of relevant entries among the top `k`; short galleries still
/// divide by `k`.
pub fn precision_at_k(ranked: &RankedRetrieval, k: usize) -> Result<Real> {
    if k == 0 {
        return Err(Error::Validation("precision cutoff must be at least 1".into()));
    }
    let top = k.min(ranked.entries.len());
    let hits = ranked.entries[..top].iter().filter(|e| e.relevant).count();
    Ok(hits as Real / k as Real)
}

/// Aggregates per-query APs (tagged with the query class) into mAP.
pub fn mean_ap(per_query: &[(String, Real)], averaging: MapAveraging) -> Result<Real> {
    if per_query.is_empty() {
        return Err(Error::Validation("mean_ap needs at least one query".into()));
    }
    match averaging {
        MapAveraging::QueryMean => {
            Ok(per_query.iter().map(|(_, ap)| ap).sum::<Real>() / per_query.len() as Real)
        }
        MapAveraging::ClassMean => {
            let mut by_class: BTreeMap<&str, (Real, usize)> = BTreeMap::new();
            for (class, ap) in per_query {
                let slot = by_class.entry(class).or_insert((0.0, 0));
                slot.0 += ap;
                slot.1 += 1;
            }
            let sum: Real = by_class.values().map(|(s, n)| s / *n as Real).sum();
            Ok(sum / by_class.len() as Real)
        }
    }
}

/// Exact 1-D Wasserstein distance between equal-size empirical
/// distributions: the mean absolute difference of order statistics.
pub fn wasserstein_1d(samples_a: &[Real], samples_b: &[Real]) -> Result<Real> {
    if samples_a.len() != samples_b.len() {
        return Err(Error::Validation(format!(
            "wasserstein_1d needs equal sample counts, got {} and {}",
            samples_a.len(),
            samples_b.len()
        )));
    }
    if samples_a.is_empty() {
        return Err(Error::Validation("wasserstein_1d needs at least one sample".into()));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(Real::total_cmp);
    b.sort_by(Real::total_cmp);
    let n = a.len() as Real;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<Real>() / n)
}

/// Mean over code coordinates of the 1-D Wasserstein distance between the
/// two modalities' code distributions; the trainer logs this per batch.
pub fn code_gap(sketch_codes: &Matrix, image_codes: &Matrix) -> Result<Real> {
    if sketch_codes.cols() != image_codes.cols() || sketch_codes.rows() != image_codes.rows() {
        return Err(Error::shape(
            "code_gap",
            format!("{}x{}", sketch_codes.rows(), sketch_codes.cols()),
            format!("{}x{}", image_codes.rows(), image_codes.cols()),
        ));
    }
    let mut total = 0.0;
    for j in 0..sketch_codes.cols() {
        total += wasserstein_1d(&sketch_codes.column(j), &image_codes.column(j))?;
    }
    Ok(total / sketch_codes.cols() as Real)
}

/// Evaluation settings; `ap_cutoff: None` scores AP over the full gallery.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub distance: DistanceMetric,
    pub map_averaging: MapAveraging,
    pub precision_k: usize,
    pub ap_cutoff: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            distance: DistanceMetric::Euclidean,
            map_averaging: MapAveraging::ClassMean,
            precision_k: 100,
            ap_cutoff: None,
        }
    }
}

/// The evaluation report written by the eval command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: Real,
    pub precision_at_k: Real,
    pub precision_k: usize,
    pub distance: String,
    pub map_averaging: String,
    pub query_count: usize,
    pub gallery_size: usize,
    pub class_count: usize,
    pub per_class_ap: BTreeMap<String, Real>,
    /// Queries whose class never occurs in the gallery; their AP is 0.
    pub zero_relevant_queries: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores sketch queries against an image gallery. `config_echo` is
/// embedded verbatim in the report for reproducibility.
pub fn evaluate(
    model: &Model,
    queries: &[FeatureRecord],
    gallery: &[FeatureRecord],
    options: &EvalOptions,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Validation("evaluation needs at least one query".into()));
    }
    let index = build_index(model, gallery)?;
    let mut per_query = Vec::with_capacity(queries.len());
    let mut precision_sum = 0.0;
    let mut zero_relevant = Vec::new();
    for query in queries {
        let ranked = retrieve(model, &index, query, options.distance, None)?;
        let n = options.ap_cutoff.map_or(ranked.entries.len(), |c| c.min(ranked.entries.len()));
        let ap = average_precision(&ranked, n)?;
        precision_sum += precision_at_k(&ranked, options.precision_k)?;
        if ranked.total_relevant == 0 {
            zero_relevant.push(query.id.clone());
        }
        per_query.push((query.class.clone(), ap));
    }

    let map = mean_ap(&per_query, options.map_averaging)?;
    let mut by_class: BTreeMap<String, (Real, usize)> = BTreeMap::new();
    for (class, ap) in &per_query {
        let slot = by_class.entry(class.clone()).or_insert((0.0, 0));
        slot.0 += ap;
        slot.1 += 1;
    }
    let per_class_ap: BTreeMap<String, Real> =
        by_class.into_iter().map(|(c, (s, n))| (c, s / n as Real)).collect();

    Ok(EvalReport {
        map,
        precision_at_k: precision_sum / queries.len() as Real,
        precision_k: options.precision_k,
        distance: options.distance.to_string(),
        map_averaging: options.map_averaging.to_string(),
        query_count: queries.len(),
        gallery_size: gallery.len(),
        class_count: per_class_ap.len(),
        per_class_ap,
        zero_relevant_queries: zero_relevant,
        config: config_echo,
    })
}

/// Encodes records through their modality's encoder; used for code dumps.
pub fn encode_records(model: &Model, records: &[FeatureRecord]) -> Result<Vec<(String, String, Modality, Vec<Real>)>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let input = Matrix::from_row_slices(&[r.feature.as_slice()])?;
        let code = match r.modality {
            Modality::Sketch => model.enc_sketch.infer(&input)?,
            Modality::Image => model.enc_image.infer(&input)?,
        };
        out.push((r.id.clone(), r.class.clone(), r.modality, code.row(0).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::losses::ClassifierHead;
    use crate::nn::{Activation, Mlp};
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Model {
        let hidden = Activation::LeakyRelu(0.2);
        let out = Activation::Identity;
        Model {
            enc_sketch: Mlp::glorot(&[d, 4, m], hidden, out, rng).unwrap(),
            enc_image: Mlp::glorot(&[d, 4, m], hidden, out, rng).unwrap(),
            dec_sketch: Mlp::glorot(&[m, 4, d], hidden, out, rng).unwrap(),
            dec_image: Mlp::glorot(&[m, 4, d], hidden, out, rng).unwrap(),
            critic_semantic: Mlp::glorot(&[m, 4, 1], hidden, out, rng).unwrap(),
            critic_sketch: Mlp::glorot(&[d, 4, 1], hidden, out, rng).unwrap(),
            critic_image: Mlp::glorot(&[d, 4, 1], hidden, out, rng).unwrap(),
            head_sketch: ClassifierHead::glorot(3, m, rng).unwrap(),
            head_image: None,
        }
    }

    fn image(id: &str, class: &str, feature: Vec<Real>) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            class: class.into(),
            modality: Modality::Image,
            split: Split::Test,
            feature,
        }
    }

    fn sketch(id: &str, class: &str, feature: Vec<Real>) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            class: class.into(),
            modality: Modality::Sketch,
            split: Split::Test,
            feature,
        }
    }

    fn random_gallery(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureRecord> {
        (0..n)
            .map(|i| {
                image(
                    &format!("g{i:03}"),
                    &format!("c{}", i % 3),
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn empty_gallery_builds_empty_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = tiny_model(4, 3, &mut rng);
        let index = build_index(&model, &[]).unwrap();
        assert!(index.is_empty());
        // but ranking against it is an error
        let q = sketch("q", "c0", vec![0.0; 4]);
        assert!(retrieve(&model, &index, &q, DistanceMetric::Euclidean, None).is_err());
    }

    #[test]
    fn index_rows_equal_encoder_outputs_and_concatenation_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(4, 3, &mut rng);
        let a = random_gallery(3, 4, &mut rng);
        let b = random_gallery(2, 4, &mut rng);
        let index_a = build_index(&model, &a).unwrap();
        for (i, rec) in a.iter().enumerate() {
            let single = model
                .enc_image
                .infer(&Matrix::from_row_slices(&[rec.feature.as_slice()]).unwrap())
                .unwrap();
            assert_eq!(index_a.codes().row(i), single.row(0));
        }
        let mut combined = a.clone();
        combined.extend(b.clone());
        let index_ab = build_index(&model, &combined).unwrap();
        let index_b = build_index(&model, &b).unwrap();
        for i in 0..a.len() {
            assert_eq!(index_ab.codes().row(i), index_a.codes().row(i));
        }
        for i in 0..b.len() {
            assert_eq!(index_ab.codes().row(a.len() + i), index_b.codes().row(i));
        }
    }

    #[test]
    fn non_image_gallery_record_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(4, 3, &mut rng);
        let records = vec![sketch("s", "c", vec![0.0; 4])];
        assert!(build_index(&model, &records).is_err());
    }

    #[test]
    fn exact_code_match_ranks_first_with_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(4, 3, &mut rng);
        let q = sketch("q", "c0", vec![0.3, -0.2, 0.9, 0.1]);
        // gallery item whose code equals the query's code: impossible to
        // construct through the image encoder in general, so rank directly.
        let qcode = model
            .enc_sketch
            .infer(&Matrix::from_row_slices(&[q.feature.as_slice()]).unwrap())
            .unwrap();
        let mut codes = vec![qcode.row(0).to_vec()];
        codes.push(vec![5.0, 5.0, 5.0]);
        let index = RetrievalIndex {
            codes: Matrix::from_rows(&codes).unwrap(),
            ids: vec!["match".into(), "far".into()],
            classes: vec!["c0".into(), "c1".into()],
        };
        let ranked = rank(qcode.row(0), &q.id, &q.class, &index, DistanceMetric::Euclidean, None).unwrap();
        assert_eq!(ranked.entries[0].id, "match");
        assert_eq!(ranked.entries[0].distance, 0.0);
        assert!(ranked.entries[0].relevant);

        let top1 = rank(qcode.row(0), &q.id, &q.class, &index, DistanceMetric::Euclidean, Some(1)).unwrap();
        assert_eq!(top1.entries.len(), 1);
        assert_eq!(top1.total_relevant, 1); // counted over the full gallery
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = tiny_model(5, 3, &mut rng);
        let gallery = random_gallery(20, 5, &mut rng);
        let index = build_index(&model, &gallery).unwrap();
        let q = sketch("q", "c1", (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
            let ranked = retrieve(&model, &index, &q, metric, None).unwrap();
            let qcode = model
                .enc_sketch
                .infer(&Matrix::from_row_slices(&[q.feature.as_slice()]).unwrap())
                .unwrap();
            let mut pairs: Vec<(Real, String, bool)> = gallery
                .iter()
                .enumerate()
                .map(|(i, rec)| {
                    (
                        metric.distance(qcode.row(0), index.codes().row(i)),
                        rec.id.clone(),
                        rec.class == q.class,
                    )
                })
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            for (entry, (dist, id, rel)) in ranked.entries.iter().zip(&pairs) {
                assert_eq!(&entry.id, id);
                assert_eq!(entry.distance, *dist);
                assert_eq!(entry.relevant, *rel);
            }
            assert!(ranked.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }

    fn ranked_from_pattern(pattern: &[bool]) -> RankedRetrieval {
        RankedRetrieval {
            query_id: "q".into(),
            query_class: "c".into(),
            entries: pattern
                .iter()
                .enumerate()
                .map(|(i, &relevant)| RankedEntry {
                    id: format!("g{i:02}"),
                    distance: i as Real,
                    relevant,
                })
                .collect(),
            total_relevant: pattern.iter().filter(|&&r| r).count(),
        }
    }

    /// Direct evaluation of the AP definition, independent of the
    /// implementation's incremental form.
    fn ap_oracle(pattern: &[bool], n: usize) -> Real {
        let r = pattern.iter().filter(|&&x| x).count();
        if r == 0 {
            return 0.0;
        }
        (1..=n)
            .map(|s| {
                let hits = pattern[..s].iter().filter(|&&x| x).count();
                let p_s = hits as Real / s as Real;
                let delta = if pattern[s - 1] { 1.0 / r as Real } else { 0.0 };
                p_s * delta
            })
            .sum()
    }

    #[test]
    fn average_precision_pinned_cases() {
        let perfect = ranked_from_pattern(&[true; 5]);
        assert_eq!(average_precision(&perfect, 5).unwrap(), 1.0);

        let empty = ranked_from_pattern(&[false; 4]);
        assert_eq!(average_precision(&empty, 4).unwrap(), 0.0);

        // [1,0,1] with R = 2: AP = 1*(1/2) + (2/3)*(1/2) = 5/6
        let mixed = ranked_from_pattern(&[true, false, true]);
        assert!((average_precision(&mixed, 3).unwrap() - 5.0 / 6.0).abs() < 1e-15);

        assert!(average_precision(&mixed, 4).is_err());
    }

    #[test]
    fn average_precision_matches_oracle_for_short_patterns() {
        for len in 1..=6usize {
            for bits in 0..(1u32 << len) {
                let pattern: Vec<bool> = (0..len).map(|i| bits & (1 << i) != 0).collect();
                let ranked = ranked_from_pattern(&pattern);
                for n in 1..=len {
                    let got = average_precision(&ranked, n).unwrap();
                    let want = ap_oracle(&pattern, n);
                    assert!((got - want).abs() < 1e-12, "pattern {pattern:?} n={n}");
                }
            }
        }
    }

    #[test]
    fn ap_is_one_iff_relevant_fill_top_ranks() {
        for len in 1..=6usize {
            for bits in 0..(1u32 << len) {
                let pattern: Vec<bool> = (0..len).map(|i| bits & (1 << i) != 0).collect();
                let r = pattern.iter().filter(|&&x| x).count();
                if r == 0 {
                    continue;
                }
                let ranked = ranked_from_pattern(&pattern);
                let ap = average_precision(&ranked, len).unwrap();
                let top_block = pattern[..r].iter().all(|&x| x);
                assert_eq!((ap - 1.0).abs() < 1e-12, top_block, "pattern {pattern:?}");
                assert!(ap >= 0.0 && ap <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn metrics_ignore_the_tail_below_the_cutoff() {
        let a = ranked_from_pattern(&[true, false, true, false, true, false]);
        let mut b = ranked_from_pattern(&[true, false, true, true, false, false]);
        // keep R identical: both have 3 relevant overall
        b.total_relevant = 3;
        assert_eq!(average_precision(&a, 3).unwrap(), average_precision(&b, 3).unwrap());
        assert_eq!(precision_at_k(&a, 3).unwrap(), precision_at_k(&b, 3).unwrap());
    }

    #[test]
    fn precision_at_k_cases() {
        let all = ranked_from_pattern(&[true; 8]);
        assert_eq!(precision_at_k(&all, 8).unwrap(), 1.0);
        let none = ranked_from_pattern(&[false; 8]);
        assert_eq!(precision_at_k(&none, 5).unwrap(), 0.0);
        // short gallery still divides by k
        let short = ranked_from_pattern(&[true, true]);
        assert_eq!(precision_at_k(&short, 4).unwrap(), 0.5);
        assert!(precision_at_k(&short, 0).is_err());
    }

    proptest! {
        #[test]
        fn precision_matches_brute_force_count(pattern in prop::collection::vec(any::<bool>(), 1..12), k in 1usize..15) {
            let ranked = ranked_from_pattern(&pattern);
            let got = precision_at_k(&ranked, k).unwrap();
            let want = pattern.iter().take(k).filter(|&&x| x).count() as Real / k as Real;
            prop_assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_ap_cases() {
        let single = vec![("a".to_string(), 0.7)];
        assert_eq!(mean_ap(&single, MapAveraging::ClassMean).unwrap(), 0.7);

        // class means first: {1.0} and {0.0, 0.0} -> (1.0 + 0.0) / 2
        let skewed = vec![
            ("a".to_string(), 1.0),
            ("b".to_string(), 0.0),
            ("b".to_string(), 0.0),
        ];
        assert_eq!(mean_ap(&skewed, MapAveraging::ClassMean).unwrap(), 0.5);
        assert!((mean_ap(&skewed, MapAveraging::QueryMean).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        assert!(mean_ap(&[], MapAveraging::ClassMean).is_err());
    }

    proptest! {
        #[test]
        fn mean_ap_matches_two_level_recomputation(aps in prop::collection::vec((0u8..4, 0.0f64..1.0), 1..20)) {
            let tagged: Vec<(String, Real)> = aps.iter().map(|(c, ap)| (format!("c{c}"), *ap as Real)).collect();
            let got = mean_ap(&tagged, MapAveraging::ClassMean).unwrap();
            let mut classes: Vec<String> = tagged.iter().map(|(c, _)| c.clone()).collect();
            classes.sort();
            classes.dedup();
            let want: Real = classes
                .iter()
                .map(|c| {
                    let vals: Vec<Real> = tagged.iter().filter(|(tc, _)| tc == c).map(|(_, ap)| *ap).collect();
                    vals.iter().sum::<Real>() / vals.len() as Real
                })
                .sum::<Real>()
                / classes.len() as Real;
            prop_assert!((got - want).abs() < 1e-12);
        }

        #[test]
        fn mean_ap_invariant_under_uniform_query_duplication(
            aps in prop::collection::vec((0u8..3, 0.0f64..1.0), 1..8),
            copies in 2usize..4,
        ) {
            let tagged: Vec<(String, Real)> = aps.iter().map(|(c, ap)| (format!("c{c}"), *ap as Real)).collect();
            let mut duplicated = Vec::new();
            for _ in 0..copies {
                duplicated.extend(tagged.clone());
            }
            let a = mean_ap(&tagged, MapAveraging::ClassMean).unwrap();
            let b = mean_ap(&duplicated, MapAveraging::ClassMean).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_pinned_cases() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[4.0], &[-2.5]).unwrap(), 6.5);
        assert!(wasserstein_1d(&[1.0], &[1.0, 2.0]).is_err());
        assert!(wasserstein_1d(&[], &[]).is_err());
    }

    #[test]
    fn wasserstein_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let a: Vec<Real> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<Real> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = wasserstein_1d(&a, &b).unwrap();
            let best = (0..n)
                .permutations(n)
                .map(|perm| {
                    perm.iter()
                        .enumerate()
                        .map(|(i, &j)| (a[i] - b[j]).abs())
                        .sum::<Real>()
                        / n as Real
                })
                .fold(Real::INFINITY, Real::min);
            assert!((got - best).abs() < 1e-12, "n={n} got={got} brute={best}");
        }
    }

    proptest! {
        #[test]
        fn wasserstein_symmetry_and_triangle(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            c in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let a: Vec<Real> = a.iter().map(|&v| v as Real).collect();
            let b: Vec<Real> = b.iter().map(|&v| v as Real).collect();
            let c: Vec<Real> = c.iter().map(|&v| v as Real).collect();
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let ac = wasserstein_1d(&a, &c).unwrap();
            let cb = wasserstein_1d(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }

    /// Coordinate permutations and sign flips are exactly representable
    /// isometries; rankings must not change under them.
    #[test]
    fn ranking_invariant_under_signed_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let codes: Vec<Vec<Real>> = (0..12)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let query: Vec<Real> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let index = RetrievalIndex {
            codes: Matrix::from_rows(&codes).unwrap(),
            ids: (0..12).map(|i| format!("g{i:02}")).collect(),
            classes: (0..12).map(|i| format!("c{}", i % 3)).collect(),
        };
        let base = rank(&query, "q", "c0", &index, DistanceMetric::Euclidean, None).unwrap();

        let mut perm: Vec<usize> = (0..m).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let signs: Vec<Real> = (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let apply = |v: &[Real]| -> Vec<Real> { perm.iter().zip(&signs).map(|(&p, s)| v[p] * s).collect() };

        let t_codes: Vec<Vec<Real>> = codes.iter().map(|c| apply(c)).collect();
        let t_index = RetrievalIndex {
            codes: Matrix::from_rows(&t_codes).unwrap(),
            ids: index.ids.clone(),
            classes: index.classes.clone(),
        };
        let transformed = rank(&apply(&query), "q", "c0", &t_index, DistanceMetric::Euclidean, None).unwrap();
        let order: Vec<&String> = base.entries.iter().map(|e| &e.id).collect();
        let t_order: Vec<&String> = transformed.entries.iter().map(|e| &e.id).collect();
        assert_eq!(order, t_order);
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(5, 3, &mut rng);
        let gallery = random_gallery(30, 5, &mut rng);
        let queries: Vec<FeatureRecord> = (0..6)
            .map(|i| {
                sketch(
                    &format!("q{i}"),
                    &format!("c{}", i % 3),
                    (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let report = evaluate(
            &model,
            &queries,
            &gallery,
            &EvalOptions::default(),
            serde_json::json!({"seed": 7}),
        )
        .unwrap();
        assert_eq!(report.query_count, 6);
        assert_eq!(report.gallery_size, 30);
        assert_eq!(report.class_count, 3);
        assert!((0.0..=1.0).contains(&report.map));
        assert!(report.zero_relevant_queries.is_empty());
        let json = report.to_json_string().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.map, report.map);
        assert_eq!(back.config, report.config);
    }
}
