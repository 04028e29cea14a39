//! Feature ingestion, zero-shot split construction, class-paired batching,
//! and a synthetic-data generator for desk-scale verification.
//!
//! Feature file format: a `dim=N` header line, then one CSV row per record:
//! `id,class,modality,split,f1,...,fN` with full-precision decimals.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Batch;
use crate::matrix::{Matrix, Real};
use crate::seeding::derive_seed;
use crate::semantics::{SemanticTable, Taxonomy, TaxonomyNode, TextEmbeddingTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sketch,
    Image,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Sketch => write!(f, "sketch"),
            Modality::Image => write!(f, "image"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Modality::Sketch),
            "image" => Ok(Modality::Image),
            other => Err(Error::Lookup {
                kind: "modality",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Lookup {
                kind: "split",
                name: other.to_string(),
            }),
        }
    }
}

/// One visual feature vector with its identity and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub class: String,
    pub modality: Modality,
    pub split: Split,
    pub feature: Vec<Real>,
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Validation(format!("{what} must not be empty")));
    }
    if value.contains(',') || value.contains('\n') {
        return Err(Error::Validation(format!("{what} {value:?} contains a comma or newline")));
    }
    Ok(())
}

pub fn save_features(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.feature.len());
    let mut out = String::new();
    out.push_str(&format!("dim={dim}\n"));
    for r in records {
        check_field(&r.id, "record id")?;
        check_field(&r.class, "record class")?;
        if r.feature.len() != dim {
            return Err(Error::shape(format!("feature of {:?}", r.id), dim, r.feature.len()));
        }
        if !r.feature.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("feature of {:?}", r.id)));
        }
        out.push_str(&r.id);
        out.push(',');
        out.push_str(&r.class);
        out.push(',');
        out.push_str(&r.modality.to_string());
        out.push(',');
        out.push_str(&r.split.to_string());
        for v in &r.feature {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let parse_err = |line: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().expect("non-empty text has a first line");
    let dim: usize = header
        .strip_prefix("dim=")
        .ok_or_else(|| parse_err(1, format!("expected dim=N header, got {header:?}")))?
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("bad dimension: {e}")))?;

    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + dim {
            return Err(parse_err(lineno, format!("expected {} fields, got {}", 4 + dim, fields.len())));
        }
        let modality = fields[2]
            .parse::<Modality>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let split = fields[3]
            .parse::<Split>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let mut feature = Vec::with_capacity(dim);
        for tok in &fields[4..] {
            let v: Real = tok
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad feature value {tok:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature value {tok:?}")));
            }
            feature.push(v);
        }
        records.push(FeatureRecord {
            id: fields[0].to_string(),
            class: fields[1].to_string(),
            modality,
            split,
            feature,
        });
    }
    Ok(records)
}

/// Disjoint seen/unseen class partition with the records routed by class
/// membership.
#[derive(Debug, Clone)]
pub struct ZeroShotSplit {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

/// Routes every record by class: unseen classes go to the test side, the
/// rest to training. The seen/unseen sets are disjoint by construction and
/// verified before returning.
pub fn make_split(records: Vec<FeatureRecord>, unseen_classes: &BTreeSet<String>) -> Result<ZeroShotSplit> {
    let observed: BTreeSet<String> = records.iter().map(|r| r.class.clone()).collect();
    let unknown: Vec<&String> = unseen_classes.iter().filter(|c| !observed.contains(*c)).collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!(
            "unseen classes not present in the data: {}",
            unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let seen_classes: BTreeSet<String> = observed.difference(unseen_classes).cloned().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if unseen_classes.contains(&r.class) {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    // The disjointness contract, checked even though construction forces it.
    if seen_classes.intersection(unseen_classes).next().is_some() {
        return Err(Error::Validation("seen and unseen classes overlap".into()));
    }
    if train.iter().any(|r| !seen_classes.contains(&r.class))
        || test.iter().any(|r| !unseen_classes.contains(&r.class))
    {
        return Err(Error::Validation("record routed to the wrong side of the split".into()));
    }
    Ok(ZeroShotSplit {
        seen_classes,
        unseen_classes: unseen_classes.clone(),
        train,
        test,
    })
}

/// Shape of a generated dataset. Classes live on latent cluster centers;
/// fixed random transforms per modality create a genuine cross-domain gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_seen: usize,
    pub sketches_per_class: usize,
    pub images_per_class: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub cluster_spread: Real,
    pub modality_transform_seed: u64,
    pub taxonomy_depth: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 14,
            n_seen: 10,
            sketches_per_class: 40,
            images_per_class: 40,
            feature_dim: 512,
            latent_dim: 32,
            text_dim: 300,
            cluster_spread: 0.05,
            modality_transform_seed: 17,
            taxonomy_depth: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen == 0 || self.n_seen >= self.n_classes {
            return Err(Error::Validation(format!(
                "need 0 < n_seen < n_classes, got {}/{}",
                self.n_seen, self.n_classes
            )));
        }
        if self.n_classes > 999 {
            return Err(Error::Validation("at most 999 synthetic classes".into()));
        }
        if self.sketches_per_class == 0 || self.images_per_class == 0 {
            return Err(Error::Validation("per-class sample counts must be positive".into()));
        }
        if self.feature_dim == 0 || self.latent_dim == 0 || self.text_dim == 0 {
            return Err(Error::Validation("dimensions must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0) {
            return Err(Error::Validation(format!(
                "cluster_spread must be non-negative, got {}",
                self.cluster_spread
            )));
        }
        if self.taxonomy_depth == 0 {
            return Err(Error::Validation("taxonomy_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything one generated dataset consists of. Two text tables come out
/// so taxonomy-measure and text-source grids can be exercised on the same
/// latent classes.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub records: Vec<FeatureRecord>,
    pub taxonomy: Taxonomy,
    pub text_primary: TextEmbeddingTable,
    pub text_alt: TextEmbeddingTable,
    pub unseen_classes: BTreeSet<String>,
}

fn transform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 / (cols as Real).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| normal.sample(rng) as Real * scale).collect())
        .collect()
}

fn project(matrix: &[Vec<Real>], latent: &[Real], spread: Real, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    matrix
        .iter()
        .map(|row| {
            let mean: Real = row.iter().zip(latent).map(|(a, b)| a * b).sum();
            mean + spread * normal.sample(rng) as Real
        })
        .collect()
}

/// Balanced grouping of class centers: recursive two-seed bisection down
/// to `max_depth`, leaves carrying count 1 so effective internal counts
/// equal subtree leaf counts.
fn build_taxonomy(class_names: &[String], centers: &[Vec<Real>], max_depth: usize) -> Result<Taxonomy> {
    let mut nodes = vec![TaxonomyNode {
        id: 0,
        name: "root".into(),
        parent: None,
        count: 0,
    }];
    let mut group_counter = 0u32;
    let mut stack: Vec<(u32, Vec<usize>, usize)> = vec![(0, (0..class_names.len()).collect(), 0)];
    while let Some((parent, members, depth)) = stack.pop() {
        // A split adds one internal level; stop when the members are few or
        // leaves would exceed the depth budget.
        if members.len() <= 2 || depth + 2 > max_depth {
            for &m in &members {
                nodes.push(TaxonomyNode {
                    id: nodes.len() as u32,
                    name: class_names[m].clone(),
                    parent: Some(parent),
                    count: 1,
                });
            }
            continue;
        }
        let dist2 = |a: usize, b: usize| -> Real {
            centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        let (mut seed_a, mut seed_b, mut best) = (members[0], members[1], -1.0);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                let d = dist2(a, b);
                if d > best {
                    best = d;
                    seed_a = a;
                    seed_b = b;
                }
            }
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        for &m in &members {
            if dist2(m, seed_a) <= dist2(m, seed_b) {
                left.push(m);
            } else {
                right.push(m);
            }
        }
        for side in [left, right] {
            if side.len() == 1 {
                nodes.push(TaxonomyNode {
                    id: nodes.len() as u32,
                    name: class_names[side[0]].clone(),
                    parent: Some(parent),
                    count: 1,
                });
            } else {
                group_counter += 1;
                let id = nodes.len() as u32;
                nodes.push(TaxonomyNode {
                    id,
                    name: format!("group_{group_counter:03}"),
                    parent: Some(parent),
                    count: 0,
                });
                stack.push((id, side, depth + 1));
            }
        }
    }
    Taxonomy::new(nodes)
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;

    // Modality and text transforms come from their own seed so the
    // cross-domain geometry can be held fixed across data draws.
    let mut trng = ChaCha8Rng::seed_from_u64(spec.modality_transform_seed);
    let a_sketch = transform(spec.feature_dim, spec.latent_dim, &mut trng);
    let a_image = transform(spec.feature_dim, spec.latent_dim, &mut trng);
    let b_primary = transform(spec.text_dim, spec.latent_dim, &mut trng);
    let b_alt = transform(spec.text_dim, spec.latent_dim, &mut trng);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let class_names: Vec<String> = (0..spec.n_classes).map(|k| format!("class_{k:03}")).collect();
    let centers: Vec<Vec<Real>> = (0..spec.n_classes)
        .map(|_| (0..spec.latent_dim).map(|_| normal.sample(&mut rng) as Real).collect())
        .collect();

    let mut records = Vec::with_capacity(spec.n_classes * (spec.sketches_per_class + spec.images_per_class));
    for (k, class) in class_names.iter().enumerate() {
        let split = if k < spec.n_seen { Split::Train } else { Split::Test };
        for s in 0..spec.sketches_per_class {
            records.push(FeatureRecord {
                id: format!("{class}-sketch-{s:03}"),
                class: class.clone(),
                modality: Modality::Sketch,
                split,
                feature: project(&a_sketch, &centers[k], spec.cluster_spread, &mut rng),
            });
        }
        for s in 0..spec.images_per_class {
            records.push(FeatureRecord {
                id: format!("{class}-image-{s:03}"),
                class: class.clone(),
                modality: Modality::Image,
                split,
                feature: project(&a_image, &centers[k], spec.cluster_spread, &mut rng),
            });
        }
    }

    let mut primary = std::collections::BTreeMap::new();
    for (k, class) in class_names.iter().enumerate() {
        primary.insert(class.clone(), project(&b_primary, &centers[k], spec.cluster_spread, &mut rng));
    }
    let mut alt = std::collections::BTreeMap::new();
    for (k, class) in class_names.iter().enumerate() {
        alt.insert(class.clone(), project(&b_alt, &centers[k], spec.cluster_spread, &mut rng));
    }

    let taxonomy = build_taxonomy(&class_names, &centers, spec.taxonomy_depth)?;
    let unseen_classes: BTreeSet<String> = class_names[spec.n_seen..].iter().cloned().collect();

    Ok(SyntheticData {
        records,
        taxonomy,
        text_primary: TextEmbeddingTable::new(primary)?,
        text_alt: TextEmbeddingTable::new(alt)?,
        unseen_classes,
    })
}

/// Draws class-paired batches: each epoch walks the shuffled train
/// sketches once and pairs every sketch with an image sampled uniformly
/// from the same class.
#[derive(Debug)]
pub struct Batcher<'a> {
    classes: Vec<String>,
    sketches: Vec<(usize, &'a [Real])>,
    images_by_class: Vec<Vec<&'a [Real]>>,
    codes: Vec<Vec<Real>>,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(split: &'a ZeroShotSplit, semantic: &SemanticTable, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if split.seen_classes.is_empty() {
            return Err(Error::Validation("split has no seen classes".into()));
        }
        let classes: Vec<String> = split.seen_classes.iter().cloned().collect();
        let label_of = |class: &str| classes.binary_search_by(|c| c.as_str().cmp(class)).expect("seen class");

        if let Some(first) = split.train.first() {
            let dim = first.feature.len();
            if let Some(bad) = split.train.iter().find(|r| r.feature.len() != dim) {
                return Err(Error::shape(format!("feature of {:?}", bad.id), dim, bad.feature.len()));
            }
        }

        let mut sketches = Vec::new();
        let mut images_by_class: Vec<Vec<&[Real]>> = vec![Vec::new(); classes.len()];
        for r in &split.train {
            let label = label_of(&r.class);
            match r.modality {
                Modality::Sketch => sketches.push((label, r.feature.as_slice())),
                Modality::Image => images_by_class[label].push(r.feature.as_slice()),
            }
        }
        let mut sketch_counts = vec![0usize; classes.len()];
        for &(label, _) in &sketches {
            sketch_counts[label] += 1;
        }
        for (label, class) in classes.iter().enumerate() {
            if sketch_counts[label] == 0 {
                return Err(Error::Validation(format!("seen class {class:?} has no training sketches")));
            }
            if images_by_class[label].is_empty() {
                return Err(Error::Validation(format!("seen class {class:?} has no training images")));
            }
        }
        let missing: Vec<&String> = classes.iter().filter(|c| !semantic.contains(c)).collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "semantic table is missing codes for: {}",
                missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        let codes: Vec<Vec<Real>> = classes
            .iter()
            .map(|c| semantic.get(c).map(<[Real]>::to_vec))
            .collect::<Result<_>>()?;
        if let Some(bad) = codes.iter().position(|c| c.len() != semantic.code_dim) {
            return Err(Error::shape(
                format!("semantic code for {:?}", classes[bad]),
                semantic.code_dim,
                codes[bad].len(),
            ));
        }

        Ok(Batcher {
            classes,
            sketches,
            images_by_class,
            codes,
            batch_size,
            seed,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn sketch_count(&self) -> usize {
        self.sketches.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sketches.len().div_ceil(self.batch_size)
    }

    /// Lazy batches for one epoch; the order and image pairing are a
    /// deterministic function of (seed, epoch).
    pub fn epoch(&self, epoch: u64) -> EpochBatches<'_, 'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch));
        let mut order: Vec<usize> = (0..self.sketches.len()).collect();
        order.shuffle(&mut rng);
        EpochBatches {
            batcher: self,
            order,
            rng,
            cursor: 0,
        }
    }
}

pub struct EpochBatches<'b, 'a> {
    batcher: &'b Batcher<'a>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl Iterator for EpochBatches<'_, '_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batcher.batch_size).min(self.order.len());
        let rows = &self.order[self.cursor..end];
        self.cursor = end;

        let mut xs = Vec::with_capacity(rows.len());
        let mut ys = Vec::with_capacity(rows.len());
        let mut ss = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &idx in rows {
            let (label, sketch) = self.batcher.sketches[idx];
            let images = &self.batcher.images_by_class[label];
            let image = images[self.rng.random_range(0..images.len())];
            xs.push(sketch);
            ys.push(image);
            ss.push(self.batcher.codes[label].as_slice());
            labels.push(label);
        }
        let batch = Batch::new(
            Matrix::from_row_slices(&xs).expect("batcher validated feature dims"),
            Matrix::from_row_slices(&ys).expect("batcher validated feature dims"),
            Matrix::from_row_slices(&ss).expect("batcher validated code dims"),
            labels,
        )
        .expect("batcher rows are aligned by construction");
        Some(batch)
    }
}
