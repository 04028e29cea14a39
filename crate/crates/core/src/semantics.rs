//! Per-class semantic codes: text vectors joined with taxonomy
//! similarities, compressed to the code dimension by a small
//! auto-encoder whose encoder output becomes the class code.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::nn::{Activation, Mlp, RmsPropState};

/// One taxonomy node as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub id: u32,
    pub name: String,
    pub parent: Option<u32>,
    pub count: u64,
}

/// A single-rooted class taxonomy with per-node occurrence counts.
///
/// Effective counts (own count plus all descendants') drive the
/// information-content measure; they are computed once at construction.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    by_name: BTreeMap<String, usize>,
    parent_idx: Vec<Option<usize>>,
    depth: Vec<usize>,
    effective: Vec<u64>,
    root: usize,
}

impl Taxonomy {
    pub fn new(nodes: Vec<TaxonomyNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Validation("taxonomy has no nodes".into()));
        }
        let mut by_id = BTreeMap::new();
        let mut by_name = BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if by_id.insert(node.id, idx).is_some() {
                return Err(Error::Validation(format!("duplicate taxonomy id {}", node.id)));
            }
            if by_name.insert(node.name.clone(), idx).is_some() {
                return Err(Error::Validation(format!("duplicate taxonomy name {:?}", node.name)));
            }
        }
        let mut parent_idx = Vec::with_capacity(nodes.len());
        let mut root = None;
        for node in &nodes {
            match node.parent {
                None => {
                    if root.replace(parent_idx.len()).is_some() {
                        return Err(Error::Validation("taxonomy has more than one root".into()));
                    }
                    parent_idx.push(None);
                }
                Some(pid) => {
                    let p = *by_id
                        .get(&pid)
                        .ok_or_else(|| Error::Validation(format!("node {} has unknown parent {pid}", node.id)))?;
                    parent_idx.push(Some(p));
                }
            }
        }
        let root = root.ok_or_else(|| Error::Validation("taxonomy has no root".into()))?;

        // Depths; a node whose parent chain exceeds the node count is in a cycle.
        let mut depth = vec![usize::MAX; nodes.len()];
        for start in 0..nodes.len() {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == usize::MAX {
                chain.push(cur);
                match parent_idx[cur] {
                    None => {
                        depth[cur] = 0;
                        break;
                    }
                    Some(p) => {
                        if chain.len() > nodes.len() {
                            return Err(Error::Validation("taxonomy parent links contain a cycle".into()));
                        }
                        cur = p;
                    }
                }
            }
            for &idx in chain.iter().rev() {
                if depth[idx] == usize::MAX {
                    depth[idx] = depth[parent_idx[idx].expect("non-root in chain")] + 1;
                }
            }
        }

        // Effective counts: own + descendants, accumulated child-to-parent
        // in decreasing depth order.
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(depth[i]));
        let mut effective: Vec<u64> = nodes.iter().map(|n| n.count).collect();
        for &i in &order {
            if let Some(p) = parent_idx[i] {
                effective[p] += effective[i];
            }
        }

        Ok(Taxonomy {
            nodes,
            by_name,
            parent_idx,
            depth,
            effective,
            root,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let nodes: Vec<TaxonomyNode> = serde_json::from_str(text)?;
        Taxonomy::new(nodes)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.nodes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup {
                kind: "taxonomy class",
                name: name.to_string(),
            })
    }

    fn lowest_common_ancestor(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent_idx[a].expect("depth > 0 implies parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent_idx[b].expect("depth > 0 implies parent");
        }
        while a != b {
            a = self.parent_idx[a].expect("distinct nodes at equal depth have parents");
            b = self.parent_idx[b].expect("distinct nodes at equal depth have parents");
        }
        a
    }

    /// Shortest-path hop count between two named nodes.
    pub fn hops(&self, a: &str, b: &str) -> Result<usize> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let lca = self.lowest_common_ancestor(ia, ib);
        Ok(self.depth[ia] + self.depth[ib] - 2 * self.depth[lca])
    }

    /// `1 / (1 + hops(a, b))`, in `(0, 1]`.
    pub fn path_similarity(&self, a: &str, b: &str) -> Result<Real> {
        Ok(1.0 / (1.0 + self.hops(a, b)? as Real))
    }

    fn information_content(&self, idx: usize) -> Result<Real> {
        let total = self.effective[self.root];
        let own = self.effective[idx];
        if own == 0 || total == 0 {
            return Err(Error::Validation(format!(
                "node {:?} has zero effective count; information content undefined",
                self.nodes[idx].name
            )));
        }
        Ok(-((own as Real / total as Real).ln()))
    }

    /// Similarity `1 / (1 + d)` from the information-content distance
    /// `d = IC(a) + IC(b) - 2 IC(lca)`, in `(0, 1]`.
    pub fn jiang_conrath_similarity(&self, a: &str, b: &str) -> Result<Real> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let lca = self.lowest_common_ancestor(ia, ib);
        let d = self.information_content(ia)? + self.information_content(ib)?
            - 2.0 * self.information_content(lca)?;
        Ok(1.0 / (1.0 + d))
    }
}

/// Which taxonomy similarity feeds the hierarchical embedding part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyMeasure {
    Path,
    JiangConrath,
}

impl HierarchyMeasure {
    pub fn similarity(self, tax: &Taxonomy, a: &str, b: &str) -> Result<Real> {
        match self {
            HierarchyMeasure::Path => tax.path_similarity(a, b),
            HierarchyMeasure::JiangConrath => tax.jiang_conrath_similarity(a, b),
        }
    }
}

impl fmt::Display for HierarchyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HierarchyMeasure::Path => write!(f, "path"),
            HierarchyMeasure::JiangConrath => write!(f, "jc"),
        }
    }
}

impl FromStr for HierarchyMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(HierarchyMeasure::Path),
            "jc" | "jiang_conrath" | "jiang-conrath" => Ok(HierarchyMeasure::JiangConrath),
            other => Err(Error::Lookup {
                kind: "hierarchy measure",
                name: other.to_string(),
            }),
        }
    }
}

/// Class-name to text-vector table, one fixed dimension across entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<Real>>,
}

impl TextEmbeddingTable {
    pub fn new(vectors: BTreeMap<String, Vec<Real>>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("text embedding table is empty".into()))?;
        for (name, v) in &vectors {
            if v.len() != dim {
                return Err(Error::shape(format!("text vector {name:?}"), dim, v.len()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("text vector {name:?}")));
            }
        }
        Ok(TextEmbeddingTable { dim, vectors })
    }

    /// Parses the plain `name v1 v2 ... vD` line format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let mut vectors = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().expect("non-empty line has a token");
            let values: Vec<Real> = parts
                .map(|tok| {
                    tok.parse::<Real>().map_err(|e| Error::Parse {
                        path: display.clone(),
                        line: lineno + 1,
                        message: format!("bad number {tok:?}: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::Parse {
                    path: display,
                    line: lineno + 1,
                    message: format!("no vector values after name {name:?}"),
                });
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Parse {
                        path: display,
                        line: lineno + 1,
                        message: format!("expected {d} values, got {}", values.len()),
                    });
                }
                _ => {}
            }
            if vectors.insert(name.to_string(), values).is_some() {
                return Err(Error::Parse {
                    path: display,
                    line: lineno + 1,
                    message: format!("duplicate entry {name:?}"),
                });
            }
        }
        TextEmbeddingTable::new(vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (name, values) in &self.vectors {
            out.push_str(name);
            for v in values {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&[Real]> {
        self.vectors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup {
                kind: "text embedding",
                name: name.to_string(),
            })
    }
}

/// Joint embedding for one class: its text vector concatenated with the
/// similarity from the class to every seen class under `measure`.
pub fn build_class_embedding(
    class: &str,
    text: &TextEmbeddingTable,
    tax: &Taxonomy,
    measure: HierarchyMeasure,
    seen_classes: &[String],
) -> Result<Vec<Real>> {
    let mut out = text.get(class)?.to_vec();
    out.reserve(seen_classes.len());
    for seen in seen_classes {
        out.push(measure.similarity(tax, class, seen)?);
    }
    Ok(out)
}

/// Where a semantic table came from: which text model and which taxonomy
/// measure were combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub text_source: String,
    pub measure: String,
}

/// Per-class semantic codes in the model's code space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    pub code_dim: usize,
    pub provenance: Provenance,
    pub codes: BTreeMap<String, Vec<Real>>,
}

impl SemanticTable {
    pub fn get(&self, class: &str) -> Result<&[Real]> {
        self.codes.get(class).map(Vec::as_slice).ok_or_else(|| Error::Lookup {
            kind: "semantic code",
            name: class.to_string(),
        })
    }

    pub fn contains(&self, class: &str) -> bool {
        self.codes.contains_key(class)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: SemanticTable = serde_json::from_str(&text)?;
        for (name, code) in &table.codes {
            if code.len() != table.code_dim {
                return Err(Error::shape(format!("semantic code {name:?}"), table.code_dim, code.len()));
            }
            if !code.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("semantic code {name:?}")));
            }
        }
        Ok(table)
    }
}

/// Auto-encoder fit settings. `l1_penalty` adds optional sparsity pressure
/// on the codes; it defaults to off.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub code_dim: usize,
    pub iterations: usize,
    pub learning_rate: Real,
    pub l1_penalty: Real,
    pub seed: u64,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            code_dim: 64,
            iterations: 2000,
            learning_rate: 1e-3,
            l1_penalty: 0.0,
            seed: 0,
        }
    }
}

/// A fitted encoder/decoder pair with its reconstruction-loss trace.
#[derive(Debug, Clone)]
pub struct Combiner {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub loss_history: Vec<Real>,
}

impl Combiner {
    pub fn encode(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.encoder.infer(embeddings)
    }
}

/// Fits a linear auto-encoder `input -> code_dim -> input` on the given
/// embeddings (squared reconstruction error, RMSprop full-batch steps).
pub fn fit_combiner(embeddings: &Matrix, cfg: &CombinerConfig) -> Result<Combiner> {
    let n = embeddings.rows();
    let dim = embeddings.cols();
    if n < 2 {
        return Err(Error::Validation(format!("combiner needs at least 2 classes, got {n}")));
    }
    let first = embeddings.row(0).to_vec();
    if (1..n).all(|i| embeddings.row(i) == first.as_slice()) {
        return Err(Error::Validation("combiner input is degenerate: all rows equal".into()));
    }
    if cfg.code_dim == 0 {
        return Err(Error::Validation("code_dim must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Mlp::glorot(&[dim, cfg.code_dim], Activation::Identity, Activation::Identity, &mut rng)?;
    let mut decoder = Mlp::glorot(&[cfg.code_dim, dim], Activation::Identity, Activation::Identity, &mut rng)?;
    let mut enc_opt = RmsPropState::new(cfg.learning_rate, 0.99, 1e-8, &encoder)?;
    let mut dec_opt = RmsPropState::new(cfg.learning_rate, 0.99, 1e-8, &decoder)?;

    let rows = n as Real;
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (codes, t_enc) = encoder.forward(embeddings)?;
        let (recon, t_dec) = decoder.forward(&codes)?;
        let diff = recon.sub(embeddings)?;
        let mut loss = diff.data().iter().map(|v| v * v).sum::<Real>() / rows;

        let mut upstream = diff;
        upstream.scale(2.0 / rows);
        let (dec_grads, mut code_grad) = decoder.backward(&t_dec, &upstream)?;
        if cfg.l1_penalty > 0.0 {
            loss += cfg.l1_penalty * codes.data().iter().map(|v| v.abs()).sum::<Real>() / rows;
            for (g, &c) in code_grad.data_mut().iter_mut().zip(codes.data()) {
                *g += cfg.l1_penalty / rows * if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 };
            }
        }
        let (enc_grads, _) = encoder.backward(&t_enc, &code_grad)?;

        if !loss.is_finite() {
            return Err(Error::NonFinite("combiner reconstruction loss".into()));
        }
        loss_history.push(loss);
        dec_opt.step(&mut decoder, &dec_grads.slices())?;
        enc_opt.step(&mut encoder, &enc_grads.slices())?;
    }

    Ok(Combiner {
        encoder,
        decoder,
        loss_history,
    })
}

/// End-to-end semantic-table construction. The combiner is fitted on the
/// seen classes only; unseen classes are encoded with the fitted encoder,
/// which is what keeps the zero-shot contract intact.
pub fn build_semantic_table(
    text: &TextEmbeddingTable,
    tax: &Taxonomy,
    measure: HierarchyMeasure,
    seen_classes: &[String],
    all_classes: &[String],
    text_label: &str,
    cfg: &CombinerConfig,
) -> Result<(SemanticTable, Combiner)> {
    let missing: Vec<String> = all_classes
        .iter()
        .filter(|c| text.get(c).is_err() || !tax.contains(c))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "classes without text vector or taxonomy node: {}",
            missing.join(", ")
        )));
    }

    let seen_rows: Vec<Vec<Real>> = seen_classes
        .iter()
        .map(|c| build_class_embedding(c, text, tax, measure, seen_classes))
        .collect::<Result<_>>()?;
    let seen_matrix = Matrix::from_rows(&seen_rows)?;
    let combiner = fit_combiner(&seen_matrix, cfg)?;

    let all_rows: Vec<Vec<Real>> = all_classes
        .iter()
        .map(|c| build_class_embedding(c, text, tax, measure, seen_classes))
        .collect::<Result<_>>()?;
    let all_matrix = Matrix::from_rows(&all_rows)?;
    let codes_matrix = combiner.encode(&all_matrix)?;

    let mut codes = BTreeMap::new();
    for (i, class) in all_classes.iter().enumerate() {
        codes.insert(class.clone(), codes_matrix.row(i).to_vec());
    }
    Ok((
        SemanticTable {
            code_dim: cfg.code_dim,
            provenance: Provenance {
                text_source: text_label.to_string(),
                measure: measure.to_string(),
            },
            codes,
        },
        combiner,
    ))
}
