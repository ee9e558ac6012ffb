//! Concept-filtered and unfiltered ranking and mAP@k evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disentangle::project_concept;
use crate::error::{check_dim, Error, Result};
use crate::nnls::GroupSolver;
use crate::types::{ConceptLabelMatrix, EmbeddingMatrix, GroupDictionary, ZERO_NORM};

/// A cosine score; `zero_vector` is set when either side had (numerically)
/// zero norm and the score was defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub zero_vector: bool,
}

/// `cos(component, candidate)`, or 0 (flagged) for a zero vector.
pub fn score_filtered(component: &DVector<f64>, candidate: &DVector<f64>) -> Result<Score> {
    check_dim("candidate dimension", component.len(), candidate.len())?;
    let (a, b) = (component.norm(), candidate.norm());
    if a < ZERO_NORM || b < ZERO_NORM {
        return Ok(Score {
            value: 0.0,
            zero_vector: true,
        });
    }
    Ok(Score {
        value: (component.dot(candidate) / (a * b)).clamp(-1.0, 1.0),
        zero_vector: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Unfiltered,
    Filtered(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub embedding: DVector<f64>,
    pub mode: QueryMode,
    /// Precomputed concept component; otherwise filtered queries project
    /// onto the dictionary passed to [`retrieve`].
    pub component: Option<DVector<f64>>,
}

impl RetrievalQuery {
    pub fn unfiltered(embedding: DVector<f64>) -> Self {
        Self {
            embedding,
            mode: QueryMode::Unfiltered,
            component: None,
        }
    }

    pub fn filtered(embedding: DVector<f64>, concept: usize) -> Self {
        Self {
            embedding,
            mode: QueryMode::Filtered(concept),
            component: None,
        }
    }

    /// The vector candidates are compared against.
    pub fn scoring_vector(&self, dict: Option<&GroupDictionary>) -> Result<DVector<f64>> {
        match (self.mode, &self.component, dict) {
            (QueryMode::Unfiltered, _, _) => Ok(self.embedding.clone()),
            (QueryMode::Filtered(_), Some(c), _) => Ok(c.clone()),
            (QueryMode::Filtered(j), None, Some(d)) => {
                if j >= d.n_groups() {
                    return Err(Error::Invalid(format!("concept index {j} out of range")));
                }
                Ok(project_concept(d, &self.embedding, j)?.vector)
            }
            (QueryMode::Filtered(_), None, None) => Err(Error::Invalid(
                "filtered query needs a dictionary or a component".into(),
            )),
        }
    }
}

/// Candidates in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// The scoring vector was zero; every score is 0.
    pub zero_query: bool,
}

/// Candidate pool with unit-normalized columns, so cosine scoring is one
/// matrix-vector product.
#[derive(Debug, Clone)]
pub struct ScoringPool {
    unit: DMatrix<f64>,
}

impl ScoringPool {
    pub fn new(pool: &EmbeddingMatrix) -> Self {
        let mut unit = pool.data().clone();
        for mut c in unit.column_iter_mut() {
            let n = c.norm();
            if n >= ZERO_NORM {
                c.unscale_mut(n);
            } else {
                c.fill(0.0);
            }
        }
        Self { unit }
    }

    pub fn len(&self) -> usize {
        self.unit.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.unit.nrows()
    }

    /// Cosine of `v` with every candidate; `None` for a zero `v`.
    pub fn scores(&self, v: &DVector<f64>) -> Option<DVector<f64>> {
        let n = v.norm();
        (n >= ZERO_NORM).then(|| self.unit.tr_mul(v) / n)
    }

    /// Top `top_k` candidates, skipping `exclude`.
    pub fn rank(&self, v: &DVector<f64>, top_k: usize, exclude: Option<usize>) -> RankedList {
        match self.scores(v) {
            Some(s) => {
                let indices = top_indices(&s, top_k, exclude);
                let scores = indices.iter().map(|&i| s[i]).collect();
                RankedList {
                    indices,
                    scores,
                    zero_query: false,
                }
            }
            None => {
                let indices: Vec<usize> =
                    (0..self.len()).filter(|&i| Some(i) != exclude).take(top_k).collect();
                RankedList {
                    scores: vec![0.0; indices.len()],
                    indices,
                    zero_query: true,
                }
            }
        }
    }
}

/// Indices of the `k` largest scores, ties to the lower index.
fn top_indices(scores: &DVector<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Ranks `pool` for `query`. Filtered queries without a precomputed
/// component are projected onto `dict`.
pub fn retrieve(
    query: &RetrievalQuery,
    dict: Option<&GroupDictionary>,
    pool: &EmbeddingMatrix,
    top_k: usize,
) -> Result<RankedList> {
    if pool.is_empty() {
        return Err(Error::Invalid("candidate pool is empty".into()));
    }
    let v = query.scoring_vector(dict)?;
    check_dim("query dimension", pool.dim(), v.len())?;
    Ok(ScoringPool::new(pool).rank(&v, top_k, None))
}

/// Average precision of the top `k` entries of a ranked relevance list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragePrecision {
    pub value: f64,
    /// The pool held no relevant candidate; the value is 0.
    pub no_relevant: bool,
}

/// `sum_{r <= k} P(r) rel(r) / min(k, r_pool)`, with `r_pool` the number of
/// relevant candidates in the whole pool. Entries past the end of
/// `relevance` count as irrelevant.
pub fn ap_at_k(relevance: &[bool], k: usize, r_pool: usize) -> Result<AveragePrecision> {
    let listed = relevance.iter().filter(|&&r| r).count();
    if listed > r_pool {
        return Err(Error::Invalid(format!(
            "ranked list holds {listed} relevant items but the pool only {r_pool}"
        )));
    }
    if r_pool == 0 || k == 0 {
        return Ok(AveragePrecision {
            value: 0.0,
            no_relevant: r_pool == 0,
        });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(AveragePrecision {
        value: sum / k.min(r_pool) as f64,
        no_relevant: false,
    })
}

/// Fine-grained labels under parent concepts, per item.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubLabels {
    names: Vec<String>,
    /// Sorted `(concept, sub-label id)` pairs per item.
    items: Vec<Vec<(usize, usize)>>,
}

impl SubLabels {
    /// Builds from `(item, concept, sub-label)` triples for `n_items` items.
    pub fn from_triples<'a>(
        n_items: usize,
        triples: impl IntoIterator<Item = (usize, usize, &'a str)>,
    ) -> Result<Self> {
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut names = Vec::new();
        let mut items = vec![Vec::new(); n_items];
        for (item, concept, sub) in triples {
            if item >= n_items {
                return Err(Error::Invalid(format!("sub-label item {item} out of range")));
            }
            let id = *ids.entry(sub.to_string()).or_insert_with(|| {
                names.push(sub.to_string());
                names.len() - 1
            });
            items[item].push((concept, id));
        }
        for v in &mut items {
            v.sort_unstable();
            v.dedup();
        }
        Ok(Self { names, items })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sub-label ids of `item` under `concept`.
    pub fn under(&self, item: usize, concept: usize) -> impl Iterator<Item = usize> + '_ {
        self.items[item]
            .iter()
            .filter(move |(c, _)| *c == concept)
            .map(|&(_, s)| s)
    }

    /// Whether two items share a sub-label under `concept`.
    pub fn share(&self, a: &SubLabels, item_a: usize, item_b: usize, concept: usize) -> bool {
        let mine: Vec<usize> = self.under(item_a, concept).collect();
        a.under(item_b, concept).any(|s| mine.contains(&s))
    }

    /// Concepts with at least one sub-label on some item.
    pub fn concepts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.items.iter().flatten().map(|&(c, _)| c).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn select(&self, idx: &[usize]) -> SubLabels {
        SubLabels {
            names: self.names.clone(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// Remaps sub-label ids onto `other`'s name table, adding new names.
    /// Needed before comparing two tables built separately.
    pub fn aligned_to(&self, other: &mut SubLabels) -> SubLabels {
        let map: Vec<usize> = self
            .names
            .iter()
            .map(|n| match other.names.iter().position(|m| m == n) {
                Some(p) => p,
                None => {
                    other.names.push(n.clone());
                    other.names.len() - 1
                }
            })
            .collect();
        SubLabels {
            names: other.names.clone(),
            items: self
                .items
                .iter()
                .map(|v| {
                    let mut r: Vec<(usize, usize)> = v.iter().map(|&(c, s)| (c, map[s])).collect();
                    r.sort_unstable();
                    r
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Relevant: the candidate also has concept `j`.
    General,
    /// Relevant: the candidate shares a sub-label under `j` with the query.
    SubLabel,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::General => "general",
            Protocol::SubLabel => "sub_label",
        }
    }
}

/// A retrieval method under evaluation: unfiltered (`None`) or filtered
/// through a dictionary.
#[derive(Debug, Clone, Copy)]
pub struct Method<'a> {
    pub name: &'a str,
    pub dictionary: Option<&'a GroupDictionary>,
}

/// Embeddings with their labels.
#[derive(Debug, Clone, Copy)]
pub struct LabelledSet<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub labels: &'a ConceptLabelMatrix,
    pub sub_labels: Option<&'a SubLabels>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPool {
    /// Queries and pool are distinct sets.
    Disjoint,
    /// The pool is the query set; each query is excluded from its own
    /// candidate list.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapRow {
    pub method: String,
    pub protocol: Protocol,
    /// `None` for the average over all concepts.
    pub concept: Option<String>,
    pub map: f64,
    pub queries: usize,
    /// Queries whose filtered component was zero.
    pub zero_components: usize,
    /// Queries whose pool held no relevant candidate.
    pub no_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapTable {
    pub k: usize,
    pub rows: Vec<MapRow>,
}

impl MapTable {
    pub fn overall(&self, method: &str, protocol: Protocol) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.protocol == protocol && r.concept.is_none())
            .map(|r| r.map)
    }

    pub fn to_csv(&self, dataset: &str, embedding: &str, config_hash: &str) -> String {
        let mut out = String::from(
            "dataset,embedding,method,protocol,concept,k,mAP@k,queries,zero_components,no_relevant,config_hash\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{dataset},{embedding},{},{},{},{},{:.6},{},{},{},{config_hash}",
                r.method,
                r.protocol.as_str(),
                r.concept.as_deref().unwrap_or("all"),
                self.k,
                r.map,
                r.queries,
                r.zero_components,
                r.no_relevant,
            );
        }
        out
    }
}

/// Evaluates every method under `protocol` on the given concepts (`None`:
/// all concepts for the general protocol, concepts with sub-labels for the
/// sub-label protocol). Each (query, concept) pair with the concept present
/// in the query (and, for sub-labels, a sub-label under it) contributes one
/// AP@k. Per-concept rows average over that concept's queries; the overall
/// row averages over all pairs.
pub fn map_experiment(
    queries: LabelledSet<'_>,
    pool: LabelledSet<'_>,
    layout: QueryPool,
    methods: &[Method<'_>],
    protocol: Protocol,
    concepts: Option<&[usize]>,
    k: usize,
) -> Result<MapTable> {
    let qx = queries.embeddings;
    check_dim("query labels", qx.len(), queries.labels.n_items())?;
    check_dim("pool labels", pool.embeddings.len(), pool.labels.n_items())?;
    check_dim("pool dimension", qx.dim(), pool.embeddings.dim())?;
    check_dim("concept count", queries.labels.n_concepts(), pool.labels.n_concepts())?;
    if layout == QueryPool::Shared {
        check_dim("shared pool size", qx.len(), pool.embeddings.len())?;
    }
    if pool.embeddings.is_empty() {
        return Err(Error::Invalid("candidate pool is empty".into()));
    }
    let s = queries.labels.n_concepts();
    for m in methods {
        if let Some(d) = m.dictionary {
            check_dim("dictionary groups", s, d.n_groups())?;
            check_dim("dictionary dimension", qx.dim(), d.dim())?;
        }
    }
    let (q_sub, p_sub) = match protocol {
        Protocol::General => (None, None),
        Protocol::SubLabel => {
            let (Some(q), Some(p)) = (queries.sub_labels, pool.sub_labels) else {
                return Err(Error::Invalid("sub-label protocol needs sub-labels for queries and pool".into()));
            };
            check_dim("query sub-labels", qx.len(), q.n_items())?;
            check_dim("pool sub-labels", pool.embeddings.len(), p.n_items())?;
            let mut names = p.clone();
            let q = q.aligned_to(&mut names);
            let p = p.aligned_to(&mut names);
            (Some(q), Some(p))
        }
    };
    let concepts: Vec<usize> = match concepts {
        Some(c) => c.to_vec(),
        None => match (&q_sub, &p_sub) {
            (Some(q), Some(p)) => {
                let mut c = q.concepts();
                c.retain(|j| p.concepts().contains(j));
                c
            }
            _ => (0..s).collect(),
        },
    };
    if let Some(&bad) = concepts.iter().find(|&&j| j >= s) {
        return Err(Error::Invalid(format!("concept index {bad} out of range")));
    }

    // (query, concept) pairs under the protocol
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &j in &concepts {
        let before = pairs.len();
        for q in 0..qx.len() {
            let ok = queries.labels.get(q, j)
                && q_sub.as_ref().map_or(true, |sub| sub.under(q, j).next().is_some());
            if ok {
                pairs.push((q, j));
            }
        }
        if pairs.len() == before {
            return Err(Error::EmptyQuerySet(j));
        }
    }

    // relevant pool items per pair do not depend on the method
    let relevant = |q: usize, j: usize, c: usize| -> bool {
        if layout == QueryPool::Shared && c == q {
            return false;
        }
        match (&q_sub, &p_sub) {
            (Some(qs), Some(ps)) => qs.share(ps, q, c, j),
            _ => pool.labels.get(c, j),
        }
    };
    let r_pool: Vec<usize> = pairs
        .par_iter()
        .map(|&(q, j)| (0..pool.embeddings.len()).filter(|&c| relevant(q, j, c)).count())
        .collect();

    let scoring = ScoringPool::new(pool.embeddings);
    let exclude = |q: usize| (layout == QueryPool::Shared).then_some(q);
    let mut rows = Vec::new();
    for m in methods {
        let solver = m.dictionary.map(|d| GroupSolver::new(d, 0.0)).transpose()?;
        let per_pair: Vec<(f64, bool, bool)> = pairs
            .par_iter()
            .zip(r_pool.par_iter())
            .map(|(&(q, j), &rp)| {
                let x = qx.column(q);
                let v = match (&solver, m.dictionary) {
                    (Some(sv), Some(d)) => {
                        let sol = sv.solve(&x, &[j]).map_err(|e| e.at_item(q))?;
                        let range = d.group_range(j);
                        d.atoms().columns(range.start, range.len())
                            * sol.coefficients.rows(range.start, range.len())
                    }
                    _ => x.into_owned(),
                };
                let ranked = scoring.rank(&v, k, exclude(q));
                let rel: Vec<bool> = ranked.indices.iter().map(|&c| relevant(q, j, c)).collect();
                let ap = ap_at_k(&rel, k, rp)?;
                Ok((ap.value, ranked.zero_query, ap.no_relevant))
            })
            .collect::<Result<_>>()?;
        let summarize = |sel: &dyn Fn(usize) -> bool| {
            let (mut sum, mut n, mut z, mut nr) = (0.0, 0usize, 0usize, 0usize);
            for (p, &(ap, zero, none)) in per_pair.iter().enumerate() {
                if sel(p) {
                    sum += ap;
                    n += 1;
                    z += zero as usize;
                    nr += none as usize;
                }
            }
            (sum / n.max(1) as f64, n, z, nr)
        };
        for &j in &concepts {
            let (map, n, z, nr) = summarize(&|p| pairs[p].1 == j);
            rows.push(MapRow {
                method: m.name.to_string(),
                protocol,
                concept: Some(queries.labels.names()[j].clone()),
                map,
                queries: n,
                zero_components: z,
                no_relevant: nr,
            });
        }
        let (map, n, z, nr) = summarize(&|_| true);
        rows.push(MapRow {
            method: m.name.to_string(),
            protocol,
            concept: None,
            map,
            queries: n,
            zero_components: z,
            no_relevant: nr,
        });
    }
    Ok(MapTable { k, rows })
}
