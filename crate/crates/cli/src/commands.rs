//! One function per subcommand; each returns the table to print.

use std::ops::ControlFlow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Value};
use slics::disentangle::{cooccurrence_matrix, decompose_batch, sparse_code_nn_omp};
use slics::io::{
    atomic_write, read_checkpoint, read_matrix, write_checkpoint, write_labels, write_matrix,
    write_quantized, write_synthetic, Dataset, Preprocess,
};
use slics::learn::{coefficient_stage, train, train_from, train_minibatch, train_with_hook, TrainReport};
use slics::pq::{lut_score, quantize_pool, Codebook};
use slics::pseudo_label::{estimate_s_tilde, zero_shot_multilabel};
use slics::retrieval::{
    map_experiment, LabelledSet, Method, Protocol, QueryPool, RetrievalQuery, ScoringPool,
};
use slics::synthetic::{generate, PlantedConfig};
use slics::text::{procrustes_align, word_captions};
use slics::{normalize_tokenwise, GroupDictionary, TokenBatch};

use crate::output::{num, Table};
use crate::{
    AlignArgs, BenchArgs, CaptionArgs, CliError, CliResult, Context, CooccurArgs, DecomposeArgs,
    EvalArgs, FitArgs, PseudolabelArgs, QuantizeArgs, RetrieveArgs, SplitArg, SweepArgs, SynthArgs,
};

fn split_indices(ds: &Dataset, split: SplitArg) -> CliResult<Vec<usize>> {
    let s = &ds.manifest.splits;
    let (name, idx) = match split {
        SplitArg::All => return Ok((0..ds.len()).collect()),
        SplitArg::Train => return Ok(ds.train_indices()),
        SplitArg::Validation => ("validation", &s.validation),
        SplitArg::Query => ("query", &s.query),
        SplitArg::Pool => ("pool", &s.pool),
    };
    if idx.is_empty() {
        return Err(CliError::Usage(format!("the manifest defines no {name} split")));
    }
    Ok(idx.clone())
}

fn concept_index(names: &[String], name: &str) -> CliResult<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| CliError::Usage(format!("unknown concept {name:?}")))
}

fn check_item(ds: &Dataset, i: usize) -> CliResult<()> {
    if i >= ds.len() {
        return Err(CliError::Usage(format!("item {i} out of range ({} items)", ds.len())));
    }
    Ok(())
}

/// Pool items for a single query: the pool split, or every other item.
fn pool_for(ds: &Dataset, query: usize) -> Vec<usize> {
    let pool = &ds.manifest.splits.pool;
    if pool.is_empty() {
        (0..ds.len()).filter(|&i| i != query).collect()
    } else {
        pool.iter().copied().filter(|&i| i != query).collect()
    }
}

fn report_table(report: &TrainReport) -> Table {
    let mut t = Table::new("fit-report", &["stage", "epoch", "batch", "kind", "objective", "skipped", "reinit"]);
    for (i, s) in report.stages.iter().enumerate() {
        t.push(vec![
            json!(i),
            json!(s.epoch),
            json!(s.batch),
            serde_json::to_value(s.kind).expect("enum serializes"),
            num(s.objective),
            json!(s.skipped),
            json!(s.reinitialized),
        ]);
    }
    t
}

pub fn fit(ctx: &Context, a: &FitArgs) -> CliResult<Table> {
    let ds = Dataset::load(&a.manifest)?;
    let idx = ds.train_indices();
    let (x, labels, _) = ds.subset(&idx);
    let tc = ctx.config.train_config(labels.n_concepts());
    let (hash, seed) = (ctx.hash(), ctx.seed());
    let dir = a.checkpoint.as_path();

    let mut write_err = None;
    let mut hook = |epoch: usize, dict: &GroupDictionary, report: &TrainReport| {
        log::info!(
            "epoch {epoch}/{}: objective {:.6e}",
            tc.iterations,
            report.final_objective().unwrap_or(f64::NAN)
        );
        match write_checkpoint(dir, dict, None, &hash, seed) {
            Ok(_) => ControlFlow::Continue(()),
            Err(e) => {
                write_err = Some(e);
                ControlFlow::Break(())
            }
        }
    };
    let out = if a.resume {
        let ck = read_checkpoint(dir)?;
        if ck.dictionary.group_sizes() != tc.group_sizes.as_slice() {
            return Err(CliError::Usage(format!(
                "checkpoint group sizes {:?} differ from the configured {:?}",
                ck.dictionary.group_sizes(),
                tc.group_sizes
            )));
        }
        let coeffs = ck.coefficients.filter(|c| c.n_items() == x.len());
        log::info!("resuming from {}", dir.display());
        train_from(&x, &labels, &tc, ck.dictionary, coeffs, Some(&mut hook))?
    } else {
        train_with_hook(&x, &labels, &tc, &mut hook)?
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let meta = write_checkpoint(dir, &out.dictionary, Some(&out.coefficients), &hash, seed)?;
    let report_path = dir.join(format!("report.{}", ctx.format.extension()));
    atomic_write(&report_path, report_table(&out.report).render(ctx.format, &hash, seed).as_bytes())?;
    atomic_write(&dir.join("config.toml"), ctx.config.to_toml().as_bytes())?;
    log::info!("trained in {:.2}s", out.report.wall_time_secs);

    let r = &out.report;
    let mut t = Table::new(
        "fit",
        &[
            "checkpoint",
            "dictionary_sha256",
            "coefficients_sha256",
            "items",
            "atoms",
            "epochs",
            "final_objective",
            "skipped_updates",
            "reinitialized_atoms",
            "rank_deficient_groups",
        ],
    );
    t.push(vec![
        json!(dir.display().to_string()),
        json!(meta.dictionary_sha256),
        json!(meta.coefficients_sha256),
        json!(x.len()),
        json!(out.dictionary.n_atoms()),
        json!(tc.iterations),
        num(r.final_objective().unwrap_or(f64::NAN)),
        json!(r.skipped_updates),
        json!(r.reinitialized_atoms),
        json!(r.rank_deficient_groups.len()),
    ]);
    Ok(t)
}

pub fn sweep_d0(ctx: &Context, a: &SweepArgs) -> CliResult<Table> {
    let ds = Dataset::load(&a.manifest)?;
    let val = split_indices(&ds, SplitArg::Validation)?;
    let values = ctx.config.sweep.values();
    if values.is_empty() {
        return Err(CliError::Usage("the d0 range is empty".into()));
    }
    let (x, labels, _) = ds.subset(&ds.train_indices());
    let (vx, vl, vs) = ds.subset(&val);
    let s = labels.n_concepts();
    let use_sub = vs.as_ref().is_some_and(|v| !v.concepts().is_empty());
    let protocol = if use_sub { Protocol::SubLabel } else { Protocol::General };
    if !use_sub {
        log::warn!("no validation sub-labels; selecting d0 by general-label mAP");
    }
    let general_concepts: Vec<usize> = (0..s).filter(|&j| !vl.items_with(j).is_empty()).collect();
    let concepts = (!use_sub).then_some(general_concepts.as_slice());
    let set = LabelledSet {
        embeddings: &vx,
        labels: &vl,
        sub_labels: vs.as_ref(),
    };
    let k = ctx.config.eval.k;

    let mut results = Vec::new();
    for &d0 in &values {
        let mut cfg = ctx.config.clone();
        cfg.train.d0 = d0;
        cfg.train.group_sizes = None;
        let out = train_minibatch(&x, &labels, &cfg.train_config(s))?;
        let method = Method {
            name: "filtered",
            dictionary: Some(&out.dictionary),
        };
        let table = map_experiment(set, set, QueryPool::Shared, &[method], protocol, concepts, k)?;
        let map = table.overall("filtered", protocol).unwrap_or(f64::NAN);
        log::info!("d0 = {d0}: mAP@{k} {map:.4}");
        results.push((d0, map, out.report.final_objective().unwrap_or(f64::NAN)));
    }
    let best = choose_best(&results.iter().map(|r| r.1).collect::<Vec<_>>());

    let mut t = Table::new(
        "sweep-d0",
        &["d0", "protocol", "k", "mAP@k", "train_objective", "fallback_general", "chosen"],
    );
    for (i, &(d0, map, obj)) in results.iter().enumerate() {
        t.push(vec![
            json!(d0),
            json!(protocol.as_str()),
            json!(k),
            num(map),
            num(obj),
            json!(!use_sub),
            json!(i == best),
        ]);
    }
    t.meta.insert("chosen_d0".into(), json!(results[best].0));
    Ok(t)
}

/// Index of the highest score; ties (and NaN) keep the earliest entry,
/// i.e. the smallest d0 of an ascending sweep.
fn choose_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

pub fn decompose(ctx: &Context, a: &DecomposeArgs) -> CliResult<Table> {
    let _ = ctx;
    let ck = read_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let items = if a.items.is_empty() {
        split_indices(&ds, a.split)?
    } else {
        for &i in &a.items {
            check_item(&ds, i)?;
        }
        a.items.clone()
    };
    let dict = &ck.dictionary;
    let s = dict.n_groups();
    let active: Vec<Vec<usize>> = items
        .iter()
        .map(|&i| if a.all_concepts { (0..s).collect() } else { ds.labels.active(i) })
        .collect();
    let parts = decompose_batch(dict, &ds.embeddings.select(&items), &active)?;
    let names = ds.labels.names();

    let mut t = Table::new(
        "decompose",
        &["item", "concept", "active", "component_norm", "residual_norm", "coefficients"],
    );
    for ((&i, act), d) in items.iter().zip(&active).zip(&parts) {
        let residual = d.residual.norm();
        for c in &d.components {
            t.push(vec![
                json!(i),
                json!(names.get(c.concept).cloned().unwrap_or_else(|| c.concept.to_string())),
                json!(act.contains(&c.concept)),
                num(c.vector.norm()),
                num(residual),
                Value::Array(c.coefficients.iter().map(|&v| num(v)).collect()),
            ]);
        }
    }
    Ok(t)
}

pub fn retrieve(ctx: &Context, a: &RetrieveArgs) -> CliResult<Table> {
    let ds = Dataset::load(&a.manifest)?;
    check_item(&ds, a.query)?;
    let emb = ds.embeddings.column(a.query).into_owned();
    let (query, dict, concept) = match &a.concept {
        None => (RetrievalQuery::unfiltered(emb), None, None),
        Some(name) => {
            let j = concept_index(ds.labels.names(), name)?;
            let Some(path) = &a.checkpoint else {
                return Err(CliError::Usage("a filtered query needs --checkpoint".into()));
            };
            (RetrievalQuery::filtered(emb, j), Some(read_checkpoint(path)?.dictionary), Some(j))
        }
    };
    let v = query.scoring_vector(dict.as_ref())?;
    let pool = pool_for(&ds, a.query);
    let pool_x = ds.embeddings.select(&pool);
    if pool_x.dim() != v.len() {
        return Err(slics::Error::DimensionMismatch {
            context: "query dimension",
            expected: pool_x.dim(),
            found: v.len(),
        }
        .into());
    }
    let ranked = ScoringPool::new(&pool_x).rank(&v, ctx.config.eval.k, None);
    if ranked.zero_query {
        log::warn!("the filtered component of item {} is zero; scores are all 0", a.query);
    }

    let mut t = Table::new("retrieve", &["rank", "item", "score", "has_concept"]);
    for (r, (&p, &score)) in ranked.indices.iter().zip(&ranked.scores).enumerate() {
        let item = pool[p];
        t.push(vec![
            json!(r + 1),
            json!(item),
            num(score),
            concept.map_or(Value::Null, |j| json!(ds.labels.get(item, j))),
        ]);
    }
    t.meta.insert("query".into(), json!(a.query));
    t.meta.insert("zero_query".into(), json!(ranked.zero_query));
    Ok(t)
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> CliResult<Table> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let sp = &ds.manifest.splits;
    let (q_idx, p_idx, layout) = if sp.query.is_empty() || sp.pool.is_empty() {
        log::warn!("no query/pool splits; every item queries all others");
        let all: Vec<usize> = (0..ds.len()).collect();
        (all.clone(), all, QueryPool::Shared)
    } else {
        (sp.query.clone(), sp.pool.clone(), QueryPool::Disjoint)
    };
    let (qx, ql, qs) = ds.subset(&q_idx);
    let (px, pl, ps) = ds.subset(&p_idx);
    let queries = LabelledSet {
        embeddings: &qx,
        labels: &ql,
        sub_labels: qs.as_ref(),
    };
    let pool = LabelledSet {
        embeddings: &px,
        labels: &pl,
        sub_labels: ps.as_ref(),
    };
    let methods = [
        Method {
            name: "unfiltered",
            dictionary: None,
        },
        Method {
            name: "filtered",
            dictionary: Some(&ck.dictionary),
        },
    ];
    let general: Vec<usize> = (0..ql.n_concepts()).filter(|&j| !ql.items_with(j).is_empty()).collect();
    let k = ctx.config.eval.k;

    let mut t = Table::new(
        "eval",
        &[
            "dataset",
            "embedding",
            "method",
            "protocol",
            "concept",
            "k",
            "mAP@k",
            "queries",
            "zero_components",
            "no_relevant",
        ],
    );
    for &protocol in &ctx.config.eval.protocols {
        let concepts = match protocol {
            Protocol::General => Some(general.as_slice()),
            Protocol::SubLabel => {
                if qs.is_none() || ps.is_none() {
                    log::warn!("dataset has no sub-labels; skipping the sub-label protocol");
                    continue;
                }
                None
            }
        };
        let table = map_experiment(queries, pool, layout, &methods, protocol, concepts, k)?;
        for r in table.rows {
            t.push(vec![
                json!(ds.manifest.name),
                json!(ds.manifest.embedding),
                json!(r.method),
                json!(r.protocol.as_str()),
                json!(r.concept.unwrap_or_else(|| "all".into())),
                json!(k),
                num(r.map),
                json!(r.queries),
                json!(r.zero_components),
                json!(r.no_relevant),
            ]);
        }
    }
    Ok(t)
}

pub fn caption(ctx: &Context, a: &CaptionArgs) -> CliResult<Table> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let vocab = ds.vocabulary()?;
    let names = ds.labels.names();
    let concepts: Vec<usize> = match &a.concept {
        Some(n) => vec![concept_index(names, n)?],
        None => (0..ck.dictionary.n_groups()).collect(),
    };
    let mut t = Table::new("caption", &["concept", "rank", "word", "error"]);
    for j in concepts {
        for (r, c) in word_captions(&ck.dictionary, j, &vocab, ctx.config.caption.top_n)?
            .into_iter()
            .enumerate()
        {
            t.push(vec![json!(names[j]), json!(r + 1), json!(c.word), num(c.error)]);
        }
    }
    Ok(t)
}

pub fn quantize(ctx: &Context, a: &QuantizeArgs) -> CliResult<Table> {
    let ds = Dataset::load(&a.manifest)?;
    if ds.manifest.preprocess != Preprocess::Tokenwise {
        return Err(CliError::Usage("quantize needs a manifest with tokenwise preprocessing".into()));
    }
    let (codebook, codebook_path) = ds.codebook()?;
    let pool = match a.query {
        Some(q) => {
            check_item(&ds, q)?;
            pool_for(&ds, q)
        }
        None if ds.manifest.splits.pool.is_empty() => (0..ds.len()).collect(),
        None => ds.manifest.splits.pool.clone(),
    };
    let pool_x = ds.embeddings.select(&pool);
    let qpool = quantize_pool(&pool_x, &codebook)?;
    if let Some(out) = &a.out {
        write_quantized(out, &qpool, &codebook_path)?;
    }

    let Some(q) = a.query else {
        let recon = qpool.reconstruct(&codebook)?;
        let mse = (recon.data() - pool_x.data()).norm_squared() / pool.len() as f64;
        let mut t = Table::new("quantize", &["items", "tokens", "codewords", "mean_squared_error", "out"]);
        t.push(vec![
            json!(pool.len()),
            json!(qpool.tokens()),
            json!(codebook.len()),
            num(mse),
            a.out.as_ref().map_or(Value::Null, |p| json!(p.display().to_string())),
        ]);
        return Ok(t);
    };
    let scores = lut_score(&ds.embeddings.column(q).into_owned(), &codebook, &qpool)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    let mut t = Table::new("quantize", &["rank", "item", "score"]);
    for (r, &p) in order.iter().take(ctx.config.eval.k).enumerate() {
        t.push(vec![json!(r + 1), json!(pool[p]), num(scores[p])]);
    }
    t.meta.insert("query".into(), json!(q));
    Ok(t)
}

pub fn cooccur(ctx: &Context, a: &CooccurArgs) -> CliResult<Table> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let items = split_indices(&ds, a.split)?;
    let dict = &ck.dictionary;
    let sp = &ctx.config.sparse;
    let codes: Vec<DVector<f64>> = items
        .par_iter()
        .map(|&i| {
            sparse_code_nn_omp(dict, &ds.embeddings.column(i), sp.max_atoms, sp.residual_tol)
                .map(|c| c.coefficients)
        })
        .collect::<slics::Result<_>>()?;
    let co = cooccurrence_matrix(codes.iter())?;
    let names = ds.labels.names();
    let atom_name = |m: usize| {
        let j = dict.group_of_atom(m);
        format!("{}_{}", names[j], m - dict.group_range(j).start)
    };

    let mut columns = vec!["atom".to_string(), "concept".to_string()];
    columns.extend((0..dict.n_atoms()).map(atom_name));
    let mut t = Table {
        command: "cooccur",
        columns,
        rows: Vec::new(),
        meta: Default::default(),
    };
    for m in 0..dict.n_atoms() {
        let mut row = vec![json!(atom_name(m)), json!(names[dict.group_of_atom(m)])];
        row.extend(co.matrix.row(m).iter().map(|&v| num(v)));
        t.push(row);
    }
    if !co.never_active.is_empty() {
        log::warn!("{} atoms were never selected", co.never_active.len());
    }
    t.meta.insert("never_active".into(), json!(co.never_active));
    t.meta.insert("items".into(), json!(items.len()));
    Ok(t)
}

pub fn pseudolabel(ctx: &Context, a: &PseudolabelArgs) -> CliResult<Table> {
    let ds = Dataset::load(&a.manifest)?;
    let protos = ds.prototypes()?;
    let Some(s_tilde) = ctx.config.pseudo_label.s_tilde else {
        return Err(CliError::Usage(format!(
            "--s-tilde is required (the dataset's labels suggest {})",
            estimate_s_tilde(&ds.labels)
        )));
    };
    let labels = zero_shot_multilabel(&ds.raw, &protos, s_tilde)?;
    if let Some(out) = &a.out {
        write_labels(out, &labels)?;
    }
    let mut cols = vec!["item"];
    cols.extend(labels.names().iter().map(String::as_str));
    let mut t = Table::new("pseudolabel", &cols);
    for (i, row) in labels.rows().enumerate() {
        let mut r = vec![json!(i)];
        r.extend(row.iter().map(|&v| json!(v)));
        t.push(r);
    }
    Ok(t)
}

pub fn align(ctx: &Context, a: &AlignArgs) -> CliResult<Table> {
    let (x, _) = read_matrix(&a.source)?;
    let (y, _) = read_matrix(&a.target)?;
    let map = procrustes_align(&x, &y)?;
    let residual = (&map.rotation * &x - &y).norm();
    let identity = if x.shape() == y.shape() { (&x - &y).norm() } else { f64::NAN };
    if let Some(out) = &a.out {
        write_matrix(out, &map.rotation, ctx.config.dtype)?;
    }
    let mut t = Table::new(
        "align",
        &["dim", "pairs", "residual", "identity_residual", "orthogonality_error"],
    );
    t.push(vec![
        json!(x.nrows()),
        json!(x.ncols()),
        num(residual),
        num(identity),
        num(map.orthogonality_error()),
    ]);
    Ok(t)
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> slics::Result<T>) -> slics::Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn bench(ctx: &Context, a: &BenchArgs) -> CliResult<Table> {
    let data = generate(&PlantedConfig {
        concepts: a.concepts,
        dim: a.dim,
        items: a.items,
        max_active: a.concepts.min(3),
        noise: 0.01,
        seed: ctx.seed(),
        ..Default::default()
    })?;
    let x = &data.embeddings;
    let dict = &data.dictionary;
    let n = x.len();
    let mut rows: Vec<(&str, f64)> = Vec::new();

    rows.push(("coefficient_stage", best_of(a.repeats, || coefficient_stage(x, &data.labels, dict, 0.0))?));
    let mut one = ctx.config.train_config(a.concepts);
    one.group_sizes = dict.group_sizes().to_vec();
    one.iterations = 1;
    rows.push(("train_epoch", best_of(a.repeats, || train(x, &data.labels, &one))?));
    let active: Vec<Vec<usize>> = (0..n).map(|i| data.labels.active(i)).collect();
    rows.push(("decompose", best_of(a.repeats, || decompose_batch(dict, x, &active))?));
    let unit = x.unit_normalize()?;
    let pool = ScoringPool::new(&unit);
    rows.push((
        "rank_pool",
        best_of(a.repeats, || Ok((0..n).map(|i| pool.rank(&unit.column(i).into_owned(), 20, Some(i))).collect::<Vec<_>>()))?,
    ));
    let tokens = [8, 4, 2, 1].into_iter().find(|t| a.dim % t == 0).unwrap_or(1);
    let td = a.dim / tokens;
    let tx = normalize_tokenwise(&TokenBatch::new(x.data().clone(), tokens, td)?)?;
    let k = n.min(64);
    let cb = Codebook::from_raw(DMatrix::from_fn(td, k, |r, c| x.data()[(r, c)]))?;
    let qp = quantize_pool(&tx, &cb)?;
    let q = tx.column(0).into_owned();
    rows.push(("lut_score", best_of(a.repeats, || lut_score(&q, &cb, &qp))?));

    let mut t = Table::new("bench", &["op", "items", "seconds", "microseconds_per_item"]);
    for (op, secs) in rows {
        t.push(vec![json!(op), json!(n), num(secs), num(secs * 1e6 / n as f64)]);
    }
    Ok(t)
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> CliResult<Table> {
    let cfg = PlantedConfig {
        concepts: a.concepts,
        dim: a.dim,
        atoms_per_concept: a.atoms,
        items: a.items,
        max_active: a.max_active,
        noise: a.noise,
        seed: ctx.seed(),
        ..Default::default()
    };
    let files = write_synthetic(&a.out, &cfg, a.tokens)?;
    let mut t = Table::new(
        "synth",
        &["manifest", "token_manifest", "items", "concepts", "dim", "atoms_per_concept", "planted_objective"],
    );
    t.push(vec![
        json!(files.manifest.display().to_string()),
        files.token_manifest.map_or(Value::Null, |p| json!(p.display().to_string())),
        json!(a.items),
        json!(a.concepts),
        json!(a.dim),
        json!(a.atoms),
        num(files.dataset.planted_objective()),
    ]);
    Ok(t)
}
