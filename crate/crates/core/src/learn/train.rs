//! Alternating minimization of `(1/N) ||X - B A||_F^2` subject to
//! non-negative, label-masked coefficients.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::learn::atom::{update_atom_alternating, update_atom_simultaneous, ResidualWorkspace};
use crate::learn::init::{random_sample_init, svd_init, InitMethod};
use crate::nnls::GroupSolver;
use crate::types::{
    CoefficientMatrix, ConceptLabelMatrix, EmbeddingMatrix, GroupDictionary, Tolerances, ZERO_NORM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Rank-1 SVD of the residual with the majority sign rule.
    #[default]
    SimultaneousSvd,
    /// Block-coordinate descent on atom then coefficients.
    AlternatingBcd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Atoms per concept group.
    pub group_sizes: Vec<usize>,
    /// Number of epochs. Zero yields the SVD initialization with one
    /// coefficient stage.
    pub iterations: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub update_mode: UpdateMode,
    /// Rounds of the alternating update (ignored in SVD mode).
    pub power_iterations: usize,
    /// Skip atom updates that would increase the residual error.
    pub monotone_check: bool,
    pub shuffle_seed: u64,
    pub ridge_lambda: f64,
    pub init: InitMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_sizes: Vec::new(),
            iterations: 10,
            batch_size: 0,
            update_mode: UpdateMode::SimultaneousSvd,
            power_iterations: 1,
            monotone_check: false,
            shuffle_seed: 0,
            ridge_lambda: 0.0,
            init: InitMethod::Svd,
        }
    }
}

impl TrainConfig {
    /// `n_groups` groups of `d0` atoms each.
    pub fn uniform(n_groups: usize, d0: usize) -> Self {
        Self {
            group_sizes: vec![d0; n_groups],
            ..Self::default()
        }
    }

    fn validate(&self, n_groups: usize) -> Result<()> {
        check_dim("group_sizes length", n_groups, self.group_sizes.len())?;
        if self.group_sizes.contains(&0) {
            return Err(Error::Invalid("every group needs at least one atom".into()));
        }
        if self.power_iterations == 0 {
            return Err(Error::Invalid("power_iterations must be at least 1".into()));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::Invalid("ridge_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Coefficients,
    Atoms,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub epoch: usize,
    pub batch: usize,
    pub kind: StageKind,
    /// Mean squared reconstruction error over all training items.
    pub objective: f64,
    pub skipped: usize,
    pub reinitialized: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub stages: Vec<StageRecord>,
    /// Atom updates rejected by the monotone check.
    pub skipped_updates: usize,
    /// Dead atoms replaced by a poorly reconstructed item.
    pub reinitialized_atoms: usize,
    /// Atoms with no active item in a mini-batch.
    pub batch_skips: usize,
    /// Alternating updates that fell back to the SVD update.
    pub fallbacks: usize,
    /// Concepts whose initialization was rank deficient.
    pub rank_deficient_groups: Vec<usize>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.objective).collect()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.stages.last().map(|s| s.objective)
    }

    /// One row per stage; `config_hash` is repeated on every row.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("stage,epoch,batch,kind,objective,skipped,reinit,config_hash\n");
        for (i, s) in self.stages.iter().enumerate() {
            let kind = match s.kind {
                StageKind::Coefficients => "coefficients",
                StageKind::Atoms => "atoms",
            };
            let _ = writeln!(
                out,
                "{i},{},{},{kind},{:e},{},{},{config_hash}",
                s.epoch, s.batch, s.objective, s.skipped, s.reinitialized
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub dictionary: GroupDictionary,
    pub coefficients: CoefficientMatrix,
    pub report: TrainReport,
}

/// Callback run after every epoch with the epoch number, the current
/// dictionary and the report so far. Returning `Break` stops training.
pub type EpochHook<'h> = dyn FnMut(usize, &GroupDictionary, &TrainReport) -> ControlFlow<()> + 'h;

/// Mean squared reconstruction error `(1/N) ||X - B A||_F^2`.
pub fn objective(x: &EmbeddingMatrix, dict: &GroupDictionary, coeffs: &CoefficientMatrix) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.data() - dict.atoms() * coeffs.data()).norm_squared() / x.len() as f64
}

/// Solves the label-masked NNLS problem for every item against a fixed
/// dictionary.
pub fn coefficient_stage(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    dict: &GroupDictionary,
    ridge_lambda: f64,
) -> Result<CoefficientMatrix> {
    check_dim("label rows", x.len(), labels.n_items())?;
    check_dim("dictionary dimension", x.dim(), dict.dim())?;
    check_dim("group count", labels.n_concepts(), dict.n_groups())?;
    let mut coeffs = CoefficientMatrix::zeros(dict.group_sizes(), x.len());
    let items: Vec<usize> = (0..x.len()).collect();
    let solved = solve_items(x.data(), labels, dict, ridge_lambda, &items)?;
    for (i, c) in items.into_iter().zip(solved) {
        coeffs.data_mut().set_column(i, &c);
    }
    Ok(coeffs)
}

fn solve_items(
    x: &DMatrix<f64>,
    labels: &ConceptLabelMatrix,
    dict: &GroupDictionary,
    ridge_lambda: f64,
    items: &[usize],
) -> Result<Vec<DVector<f64>>> {
    let solver = GroupSolver::new(dict, ridge_lambda)?;
    items
        .par_iter()
        .map(|&i| {
            let active = labels.active(i);
            assert!(!active.is_empty(), "item {i} has no active concept");
            solver
                .solve(&x.column(i), &active)
                .map(|s| s.coefficients)
                .map_err(|e| e.at_item(i))
        })
        .collect()
}

/// Full-batch training.
pub fn train(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    Trainer::new(x, labels, cfg, None)?.run(0, None)
}

/// Mini-batch training with `cfg.batch_size` (0 or `>= N` is one batch in
/// natural item order, identical to [`train`]).
pub fn train_minibatch(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    Trainer::new(x, labels, cfg, None)?.run(cfg.batch_size, None)
}

/// [`train_minibatch`] with a per-epoch hook.
pub fn train_with_hook(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutput> {
    Trainer::new(x, labels, cfg, None)?.run(cfg.batch_size, Some(hook))
}

/// Resumes training from a saved dictionary (and optionally coefficients),
/// using `cfg.batch_size` and an optional per-epoch hook.
pub fn train_from(
    x: &EmbeddingMatrix,
    labels: &ConceptLabelMatrix,
    cfg: &TrainConfig,
    dictionary: GroupDictionary,
    coefficients: Option<CoefficientMatrix>,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainOutput> {
    Trainer::new(x, labels, cfg, Some((dictionary, coefficients)))?.run(cfg.batch_size, hook)
}

struct Trainer<'a> {
    x: &'a DMatrix<f64>,
    labels: &'a ConceptLabelMatrix,
    cfg: &'a TrainConfig,
    dict: GroupDictionary,
    coeffs: CoefficientMatrix,
    /// `X - B A`, exact for every column between stages.
    residual: DMatrix<f64>,
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    fn new(
        x: &'a EmbeddingMatrix,
        labels: &'a ConceptLabelMatrix,
        cfg: &'a TrainConfig,
        start: Option<(GroupDictionary, Option<CoefficientMatrix>)>,
    ) -> Result<Self> {
        check_dim("label rows", x.len(), labels.n_items())?;
        cfg.validate(labels.n_concepts())?;
        if x.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let mut report = TrainReport::default();
        let (dict, coeffs) = match start {
            Some((dict, coeffs)) => {
                check_dim("dictionary dimension", x.dim(), dict.dim())?;
                if dict.group_sizes() != cfg.group_sizes.as_slice() {
                    return Err(Error::Invalid(
                        "checkpoint group sizes differ from the configuration".into(),
                    ));
                }
                let coeffs = match coeffs {
                    Some(c) => {
                        check_dim("coefficient columns", x.len(), c.n_items())?;
                        if c.group_sizes() != dict.group_sizes() || !c.respects_labels(labels) {
                            return Err(Error::Invalid(
                                "checkpoint coefficients do not match the labels".into(),
                            ));
                        }
                        c
                    }
                    None => CoefficientMatrix::zeros(dict.group_sizes(), x.len()),
                };
                (dict, coeffs)
            }
            None => {
                let init = match cfg.init {
                    InitMethod::Svd => svd_init(x, labels, &cfg.group_sizes)?,
                    InitMethod::RandomSamples => {
                        random_sample_init(x, labels, &cfg.group_sizes, cfg.shuffle_seed)?
                    }
                };
                report.rank_deficient_groups = init.rank_deficient;
                let coeffs = CoefficientMatrix::zeros(init.dictionary.group_sizes(), x.len());
                (init.dictionary, coeffs)
            }
        };
        let residual = x.data() - dict.atoms() * coeffs.data();
        Ok(Self {
            x: x.data(),
            labels,
            cfg,
            dict,
            coeffs,
            residual,
            report,
        })
    }

    fn n_items(&self) -> usize {
        self.x.ncols()
    }

    fn objective(&self) -> f64 {
        self.residual.norm_squared() / self.n_items() as f64
    }

    fn record(&mut self, epoch: usize, batch: usize, kind: StageKind, skipped: usize, reinit: usize) {
        let objective = self.objective();
        self.report.stages.push(StageRecord {
            epoch,
            batch,
            kind,
            objective,
            skipped,
            reinitialized: reinit,
        });
    }

    fn run(mut self, batch_size: usize, mut hook: Option<&mut EpochHook<'_>>) -> Result<TrainOutput> {
        let started = Instant::now();
        let n = self.n_items();
        let all: Vec<usize> = (0..n).collect();
        if self.cfg.iterations == 0 {
            self.coefficient_stage(&all)?;
            self.record(0, 0, StageKind::Coefficients, 0, 0);
        }

        let single = batch_size == 0 || batch_size >= n;
        let mut order = all.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.shuffle_seed);
        for epoch in 1..=self.cfg.iterations {
            if !single {
                order.shuffle(&mut rng);
            }
            let width = if single { n } else { batch_size };
            for (b, chunk) in order.chunks(width).enumerate() {
                let mut batch = chunk.to_vec();
                batch.sort_unstable();
                self.coefficient_stage(&batch)?;
                self.record(epoch, b, StageKind::Coefficients, 0, 0);
                let (skipped, reinit) = self.atom_stage(&batch, single)?;
                if !single {
                    // atoms changed under items outside the batch
                    self.residual = self.x - self.dict.atoms() * self.coeffs.data();
                }
                self.record(epoch, b, StageKind::Atoms, skipped, reinit);
            }
            if let Some(h) = hook.as_deref_mut() {
                if h(epoch, &self.dict, &self.report).is_break() {
                    break;
                }
            }
        }
        self.report.wall_time_secs = started.elapsed().as_secs_f64();
        Ok(TrainOutput {
            dictionary: self.dict,
            coefficients: self.coeffs,
            report: self.report,
        })
    }

    fn coefficient_stage(&mut self, items: &[usize]) -> Result<()> {
        let solved = solve_items(self.x, self.labels, &self.dict, self.cfg.ridge_lambda, items)?;
        for (&i, c) in items.iter().zip(solved) {
            let r = self.x.column(i) - self.dict.atoms() * &c;
            self.residual.set_column(i, &r);
            self.coeffs.data_mut().set_column(i, &c);
        }
        Ok(())
    }

    /// Sequential pass over all atoms restricted to `batch`. Returns the
    /// number of skipped updates and reinitialized atoms.
    fn atom_stage(&mut self, batch: &[usize], full: bool) -> Result<(usize, usize)> {
        let mut skipped = 0;
        let mut reinit = 0;
        let mut reused: Vec<usize> = Vec::new();
        for m in 0..self.dict.n_atoms() {
            let support: Vec<usize> = batch
                .iter()
                .copied()
                .filter(|&l| self.coeffs.data()[(m, l)] != 0.0)
                .collect();
            if support.is_empty() {
                if full {
                    if self.reinitialize(m, &mut reused) {
                        reinit += 1;
                    }
                } else {
                    self.report.batch_skips += 1;
                }
                continue;
            }
            let atom = self.dict.atom(m).into_owned();
            let previous = DVector::from_iterator(
                support.len(),
                support.iter().map(|&l| self.coeffs.data()[(m, l)]),
            );
            let mut e = self.residual.select_columns(&support);
            e.ger(1.0, &atom, &previous, 1.0);
            let ws = ResidualWorkspace::new(support, e, atom, previous)?;
            let update = match self.cfg.update_mode {
                UpdateMode::SimultaneousSvd => update_atom_simultaneous(&ws)?,
                UpdateMode::AlternatingBcd => update_atom_alternating(&ws, self.cfg.power_iterations)?,
            };
            if update.fell_back {
                self.report.fallbacks += 1;
            }
            if self.cfg.monotone_check && update.error_after > update.error_before {
                skipped += 1;
                continue;
            }
            self.dict.atoms_mut().set_column(m, &update.new_atom);
            for (c, &l) in ws.support.iter().enumerate() {
                let beta = update.new_coefficients[c];
                self.coeffs.data_mut()[(m, l)] = beta;
                let r = ws.residual.column(c) - &update.new_atom * beta;
                self.residual.set_column(l, &r);
            }
        }
        self.report.skipped_updates += skipped;
        self.report.reinitialized_atoms += reinit;
        Ok((skipped, reinit))
    }

    /// Replaces a dead atom with the normalized worst-reconstructed item of
    /// its concept. Coefficients stay zero, so the objective is unchanged.
    fn reinitialize(&mut self, m: usize, reused: &mut Vec<usize>) -> bool {
        let concept = self.dict.group_of_atom(m);
        let mut best: Option<(usize, f64)> = None;
        for i in self.labels.items_with(concept) {
            if reused.contains(&i) || self.x.column(i).norm() < ZERO_NORM {
                continue;
            }
            let err = self.residual.column(i).norm_squared();
            if best.map_or(true, |(_, e)| err > e) {
                best = Some((i, err));
            }
        }
        let Some((i, _)) = best else { return false };
        reused.push(i);
        let atom = self.x.column(i).normalize();
        self.dict.atoms_mut().set_column(m, &atom);
        true
    }
}

/// Validates a trained dictionary/coefficient pair against the label mask
/// and the unit-norm invariant.
pub fn check_invariants(
    out: &TrainOutput,
    labels: &ConceptLabelMatrix,
    tol: &Tolerances,
) -> Result<()> {
    for m in 0..out.dictionary.n_atoms() {
        if (out.dictionary.atom(m).norm() - 1.0).abs() > tol.norm {
            return Err(Error::Invalid(format!("atom {m} lost unit norm")));
        }
    }
    if out.coefficients.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("negative coefficient".into()));
    }
    if !out.coefficients.respects_labels(labels) {
        return Err(Error::Invalid("coefficients violate the label mask".into()));
    }
    Ok(())
}
