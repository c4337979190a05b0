//! Evaluation protocol: recovery matrix, paired comparison, Monte Carlo
//! stability, anatomical overlap, and external-pair evaluation.
//!
//! Every random degradation is drawn from a stream keyed by the base seed
//! and the case (and run) identity, so all reports are independent of
//! scheduling and of which methods are evaluated together.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::ExternalPair;
use crate::degrade::{degrade_triplet, sample_recipe, DegradationRecipe, DegradeConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{case_metrics, meaningful_edit_mask, modification_footprint, psnr, CaseMetrics, MetricThresholds, SliceEval};
use crate::phantom::PhantomCase;
use crate::restorer::{forward, gaussian_baseline, nlm_baseline, BaselineParams, ModelParams};
use crate::stream::{self, domain};
use crate::volume::{slice_triplet, Region, SliceTriplet, Volume};

pub const DEFAULT_STABILITY_EPSILON: f64 = 0.005;

/// One center slice to restore. `case_id` identifies the source case so
/// reference-aware test restorers can look up ground truth.
pub struct RestoreRequest<'a> {
    pub case_id: &'a str,
    pub triplet: &'a SliceTriplet,
}

pub trait Restorer: Send + Sync {
    fn name(&self) -> &str;
    fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>>;
}

/// Returns the degraded center slice unchanged.
pub struct Passthrough;

impl Restorer for Passthrough {
    fn name(&self) -> &str {
        "degraded"
    }

    fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
        Ok(req.triplet.center.clone())
    }
}

pub struct GaussianRestorer {
    pub sigma: f64,
}

impl Restorer for GaussianRestorer {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
        gaussian_baseline(&req.triplet.center, self.sigma)
    }
}

pub struct NlmRestorer {
    pub params: BaselineParams,
}

impl Restorer for NlmRestorer {
    fn name(&self) -> &str {
        "nlm"
    }

    fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
        nlm_baseline(&req.triplet.center, &self.params)
    }
}

pub struct BoundedRestorer {
    pub params: ModelParams<f32>,
}

impl Restorer for BoundedRestorer {
    fn name(&self) -> &str {
        "bounded"
    }

    fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
        Ok(forward(req.triplet, &self.params)?.restored)
    }
}

/// Degraded passthrough, Gaussian, NLM, and the bounded model, in that order.
pub fn standard_methods(model: &ModelParams<f32>, baselines: &BaselineParams) -> Result<Vec<Box<dyn Restorer>>> {
    baselines.validate()?;
    Ok(vec![
        Box::new(Passthrough),
        Box::new(GaussianRestorer { sigma: baselines.gaussian_sigma }),
        Box::new(NlmRestorer { params: baselines.clone() }),
        Box::new(BoundedRestorer { params: model.clone() }),
    ])
}

/// Quartile slices `d/4, d/2, 3d/4`, deduplicated for thin volumes.
pub fn eval_slices(depth: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = [depth / 4, depth / 2, (3 * depth) / 4].into_iter().collect();
    set.into_iter().collect()
}

pub fn check_disjoint(train_ids: &[String], cases: &[PhantomCase]) -> Result<()> {
    let train: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let shared: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).filter(|id| train.contains(id)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        let shown: Vec<&str> = shared.iter().take(5).copied().collect();
        Err(Error::CorpusOverlap(format!("{} shared case(s), e.g. {}", shared.len(), shown.join(", "))))
    }
}

pub fn matrix_recipe_seed(base_seed: u64, case_id: &str) -> u64 {
    stream::key(&[domain::MATRIX, base_seed, stream::key_str(case_id)])
}

pub fn stability_recipe_seed(base_seed: u64, case_id: &str, run: usize) -> u64 {
    stream::key(&[domain::STABILITY, base_seed, stream::key_str(case_id), run as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    /// Seed of the degradation recipe the row was evaluated under.
    pub seed: u64,
    pub method: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

struct DegradedCase {
    triplets: Vec<SliceTriplet>,
}

fn degrade_case(case: &PhantomCase, recipe: &DegradationRecipe) -> Result<DegradedCase> {
    let triplets = eval_slices(case.clean.depth())
        .into_iter()
        .map(|z| degrade_triplet(&case.clean, recipe, z))
        .collect::<Result<_>>()?;
    Ok(DegradedCase { triplets })
}

fn score(case: &PhantomCase, d: &DegradedCase, method: &dyn Restorer, t: &MetricThresholds) -> Result<CaseMetrics> {
    let restored: Vec<Array2<f32>> = d
        .triplets
        .iter()
        .map(|tr| method.restore(&RestoreRequest { case_id: &case.case_id, triplet: tr }))
        .collect::<Result<_>>()?;
    let clean: Vec<_> = d.triplets.iter().map(|tr| case.clean.slice(tr.center_index)).collect();
    let target: Vec<_> = d.triplets.iter().map(|tr| case.target.index_axis(Axis(0), tr.center_index)).collect();
    let slices: Vec<SliceEval<'_>> = (0..d.triplets.len())
        .map(|i| SliceEval {
            restored: &restored[i],
            degraded: &d.triplets[i].center,
            clean: &clean[i],
            target: &target[i],
        })
        .collect();
    case_metrics(&slices, t).map_err(|e| match e {
        Error::EmptyMask(m) => Error::EmptyMask(format!("{}: {m}", case.case_id)),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub mean_target_gain: f64,
    pub std_target_gain: f64,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
    pub iatrogenic_rate: f64,
    pub mean_footprint_max: f64,
    pub mean_footprint_fraction: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn summarize(method: &str, rows: &[&CaseRow]) -> MethodSummary {
    let gains: Vec<f64> = rows.iter().map(|r| r.metrics.target_gain).collect();
    let psnrs: Vec<f64> = rows.iter().map(|r| r.metrics.psnr_db).collect();
    let (mg, sg) = mean_std(&gains);
    let (mp, sp) = mean_std(&psnrs);
    let n = rows.len();
    MethodSummary {
        method: method.into(),
        n,
        mean_target_gain: mg,
        std_target_gain: sg,
        mean_psnr_db: mp,
        std_psnr_db: sp,
        iatrogenic_rate: rows.iter().filter(|r| r.metrics.iatrogenic).count() as f64 / n as f64,
        mean_footprint_max: mean_std(&rows.iter().map(|r| r.metrics.footprint_max).collect::<Vec<_>>()).0,
        mean_footprint_fraction: mean_std(&rows.iter().map(|r| r.metrics.footprint_fraction).collect::<Vec<_>>()).0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    /// Case-major, methods in the order given.
    pub rows: Vec<CaseRow>,
    pub summaries: Vec<MethodSummary>,
    pub n_cases: usize,
}

impl MatrixReport {
    pub fn method_rows(&self, method: &str) -> Vec<CaseRow> {
        self.rows.iter().filter(|r| r.method == method).cloned().collect()
    }

    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

pub fn run_recovery_matrix(
    cases: &[PhantomCase],
    methods: &[Box<dyn Restorer>],
    cfg: &DegradeConfig,
    base_seed: u64,
    t: &MetricThresholds,
    exec: Exec,
) -> Result<MatrixReport> {
    cfg.validate()?;
    t.validate()?;
    if cases.is_empty() || methods.is_empty() {
        return Err(Error::InvalidParam("the recovery matrix needs at least one case and one method".into()));
    }
    let per_case = exec.try_map(cases.len(), |i| {
        let case = &cases[i];
        let seed = matrix_recipe_seed(base_seed, &case.case_id);
        let d = degrade_case(case, &sample_recipe(cfg, seed)?)?;
        methods
            .iter()
            .map(|m| {
                Ok(CaseRow {
                    case_id: case.case_id.clone(),
                    seed,
                    method: m.name().into(),
                    metrics: score(case, &d, m.as_ref(), t)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<CaseRow> = per_case.into_iter().flatten().collect();
    let summaries = methods
        .iter()
        .map(|m| summarize(m.name(), &rows.iter().filter(|r| r.method == m.name()).collect::<Vec<_>>()))
        .collect();
    Ok(MatrixReport { rows, summaries, n_cases: cases.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Win => "win",
            Outcome::Tie => "tie",
            Outcome::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub case_id: String,
    pub seed: u64,
    pub gain_a: f64,
    pub gain_b: f64,
    pub delta_target_gain: f64,
    pub psnr_a: f64,
    pub psnr_b: f64,
    pub delta_psnr_db: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub method_a: String,
    pub method_b: String,
    pub n: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate_target_gain: f64,
    pub delta_target_gain: f64,
    pub delta_psnr_db: f64,
    pub rows: Vec<PairedRow>,
}

/// Per-case differences `a - b`; a win is a strictly larger target gain.
pub fn paired_comparison(rows_a: &[CaseRow], rows_b: &[CaseRow]) -> Result<PairedReport> {
    let by_id: BTreeMap<&str, &CaseRow> = rows_b.iter().map(|r| (r.case_id.as_str(), r)).collect();
    let ids_a: BTreeSet<&str> = rows_a.iter().map(|r| r.case_id.as_str()).collect();
    if rows_a.is_empty() || ids_a.len() != rows_a.len() || by_id.len() != rows_b.len() || ids_a != by_id.keys().copied().collect() {
        return Err(Error::InvalidParam("paired comparison needs identical, non-empty, duplicate-free case sets".into()));
    }
    let mut rows = Vec::with_capacity(rows_a.len());
    for a in rows_a {
        let b = by_id[a.case_id.as_str()];
        if a.seed != b.seed {
            return Err(Error::InvalidParam(format!("{}: recipes differ between the compared rows", a.case_id)));
        }
        let d = a.metrics.target_gain - b.metrics.target_gain;
        rows.push(PairedRow {
            case_id: a.case_id.clone(),
            seed: a.seed,
            gain_a: a.metrics.target_gain,
            gain_b: b.metrics.target_gain,
            delta_target_gain: d,
            psnr_a: a.metrics.psnr_db,
            psnr_b: b.metrics.psnr_db,
            delta_psnr_db: a.metrics.psnr_db - b.metrics.psnr_db,
            outcome: if d > 0.0 {
                Outcome::Win
            } else if d < 0.0 {
                Outcome::Loss
            } else {
                Outcome::Tie
            },
        });
    }
    let n = rows.len();
    let count = |o: Outcome| rows.iter().filter(|r| r.outcome == o).count();
    let (wins, ties, losses) = (count(Outcome::Win), count(Outcome::Tie), count(Outcome::Loss));
    Ok(PairedReport {
        method_a: rows_a[0].method.clone(),
        method_b: rows_b[0].method.clone(),
        n,
        wins,
        ties,
        losses,
        win_rate_target_gain: wins as f64 / n as f64,
        delta_target_gain: rows.iter().map(|r| r.delta_target_gain).sum::<f64>() / n as f64,
        delta_psnr_db: rows.iter().map(|r| r.delta_psnr_db).sum::<f64>() / n as f64,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityClass {
    StablyPositive,
    NoiseSensitive,
    Neutral,
    StablyNegative,
}

impl StabilityClass {
    pub const ALL: [StabilityClass; 4] = [
        StabilityClass::StablyPositive,
        StabilityClass::NoiseSensitive,
        StabilityClass::Neutral,
        StabilityClass::StablyNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StabilityClass::StablyPositive => "stably_positive",
            StabilityClass::NoiseSensitive => "noise_sensitive",
            StabilityClass::Neutral => "neutral",
            StabilityClass::StablyNegative => "stably_negative",
        }
    }
}

pub fn classify_case(gains: &[f64], eps: f64) -> Result<StabilityClass> {
    if gains.is_empty() {
        return Err(Error::InvalidParam("cannot classify an empty gain list".into()));
    }
    Ok(if gains.iter().all(|&g| g > eps) {
        StabilityClass::StablyPositive
    } else if gains.iter().all(|&g| g < -eps) {
        StabilityClass::StablyNegative
    } else if gains.iter().all(|&g| g.abs() <= eps) {
        StabilityClass::Neutral
    } else {
        StabilityClass::NoiseSensitive
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub case_id: String,
    pub run: usize,
    pub seed: u64,
    pub target_gain: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCase {
    pub case_id: String,
    pub class: StabilityClass,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRun>,
    pub cases: Vec<StabilityCase>,
    pub run_positive_rate: f64,
    /// Indexed like [`StabilityClass::ALL`].
    pub class_counts: [usize; 4],
    pub epsilon: f64,
}

pub fn mc_stability(
    cases: &[PhantomCase],
    n_seeds: usize,
    restorer: &dyn Restorer,
    cfg: &DegradeConfig,
    base_seed: u64,
    eps: f64,
    t: &MetricThresholds,
    exec: Exec,
) -> Result<StabilityReport> {
    if n_seeds < 2 {
        return Err(Error::InvalidParam("mc stability needs at least 2 seeds per case".into()));
    }
    if cases.is_empty() || !(eps >= 0.0) {
        return Err(Error::InvalidParam("mc stability needs cases and a non-negative epsilon".into()));
    }
    cfg.validate()?;
    t.validate()?;
    let runs = exec.try_map(cases.len() * n_seeds, |k| {
        let (case, run) = (&cases[k / n_seeds], k % n_seeds);
        let seed = stability_recipe_seed(base_seed, &case.case_id, run);
        let d = degrade_case(case, &sample_recipe(cfg, seed)?)?;
        let m = score(case, &d, restorer, t)?;
        Ok::<_, Error>(StabilityRun { case_id: case.case_id.clone(), run, seed, target_gain: m.target_gain, psnr_db: m.psnr_db })
    })?;
    let mut out_cases = Vec::with_capacity(cases.len());
    let mut class_counts = [0usize; 4];
    for chunk in runs.chunks(n_seeds) {
        let gains: Vec<f64> = chunk.iter().map(|r| r.target_gain).collect();
        let class = classify_case(&gains, eps)?;
        class_counts[StabilityClass::ALL.iter().position(|c| *c == class).expect("listed")] += 1;
        out_cases.push(StabilityCase { case_id: chunk[0].case_id.clone(), class, gains });
    }
    let positive = runs.iter().filter(|r| r.target_gain > 0.0).count();
    Ok(StabilityReport {
        run_positive_rate: positive as f64 / runs.len() as f64,
        runs,
        cases: out_cases,
        class_counts,
        epsilon: eps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub case_id: String,
    pub seed: u64,
    pub image_pixels: usize,
    pub edit_count: usize,
    /// Indexed by region code.
    pub region_counts: [usize; 5],
}

impl OverlapRow {
    pub fn share(&self, r: Region) -> f64 {
        self.region_counts[r.code() as usize] as f64 / self.image_pixels as f64
    }

    pub fn edit_fraction(&self) -> f64 {
        self.edit_count as f64 / self.image_pixels as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub region: Region,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub rows: Vec<OverlapRow>,
    /// In [`Region::ALL`] order.
    pub regions: Vec<RegionShare>,
}

impl OverlapReport {
    pub fn region(&self, r: Region) -> &RegionShare {
        &self.regions[r.code() as usize]
    }
}

/// Meaningful edits of `restorer` on the matrix degradations, split by
/// anatomical label over the evaluated slices.
pub fn overlap_analysis(
    cases: &[PhantomCase],
    restorer: &dyn Restorer,
    cfg: &DegradeConfig,
    base_seed: u64,
    t: &MetricThresholds,
    exec: Exec,
) -> Result<OverlapReport> {
    if cases.is_empty() {
        return Err(Error::InvalidParam("overlap analysis needs at least one case".into()));
    }
    cfg.validate()?;
    t.validate()?;
    let rows = exec.try_map(cases.len(), |i| {
        let case = &cases[i];
        let seed = matrix_recipe_seed(base_seed, &case.case_id);
        let d = degrade_case(case, &sample_recipe(cfg, seed)?)?;
        let mut region_counts = [0usize; 5];
        let mut edit_count = 0;
        let mut image_pixels = 0;
        for tr in &d.triplets {
            let restored = restorer.restore(&RestoreRequest { case_id: &case.case_id, triplet: tr })?;
            let edits = meaningful_edit_mask(&restored, &tr.center, t.tau_edit)?;
            let labels = case.labels.labels().index_axis(Axis(0), tr.center_index);
            image_pixels += edits.len();
            for (&e, &code) in edits.iter().zip(labels.iter()) {
                if e {
                    edit_count += 1;
                    region_counts[code as usize] += 1;
                }
            }
        }
        Ok::<_, Error>(OverlapRow { case_id: case.case_id.clone(), seed, image_pixels, edit_count, region_counts })
    })?;
    let regions = Region::ALL
        .iter()
        .map(|&r| {
            let shares: Vec<f64> = rows.iter().map(|row: &OverlapRow| row.share(r)).collect();
            RegionShare {
                region: r,
                mean: shares.iter().sum::<f64>() / shares.len() as f64,
                max: shares.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(OverlapReport { rows, regions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRow {
    pub id: String,
    pub method: String,
    pub psnr_db: f64,
    /// Paired PSNR improvement over the supplied degraded volume.
    pub psnr_gain_db: f64,
    pub max_modification: f64,
    pub edit_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSummary {
    pub method: String,
    pub n: usize,
    pub mean_psnr_db: f64,
    pub mean_psnr_gain_db: f64,
    pub psnr_win_rate: f64,
    pub max_modification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalReport {
    pub rows: Vec<ExternalRow>,
    pub summaries: Vec<ExternalSummary>,
}

impl ExternalReport {
    pub fn summary(&self, method: &str) -> Option<&ExternalSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

fn restore_all(id: &str, v: &Volume, method: &dyn Restorer) -> Result<Array3<f32>> {
    let mut out = Array3::zeros(v.dim());
    for z in 0..v.depth() {
        let tr = slice_triplet(v, z)?;
        let plane = method.restore(&RestoreRequest { case_id: id, triplet: &tr })?;
        out.index_axis_mut(Axis(0), z).assign(&plane);
    }
    Ok(out)
}

/// Whole-volume evaluation of every method on supplied degraded/reference
/// pairs. No degradation is applied here.
pub fn external_eval(
    pairs: &[ExternalPair],
    methods: &[Box<dyn Restorer>],
    t: &MetricThresholds,
    exec: Exec,
) -> Result<ExternalReport> {
    t.validate()?;
    if pairs.is_empty() || methods.is_empty() {
        return Err(Error::InvalidParam("external evaluation needs pairs and methods".into()));
    }
    let per_pair = exec.try_map(pairs.len(), |i| {
        let p = &pairs[i];
        if p.degraded.dim() != p.reference.dim() {
            return Err(Error::Shape(format!("{}: degraded and reference shapes differ", p.id)));
        }
        let base = psnr(p.degraded.voxels(), p.reference.voxels(), t.psnr_cap)?;
        methods
            .iter()
            .map(|m| {
                let restored = restore_all(&p.id, &p.degraded, m.as_ref())?;
                let q = psnr(&restored, p.reference.voxels(), t.psnr_cap)?;
                let fp = modification_footprint(&restored, p.degraded.voxels(), t.tau_edit)?;
                Ok(ExternalRow {
                    id: p.id.clone(),
                    method: m.name().into(),
                    psnr_db: q,
                    psnr_gain_db: q - base,
                    max_modification: fp.max_abs,
                    edit_fraction: fp.fraction,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<ExternalRow> = per_pair.into_iter().flatten().collect();
    let summaries = methods
        .iter()
        .map(|m| {
            let r: Vec<&ExternalRow> = rows.iter().filter(|r| r.method == m.name()).collect();
            let n = r.len() as f64;
            ExternalSummary {
                method: m.name().into(),
                n: r.len(),
                mean_psnr_db: r.iter().map(|x| x.psnr_db).sum::<f64>() / n,
                mean_psnr_gain_db: r.iter().map(|x| x.psnr_gain_db).sum::<f64>() / n,
                psnr_win_rate: r.iter().filter(|x| x.psnr_gain_db > 0.0).count() as f64 / n,
                max_modification: r.iter().map(|x| x.max_modification).fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(ExternalReport { rows, summaries })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::phantom::{generate_corpus, PhantomSpec};

    /// Returns the clean center slice: the best any restorer can do.
    struct CleanOracle(HashMap<String, Volume>);

    impl Restorer for CleanOracle {
        fn name(&self) -> &str {
            "oracle"
        }

        fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
            Ok(self.0[req.case_id].slice(req.triplet.center_index).to_owned())
        }
    }

    /// Writes a constant into every skull pixel and nowhere else.
    struct SkullPainter(HashMap<String, crate::volume::LabelMap>);

    impl Restorer for SkullPainter {
        fn name(&self) -> &str {
            "skull_painter"
        }

        fn restore(&self, req: &RestoreRequest<'_>) -> Result<Array2<f32>> {
            let labels = self.0[req.case_id].labels().index_axis(Axis(0), req.triplet.center_index);
            let mut out = req.triplet.center.clone();
            ndarray::Zip::from(&mut out).and(&labels).for_each(|o, &l| {
                if l == Region::Skull.code() {
                    *o = if *o > 0.5 { 0.0 } else { 1.0 };
                }
            });
            Ok(out)
        }
    }

    fn small_cases(n: usize) -> Vec<PhantomCase> {
        let spec = PhantomSpec { width: 32, height: 32, depth: 8, aneurysm_probability: 1.0, ..Default::default() };
        generate_corpus(&spec, n, Exec::Serial).unwrap()
    }

    fn methods() -> Vec<Box<dyn Restorer>> {
        vec![Box::new(Passthrough), Box::new(GaussianRestorer { sigma: 1.0 })]
    }

    #[test]
    fn quartile_slices() {
        assert_eq!(eval_slices(16), vec![4, 8, 12]);
        assert_eq!(eval_slices(3), vec![0, 1, 2]);
        assert_eq!(eval_slices(1), vec![0]);
        assert_eq!(eval_slices(2), vec![0, 1]);
    }

    #[test]
    fn classification_order() {
        let e = DEFAULT_STABILITY_EPSILON;
        assert_eq!(classify_case(&[0.01, 0.02], e).unwrap(), StabilityClass::StablyPositive);
        assert_eq!(classify_case(&[-0.01, -0.02], e).unwrap(), StabilityClass::StablyNegative);
        assert_eq!(classify_case(&[0.005, -0.005, 0.0], e).unwrap(), StabilityClass::Neutral);
        assert_eq!(classify_case(&[0.01, 0.0], e).unwrap(), StabilityClass::NoiseSensitive);
        assert_eq!(classify_case(&[0.01, -0.01], e).unwrap(), StabilityClass::NoiseSensitive);
        // Boundary: exactly eps is not strictly positive.
        assert_eq!(classify_case(&[0.005, 0.01], e).unwrap(), StabilityClass::NoiseSensitive);
        assert!(classify_case(&[], e).is_err());
    }

    #[test]
    fn matrix_is_scheduling_and_subset_invariant() {
        let cases = small_cases(4);
        let cfg = DegradeConfig::default();
        let t = MetricThresholds::default();
        let a = run_recovery_matrix(&cases, &methods(), &cfg, 7, &t, Exec::Parallel).unwrap();
        let b = run_recovery_matrix(&cases, &methods(), &cfg, 7, &t, Exec::Serial).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 8);
        let only: Vec<Box<dyn Restorer>> = vec![Box::new(GaussianRestorer { sigma: 1.0 })];
        let c = run_recovery_matrix(&cases[2..3], &only, &cfg, 7, &t, Exec::Serial).unwrap();
        assert_eq!(c.rows[0], a.method_rows("gaussian")[2]);
    }

    #[test]
    fn passthrough_is_neutral_and_oracle_never_loses() {
        let cases = small_cases(3);
        let oracle = CleanOracle(cases.iter().map(|c| (c.case_id.clone(), c.clean.clone())).collect());
        let m: Vec<Box<dyn Restorer>> = vec![Box::new(Passthrough), Box::new(oracle)];
        let cfg = DegradeConfig::default();
        let t = MetricThresholds::default();
        let r = run_recovery_matrix(&cases, &m, &cfg, 1, &t, Exec::Serial).unwrap();
        let pass = r.summary("degraded").unwrap();
        assert_eq!(pass.mean_target_gain, 0.0);
        assert_eq!(pass.iatrogenic_rate, 0.0);
        assert_eq!(pass.mean_footprint_max, 0.0);
        for row in r.method_rows("oracle") {
            assert!(row.metrics.target_gain >= 0.0);
            assert_eq!(row.metrics.psnr_db, t.psnr_cap);
        }
        let cmp = paired_comparison(&r.method_rows("oracle"), &r.method_rows("degraded")).unwrap();
        assert_eq!(cmp.losses, 0);
        assert_eq!(cmp.wins + cmp.ties, 3);
    }

    #[test]
    fn paired_comparison_rejects_mismatches() {
        let cases = small_cases(3);
        let cfg = DegradeConfig::default();
        let t = MetricThresholds::default();
        let r = run_recovery_matrix(&cases, &methods(), &cfg, 3, &t, Exec::Serial).unwrap();
        let a = r.method_rows("gaussian");
        let b = r.method_rows("degraded");
        assert!(paired_comparison(&a[..2], &b).is_err());
        let mut reseeded = b.clone();
        reseeded[1].seed ^= 1;
        assert!(paired_comparison(&a, &reseeded).is_err());
        let mut reordered = b.clone();
        reordered.reverse();
        assert_eq!(paired_comparison(&a, &reordered).unwrap(), paired_comparison(&a, &b).unwrap());
        let self_cmp = paired_comparison(&a, &a).unwrap();
        assert_eq!((self_cmp.ties, self_cmp.win_rate_target_gain), (3, 0.0));
    }

    #[test]
    fn oracle_stability_is_never_negative() {
        let cases = small_cases(2);
        let oracle = CleanOracle(cases.iter().map(|c| (c.case_id.clone(), c.clean.clone())).collect());
        let t = MetricThresholds::default();
        let s = mc_stability(&cases, 3, &oracle, &DegradeConfig::default(), 5, DEFAULT_STABILITY_EPSILON, &t, Exec::Parallel).unwrap();
        assert_eq!(s.runs.len(), 6);
        assert!(s.runs.iter().all(|r| r.target_gain >= 0.0));
        assert_eq!(s.class_counts[3], 0);
        assert_eq!(s.class_counts.iter().sum::<usize>(), 2);
        let serial = mc_stability(&cases, 3, &oracle, &DegradeConfig::default(), 5, DEFAULT_STABILITY_EPSILON, &t, Exec::Serial).unwrap();
        assert_eq!(s, serial);
        assert!(mc_stability(&cases, 1, &oracle, &DegradeConfig::default(), 5, 0.005, &t, Exec::Serial).is_err());
    }

    #[test]
    fn identity_restorer_is_neutral_everywhere() {
        let cases = small_cases(2);
        let t = MetricThresholds::default();
        let s = mc_stability(&cases, 2, &Passthrough, &DegradeConfig::default(), 9, DEFAULT_STABILITY_EPSILON, &t, Exec::Serial).unwrap();
        assert!(s.runs.iter().all(|r| r.target_gain == 0.0));
        assert_eq!(s.class_counts, [0, 0, 2, 0]);
        assert_eq!(s.run_positive_rate, 0.0);
    }

    #[test]
    fn swapping_sides_negates_deltas() {
        let cases = small_cases(3);
        let t = MetricThresholds::default();
        let r = run_recovery_matrix(&cases, &methods(), &DegradeConfig::default(), 2, &t, Exec::Serial).unwrap();
        let (a, b) = (r.method_rows("gaussian"), r.method_rows("degraded"));
        let ab = paired_comparison(&a, &b).unwrap();
        let ba = paired_comparison(&b, &a).unwrap();
        assert_eq!(ab.delta_target_gain, -ba.delta_target_gain);
        assert_eq!(ab.delta_psnr_db, -ba.delta_psnr_db);
        assert_eq!((ab.wins, ab.losses), (ba.losses, ba.wins));
    }

    #[test]
    fn overlap_attributes_edits_to_regions() {
        let cases = small_cases(2);
        let painter = SkullPainter(cases.iter().map(|c| (c.case_id.clone(), c.labels.clone())).collect());
        let t = MetricThresholds::default();
        let r = overlap_analysis(&cases, &painter, &DegradeConfig::default(), 0, &t, Exec::Serial).unwrap();
        for row in &r.rows {
            assert!(row.edit_count > 0);
            assert_eq!(row.region_counts[Region::Skull.code() as usize], row.edit_count);
            assert_eq!(row.region_counts.iter().sum::<usize>(), row.edit_count);
        }
        assert!(r.region(Region::Skull).mean > 0.0);
        assert_eq!(r.region(Region::Vessel).max, 0.0);
        let none = overlap_analysis(&cases, &Passthrough, &DegradeConfig::default(), 0, &t, Exec::Serial).unwrap();
        assert!(none.rows.iter().all(|row| row.edit_count == 0));
    }

    #[test]
    fn disjointness_is_enforced() {
        let cases = small_cases(2);
        assert!(check_disjoint(&["ph-x".into()], &cases).is_ok());
        let err = check_disjoint(&[cases[1].case_id.clone()], &cases).unwrap_err();
        assert!(matches!(err, Error::CorpusOverlap(_)));
    }

    #[test]
    fn external_passthrough_has_no_gain() {
        let spec = crate::corpus::ExternalSpec {
            phantom: PhantomSpec { width: 32, height: 32, depth: 3, ..Default::default() },
            ..Default::default()
        };
        let pairs = crate::corpus::generate_external_pairs(&spec, 2, Exec::Serial).unwrap();
        let r = external_eval(&pairs, &methods(), &MetricThresholds::default(), Exec::Serial).unwrap();
        let p = r.summary("degraded").unwrap();
        assert_eq!((p.mean_psnr_gain_db, p.psnr_win_rate, p.max_modification), (0.0, 0.0, 0.0));
        assert!(r.summary("gaussian").unwrap().max_modification > 0.0);
    }
}
