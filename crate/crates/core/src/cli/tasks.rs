//! One function per `run` task.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{from_table, RunConfig};
use super::output::RunDir;
use crate::datastore::{
    assign_folds, fold_class_counts, load_cohort, read_manifest_entries, write_manifest_only, Cohort,
};
use crate::error::{Error, Result};
use crate::evalheads::{
    build_prototypes, fit_linear_probe, probe_lambda_with, run_fewshot, topk_nearest_to_prototype, FeatureBank,
    LambdaRule, DEFAULT_QUERY_PER_CLASS, PROBE_MAX_ITERATIONS,
};
use crate::metrics::{
    aggregate_folds, balanced_accuracy, bootstrap_ci, multiclass_auroc, roc_points, weighted_f1, BootstrapOptions,
    ConfusionMatrix, MetricEntry, MetricReport,
};
use crate::mil::{heatmap_grid, predict_slides, train_mil, Bag, MilModel, MilTrainConfig};
use crate::numerics::{argmax, DenseMatrix};
use crate::sampler::{build_balanced_dataset, DEFAULT_RATIO_TOLERANCE, DEFAULT_TUMOR_THRESHOLD};
use crate::screening::{
    apply_screening, calibrate_per_site, calibrate_threshold, missed_cases_jsonl, positive_label_rule, site_report,
    OperatingPoint, ScreeningLabel, ScreeningRecord, ScreeningTaxonomy, DEFAULT_TARGET_SENSITIVITY,
};
use crate::survival::{evaluate_risk, train_risk_model, RiskTrainConfig, SurvivalBags};

pub fn mil_model_name(fold: usize) -> String {
    format!("mil_fold{fold}.dgmm")
}

pub fn risk_model_name(fold: usize) -> String {
    format!("risk_fold{fold}.dgrm")
}

fn load(cfg: &RunConfig) -> Result<Cohort> {
    load_cohort(cfg.cohort_path()?)
}

/// The configured fold, or every fold of the cohort.
fn folds_to_run(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<usize>> {
    let k = cohort
        .n_folds()
        .ok_or_else(|| Error::InvalidInput("cohort has slides without a fold; run the folds task first".into()))?;
    match cfg.fold()? {
        Some(f) if f >= k => Err(Error::Config(format!("fold {f} out of range for {k} folds"))),
        Some(f) => Ok(vec![f]),
        None => Ok((0..k).collect()),
    }
}

fn labels_of(cohort: &Cohort, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let s = &cohort.slides[i];
            s.label.ok_or_else(|| Error::InvalidInput(format!("slide {} has no label", s.slide_id)))
        })
        .collect()
}

fn mean_features(cohort: &Cohort, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| cohort.slides[i].mean_feature()).collect()
}

fn bootstrap_replicates(cfg: &RunConfig) -> Result<usize> {
    let b = cfg.bootstrap()?;
    if b == 0 {
        return Err(Error::Config("bootstrap replicates must be >= 1".into()));
    }
    Ok(b)
}

/// Balanced accuracy, weighted F1 and AUROC with percentile intervals.
/// Metric `m` of fold `f` resamples with seed `seed + 16f + m`.
fn classification_report(
    labels: &[usize],
    probs: &[Vec<f64>],
    n_classes: usize,
    replicates: usize,
    seed: u64,
    fold: usize,
) -> Result<MetricReport> {
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let bal = |idx: &[usize]| {
        let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| predicted[i]).collect();
        ConfusionMatrix::from_labels(&t, &p, n_classes).and_then(|cm| balanced_accuracy(&cm)).ok()
    };
    let f1 = |idx: &[usize]| {
        let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| predicted[i]).collect();
        ConfusionMatrix::from_labels(&t, &p, n_classes).and_then(|cm| weighted_f1(&cm)).ok()
    };
    let auc = |idx: &[usize]| {
        let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
        multiclass_auroc(&p, &t, n_classes).ok()
    };
    let base = seed.wrapping_add(16 * fold as u64);
    let n = labels.len();
    let mut out = MetricReport::new();
    let metrics: [(&str, &(dyn Fn(&[usize]) -> Option<f64> + Sync)); 3] =
        [("balanced_accuracy", &bal), ("weighted_f1", &f1), ("auroc", &auc)];
    for (m, (name, f)) in metrics.into_iter().enumerate() {
        match bootstrap_ci(f, n, &BootstrapOptions::new(replicates, base.wrapping_add(m as u64))) {
            Ok(ci) => {
                out.insert(name.to_string(), MetricEntry::from(ci));
            }
            Err(Error::Undefined(msg)) => warn!("fold {fold}: {name} undefined ({msg})"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FoldMetrics {
    fold: usize,
    n_test: usize,
    metrics: MetricReport,
}

fn roc_csv(probs: &[Vec<f64>], labels: &[usize]) -> Result<String> {
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let mut s = String::from("fpr,tpr,threshold\n");
    for (fpr, tpr, t) in roc_points(&scores, &bin)? {
        s.push_str(&format!("{fpr},{tpr},{t}\n"));
    }
    Ok(s)
}

pub fn folds(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("folds")?;
    let manifest = cfg.cohort_path()?;
    let k = cfg.folds()?;
    let mut cohort = load_cohort(&manifest)?;
    assign_folds(&mut cohort, k, seed)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let abs = |rel: &str| -> Result<String> {
        let p = base.join(rel);
        let p = p.canonicalize().map_err(|e| Error::io(&p, e))?;
        Ok(p.to_string_lossy().into_owned())
    };
    let entries = read_manifest_entries(&manifest)?;
    let features = entries.iter().map(|e| abs(&e.feature_file)).collect::<Result<Vec<_>>>()?;
    let probs = entries
        .iter()
        .map(|e| e.roi_tumor_probs_file.as_deref().map(abs).transpose())
        .collect::<Result<Vec<_>>>()?;
    write_manifest_only(&cohort, run.root(), &features, &probs)?;
    run.register("manifest.jsonl")?;
    run.register(crate::datastore::COHORT_HEADER_FILE)?;
    #[derive(Serialize)]
    struct Counts {
        folds: usize,
        class_names: Vec<String>,
        counts: Vec<Vec<usize>>,
    }
    run.write_report(
        "folds.json",
        Counts { folds: k, class_names: cohort.class_names.clone(), counts: fold_class_counts(&cohort, k) },
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerSection {
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_TUMOR_THRESHOLD
}

fn default_tolerance() -> f64 {
    DEFAULT_RATIO_TOLERANCE
}

pub fn sample_rois(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("sample-rois")?;
    let sec: SamplerSection = cfg.section("sampler", false)?;
    let mut cohort = load(cfg)?;
    // Without stored ROI probabilities, score patches with a trained model:
    // p(tumor) = 1 - p(class 0).
    if cohort.slides.iter().any(|s| s.roi_tumor_probs.is_none()) {
        let dir = cfg.optional_input("model_dir")?.ok_or_else(|| {
            Error::InvalidInput("slides lack ROI probabilities and no inputs.model_dir was given".into())
        })?;
        let model = MilModel::load(dir.join(mil_model_name(cfg.fold()?.unwrap_or(0))))?;
        for s in cohort.slides.iter_mut().filter(|s| s.roi_tumor_probs.is_none()) {
            let p = model.patch_probabilities(&Bag::from_slide(s)?)?;
            s.roi_tumor_probs = Some(p.iter().map(|r| 1.0 - r[0]).collect());
        }
    }
    let refined = build_balanced_dataset(&cohort.slides, sec.threshold, sec.tolerance, seed)?;
    if refined.unbalanced_warning {
        warn!("one ROI class is empty; the refined dataset is unbalanced");
    }
    run.write_text("refined.jsonl", &refined.to_jsonl())?;
    #[derive(Serialize)]
    struct Payload<'a> {
        threshold: f64,
        tolerance: f64,
        summary: crate::sampler::RefinedSummary,
        per_slide: &'a [crate::sampler::SlideProvenance],
    }
    run.write_report(
        "refined_summary.json",
        Payload { threshold: sec.threshold, tolerance: sec.tolerance, summary: refined.summary(), per_slide: &refined.per_slide },
    )?;
    Ok(())
}

pub fn train_mil_task(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    cfg.require_seed("train-mil")?;
    let train_cfg: MilTrainConfig = cfg.section("mil", true)?;
    train_cfg.validate()?;
    let cohort = load(cfg)?;
    let mut logs = Vec::new();
    for f in folds_to_run(cfg, &cohort)? {
        info!("training MIL fold {f}");
        let (model, log) = train_mil(&cohort, f, &train_cfg)?;
        run.write_bytes(&mil_model_name(f), &model.to_bytes())?;
        logs.push(serde_json::json!({ "fold": f, "log": log }));
    }
    run.write_report("train_mil.json", serde_json::json!({ "config": train_cfg, "folds": logs }))?;
    Ok(())
}

pub fn eval_mil(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("eval-mil")?;
    let replicates = bootstrap_replicates(cfg)?;
    let dir = cfg.input("model_dir")?;
    let cohort = load(cfg)?;
    let c = cohort.n_classes();
    let mut folds = Vec::new();
    for f in folds_to_run(cfg, &cohort)? {
        let model = MilModel::load(dir.join(mil_model_name(f)))?;
        let test = cohort.split(f)?.test;
        let preds = predict_slides(&cohort, &test, &model)?;
        let labels = labels_of(&cohort, &test)?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
        let metrics = classification_report(&labels, &probs, c, replicates, seed, f)?;
        run.write_jsonl(&format!("predictions_fold{f}.jsonl"), &preds)?;
        if c == 2 {
            match roc_csv(&probs, &labels) {
                Ok(s) => {
                    run.write_text(&format!("roc_fold{f}.csv"), &s)?;
                }
                Err(e) => warn!("fold {f}: no ROC curve ({e})"),
            }
        }
        folds.push(FoldMetrics { fold: f, n_test: test.len(), metrics });
    }
    let aggregate = aggregate_folds(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
    run.write_report(
        "eval_mil.json",
        serde_json::json!({ "bootstrap_replicates": replicates, "folds": folds, "aggregate": aggregate }),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeSection {
    #[serde(default)]
    lambda_rule: LambdaRule,
    /// Overrides the λ rule.
    lambda: Option<f64>,
    #[serde(default = "default_probe_iterations")]
    max_iterations: usize,
}

fn default_probe_iterations() -> usize {
    PROBE_MAX_ITERATIONS
}

pub fn probe(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("probe")?;
    let replicates = bootstrap_replicates(cfg)?;
    let sec: ProbeSection = cfg.section("probe", false)?;
    let cohort = load(cfg)?;
    let c = cohort.n_classes();
    let lambda = match sec.lambda {
        Some(l) => l,
        None => probe_lambda_with(cohort.dim, c, sec.lambda_rule)?,
    };
    let mut folds = Vec::new();
    let mut fits = Vec::new();
    for f in folds_to_run(cfg, &cohort)? {
        let split = cohort.split(f)?;
        let mut train = split.train.clone();
        if split.val != split.train {
            train.extend(&split.val);
        }
        let x = DenseMatrix::from_rows(&mean_features(&cohort, &train))?;
        let probe = fit_linear_probe(&x, &labels_of(&cohort, &train)?, c, lambda, sec.max_iterations)?;
        if !probe.converged {
            warn!("fold {f}: probe stopped at the {}-iteration cap", sec.max_iterations);
        }
        let probs = mean_features(&cohort, &split.test)
            .iter()
            .map(|v| probe.predict_proba(v))
            .collect::<Result<Vec<_>>>()?;
        let labels = labels_of(&cohort, &split.test)?;
        let metrics = classification_report(&labels, &probs, c, replicates, seed, f)?;
        fits.push(serde_json::json!({
            "fold": f, "converged": probe.converged, "iterations": probe.iterations, "objective": probe.objective,
        }));
        folds.push(FoldMetrics { fold: f, n_test: labels.len(), metrics });
    }
    let aggregate = aggregate_folds(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
    run.write_report(
        "probe.json",
        serde_json::json!({
            "lambda": lambda, "max_iterations": sec.max_iterations, "bootstrap_replicates": replicates,
            "fits": fits, "folds": folds, "aggregate": aggregate,
        }),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FewShotSection {
    shots: Option<Vec<usize>>,
    #[serde(default = "default_episodes")]
    episodes: usize,
    ways: Option<usize>,
    #[serde(default = "default_query")]
    query_per_class: usize,
}

fn default_episodes() -> usize {
    1000
}

fn default_query() -> usize {
    DEFAULT_QUERY_PER_CLASS
}

pub fn fewshot(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("fewshot")?;
    let sec: FewShotSection = cfg.section("fewshot", false)?;
    let cohort = load(cfg)?;
    let all: Vec<usize> = (0..cohort.slides.len()).collect();
    let bank = FeatureBank::from_labelled(&mean_features(&cohort, &all), &labels_of(&cohort, &all)?, cohort.n_classes())?;
    let ways = sec.ways.unwrap_or(cohort.n_classes());
    let shots = match &sec.shots {
        Some(s) => s.clone(),
        // Powers of two up to 256 that every class can supply.
        None => {
            let smallest = bank.classes.iter().map(Vec::len).min().unwrap_or(0);
            let room = smallest.saturating_sub(sec.query_per_class);
            (0..=8).map(|e| 1usize << e).filter(|&k| k <= room).collect()
        }
    };
    if shots.is_empty() {
        return Err(Error::Unsatisfiable("no shot count fits the smallest class".into()));
    }
    let report = run_fewshot(&bank, &shots, sec.episodes, ways, sec.query_per_class, seed)?;
    if let Some(&k) = report.skipped.first() {
        return Err(Error::Unsatisfiable(format!("{k}-shot {ways}-way episodes exceed the class sizes")));
    }
    let mut csv = String::from("shots,episodes,median,q25,q75,min,max,mean\n");
    for r in &report.results {
        csv.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.shots, r.episodes, r.median, r.q25, r.q75, r.min, r.max, r.mean));
    }
    run.write_text("fewshot_quartiles.csv", &csv)?;
    run.write_report("fewshot.json", &report)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveSection {
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    5
}

pub fn retrieve(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let sec: RetrieveSection = cfg.section("retrieve", false)?;
    let cohort = load(cfg)?;
    // Prototypes from the non-test folds, candidates from the test fold; the
    // whole cohort plays both roles when there are no folds.
    let (reference, candidates): (Vec<usize>, Vec<usize>) = match cohort.n_folds() {
        Some(_) => {
            let f = cfg.fold()?.unwrap_or(0);
            let s = cohort.split(f)?;
            let mut r = s.train.clone();
            if s.val != s.train {
                r.extend(&s.val);
            }
            r.sort_unstable();
            (r, s.test)
        }
        None => ((0..cohort.slides.len()).collect(), (0..cohort.slides.len()).collect()),
    };
    let index = build_prototypes(&mean_features(&cohort, &reference), &labels_of(&cohort, &reference)?, &cohort.class_names)?;
    let cands: Vec<(String, Vec<f64>)> =
        candidates.iter().map(|&i| (cohort.slides[i].slide_id.clone(), cohort.slides[i].mean_feature())).collect();
    let mut hits = Vec::new();
    for c in 0..cohort.n_classes() {
        hits.extend(topk_nearest_to_prototype(&index, c, sec.k, &cands)?);
    }
    run.write_jsonl("retrieval.jsonl", &hits)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurvivalEval {
    #[serde(default = "default_quantile")]
    quantile: f64,
}

fn default_quantile() -> f64 {
    0.5
}

pub fn survival(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    cfg.require_seed("survival")?;
    let mut table = cfg.section_table("survival")?;
    let eval: SurvivalEval = from_table("survival", table.remove("quantile").map(|q| {
        let mut t = toml::Table::new();
        t.insert("quantile".into(), q);
        t
    }).unwrap_or_default())?;
    if !table.contains_key("seed") {
        table.insert("seed".into(), toml::Value::Integer(cfg.require_seed("survival")? as i64));
    }
    let train_cfg: RiskTrainConfig = from_table("survival", table)?;
    train_cfg.validate()?;
    let cohort = load(cfg)?;
    let mut folds = Vec::new();
    for f in folds_to_run(cfg, &cohort)? {
        info!("training risk model fold {f}");
        let (model, log) = train_risk_model(&cohort, f, &train_cfg)?;
        run.write_bytes(&risk_model_name(f), &model.to_bytes())?;
        let test = SurvivalBags::from_cohort(&cohort, &cohort.split(f)?.test)?;
        let theta = model.risks(&test.bags)?;
        let ev = evaluate_risk(&theta, &test.records, eval.quantile)?;
        run.write_text(&format!("km_low_fold{f}.csv"), &ev.km_low.to_csv())?;
        run.write_text(&format!("km_high_fold{f}.csv"), &ev.km_high.to_csv())?;
        let risks: Vec<_> = test
            .slide_ids
            .iter()
            .zip(&theta)
            .map(|(id, r)| serde_json::json!({ "slide_id": id, "risk": r }))
            .collect();
        run.write_jsonl(&format!("risk_fold{f}.jsonl"), &risks)?;
        folds.push(serde_json::json!({ "fold": f, "report": ev.report, "training": log }));
    }
    run.write_report(
        "survival.json",
        serde_json::json!({ "config": train_cfg, "quantile": eval.quantile, "folds": folds }),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScreeningSection {
    #[serde(default = "default_target")]
    target_sensitivity: f64,
    #[serde(default)]
    per_site: bool,
    #[serde(default)]
    taxonomy: ScreeningTaxonomy,
}

fn default_target() -> f64 {
    DEFAULT_TARGET_SENSITIVITY
}

/// Calibrated thresholds: one pooled point, or one per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoints {
    pub pooled: Option<OperatingPoint>,
    pub per_site: BTreeMap<String, OperatingPoint>,
}

struct Scored {
    slide_id: String,
    site: String,
    positive: bool,
    score: f64,
}

fn read_payload<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_value(v["payload"].take()).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Schema { line: i + 1, message: format!("{}: {e}", path.display()) }))
        .collect()
}

/// Screening score of every slide in `idx`: from `inputs.scores` when given,
/// else the summed probability of the positive classes under the fold's MIL
/// model.
fn screening_scores(cfg: &RunConfig, cohort: &Cohort, idx: &[usize], fold: usize, tax: &ScreeningTaxonomy) -> Result<Vec<Scored>> {
    tax.validate()?;
    let positive: Vec<bool> = cohort
        .class_names
        .iter()
        .map(|c| positive_label_rule(c, tax).map(|l| l == ScreeningLabel::Positive))
        .collect::<Result<_>>()?;
    let labels = labels_of(cohort, idx)?;
    let scores: Vec<f64> = match cfg.optional_input("scores")? {
        Some(p) => {
            #[derive(Deserialize)]
            struct Row {
                slide_id: String,
                score: f64,
            }
            let map: BTreeMap<String, f64> = read_jsonl::<Row>(&p)?.into_iter().map(|r| (r.slide_id, r.score)).collect();
            idx.iter()
                .map(|&i| {
                    let id = &cohort.slides[i].slide_id;
                    map.get(id).copied().ok_or_else(|| Error::InvalidInput(format!("no score for slide {id}")))
                })
                .collect::<Result<_>>()?
        }
        None => {
            let model = MilModel::load(cfg.input("model_dir")?.join(mil_model_name(fold)))?;
            predict_slides(cohort, idx, &model)?
                .iter()
                .map(|p| p.probabilities.iter().zip(&positive).filter(|x| *x.1).map(|x| x.0).sum::<f64>().clamp(0.0, 1.0))
                .collect()
        }
    };
    Ok(idx
        .iter()
        .zip(labels)
        .zip(scores)
        .map(|((&i, l), score)| Scored {
            slide_id: cohort.slides[i].slide_id.clone(),
            site: cohort.slides[i].site.clone(),
            positive: positive[l],
            score,
        })
        .collect())
}

pub fn screen_calibrate(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let sec: ScreeningSection = cfg.section("screening", false)?;
    let cohort = load(cfg)?;
    let fold = cfg.fold()?.unwrap_or(0);
    let val = cohort.split(fold)?.val;
    let rows = screening_scores(cfg, &cohort, &val, fold, &sec.taxonomy)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.positive).collect();
    let points = if sec.per_site {
        let sites: Vec<String> = rows.iter().map(|r| r.site.clone()).collect();
        OperatingPoints { pooled: None, per_site: calibrate_per_site(&sites, &scores, &labels, sec.target_sensitivity)? }
    } else {
        OperatingPoints {
            pooled: Some(calibrate_threshold(&scores, &labels, sec.target_sensitivity)?),
            per_site: BTreeMap::new(),
        }
    };
    run.write_report("operating_point.json", &points)?;
    Ok(())
}

pub fn screen_apply(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let sec: ScreeningSection = cfg.section("screening", false)?;
    let points: OperatingPoints = read_payload(&cfg.input("operating_point")?)?;
    let cohort = load(cfg)?;
    let fold = cfg.fold()?.unwrap_or(0);
    let test = cohort.split(fold)?.test;
    let rows = screening_scores(cfg, &cohort, &test, fold, &sec.taxonomy)?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let op = match &points.pooled {
            Some(op) => op,
            None => points
                .per_site
                .get(&r.site)
                .ok_or_else(|| Error::InvalidInput(format!("no operating point for site {:?}", r.site)))?,
        };
        let flagged = apply_screening(&[r.score], op)[0];
        out.push(ScreeningRecord { slide_id: r.slide_id, site: r.site, positive: r.positive, flagged, score: r.score });
    }
    run.write_jsonl("flags.jsonl", &out)?;
    Ok(())
}

pub fn screen_report(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let seed = cfg.require_seed("screen-report")?;
    let replicates = bootstrap_replicates(cfg)?;
    let records: Vec<ScreeningRecord> = read_jsonl(&cfg.input("flags")?)?;
    let report = site_report(&records, replicates, seed)?;
    run.write_text("screening_sites.csv", &report.to_csv())?;
    run.write_text("missed_cases.jsonl", &missed_cases_jsonl(&records)?)?;
    run.write_report("screening_report.json", &report)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapSection {
    slides: Option<Vec<String>>,
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

pub fn heatmap(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let sec: HeatmapSection = cfg.section("heatmap", false)?;
    let cohort = load(cfg)?;
    let fold = cfg.fold()?.unwrap_or(0);
    let model = MilModel::load(cfg.input("model_dir")?.join(mil_model_name(fold)))?;
    let idx: Vec<usize> = match &sec.slides {
        Some(ids) => ids
            .iter()
            .map(|id| cohort.slide_index(id).ok_or_else(|| Error::InvalidInput(format!("unknown slide {id:?}"))))
            .collect::<Result<_>>()?,
        None => (0..cohort.slides.len()).collect(),
    };
    for i in idx {
        let s = &cohort.slides[i];
        let att = model.attention_weights(&Bag::from_slide(s)?)?;
        let grid = heatmap_grid(s, &att)?;
        let stem = format!("heatmaps/{}", file_stem(&s.slide_id));
        run.write_text(&format!("{stem}.csv"), &grid.to_csv())?;
        run.write_bytes(&format!("{stem}.pgm"), &grid.to_pgm())?;
    }
    Ok(())
}
