use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use epistemic_core::attention::repetition_experiment;
use epistemic_core::backend::{HttpBackend, OracleEntry, SyntheticOracle};
use epistemic_core::experiments::{
    calibrate_evaluate, demo_attention, run_convergence, run_coverage, run_missing_mass,
    synthetic_mixed_benchmark,
};
use epistemic_core::prompt::amplification_curve;
use epistemic_core::scores::{parse_query_records, pr_curve, score_dataset, Metrics, Threshold};
use epistemic_core::{ConditionalModel, QueryRecord, ScoreName};
use serde::Serialize;

use crate::config::{BackendKind, RunConfig};
use crate::output::{write_csv, write_json, write_svg, Chart, Series};

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
}

impl Run<'_> {
    fn svg(
        &self,
        name: &str,
        chart: Chart,
        series: Vec<Series>,
        written: &mut Vec<PathBuf>,
    ) -> Result<()> {
        if self.cfg.svg {
            written.push(write_svg(self.out, name, &chart, &series)?);
        }
        Ok(())
    }

    fn model(
        &self,
        synthetic: impl FnOnce() -> Result<SyntheticOracle>,
    ) -> Result<Box<dyn ConditionalModel>> {
        Ok(match self.cfg.backend.kind {
            BackendKind::Synthetic => Box::new(synthetic()?),
            BackendKind::Http => Box::new(HttpBackend::new(self.cfg.backend.http.clone())?),
        })
    }
}

pub fn synth_convergence(run: &Run) -> Result<Vec<PathBuf>> {
    let rows = run_convergence(&run.cfg.convergence)?;
    let mut written = vec![write_csv(run.out, "convergence", &rows)?];
    let mut cells: BTreeMap<(usize, String), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in &rows {
        let e = cells
            .entry((r.n, format!("{}", r.temp)))
            .or_default()
            .entry(r.k)
            .or_insert((0.0, 0));
        e.0 += (r.estimate - r.exact).abs();
        e.1 += 1;
    }
    let series = cells
        .into_iter()
        .map(|((n, t), ks)| Series {
            label: format!("n={n} T={t}"),
            points: ks
                .into_iter()
                .map(|(k, (s, c))| (k as f64, s / c as f64))
                .collect(),
        })
        .collect();
    let chart = Chart {
        title: "estimation error vs samples",
        x_label: "k",
        y_label: "mean |I_hat - I|",
        log_x: false,
    };
    run.svg("convergence", chart, series, &mut written)?;
    Ok(written)
}

pub fn missing_mass(run: &Run) -> Result<Vec<PathBuf>> {
    let rows = run_missing_mass(&run.cfg.missing_mass)?;
    let coverage = run_coverage(&run.cfg.coverage)?;
    let mut written = vec![
        write_csv(run.out, "missing_mass", &rows)?,
        write_csv(run.out, "coverage", &coverage)?,
    ];
    let col = |label: &str, f: fn(&epistemic_core::experiments::MissingMassRow) -> f64| Series {
        label: label.into(),
        points: rows.iter().map(|r| (r.k as f64, f(r))).collect(),
    };
    let series = vec![
        col("E[U_k]", |r| r.expected_u_k),
        col("finite bound", |r| r.bound_finite),
        col("entropy bound", |r| r.bound_entropy),
        col("MC mean", |r| r.mc_mean),
        col("MC q95", |r| r.q95),
    ];
    let chart = Chart {
        title: "missing mass",
        x_label: "k",
        y_label: "mass",
        log_x: true,
    };
    run.svg("missing_mass", chart, series, &mut written)?;
    Ok(written)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    query: &'a str,
    tag: &'a str,
    score: ScoreName,
    value: f64,
    prediction: &'a str,
    correct: bool,
}

#[derive(Serialize)]
struct RunRow<'a> {
    repetition: usize,
    score: ScoreName,
    threshold: Option<f64>,
    stratum: &'a str,
    total: usize,
    answered: usize,
    correct_answered: usize,
    recall: f64,
    precision: f64,
    error_rate: f64,
}

fn run_row<'a>(
    repetition: usize,
    score: ScoreName,
    threshold: Threshold,
    stratum: &'a str,
    m: &Metrics,
) -> RunRow<'a> {
    RunRow {
        repetition,
        score,
        threshold: match threshold {
            Threshold::At(l) => Some(l),
            Threshold::AlwaysAbstain => None,
        },
        stratum,
        total: m.total,
        answered: m.answered,
        correct_answered: m.correct_answered,
        recall: m.recall,
        precision: m.precision,
        error_rate: m.error_rate,
    }
}

fn load_dataset(run: &Run) -> Result<(Box<dyn ConditionalModel>, Vec<QueryRecord>)> {
    let cfg = run.cfg;
    let Some(path) = &cfg.dataset.path else {
        if cfg.backend.kind == BackendKind::Http {
            bail!("the http backend needs a dataset (dataset.path or --dataset)");
        }
        let bench = synthetic_mixed_benchmark(&cfg.benchmark)?;
        return Ok((Box::new(bench.oracle), bench.records));
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    let records = parse_query_records(&text)
        .with_context(|| format!("parsing dataset {}", path.display()))?;
    let model = run.model(|| {
        let Some(oracle) = &cfg.backend.oracle else {
            bail!("the synthetic backend needs backend.oracle (or --oracle) for a dataset file");
        };
        let text = std::fs::read_to_string(oracle)
            .with_context(|| format!("reading oracle {}", oracle.display()))?;
        let entries: Vec<OracleEntry> = serde_json::from_str(&text)
            .with_context(|| format!("parsing oracle {}", oracle.display()))?;
        Ok(SyntheticOracle::new(entries, cfg.seed.unwrap_or(0))?)
    })?;
    Ok((model, records))
}

pub fn calibrate(run: &Run) -> Result<Vec<PathBuf>> {
    let (model, records) = load_dataset(run)?;
    let scored = score_dataset(model.as_ref(), &records, &run.cfg.scoring)?;
    let report = calibrate_evaluate(&scored, &run.cfg.calibration)?;

    let score_rows: Vec<ScoreRow> = scored
        .iter()
        .flat_map(|q| {
            q.scores.iter().map(move |(&score, e)| ScoreRow {
                query: &q.query,
                tag: q.tag.as_deref().unwrap_or(""),
                score,
                value: e.value,
                prediction: &e.prediction,
                correct: e.correct,
            })
        })
        .collect();
    let run_rows: Vec<RunRow> = report
        .runs
        .iter()
        .flat_map(|r| {
            std::iter::once(run_row(
                r.repetition,
                r.score,
                r.threshold,
                "all",
                &r.overall,
            ))
            .chain(
                r.by_tag
                    .iter()
                    .map(|(tag, m)| run_row(r.repetition, r.score, r.threshold, tag, m)),
            )
        })
        .collect();
    let mut written = vec![
        write_csv(run.out, "scores", &score_rows)?,
        write_csv(run.out, "calibration_runs", &run_rows)?,
        write_csv(run.out, "calibration_summary", &report.summary)?,
        write_json(run.out, "calibration.json", &report)?,
    ];
    let mut series = Vec::new();
    for name in ScoreName::ALL {
        series.push(Series {
            label: name.to_string(),
            points: pr_curve(&scored, name)?
                .iter()
                .map(|p| (p.recall, p.precision))
                .collect(),
        });
    }
    let chart = Chart {
        title: "precision vs recall",
        x_label: "recall",
        y_label: "precision",
        log_x: false,
    };
    run.svg("precision_recall", chart, series, &mut written)?;
    Ok(written)
}

pub fn amplify(run: &Run) -> Result<Vec<PathBuf>> {
    let a = &run.cfg.amplify;
    let model = run.model(|| {
        let entry = OracleEntry::new(
            a.query.clone(),
            a.responses.iter().map(|r| (r.text.clone(), r.prob)),
        )
        .with_policy(a.policy.clone());
        Ok(SyntheticOracle::single(entry, run.cfg.seed.unwrap_or(0))?)
    })?;
    let points = amplification_curve(
        model.as_ref(),
        &a.query,
        &a.target,
        &a.repeated,
        &a.t_values,
    )?;
    let mut written = vec![write_csv(run.out, "amplification", &points)?];
    let series = vec![Series {
        label: format!("{} vs {}", a.target, a.repeated),
        points: points.iter().map(|p| (p.t as f64, p.normalized)).collect(),
    }];
    let chart = Chart {
        title: "normalized probability of the target",
        x_label: "repetitions t",
        y_label: "p_target / (p_target + p_repeated)",
        log_x: false,
    };
    run.svg("amplification", chart, series, &mut written)?;
    Ok(written)
}

pub fn attention_demo(run: &Run) -> Result<Vec<PathBuf>> {
    let a = &run.cfg.attention;
    let (head, x, y) = demo_attention(a.d, a.gap)?;
    let points = repetition_experiment(&head, &x, &y, &a.t_values)?;
    let mut written = vec![write_csv(run.out, "attention", &points)?];
    let series = vec![Series {
        label: "Y mass".into(),
        points: points.iter().map(|p| (p.t as f64, p.y_mass)).collect(),
    }];
    let chart = Chart {
        title: "attention on the repeated statement",
        x_label: "t",
        y_label: "softmax mass",
        log_x: true,
    };
    run.svg("attention", chart, series, &mut written)?;
    Ok(written)
}
