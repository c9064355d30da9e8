//! Benchmark runs over scripted edits, candidate-selection summaries, and
//! (t0, s) sensitivity sweeps with CSV and SVG output.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierBank;
use crate::edit::{
    guided_sample, select_candidate, select_params, EditMetrics, GuidanceParams, ParamPolicy,
    SamplerOptions, Selection, TracePoint,
};
use crate::error::{Error, Result};
use crate::scene::{scene_at, BenchmarkEdit, SceneSpec};
use crate::segmap::{build_roi_mask, RoiMask, SegMap};
use crate::tensor::Tensor;
use crate::unet::DiffusionModel;

/// One source scene with an edited map and its ROI.
#[derive(Clone, Debug)]
pub struct BenchmarkCase {
    pub index: u64,
    pub edit: BenchmarkEdit,
    pub x: Tensor,
    pub y: SegMap,
    pub y_edited: SegMap,
    pub m: RoiMask,
}

impl BenchmarkCase {
    pub fn new(spec: &SceneSpec, index: u64, edit: BenchmarkEdit) -> Result<Self> {
        let (x, y) = scene_at(spec, index)?;
        let y_edited = edit.apply(&y)?;
        let m = build_roi_mask(&y, &y_edited, &edit.q_edit())?;
        Ok(BenchmarkCase {
            index,
            edit,
            x,
            y,
            y_edited,
            m,
        })
    }
}

/// `n` consecutive scenes from `start`, each with an edit drawn uniformly from `edits`.
pub fn random_cases(
    spec: &SceneSpec,
    start: u64,
    n: usize,
    edits: &[BenchmarkEdit],
    seed: u64,
) -> Result<Vec<BenchmarkCase>> {
    if n > 0 && edits.is_empty() {
        return Err(Error::Empty("edit list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let e = edits[rng.random_range(0..edits.len())].clone();
            BenchmarkCase::new(spec, start + i as u64, e)
        })
        .collect()
}

/// Every edit applied to each of `n` scenes.
pub fn crossed_cases(
    spec: &SceneSpec,
    start: u64,
    n: usize,
    edits: &[BenchmarkEdit],
) -> Result<Vec<BenchmarkCase>> {
    let mut out = Vec::with_capacity(n * edits.len());
    for e in edits {
        for i in 0..n {
            out.push(BenchmarkCase::new(spec, start + i as u64, e.clone())?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: u64,
    pub edit: String,
    pub roi_pixels: usize,
    pub params: GuidanceParams,
    pub candidates: Vec<EditMetrics>,
    pub runtime_s: f64,
}

impl CaseResult {
    pub fn selected(&self, selection: Selection) -> EditMetrics {
        let sel = match selection {
            Selection::Random { seed } => Selection::Random {
                seed: seed ^ self.index.wrapping_mul(0x9e37_79b9),
            },
            s => s,
        };
        self.candidates[select_candidate(&self.candidates, sel)]
    }
}

/// Runs guided editing with policy-selected parameters on every case.
pub fn run_benchmark(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    cases: &[BenchmarkCase],
    policy: &ParamPolicy,
    opts: &SamplerOptions,
    seed: u64,
) -> Result<Vec<CaseResult>> {
    cases
        .iter()
        .map(|c| {
            let params = select_params(&c.m, policy, seed ^ c.index);
            run_case(model, bank, c, &params, opts)
        })
        .collect()
}

pub fn run_case(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    c: &BenchmarkCase,
    params: &GuidanceParams,
    opts: &SamplerOptions,
) -> Result<CaseResult> {
    let start = Instant::now();
    let r = guided_sample(
        &c.x,
        &c.y_edited,
        &c.m,
        params,
        model,
        bank,
        opts,
        Selection::Quantitative,
        &(),
    )?;
    Ok(CaseResult {
        index: c.index,
        edit: c.edit.name().into(),
        roi_pixels: c.m.count(),
        params: params.clone(),
        candidates: r.candidates.iter().map(|k| k.metrics).collect(),
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub edit: String,
    pub count: usize,
    /// MAE outside the ROI, ×10³.
    pub mae_outside: Stat,
    pub psnr_outside: Stat,
    pub accuracy_inside: Stat,
    pub runtime_s: Stat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub selection: Option<Selection>,
    pub per_edit: Vec<SummaryRow>,
    pub overall: SummaryRow,
}

fn summary_row(name: &str, picked: &[(EditMetrics, f64)]) -> SummaryRow {
    let col = |f: fn(&EditMetrics) -> f64| {
        Stat::of(&picked.iter().map(|(m, _)| f(m)).collect::<Vec<_>>())
    };
    SummaryRow {
        edit: name.into(),
        count: picked.len(),
        mae_outside: col(|m| m.mae_outside),
        psnr_outside: col(|m| m.psnr_outside),
        accuracy_inside: col(|m| m.accuracy_inside),
        runtime_s: Stat::of(&picked.iter().map(|(_, r)| *r).collect::<Vec<_>>()),
    }
}

/// Per-edit and overall mean ± std of the selected candidate's metrics.
pub fn summarize(results: &[CaseResult], selection: Selection) -> BenchmarkReport {
    let picked: Vec<(String, EditMetrics, f64)> = results
        .iter()
        .map(|r| (r.edit.clone(), r.selected(selection), r.runtime_s))
        .collect();
    let mut names: Vec<String> = picked.iter().map(|p| p.0.clone()).collect();
    names.sort();
    names.dedup();
    let per_edit = names
        .iter()
        .map(|n| {
            let rows: Vec<_> = picked
                .iter()
                .filter(|p| &p.0 == n)
                .map(|p| (p.1, p.2))
                .collect();
            summary_row(n, &rows)
        })
        .collect();
    let all: Vec<_> = picked.iter().map(|p| (p.1, p.2)).collect();
    BenchmarkReport {
        selection: Some(selection),
        per_edit,
        overall: summary_row("all", &all),
    }
}

impl BenchmarkReport {
    /// Plain-text table: MAE (×10³), PSNR, accuracy and runtime per edit.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>4} {:>18} {:>16} {:>16} {:>14}",
            "edit", "n", "MAE(x1e3)", "PSNR(dB)", "accuracy", "runtime(s)"
        );
        for r in self.per_edit.iter().chain(std::iter::once(&self.overall)) {
            let f = |st: &Stat, p: usize| format!("{:.p$} ± {:.p$}", st.mean, st.std);
            let _ = writeln!(
                s,
                "{:<14} {:>4} {:>18} {:>16} {:>16} {:>14}",
                r.edit,
                r.count,
                f(&r.mae_outside, 3),
                f(&r.psnr_outside, 2),
                f(&r.accuracy_inside, 3),
                f(&r.runtime_s, 2)
            );
        }
        s
    }
}

/// Relative difference `|a - b| / max(|a|, |b|)`, 0 when both are 0.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub edit: String,
    pub index: u64,
    pub roi_pixels: usize,
    pub t0: usize,
    pub s: f64,
    pub snr_t0: f64,
    pub accuracy: f64,
    pub trace: Vec<TracePoint>,
}

/// Guided runs (one candidate each) for every case over a `t0 × s` grid.
pub fn sensitivity_sweep(
    model: &DiffusionModel,
    bank: &ClassifierBank,
    cases: &[BenchmarkCase],
    t0s: &[usize],
    scales: &[f64],
    n_steps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for c in cases {
        for &t0 in t0s {
            for &s in scales {
                let params = GuidanceParams {
                    t0,
                    s,
                    n_steps: n_steps.min(t0),
                    batch: 1,
                    seed: seed ^ c.index,
                };
                let r = guided_sample(
                    &c.x,
                    &c.y_edited,
                    &c.m,
                    &params,
                    model,
                    bank,
                    &SamplerOptions::default(),
                    Selection::Quantitative,
                    &(),
                )?;
                let best = r.best();
                rows.push(SweepRow {
                    edit: c.edit.name().into(),
                    index: c.index,
                    roi_pixels: c.m.count(),
                    t0,
                    s,
                    snr_t0: model.sched.snr(t0)?,
                    accuracy: best.metrics.accuracy_inside,
                    trace: best.trace.clone(),
                });
            }
        }
    }
    Ok(rows)
}

/// Mean final accuracy per `(group, t0, s)`.
pub fn sweep_means(
    rows: &[SweepRow],
    group: impl Fn(&SweepRow) -> String,
) -> Vec<(String, usize, f64, f64)> {
    let mut keys: Vec<(String, usize, u64)> = rows
        .iter()
        .map(|r| (group(r), r.t0, r.s.to_bits()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(g, t0, sb)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| group(r) == g && r.t0 == t0 && r.s.to_bits() == sb)
                .map(|r| r.accuracy)
                .collect();
            (g, t0, f64::from_bits(sb), Stat::of(&v).mean)
        })
        .collect()
}

/// The `t0` of the best mean accuracy (over all `s`) for a group.
pub fn best_t0(means: &[(String, usize, f64, f64)], group: &str) -> Option<(usize, f64, f64)> {
    means
        .iter()
        .filter(|m| m.0 == group)
        .max_by(|a, b| a.3.total_cmp(&b.3))
        .map(|m| (m.1, m.2, m.3))
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    edit: &'a str,
    index: u64,
    roi_pixels: usize,
    t0: usize,
    s: f64,
    snr_t0: f64,
    final_accuracy: f64,
}

#[derive(Serialize)]
struct TraceCsvRow<'a> {
    edit: &'a str,
    index: u64,
    t0: usize,
    s: f64,
    t: usize,
    snr: f64,
    accuracy: f64,
}

fn to_csv<T: Serialize>(rows: impl Iterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// One row per sweep run: `edit,index,roi_pixels,t0,s,snr_t0,final_accuracy`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    to_csv(rows.iter().map(|r| SweepCsvRow {
        edit: &r.edit,
        index: r.index,
        roi_pixels: r.roi_pixels,
        t0: r.t0,
        s: r.s,
        snr_t0: r.snr_t0,
        final_accuracy: r.accuracy,
    }))
}

/// Per-step traces: `edit,index,t0,s,t,snr,accuracy`.
pub fn trace_csv(rows: &[SweepRow]) -> Result<String> {
    to_csv(rows.iter().flat_map(|r| {
        r.trace.iter().map(move |p| TraceCsvRow {
            edit: &r.edit,
            index: r.index,
            t0: r.t0,
            s: r.s,
            t: p.t,
            snr: p.snr,
            accuracy: p.accuracy,
        })
    }))
}

/// Line chart of mean ROI accuracy against SNR (log axis, falling as the
/// sampler proceeds), one line per `(group, t0)` at the group's best `s`.
pub fn sweep_svg(rows: &[SweepRow], group: impl Fn(&SweepRow) -> String) -> String {
    use plotters::prelude::*;

    let means = sweep_means(rows, &group);
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut groups: Vec<String> = means.iter().map(|m| m.0.clone()).collect();
    groups.dedup();
    let mut t0s: Vec<usize> = rows.iter().map(|r| r.t0).collect();
    t0s.sort_unstable();
    t0s.dedup();
    for g in &groups {
        for &t0 in &t0s {
            let Some(best) = means
                .iter()
                .filter(|m| &m.0 == g && m.1 == t0)
                .max_by(|a, b| a.3.total_cmp(&b.3))
            else {
                continue;
            };
            let sel: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| &group(r) == g && r.t0 == t0 && r.s == best.2)
                .collect();
            let Some(first) = sel.first() else { continue };
            let pts: Vec<(f64, f64)> = (0..first.trace.len())
                .map(|k| {
                    let acc =
                        sel.iter().map(|r| r.trace[k].accuracy).sum::<f64>() / sel.len() as f64;
                    (first.trace[k].snr.log10(), acc)
                })
                .collect();
            series.push((format!("{g} t0={t0} s={}", best.2), pts));
        }
    }
    let (xmin, xmax) = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    let (xmin, xmax) = if xmin.is_finite() {
        (xmin, xmax.max(xmin + 1e-9))
    } else {
        (-3.0, 3.0)
    };

    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (720, 480)).into_drawing_area();
        let _ = root.fill(&WHITE);
        let chart = ChartBuilder::on(&root)
            .caption("ROI accuracy during guided sampling", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(xmin..xmax, 0.0..1.0);
        if let Ok(mut chart) = chart {
            let _ = chart
                .configure_mesh()
                .x_desc("log10 SNR(t)")
                .y_desc("accuracy inside ROI")
                .draw();
            for (i, (name, pts)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                if let Ok(a) =
                    chart.draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                {
                    a.label(name.clone()).legend(move |(x, y)| {
                        PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                    });
                }
            }
            let _ = chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::LowerRight)
                .draw();
        }
        let _ = root.present();
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::benchmark_edits;

    #[test]
    fn stat_and_gap() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[]), Stat::default());
        assert_eq!(relative_gap(0.0, 0.0), 0.0);
        assert!((relative_gap(100.0, 95.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn random_cases_are_reproducible_and_cover_edits() {
        let spec = SceneSpec::default();
        let a = random_cases(&spec, 100, 50, &benchmark_edits(), 1).unwrap();
        let b = random_cases(&spec, 100, 50, &benchmark_edits(), 1).unwrap();
        assert_eq!(
            a.iter().map(|c| c.edit.clone()).collect::<Vec<_>>(),
            b.iter().map(|c| c.edit.clone()).collect::<Vec<_>>()
        );
        for e in benchmark_edits() {
            assert!(a.iter().any(|c| c.edit == e));
        }
        assert!(a.iter().all(|c| c.m.count() > 0));
        assert!(random_cases(&spec, 0, 0, &benchmark_edits(), 1)
            .unwrap()
            .is_empty());
    }

    fn fake(edit: &str, idx: u64, accs: &[f64]) -> CaseResult {
        CaseResult {
            index: idx,
            edit: edit.into(),
            roi_pixels: 10,
            params: GuidanceParams {
                t0: 10,
                s: 1.0,
                n_steps: 5,
                batch: accs.len(),
                seed: 0,
            },
            candidates: accs
                .iter()
                .map(|&a| EditMetrics {
                    mae_outside: 0.0,
                    psnr_outside: 99.0,
                    accuracy_inside: a,
                })
                .collect(),
            runtime_s: 1.0,
        }
    }

    #[test]
    fn summary_groups_by_edit() {
        let rs = vec![
            fake("a", 0, &[0.5, 0.9]),
            fake("a", 1, &[0.7]),
            fake("b", 2, &[0.1, 0.2]),
        ];
        let q = summarize(&rs, Selection::Quantitative);
        assert_eq!(q.per_edit.len(), 2);
        assert!((q.per_edit[0].accuracy_inside.mean - 0.8).abs() < 1e-12);
        assert!((q.overall.accuracy_inside.mean - (0.9 + 0.7 + 0.2) / 3.0).abs() < 1e-12);
        assert!(q.to_table().contains("all"));
        let empty = summarize(&[], Selection::Quantitative);
        assert_eq!(empty.overall.count, 0);
    }

    #[test]
    fn sweep_outputs() {
        let row = |edit: &str, t0, s, acc| SweepRow {
            edit: edit.into(),
            index: 0,
            roi_pixels: 5,
            t0,
            s,
            snr_t0: 0.1,
            accuracy: acc,
            trace: vec![
                TracePoint {
                    t: t0,
                    snr: 0.1,
                    accuracy: 0.2,
                },
                TracePoint {
                    t: 1,
                    snr: 100.0,
                    accuracy: acc,
                },
            ],
        };
        let rows = vec![
            row("a", 10, 1.0, 0.5),
            row("a", 20, 1.0, 0.7),
            row("a", 20, 2.0, 0.6),
        ];
        let means = sweep_means(&rows, |r| r.edit.clone());
        assert_eq!(best_t0(&means, "a"), Some((20, 1.0, 0.7)));
        assert_eq!(sweep_csv(&rows).unwrap().lines().count(), 4);
        assert_eq!(trace_csv(&rows).unwrap().lines().count(), 7);
        let svg = sweep_svg(&rows, |r| r.edit.clone());
        assert!(svg.starts_with("<svg") && svg.contains("t0=20"));
    }
}
