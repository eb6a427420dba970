//! Simulate → reconstruct → classify, with result files, classification
//! reports and the classical/Bohmian comparison.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ModeSelection};
use crate::event::{self, DecayEvent, EventAccounting, SimulationError};
use crate::gaussian_packet::GaussianPacket;
use crate::kaon::{DecayMode, Species};
use crate::reconstruction::{self, Mode, RetrodictionContext, TimeSpread};
use crate::stats;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("result sets differ: {0}")]
    MismatchedEventSets(String),
}

impl PipelineError {
    /// Configuration problems are the caller's to fix; everything else is a
    /// runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "KL")]
    Long,
    #[serde(rename = "KS")]
    Short,
    #[serde(rename = "ambiguous")]
    Ambiguous,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Long => "KL",
            Verdict::Short => "KS",
            Verdict::Ambiguous => "ambiguous",
        })
    }
}

/// KL when the whole 5–95% band lies above θ·τ_S, KS when it lies below.
pub fn classify(spread: &TimeSpread, tau_s: f64, theta: f64) -> Verdict {
    let threshold = theta * tau_s;
    if spread.q05 > threshold {
        Verdict::Long
    } else if spread.q95 < threshold {
        Verdict::Short
    } else {
        Verdict::Ambiguous
    }
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub event_id: u64,
    pub mode: Mode,
    pub vx_m: f64,
    pub vy_m: f64,
    pub vx_std_m: f64,
    pub vy_std_m: f64,
    pub t1_mean_s: f64,
    pub t1_std_s: f64,
    pub t1_q01_s: f64,
    pub t1_q05_s: f64,
    pub t1_q50_s: f64,
    pub t1_q95_s: f64,
    pub t1_q99_s: f64,
    pub pk_x: f64,
    pub pk_y: f64,
    pub n_failed_samples: usize,
    pub residual: f64,
    pub verdict: Option<Verdict>,
    pub truth_parent: Species,
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn spread(&self) -> TimeSpread {
        TimeSpread {
            mean: self.t1_mean_s,
            std: self.t1_std_s,
            q01: self.t1_q01_s,
            q05: self.t1_q05_s,
            q50: self.t1_q50_s,
            q95: self.t1_q95_s,
            q99: self.t1_q99_s,
        }
    }

    fn failed(event: &DecayEvent, mode: Mode, status: &str) -> Self {
        let nan = f64::NAN;
        Self {
            event_id: event.id,
            mode,
            vx_m: nan,
            vy_m: nan,
            vx_std_m: nan,
            vy_std_m: nan,
            t1_mean_s: nan,
            t1_std_s: nan,
            t1_q01_s: nan,
            t1_q05_s: nan,
            t1_q50_s: nan,
            t1_q95_s: nan,
            t1_q99_s: nan,
            pk_x: nan,
            pk_y: nan,
            n_failed_samples: 0,
            residual: nan,
            verdict: None,
            truth_parent: event.truth.parent,
            status: status.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReconstructionPlan {
    pub mode: Mode,
    pub n_samples: usize,
    pub seed: u64,
    pub tau_s: f64,
    pub theta: f64,
}

/// Reconstructs and classifies every detected π⁺π⁻ event.
pub fn reconstruct_events(
    events: &[DecayEvent],
    ctx: &RetrodictionContext,
    plan: &ReconstructionPlan,
) -> Vec<ResultRow> {
    let detected: Vec<DecayEvent> = events
        .iter()
        .filter(|e| e.is_detected_two_pion())
        .cloned()
        .collect();
    let results =
        reconstruction::retrodict_all(&detected, ctx, plan.mode, plan.n_samples, plan.seed);
    detected
        .iter()
        .zip(results)
        .map(
            |(e, r)| match r.and_then(|r| reconstruction::decay_time_spread(&r).map(|s| (r, s))) {
                Ok((r, s)) => ResultRow {
                    event_id: e.id,
                    mode: plan.mode,
                    vx_m: r.vertex.x,
                    vy_m: r.vertex.y,
                    vx_std_m: r.vertex_std.x,
                    vy_std_m: r.vertex_std.y,
                    t1_mean_s: s.mean,
                    t1_std_s: s.std,
                    t1_q01_s: s.q01,
                    t1_q05_s: s.q05,
                    t1_q50_s: s.q50,
                    t1_q95_s: s.q95,
                    t1_q99_s: s.q99,
                    pk_x: r.kaon_momentum.x,
                    pk_y: r.kaon_momentum.y,
                    n_failed_samples: r.n_failed,
                    residual: r.residual,
                    verdict: Some(classify(&s, plan.tau_s, plan.theta)),
                    truth_parent: e.truth.parent,
                    status: "ok".into(),
                },
                Err(err) => ResultRow::failed(e, plan.mode, err.code()),
            },
        )
        .collect()
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), PipelineError> {
    let csv_err = |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    // Header written explicitly so an empty file is still schema-valid.
    w.write_record(RESULT_COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub const RESULT_COLUMNS: [&str; 20] = [
    "event_id",
    "mode",
    "vx_m",
    "vy_m",
    "vx_std_m",
    "vy_std_m",
    "t1_mean_s",
    "t1_std_s",
    "t1_q01_s",
    "t1_q05_s",
    "t1_q50_s",
    "t1_q95_s",
    "t1_q99_s",
    "pk_x",
    "pk_y",
    "n_failed_samples",
    "residual",
    "verdict",
    "truth_parent",
    "status",
];

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, PipelineError> {
    let csv_err = |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)
}

/// Counts per (truth parent, verdict); failed reconstructions are their own column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: BTreeMap<(Species, Option<Verdict>), usize>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: Species, verdict: Option<Verdict>) -> usize {
        self.counts.get(&(truth, verdict)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub mode: Mode,
    pub verdicts: Vec<(u64, Option<Verdict>)>,
    pub confusion: ConfusionMatrix,
    pub n_events: usize,
    pub n_reconstructed: usize,
    pub n_ambiguous: usize,
    pub n_misidentified: usize,
    pub median_t1_std: f64,
    pub median_t1_rel_std: f64,
}

impl ClassificationReport {
    pub fn from_rows(mode: Mode, rows: &[ResultRow]) -> Self {
        let rows: Vec<&ResultRow> = rows.iter().filter(|r| r.mode == mode).collect();
        let mut confusion = ConfusionMatrix::default();
        let mut n_ambiguous = 0;
        let mut n_misidentified = 0;
        for r in &rows {
            *confusion
                .counts
                .entry((r.truth_parent, r.verdict))
                .or_default() += 1;
            match (r.truth_parent, r.verdict) {
                (_, Some(Verdict::Ambiguous)) => n_ambiguous += 1,
                (Species::Long, Some(Verdict::Short)) | (Species::Short, Some(Verdict::Long)) => {
                    n_misidentified += 1
                }
                _ => {}
            }
        }
        let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
        let stds: Vec<f64> = ok.iter().map(|r| r.t1_std_s).collect();
        let rel: Vec<f64> = ok.iter().map(|r| r.t1_std_s / r.t1_mean_s).collect();
        let med = |xs: &[f64]| {
            if xs.is_empty() {
                f64::NAN
            } else {
                stats::median(xs)
            }
        };
        Self {
            mode,
            verdicts: rows.iter().map(|r| (r.event_id, r.verdict)).collect(),
            confusion,
            n_events: rows.len(),
            n_reconstructed: ok.len(),
            n_ambiguous,
            n_misidentified,
            median_t1_std: med(&stds),
            median_t1_rel_std: med(&rel),
        }
    }

    pub fn ambiguous_rate(&self) -> f64 {
        ratio(self.n_ambiguous, self.n_reconstructed)
    }

    pub fn misidentification_rate(&self) -> f64 {
        ratio(self.n_misidentified, self.n_reconstructed)
    }
}

fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Newcombe hybrid-score interval for the difference of two proportions.
pub fn proportion_difference_interval(
    k1: usize,
    n1: usize,
    k2: usize,
    n2: usize,
    z: f64,
) -> (f64, f64, f64) {
    let (p1, p2) = (ratio(k1, n1), ratio(k2, n2));
    let (l1, u1) = stats::wilson_interval(k1, n1, z);
    let (l2, u2) = stats::wilson_interval(k2, n2, z);
    let d = p1 - p2;
    (
        d,
        d - ((p1 - l1).powi(2) + (u2 - p2).powi(2)).sqrt(),
        d + ((u1 - p1).powi(2) + (p2 - l2).powi(2)).sqrt(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventDelta {
    pub event_id: u64,
    pub dvx_m: f64,
    pub dvy_m: f64,
    pub dt1_s: f64,
    pub classical_verdict: Option<Verdict>,
    pub bohmian_verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: String,
    pub classical: f64,
    pub bohmian: f64,
    pub difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeComparison {
    pub deltas: Vec<EventDelta>,
    pub metrics: Vec<MetricComparison>,
}

/// Per-event bohmian − classical deltas and rate differences with 95%
/// intervals. Both modes must cover the same event ids.
pub fn compare_modes(rows: &[ResultRow]) -> Result<ModeComparison, PipelineError> {
    let by_mode = |m: Mode| -> BTreeMap<u64, &ResultRow> {
        rows.iter()
            .filter(|r| r.mode == m)
            .map(|r| (r.event_id, r))
            .collect()
    };
    let classical = by_mode(Mode::Classical);
    let bohmian = by_mode(Mode::Bohmian);
    if classical.is_empty() != bohmian.is_empty() {
        return Err(PipelineError::MismatchedEventSets(
            "results contain only one reconstruction mode".into(),
        ));
    }
    if let Some(id) = classical
        .keys()
        .find(|k| !bohmian.contains_key(k))
        .or_else(|| bohmian.keys().find(|k| !classical.contains_key(k)))
    {
        return Err(PipelineError::MismatchedEventSets(format!(
            "event {id} is missing from one mode"
        )));
    }
    let deltas = classical
        .iter()
        .map(|(id, c)| {
            let b = bohmian[id];
            EventDelta {
                event_id: *id,
                dvx_m: b.vx_m - c.vx_m,
                dvy_m: b.vy_m - c.vy_m,
                dt1_s: b.t1_mean_s - c.t1_mean_s,
                classical_verdict: c.verdict,
                bohmian_verdict: b.verdict,
            }
        })
        .collect();
    let rc = ClassificationReport::from_rows(Mode::Classical, rows);
    let rb = ClassificationReport::from_rows(Mode::Bohmian, rows);
    let metric = |name: &str, kb: usize, nb: usize, kc: usize, nc: usize| {
        let (d, lo, hi) = proportion_difference_interval(kb, nb, kc, nc, 1.959_963_984_540_054);
        MetricComparison {
            metric: name.into(),
            classical: ratio(kc, nc),
            bohmian: ratio(kb, nb),
            difference: d,
            ci_low: lo,
            ci_high: hi,
        }
    };
    let metrics = vec![
        metric(
            "ambiguous_rate",
            rb.n_ambiguous,
            rb.n_reconstructed,
            rc.n_ambiguous,
            rc.n_reconstructed,
        ),
        metric(
            "misidentification_rate",
            rb.n_misidentified,
            rb.n_reconstructed,
            rc.n_misidentified,
            rc.n_reconstructed,
        ),
    ];
    Ok(ModeComparison { deltas, metrics })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), PipelineError> {
    let csv_err = |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes per-event deltas to `path` and the rate comparison next to it
/// as `<stem>_summary.csv`; returns the summary path.
pub fn write_comparison(path: &Path, cmp: &ModeComparison) -> Result<PathBuf, PipelineError> {
    write_csv(
        path,
        &cmp.deltas,
        &[
            "event_id",
            "dvx_m",
            "dvy_m",
            "dt1_s",
            "classical_verdict",
            "bohmian_verdict",
        ],
    )?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("comparison");
    let summary = path.with_file_name(format!("{stem}_summary.csv"));
    write_csv(
        &summary,
        &cmp.metrics,
        &[
            "metric",
            "classical",
            "bohmian",
            "difference",
            "ci_low",
            "ci_high",
        ],
    )?;
    Ok(summary)
}

/// Packet width over time: rows of (t, σ(t), τ).
pub fn spread_table(packet: &GaussianPacket, times: &[f64]) -> Vec<(f64, f64, f64)> {
    times
        .iter()
        .map(|&t| (t, packet.sigma0 * packet.spread_factor(t), packet.tau(t)))
        .collect()
}

pub fn write_spread_csv(out: &mut dyn Write, rows: &[(f64, f64, f64)]) -> std::io::Result<()> {
    writeln!(out, "t_s,sigma_m,tau_dimensionless")?;
    for (t, s, tau) in rows {
        writeln!(out, "{t:e},{s:e},{tau:e}")?;
    }
    Ok(())
}

/// Logarithmically spaced times from `t_min` to `t_max` inclusive.
pub fn log_times(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![t_min];
    }
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Data columns for plotting decay-time estimates per event.
pub fn write_gnuplot_data(path: &Path, rows: &[ResultRow]) -> Result<(), PipelineError> {
    let mut text = String::from("# event_id mode t1_mean_s t1_std_s t1_q05_s t1_q95_s\n");
    for r in rows.iter().filter(|r| r.is_ok()) {
        let _ = writeln!(
            text,
            "{} {} {:e} {:e} {:e} {:e}",
            r.event_id, r.mode, r.t1_mean_s, r.t1_std_s, r.t1_q05_s, r.t1_q95_s
        );
    }
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub accounting: EventAccounting,
    pub reports: Vec<ClassificationReport>,
    pub rows: Vec<ResultRow>,
    pub events_path: PathBuf,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
}

pub fn modes(selection: ModeSelection) -> Vec<Mode> {
    match selection {
        ModeSelection::Classical => vec![Mode::Classical],
        ModeSelection::Bohmian => vec![Mode::Bohmian],
        ModeSelection::Both => vec![Mode::Classical, Mode::Bohmian],
    }
}

pub fn plan(cfg: &ExperimentConfig, mode: Mode) -> ReconstructionPlan {
    ReconstructionPlan {
        mode,
        n_samples: cfg.reconstruction.n_samples,
        seed: cfg.seed,
        tau_s: cfg.short_lifetime(),
        theta: cfg.reconstruction.theta,
    }
}

/// Reconstructs `events` in every configured mode.
pub fn reconstruct_configured(
    cfg: &ExperimentConfig,
    events: &[DecayEvent],
    selection: ModeSelection,
) -> Vec<ResultRow> {
    let ctx = cfg.retrodiction_context();
    modes(selection)
        .into_iter()
        .flat_map(|m| reconstruct_events(events, &ctx, &plan(cfg, m)))
        .collect()
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let setup = cfg.simulation_setup()?;
    std::fs::create_dir_all(&cfg.output.dir).map_err(io_err(&cfg.output.dir))?;
    let events = event::simulate(&setup, cfg.events, cfg.seed);
    let events_path = cfg.output_path(&cfg.output.events);
    event::write_events(&events_path, &events).map_err(|e| match e {
        SimulationError::Io(source) => PipelineError::Io {
            path: events_path.clone(),
            source,
        },
        other => other.into(),
    })?;
    let rows = reconstruct_configured(cfg, &events, cfg.reconstruction.mode);
    let results_path = cfg.output_path(&cfg.output.results);
    write_results(&results_path, &rows)?;
    write_gnuplot_data(&cfg.output_path("t1_spread.dat"), &rows)?;
    let accounting = EventAccounting::tally(&events);
    let reports: Vec<ClassificationReport> = modes(cfg.reconstruction.mode)
        .into_iter()
        .map(|m| ClassificationReport::from_rows(m, &rows))
        .collect();
    let summary_path = cfg.output_path(&cfg.output.summary);
    let text = summary_text(cfg, &events, &accounting, &reports);
    std::fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    Ok(PipelineOutcome {
        accounting,
        reports,
        rows,
        events_path,
        results_path,
        summary_path,
    })
}

/// Among generated K_L, how many decayed to π⁺π⁻.
pub fn long_two_pion_frequency(events: &[DecayEvent]) -> (usize, usize) {
    let longs: Vec<&DecayEvent> = events
        .iter()
        .filter(|e| e.truth.parent == Species::Long)
        .collect();
    let pipi = longs
        .iter()
        .filter(|e| e.truth.mode == DecayMode::PiPi)
        .count();
    (pipi, longs.len())
}

pub fn summary_text(
    cfg: &ExperimentConfig,
    events: &[DecayEvent],
    acc: &EventAccounting,
    reports: &[ClassificationReport],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kaonlab run summary");
    let _ = writeln!(s, "seed {}", cfg.seed);
    let _ = writeln!(s, "sigma0_m {:e}", cfg.packet.sigma0_m);
    let _ = writeln!(
        s,
        "theta {} (threshold {:e} s)",
        cfg.reconstruction.theta,
        cfg.reconstruction.theta * cfg.short_lifetime()
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "events generated      {}", acc.generated);
    let _ = writeln!(s, "detected pi+pi-       {}", acc.detected_two_pion);
    let _ = writeln!(s, "other modes           {}", acc.other_mode);
    let _ = writeln!(s, "lost beyond fiducial  {}", acc.lost_beyond_fiducial);
    let _ = writeln!(s, "lost central miss     {}", acc.lost_central_miss);
    let _ = writeln!(s, "lost pion missed      {}", acc.lost_pion_missed);
    let _ = writeln!(s, "balanced              {}", acc.is_balanced());
    let (k, n) = long_two_pion_frequency(events);
    let p = ratio(k, n);
    let _ = writeln!(
        s,
        "KL -> pi+pi- truth    {k}/{n} = {p:.3e} (se {:.1e})",
        stats::binomial_se(
            cfg.species
                .long
                .branching
                .get("pi_pi")
                .copied()
                .unwrap_or(0.0),
            n.max(1)
        )
    );
    for r in reports {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", r.mode);
        let _ = writeln!(s, "reconstructed {}/{}", r.n_reconstructed, r.n_events);
        let _ = writeln!(s, "ambiguous rate {:.4}", r.ambiguous_rate());
        let _ = writeln!(
            s,
            "misidentification rate {:.4}",
            r.misidentification_rate()
        );
        let _ = writeln!(s, "median t1 std {:e} s", r.median_t1_std);
        let _ = writeln!(s, "median t1 relative std {:e}", r.median_t1_rel_std);
        let _ = writeln!(s, "truth  KL  KS  ambiguous  failed");
        for truth in [Species::Long, Species::Short] {
            let c = &r.confusion;
            let _ = writeln!(
                s,
                "{truth}     {}  {}  {}  {}",
                c.get(truth, Some(Verdict::Long)),
                c.get(truth, Some(Verdict::Short)),
                c.get(truth, Some(Verdict::Ambiguous)),
                c.get(truth, None)
            );
        }
    }
    s
}
