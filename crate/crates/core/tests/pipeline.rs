use kaonlab::config::{ExperimentConfig, ModeSelection};
use kaonlab::event::{simulate, EventAccounting};
use kaonlab::kaon::{Species, KS_LIFETIME};
use kaonlab::pipeline::{self, ClassificationReport, PipelineError, ResultRow};
use kaonlab::reconstruction::Mode;
use kaonlab::stats;

fn in_dir(cfg: ExperimentConfig, dir: &tempfile::TempDir) -> ExperimentConfig {
    let mut cfg = cfg;
    cfg.output.dir = dir.path().to_path_buf();
    cfg
}

#[test]
fn zero_events_give_schema_valid_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(
        ExperimentConfig {
            events: 0,
            ..ExperimentConfig::default()
        },
        &dir,
    );
    let out = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(std::fs::read_to_string(&out.events_path).unwrap(), "");
    let results = std::fs::read_to_string(&out.results_path).unwrap();
    assert_eq!(results.trim_end(), pipeline::RESULT_COLUMNS.join(","));
    assert!(pipeline::read_results(&out.results_path)
        .unwrap()
        .is_empty());
    assert!(std::fs::read_to_string(&out.summary_path)
        .unwrap()
        .contains("events generated      0"));
}

#[test]
fn default_run_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(
        ExperimentConfig {
            events: 10_000,
            ..ExperimentConfig::default()
        },
        &dir,
    );
    let out = pipeline::run_pipeline(&cfg).unwrap();
    let events = kaonlab::event::read_events(&out.events_path).unwrap();
    assert!(out.accounting.is_balanced());
    assert_eq!(out.accounting, EventAccounting::tally(&events));

    let early: Vec<_> = events
        .iter()
        .filter(|e| e.is_detected_two_pion() && e.truth.t1 < 10.0 * KS_LIFETIME)
        .collect();
    let early_short = early
        .iter()
        .filter(|e| e.truth.parent == Species::Short)
        .count();
    assert!(
        early_short as f64 > 0.99 * early.len() as f64,
        "{early_short}/{}",
        early.len()
    );

    let (k, n) = pipeline::long_two_pion_frequency(&events);
    let se = stats::binomial_se(1e-3, n);
    assert!((k as f64 / n as f64 - 1e-3).abs() <= 3.0 * se, "{k}/{n}");

    for report in &out.reports {
        assert_eq!(report.confusion.total(), out.accounting.detected_two_pion);
    }
}

#[test]
fn classical_limit_has_no_ambiguity_or_misidentification() {
    let mut cfg = ExperimentConfig {
        events: 5000,
        ..ExperimentConfig::default()
    };
    cfg.packet.bohmian_offsets = false;
    cfg.state.a_re = 1.0;
    cfg.state.b_re = 1.0;
    let events = simulate(&cfg.simulation_setup().unwrap(), cfg.events, cfg.seed);
    let rows = pipeline::reconstruct_configured(&cfg, &events, ModeSelection::Classical);
    let r = ClassificationReport::from_rows(Mode::Classical, &rows);
    assert!(r.n_reconstructed > 1000);
    assert_eq!(r.n_ambiguous, 0);
    assert_eq!(r.n_misidentified, 0);
}

fn rows_for(cfg: &ExperimentConfig) -> Vec<ResultRow> {
    let events = simulate(&cfg.simulation_setup().unwrap(), cfg.events, cfg.seed);
    pipeline::reconstruct_configured(cfg, &events, ModeSelection::Both)
}

#[test]
fn identical_modes_compare_to_zero() {
    let cfg = ExperimentConfig {
        events: 500,
        ..ExperimentConfig::default()
    };
    let classical: Vec<ResultRow> = rows_for(&cfg)
        .into_iter()
        .filter(|r| r.mode == Mode::Bohmian && r.is_ok())
        .collect();
    let mut rows = classical.clone();
    rows.extend(classical.into_iter().map(|r| ResultRow {
        mode: Mode::Classical,
        ..r
    }));
    let cmp = pipeline::compare_modes(&rows).unwrap();
    assert!(!cmp.deltas.is_empty());
    for d in &cmp.deltas {
        assert_eq!((d.dvx_m, d.dvy_m, d.dt1_s), (0.0, 0.0, 0.0));
    }
    for m in &cmp.metrics {
        assert_eq!(m.difference, 0.0);
        assert!(m.ci_low <= 0.0 && m.ci_high >= 0.0);
    }
}

#[test]
fn mismatched_event_sets_rejected() {
    let cfg = ExperimentConfig {
        events: 300,
        ..ExperimentConfig::default()
    };
    let mut rows = rows_for(&cfg);
    let drop = rows.iter().position(|r| r.mode == Mode::Bohmian).unwrap();
    rows.remove(drop);
    assert!(matches!(
        pipeline::compare_modes(&rows),
        Err(PipelineError::MismatchedEventSets(_))
    ));
    let only: Vec<ResultRow> = rows
        .into_iter()
        .filter(|r| r.mode == Mode::Classical)
        .collect();
    assert!(matches!(
        pipeline::compare_modes(&only),
        Err(PipelineError::MismatchedEventSets(_))
    ));
}

#[test]
fn results_file_roundtrip_and_comparison_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        events: 400,
        ..ExperimentConfig::default()
    };
    let rows = rows_for(&cfg);
    let path = dir.path().join("results.csv");
    pipeline::write_results(&path, &rows).unwrap();
    let back = pipeline::read_results(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.event_id, b.event_id);
        assert_eq!(a.status, b.status);
        assert_eq!(a.verdict, b.verdict);
        if a.is_ok() {
            assert_eq!(a, b);
        } else {
            assert!(b.t1_mean_s.is_nan());
        }
    }
    let cmp = pipeline::compare_modes(&back).unwrap();
    let out = dir.path().join("report.csv");
    let summary = pipeline::write_comparison(&out, &cmp).unwrap();
    let text = std::fs::read_to_string(summary).unwrap();
    assert!(text.starts_with("metric,classical,bohmian,difference,ci_low,ci_high"));
    assert!(text.contains("ambiguous_rate"));
}

#[test]
fn ambiguity_nondecreasing_over_a_decade_of_wide_packets() {
    let mut rates = Vec::new();
    for sigma0 in [0.03, 0.1, 0.3] {
        let mut cfg = ExperimentConfig {
            events: 3000,
            ..ExperimentConfig::default()
        };
        cfg.packet.sigma0_m = sigma0;
        let events = simulate(&cfg.simulation_setup().unwrap(), cfg.events, cfg.seed);
        let rows = pipeline::reconstruct_configured(&cfg, &events, ModeSelection::Bohmian);
        rates.push(ClassificationReport::from_rows(Mode::Bohmian, &rows).ambiguous_rate());
    }
    assert!(rates.windows(2).all(|w| w[1] >= w[0]), "{rates:?}");
    assert!(rates[2] > 0.0, "{rates:?}");
}
