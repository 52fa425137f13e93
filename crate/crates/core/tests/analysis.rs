use std::fs;

use hvp_core::analysis::*;
use hvp_core::model::ModelWidths;
use hvp_core::trainer::*;

fn random_run_log(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = TrainConfig {
        mode: TrainMode::Random,
        n_views: 4,
        batch_size: 32,
        epochs: 2,
        model: ModelWidths {
            conv: [4, 8, 8],
            proj_hidden: 16,
            embed_dim: 8,
            pred_hidden: 4,
        },
        data: DataSource::Synth { seed: 2, n: 320, classes: 4 },
        ..TrainConfig::default()
    };
    cfg.aug.out_size = 16;
    let data = cfg.data.load().unwrap();
    pretrain(&cfg, &data, dir, &RunOptions::default())
        .unwrap()
        .selection_log
        .unwrap()
}

#[test]
fn random_log_is_near_one_in_six() {
    let dir = tempfile::tempdir().unwrap();
    let log = random_run_log(dir.path());
    let s = compute_stats_from_paths(&[&log], 1).unwrap();
    assert_eq!(s.records, 640);
    let p = 1.0 / 6.0;
    let sigma = (p * (1.0 - p) / s.records as f64).sqrt();
    let f = s.frac_lowest_iou_from(0);
    // exact IoU ties push the fraction up slightly, so allow 3 sigma
    assert!((f - p).abs() <= 3.0 * sigma, "{f}");
    for h in [&s.iou_histogram_selected, &s.iou_histogram_random] {
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for b in &s.buckets {
        assert!((0.0..=1.0).contains(&b.frac_lowest_iou_selected));
    }

    let cmp = compare_runs(&s, &s).unwrap();
    assert!(cmp.rows.iter().all(|r| r.delta_mean_loss == 0.0 && r.delta_mean_iou == 0.0 && r.delta_frac_lowest_iou == 0.0));
}

#[test]
fn csv_outputs_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let log = random_run_log(dir.path());
    let s = compute_stats_from_paths(&[&log], 1).unwrap();
    let stats_csv = dir.path().join("stats.csv");
    let hist_csv = dir.path().join("hist.csv");
    write_stats_csv(&stats_csv, &s).unwrap();
    write_histogram_csv(&hist_csv, &s).unwrap();
    let stats_text = fs::read_to_string(&stats_csv).unwrap();
    assert!(stats_text.starts_with("epoch_lo,epoch_hi,records,frac_lowest_iou_selected,mean_iou_selected,mean_iou_random,mean_loss"));
    assert_eq!(stats_text.lines().count(), 1 + s.buckets.len());
    let hist_text = fs::read_to_string(&hist_csv).unwrap();
    assert!(hist_text.starts_with("bin_lo,bin_hi,mass_selected,mass_random"));
    assert_eq!(hist_text.lines().count(), 1 + HISTOGRAM_BINS);
}

#[test]
fn empty_log_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    fs::write(&p, "").unwrap();
    assert!(compute_stats_from_paths(&[&p], 1).is_err());
    assert!(compute_stats_from_paths(&[dir.path().join("missing.jsonl")], 1).is_err());
}
