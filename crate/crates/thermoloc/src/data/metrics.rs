//! Per-sequence error statistics, the CSV report, and trajectory overlay
//! plots.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::quat::{angular_error_deg, position_error_m, Pose};

/// Median/mean position and rotation errors for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub sequence: String,
    pub median_pos_m: f64,
    pub mean_pos_m: f64,
    pub median_rot_deg: f64,
    pub mean_rot_deg: f64,
}

/// The full report: one row per sequence plus a computed average row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sequences: Vec<SequenceMetrics>,
}

impl MetricsReport {
    /// Column-wise arithmetic mean across sequences.
    pub fn average(&self) -> SequenceMetrics {
        let n = self.sequences.len() as f64;
        let sum = |f: fn(&SequenceMetrics) -> f64| self.sequences.iter().map(f).sum::<f64>() / n;
        SequenceMetrics {
            sequence: "average".to_string(),
            median_pos_m: sum(|s| s.median_pos_m),
            mean_pos_m: sum(|s| s.mean_pos_m),
            median_rot_deg: sum(|s| s.median_rot_deg),
            mean_rot_deg: sum(|s| s.mean_rot_deg),
        }
    }
}

/// Median by sorting; even counts average the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-frame position/rotation errors reduced to median and mean.
pub fn compute_metrics(sequence: &str, preds: &[Pose], gts: &[Pose]) -> Result<SequenceMetrics> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-zero pose counts, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let pos: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| position_error_m(&p.position, &g.position))
        .collect();
    let rot: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| angular_error_deg(&p.orientation, &g.orientation))
        .collect();
    Ok(SequenceMetrics {
        sequence: sequence.to_string(),
        median_pos_m: median(&pos),
        mean_pos_m: pos.iter().sum::<f64>() / pos.len() as f64,
        median_rot_deg: median(&rot),
        mean_rot_deg: rot.iter().sum::<f64>() / rot.len() as f64,
    })
}

const CSV_HEADER: &str = "sequence,median_pos_m,mean_pos_m,median_rot_deg,mean_rot_deg";

/// Shortest round-trip float text, always with a decimal point (`0.0`, not
/// `0`).
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Writes the CSV report: header, one row per sequence, and an `average`
/// row. Floats use shortest-round-trip formatting so parsing is lossless.
pub fn write_metrics_report(report: &MetricsReport, path: &Path) -> Result<()> {
    if report.sequences.is_empty() {
        return Err(Error::InvalidInput("report has no sequences".into()));
    }
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    let mut row = |m: &SequenceMetrics| {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            m.sequence,
            fmt_f64(m.median_pos_m),
            fmt_f64(m.mean_pos_m),
            fmt_f64(m.median_rot_deg),
            fmt_f64(m.mean_rot_deg)
        ));
    };
    for m in &report.sequences {
        row(m);
    }
    row(&report.average());
    fs::write(path, text)?;
    Ok(())
}

/// Parses a report CSV back into per-sequence rows (the trailing `average`
/// row is recomputable and dropped).
pub fn read_metrics_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(perr(1, "missing or wrong CSV header".into())),
    }
    let mut sequences = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(perr(i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| perr(i + 1, format!("field {}: {e}", j + 1)))
        };
        sequences.push(SequenceMetrics {
            sequence: fields[0].to_string(),
            median_pos_m: num(1)?,
            mean_pos_m: num(2)?,
            median_rot_deg: num(3)?,
            mean_rot_deg: num(4)?,
        });
    }
    if sequences.last().map(|s| s.sequence.as_str()) == Some("average") {
        sequences.pop();
    }
    if sequences.is_empty() {
        return Err(perr(1, "no sequence rows".into()));
    }
    Ok(MetricsReport { sequences })
}

/// Draws ground-truth (green) and predicted (red) trajectories projected on
/// the x/y plane as a PNG overlay.
pub fn plot_trajectory_overlay(gts: &[Pose], preds: &[Pose], path: &Path) -> Result<()> {
    if gts.is_empty() || gts.len() != preds.len() {
        return Err(Error::InvalidInput(
            "overlay needs equal non-zero pose counts".into(),
        ));
    }
    let (w, h) = (512u32, 512u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([16, 16, 16]));

    // Shared bounds over both trajectories with a 10% margin.
    let xs = gts.iter().chain(preds).map(|p| p.position[0]);
    let ys = gts.iter().chain(preds).map(|p| p.position[1]);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in ys {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = ((x1 - x0).max(y1 - y0)).max(1e-9);
    let margin = 0.1 * span;
    let scale = (w as f64 - 1.0) / (span + 2.0 * margin);
    let to_px = |p: &Pose| {
        let px = (p.position[0] - x0 + margin) * scale;
        let py = (p.position[1] - y0 + margin) * scale;
        (px, (h as f64 - 1.0) - py)
    };

    let mut draw_line = |a: (f64, f64), b: (f64, f64), color: Rgb<u8>| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.0 + t * (b.0 - a.0)).round();
            let y = (a.1 + t * (b.1 - a.1)).round();
            if (0.0..w as f64).contains(&x) && (0.0..h as f64).contains(&y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };
    for (poses, color) in [(gts, Rgb([80, 220, 80])), (preds, Rgb([230, 80, 80]))] {
        for pair in poses.windows(2) {
            draw_line(to_px(&pair[0]), to_px(&pair[1]), color);
        }
        if poses.len() == 1 {
            draw_line(to_px(&poses[0]), to_px(&poses[0]), color);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn pose(x: f64, y: f64, z: f64) -> Pose {
        Pose::new([x, y, z], UnitQuaternion::identity()).unwrap()
    }

    #[test]
    fn identical_poses_give_zero_errors() {
        let poses = vec![pose(1.0, 2.0, 3.0), pose(-1.0, 0.0, 0.5)];
        let m = compute_metrics("s", &poses, &poses).unwrap();
        assert_eq!(m.median_pos_m, 0.0);
        assert_eq!(m.mean_pos_m, 0.0);
        assert_eq!(m.median_rot_deg, 0.0);
        assert_eq!(m.mean_rot_deg, 0.0);
    }

    #[test]
    fn median_and_mean_of_1_2_9() {
        // Position errors 1, 2, 9 along x.
        let gts = vec![pose(0.0, 0.0, 0.0); 3];
        let preds = vec![pose(1.0, 0.0, 0.0), pose(2.0, 0.0, 0.0), pose(9.0, 0.0, 0.0)];
        let m = compute_metrics("s", &preds, &gts).unwrap();
        assert_eq!(m.median_pos_m, 2.0);
        assert_eq!(m.mean_pos_m, 4.0);
    }

    #[test]
    fn length_mismatch_is_invalid_input() {
        let a = vec![pose(0.0, 0.0, 0.0)];
        let b = vec![pose(0.0, 0.0, 0.0); 2];
        assert!(matches!(
            compute_metrics("s", &a, &b).unwrap_err(),
            Error::InvalidInput(_)
        ));
        assert!(matches!(
            compute_metrics("s", &[], &[]).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.gen_range(1..30usize);
            let rand_pose = |rng: &mut ChaCha8Rng| {
                let q = UnitQuaternion::canonicalize([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ])
                .unwrap();
                Pose::new(
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ],
                    q,
                )
                .unwrap()
            };
            let preds: Vec<Pose> = (0..n).map(|_| rand_pose(&mut rng)).collect();
            let gts: Vec<Pose> = (0..n).map(|_| rand_pose(&mut rng)).collect();
            let m = compute_metrics("s", &preds, &gts).unwrap();

            // Brute-force oracle: recompute errors, sort for the median.
            let mut pos: Vec<f64> = preds
                .iter()
                .zip(&gts)
                .map(|(p, g)| {
                    (0..3)
                        .map(|i| (p.position[i] - g.position[i]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mean = pos.iter().sum::<f64>() / n as f64;
            pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if n % 2 == 1 {
                pos[n / 2]
            } else {
                0.5 * (pos[n / 2 - 1] + pos[n / 2])
            };
            assert!((m.mean_pos_m - mean).abs() < 1e-12);
            assert!((m.median_pos_m - med).abs() < 1e-12);
            assert!(m.median_rot_deg >= 0.0 && m.mean_rot_deg >= 0.0);
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let report = MetricsReport {
            sequences: vec![
                SequenceMetrics {
                    sequence: "a/s3".into(),
                    median_pos_m: 3.17,
                    mean_pos_m: 4.18,
                    median_rot_deg: 0.55,
                    mean_rot_deg: 1.93,
                },
                SequenceMetrics {
                    sequence: "b/s2".into(),
                    median_pos_m: 0.1 + 0.2, // deliberately non-representable
                    mean_pos_m: 1.0 / 3.0,
                    median_rot_deg: 7.25,
                    mean_rot_deg: 0.0,
                },
            ],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_metrics_report(&report, &path).unwrap();
        let parsed = read_metrics_report(&path).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn csv_layout_matches_expected_text() {
        let report = MetricsReport {
            sequences: vec![SequenceMetrics {
                sequence: "seq".into(),
                median_pos_m: 0.0,
                mean_pos_m: 0.0,
                median_rot_deg: 0.0,
                mean_rot_deg: 0.0,
            }],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_metrics_report(&report, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "sequence,median_pos_m,mean_pos_m,median_rot_deg,mean_rot_deg\n\
             seq,0.0,0.0,0.0,0.0\naverage,0.0,0.0,0.0,0.0\n"
        );
    }

    #[test]
    fn average_row_is_columnwise_mean() {
        let mk = |v: f64| SequenceMetrics {
            sequence: format!("s{v}"),
            median_pos_m: v,
            mean_pos_m: 2.0 * v,
            median_rot_deg: 3.0 * v,
            mean_rot_deg: 4.0 * v,
        };
        let report = MetricsReport {
            sequences: vec![mk(1.0), mk(3.0)],
        };
        let avg = report.average();
        assert_eq!(avg.sequence, "average");
        assert_eq!(avg.median_pos_m, 2.0);
        assert_eq!(avg.mean_pos_m, 4.0);
        assert_eq!(avg.median_rot_deg, 6.0);
        assert_eq!(avg.mean_rot_deg, 8.0);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let report = MetricsReport {
            sequences: vec![SequenceMetrics {
                sequence: "s".into(),
                median_pos_m: 0.0,
                mean_pos_m: 0.0,
                median_rot_deg: 0.0,
                mean_rot_deg: 0.0,
            }],
        };
        let err = write_metrics_report(&report, Path::new("/nonexistent-dir/x.csv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn overlay_plot_writes_a_png_with_both_colors() {
        let gts: Vec<Pose> = (0..10).map(|i| pose(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        let preds: Vec<Pose> = gts
            .iter()
            .map(|p| pose(p.position[0] + 0.5, p.position[1] - 0.3, 0.0))
            .collect();
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.png");
        plot_trajectory_overlay(&gts, &preds, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (512, 512));
        let has = |c: Rgb<u8>| img.pixels().any(|p| *p == c);
        assert!(has(Rgb([80, 220, 80])), "ground-truth polyline missing");
        assert!(has(Rgb([230, 80, 80])), "prediction polyline missing");
    }

    #[test]
    fn median_even_count_averages_middle_pair() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }
}
