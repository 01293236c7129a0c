//! Pose-error metrics, good-frame curves, and experiment comparison reports.
//!
//! Errors are Euclidean distances in millimetres between predicted and
//! ground-truth joints. A frame counts as "good" at a threshold only when
//! its *worst* joint error is within that threshold, which makes the curve
//! far stricter than the mean and very sensitive to single-joint failures.
//! All statistics can be stratified by a per-joint visibility flag so that
//! occluded joints are scored separately from directly observed ones.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HandPose;

/// Default good-frame threshold grid: 0 to 80 mm in 2 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=40).map(|i| f64::from(i) * 2.0).collect()
}

/// Mean errors over one visibility class. `None` means the class holds no
/// observations (for that joint, or at all), not a zero error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedMeans {
    pub per_joint_mean_mm: Vec<Option<f64>>,
    pub all_joint_mean_mm: Option<f64>,
    /// Number of (frame, joint) observations in the class.
    pub n_observations: usize,
}

/// Full evaluation of one prediction set against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_frames: usize,
    pub per_joint_mean_mm: Vec<f64>,
    pub all_joint_mean_mm: f64,
    /// `(threshold_mm, fraction of frames whose max joint error <= threshold)`.
    pub good_frame_curve: Vec<(f64, f64)>,
    pub visible: StratifiedMeans,
    pub occluded: StratifiedMeans,
}

/// Text table plus curve CSV comparing several named evaluation runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub table: String,
    pub curves_csv: String,
}

fn error_matrix(preds: &[HandPose], gts: &[HandPose]) -> Result<Vec<Vec<f64>>> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames vs {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArg("no frames to evaluate".into()));
    }
    let n_joints = gts[0].joints.len();
    if n_joints == 0 {
        return Err(Error::InvalidArg("ground truth has no joints".into()));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (f, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.joints.len() != n_joints || g.joints.len() != n_joints {
            return Err(Error::Shape(format!(
                "frame {f}: {} predicted / {} ground-truth joints, expected {n_joints}",
                p.joints.len(),
                g.joints.len()
            )));
        }
        let row = p
            .joints
            .iter()
            .zip(&g.joints)
            .map(|(a, b)| {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                let dz = a[2] - b[2];
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

/// Per-joint and all-joint mean Euclidean error in millimetres.
///
/// The all-joint mean averages over every (frame, joint) pair, which equals
/// the mean of the per-joint means because every frame scores every joint.
pub fn mean_joint_error(preds: &[HandPose], gts: &[HandPose]) -> Result<(Vec<f64>, f64)> {
    let errs = error_matrix(preds, gts)?;
    let n_frames = errs.len() as f64;
    let n_joints = errs[0].len();
    let mut per_joint = vec![0.0; n_joints];
    for row in &errs {
        for (j, e) in row.iter().enumerate() {
            per_joint[j] += e;
        }
    }
    for v in &mut per_joint {
        *v /= n_frames;
    }
    let all = per_joint.iter().sum::<f64>() / n_joints as f64;
    Ok((per_joint, all))
}

/// Fraction of frames whose maximum joint error is within each threshold.
///
/// Thresholds must be sorted ascending; the comparison is inclusive, so a
/// frame whose worst error exactly equals a threshold counts as good there.
pub fn good_frame_curve(
    preds: &[HandPose],
    gts: &[HandPose],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArg("empty threshold list".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArg("thresholds must be sorted ascending".into()));
    }
    let errs = error_matrix(preds, gts)?;
    let worst: Vec<f64> = errs
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .collect();
    let n = worst.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let good = worst.iter().filter(|&&w| w <= t).count();
            (t, good as f64 / n)
        })
        .collect())
}

fn class_means(errs: &[Vec<f64>], include: impl Fn(usize, usize) -> bool) -> StratifiedMeans {
    let n_joints = errs[0].len();
    let mut sums = vec![0.0; n_joints];
    let mut counts = vec![0usize; n_joints];
    for (f, row) in errs.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if include(f, j) {
                sums[j] += e;
                counts[j] += 1;
            }
        }
    }
    let per_joint: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    let total: usize = counts.iter().sum();
    let all = if total > 0 {
        Some(sums.iter().sum::<f64>() / total as f64)
    } else {
        None
    };
    StratifiedMeans { per_joint_mean_mm: per_joint, all_joint_mean_mm: all, n_observations: total }
}

/// Scores predictions against ground truth with visibility stratification.
///
/// `visibility[f][j]` marks joint `j` of frame `f` as directly observed;
/// every (frame, joint) pair lands in exactly one of the two classes, so the
/// observation-weighted combination of the class means reproduces the
/// overall mean.
pub fn evaluate(
    preds: &[HandPose],
    gts: &[HandPose],
    visibility: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<EvalResult> {
    let errs = error_matrix(preds, gts)?;
    let n_joints = errs[0].len();
    if visibility.len() != errs.len() {
        return Err(Error::Shape(format!(
            "{} visibility rows vs {} frames",
            visibility.len(),
            errs.len()
        )));
    }
    if let Some((f, row)) = visibility.iter().enumerate().find(|(_, r)| r.len() != n_joints) {
        return Err(Error::Shape(format!(
            "visibility row {f} has {} entries, expected {n_joints}",
            row.len()
        )));
    }
    let (per_joint, all) = mean_joint_error(preds, gts)?;
    let curve = good_frame_curve(preds, gts, thresholds)?;
    let visible = class_means(&errs, |f, j| visibility[f][j]);
    let occluded = class_means(&errs, |f, j| !visibility[f][j]);
    Ok(EvalResult {
        n_frames: errs.len(),
        per_joint_mean_mm: per_joint,
        all_joint_mean_mm: all,
        good_frame_curve: curve,
        visible,
        occluded,
    })
}

/// Builds a name-sorted comparison: a text table of all-joint means and a
/// CSV of good-frame curves with one column per run.
///
/// All runs must share one threshold grid so the curves align row-wise.
pub fn compare_report(runs: &[(String, EvalResult)]) -> Result<ComparisonReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArg("no runs to compare".into()));
    }
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].0.cmp(&runs[b].0));
    for w in order.windows(2) {
        if runs[w[0]].0 == runs[w[1]].0 {
            return Err(Error::DuplicateRun(runs[w[0]].0.clone()));
        }
    }
    let grid: Vec<f64> = runs[0].1.good_frame_curve.iter().map(|&(t, _)| t).collect();
    for (name, r) in runs {
        let g: Vec<f64> = r.good_frame_curve.iter().map(|&(t, _)| t).collect();
        if g != grid {
            return Err(Error::InvalidArg(format!(
                "run {name} uses a different threshold grid"
            )));
        }
    }

    let name_w = runs.iter().map(|(n, _)| n.len()).max().unwrap().max("run".len());
    let mut table = format!("{:<name_w$}  all_joint_mean_mm  n_frames\n", "run");
    for &i in &order {
        let (name, r) = &runs[i];
        writeln!(table, "{name:<name_w$}  {:>17.6}  {:>8}", r.all_joint_mean_mm, r.n_frames)
            .expect("write to string");
    }

    let mut csv = String::from("threshold_mm");
    for &i in &order {
        write!(csv, ",{}", runs[i].0).expect("write to string");
    }
    csv.push('\n');
    for (row, &t) in grid.iter().enumerate() {
        write!(csv, "{t}").expect("write to string");
        for &i in &order {
            write!(csv, ",{}", runs[i].1.good_frame_curve[row].1).expect("write to string");
        }
        csv.push('\n');
    }
    Ok(ComparisonReport { table, curves_csv: csv })
}

/// Writes predictions as CSV rows `frame_id,joint_id,x_mm,y_mm,z_mm`.
///
/// Floats use the shortest representation that parses back to the same
/// value, so a write/read round trip is exact.
pub fn write_preds_csv(path: &Path, ids: &[String], poses: &[HandPose]) -> Result<()> {
    if ids.len() != poses.len() {
        return Err(Error::Shape(format!(
            "{} frame ids vs {} poses",
            ids.len(),
            poses.len()
        )));
    }
    let mut out = String::from("frame_id,joint_id,x_mm,y_mm,z_mm\n");
    for (id, pose) in ids.iter().zip(poses) {
        if id.contains(',') || id.contains('\n') {
            return Err(Error::Format(format!("frame id {id:?} breaks CSV framing")));
        }
        for (j, p) in pose.joints.iter().enumerate() {
            writeln!(out, "{id},{j},{},{},{}", p[0], p[1], p[2]).expect("write to string");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads predictions written by [`write_preds_csv`].
///
/// Rows of one frame must be contiguous with joint ids counting up from 0,
/// and every frame must carry the same number of joints.
pub fn read_preds_csv(path: &Path) -> Result<(Vec<String>, Vec<HandPose>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame_id,joint_id,x_mm,y_mm,z_mm") => {}
        other => return Err(Error::Format(format!("bad header: {other:?}"))),
    }
    let mut ids: Vec<String> = Vec::new();
    let mut poses: Vec<HandPose> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let (id, joint, x, y, z) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(a), Some(b), Some(c), Some(d), Some(e), None) => (a, b, c, d, e),
            _ => return Err(Error::Format(format!("line {}: expected 5 fields", ln + 2))),
        };
        let bad = |what: &str| Error::Format(format!("line {}: bad {what}: {line}", ln + 2));
        let joint: usize = joint.parse().map_err(|_| bad("joint id"))?;
        let p = [
            x.parse::<f64>().map_err(|_| bad("x"))?,
            y.parse::<f64>().map_err(|_| bad("y"))?,
            z.parse::<f64>().map_err(|_| bad("z"))?,
        ];
        let start_new = ids.last().map(String::as_str) != Some(id);
        if start_new {
            if joint != 0 {
                return Err(bad("frame start (joint id must be 0)"));
            }
            ids.push(id.to_string());
            poses.push(HandPose { joints: Vec::new() });
        }
        let pose = poses.last_mut().expect("frame pushed above");
        if joint != pose.joints.len() {
            return Err(bad("joint order"));
        }
        pose.joints.push(p);
    }
    if poses.is_empty() {
        return Err(Error::Format("no prediction rows".into()));
    }
    let n_joints = poses[0].joints.len();
    if let Some(i) = poses.iter().position(|p| p.joints.len() != n_joints) {
        return Err(Error::Format(format!(
            "frame {} has {} joints, expected {n_joints}",
            ids[i],
            poses[i].joints.len()
        )));
    }
    Ok((ids, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(joints: &[[f64; 3]]) -> HandPose {
        HandPose { joints: joints.to_vec() }
    }

    fn random_poses(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> Vec<HandPose> {
        (0..frames)
            .map(|_| {
                let j = (0..joints)
                    .map(|_| {
                        [
                            rng.gen_range(-100.0..100.0),
                            rng.gen_range(-100.0..100.0),
                            rng.gen_range(250.0..450.0),
                        ]
                    })
                    .collect();
                HandPose { joints: j }
            })
            .collect()
    }

    #[test]
    fn identical_poses_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gts = random_poses(&mut rng, 5, 4);
        let (per_joint, all) = mean_joint_error(&gts, &gts).unwrap();
        assert_eq!(per_joint, vec![0.0; 4]);
        assert_eq!(all, 0.0);
        let curve = good_frame_curve(&gts, &gts, &default_thresholds()).unwrap();
        assert!(curve.iter().all(|&(_, f)| f == 1.0));
    }

    #[test]
    fn three_four_offset_means_exactly_five_mm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gts = random_poses(&mut rng, 6, 5);
        let preds: Vec<HandPose> = gts
            .iter()
            .map(|g| pose(&g.joints.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect::<Vec<_>>()))
            .collect();
        let (per_joint, all) = mean_joint_error(&preds, &gts).unwrap();
        for m in per_joint {
            assert_eq!(m, 5.0);
        }
        assert_eq!(all, 5.0);
    }

    #[test]
    fn all_joint_mean_averages_per_frame_errors() {
        let gts = vec![pose(&[[0.0, 0.0, 0.0]]), pose(&[[0.0, 0.0, 0.0]])];
        let preds = vec![pose(&[[2.0, 0.0, 0.0]]), pose(&[[0.0, 4.0, 0.0]])];
        let (_, all) = mean_joint_error(&preds, &gts).unwrap();
        assert_eq!(all, 3.0);
    }

    #[test]
    fn good_frame_counts_worst_joint_inclusively() {
        let gts = vec![
            pose(&[[0.0; 3], [0.0; 3]]),
            pose(&[[0.0; 3], [0.0; 3]]),
            pose(&[[0.0; 3], [0.0; 3]]),
        ];
        // Worst joint errors per frame: 5, 15, 25.
        let preds = vec![
            pose(&[[5.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            pose(&[[2.0, 0.0, 0.0], [0.0, 15.0, 0.0]]),
            pose(&[[0.0, 0.0, 25.0], [3.0, 0.0, 0.0]]),
        ];
        let curve = good_frame_curve(&preds, &gts, &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(curve, vec![(10.0, 1.0 / 3.0), (20.0, 2.0 / 3.0), (30.0, 1.0)]);
        let at_exact = good_frame_curve(&preds, &gts, &[5.0]).unwrap();
        assert_eq!(at_exact[0].1, 1.0 / 3.0, "threshold comparison is inclusive");
    }

    #[test]
    fn curve_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let gts = random_poses(&mut rng, 12, 6);
            let preds = random_poses(&mut rng, 12, 6);
            let curve = good_frame_curve(&preds, &gts, &default_thresholds()).unwrap();
            for w in curve.windows(2) {
                assert!(w[1].1 >= w[0].1, "trial {trial}: fraction decreased");
            }
            for &(_, f) in &curve {
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn doubling_errors_doubles_every_mean_exactly() {
        // Integer coordinates keep every sum and difference exact, so the
        // only rounding happens inside sqrt and the means, both of which
        // commute with scaling by two.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gts: Vec<HandPose> = (0..8)
            .map(|_| {
                pose(
                    &(0..5)
                        .map(|_| {
                            [
                                f64::from(rng.gen_range(-100..100)),
                                f64::from(rng.gen_range(-100..100)),
                                f64::from(rng.gen_range(250..450)),
                            ]
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let offsets: Vec<Vec<[f64; 3]>> = gts
            .iter()
            .map(|g| {
                g.joints
                    .iter()
                    .map(|_| {
                        [
                            f64::from(rng.gen_range(-8..8)),
                            f64::from(rng.gen_range(-8..8)),
                            f64::from(rng.gen_range(-8..8)),
                        ]
                    })
                    .collect()
            })
            .collect();
        let shifted = |scale: f64| -> Vec<HandPose> {
            gts.iter()
                .zip(&offsets)
                .map(|(g, off)| {
                    pose(
                        &g.joints
                            .iter()
                            .zip(off)
                            .map(|(p, o)| {
                                [p[0] + scale * o[0], p[1] + scale * o[1], p[2] + scale * o[2]]
                            })
                            .collect::<Vec<_>>(),
                    )
                })
                .collect()
        };
        let (pj1, all1) = mean_joint_error(&shifted(1.0), &gts).unwrap();
        let (pj2, all2) = mean_joint_error(&shifted(2.0), &gts).unwrap();
        for (a, b) in pj1.iter().zip(&pj2) {
            assert_eq!(2.0 * a, *b);
        }
        assert_eq!(2.0 * all1, all2);
    }

    #[test]
    fn stratified_means_recombine_to_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gts = random_poses(&mut rng, 10, 6);
        let preds = random_poses(&mut rng, 10, 6);
        let visibility: Vec<Vec<bool>> =
            (0..10).map(|_| (0..6).map(|_| rng.gen_bool(0.7)).collect()).collect();
        let r = evaluate(&preds, &gts, &visibility, &default_thresholds()).unwrap();
        let nv = r.visible.n_observations as f64;
        let no = r.occluded.n_observations as f64;
        let vis = r.visible.all_joint_mean_mm.unwrap_or(0.0);
        let occ = r.occluded.all_joint_mean_mm.unwrap_or(0.0);
        let recombined = (nv * vis + no * occ) / (nv + no);
        assert!(
            (recombined - r.all_joint_mean_mm).abs() < 1e-9,
            "{recombined} vs {}",
            r.all_joint_mean_mm
        );
        assert_eq!(r.visible.n_observations + r.occluded.n_observations, 60);
    }

    #[test]
    fn all_visible_leaves_occluded_class_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gts = random_poses(&mut rng, 3, 4);
        let preds = random_poses(&mut rng, 3, 4);
        let visibility = vec![vec![true; 4]; 3];
        let r = evaluate(&preds, &gts, &visibility, &[40.0]).unwrap();
        assert_eq!(r.occluded.n_observations, 0);
        assert_eq!(r.occluded.all_joint_mean_mm, None);
        assert!(r.occluded.per_joint_mean_mm.iter().all(Option::is_none));
        assert_eq!(r.visible.all_joint_mean_mm, Some(r.all_joint_mean_mm));
    }

    #[test]
    fn shape_and_argument_errors_are_reported() {
        let a = vec![pose(&[[0.0; 3]])];
        let b = vec![pose(&[[0.0; 3]]), pose(&[[0.0; 3]])];
        assert!(matches!(mean_joint_error(&a, &b), Err(Error::Shape(_))));
        let c = vec![pose(&[[0.0; 3], [0.0; 3]])];
        assert!(matches!(mean_joint_error(&a, &c), Err(Error::Shape(_))));
        assert!(matches!(mean_joint_error(&[], &[]), Err(Error::InvalidArg(_))));
        assert!(matches!(good_frame_curve(&a, &a, &[]), Err(Error::InvalidArg(_))));
        assert!(matches!(
            good_frame_curve(&a, &a, &[10.0, 5.0]),
            Err(Error::InvalidArg(_))
        ));
        assert!(matches!(
            evaluate(&a, &a, &[vec![true], vec![false]], &[10.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn preds_csv_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let poses = random_poses(&mut rng, 4, 3);
        let ids: Vec<String> = (0..4).map(|i| format!("frame_{i:05}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        write_preds_csv(&path, &ids, &poses).unwrap();
        let (rids, rposes) = read_preds_csv(&path).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rposes, poses);
    }

    #[test]
    fn preds_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "frame_id,joint_id,x_mm,y_mm,z_mm\nf0,1,0,0,0\n").unwrap();
        assert!(matches!(read_preds_csv(&path), Err(Error::Format(_))));
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(read_preds_csv(&path), Err(Error::Format(_))));
        std::fs::write(&path, "frame_id,joint_id,x_mm,y_mm,z_mm\nf0,0,0,oops,0\n").unwrap();
        assert!(matches!(read_preds_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn comparison_sorts_rows_and_aligns_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let gts = random_poses(&mut rng, 5, 3);
        let preds = random_poses(&mut rng, 5, 3);
        let vis = vec![vec![true; 3]; 5];
        let r1 = evaluate(&preds, &gts, &vis, &[20.0, 40.0]).unwrap();
        let r2 = evaluate(&gts, &gts, &vis, &[20.0, 40.0]).unwrap();
        let report = compare_report(&[("zeta".into(), r1.clone()), ("alpha".into(), r2)]).unwrap();
        let lines: Vec<&str> = report.table.lines().collect();
        assert!(lines[1].starts_with("alpha"));
        assert!(lines[2].starts_with("zeta"));
        let csv: Vec<&str> = report.curves_csv.lines().collect();
        assert_eq!(csv[0], "threshold_mm,alpha,zeta");
        assert_eq!(csv.len(), 3);
        assert!(csv[1].starts_with("20,1,"));

        let dup = compare_report(&[("a".into(), r1.clone()), ("a".into(), r1.clone())]);
        assert!(matches!(dup, Err(Error::DuplicateRun(_))));
        let other_grid = evaluate(&preds, &gts, &vis, &[10.0]).unwrap();
        let mixed = compare_report(&[("a".into(), r1), ("b".into(), other_grid)]);
        assert!(matches!(mixed, Err(Error::InvalidArg(_))));
    }
}
