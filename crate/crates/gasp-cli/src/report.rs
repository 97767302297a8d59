//! Evaluation report emission: one JSON file for machines, CSV curves for
//! plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gasp_core::eval::{CurvePoint, EvalReport, LayerStat};

use crate::errors::CliError;

fn write_file(dir: &Path, name: &str, text: String, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    out.push(path);
    Ok(())
}

fn layers_csv(stats: &[LayerStat]) -> String {
    let mut s = String::from("layer,mean,std,pooled,sequences\n");
    for st in stats {
        let _ = writeln!(s, "{},{},{},{},{}", st.layer, st.mean, st.std, st.pooled, st.sequences);
    }
    s
}

/// One row per offset, one pooled-accuracy column per layer.
fn delta_csv(points: &[CurvePoint]) -> String {
    let mut layers: Vec<usize> = Vec::new();
    let mut deltas: Vec<usize> = Vec::new();
    for p in points {
        if !layers.contains(&p.layer) {
            layers.push(p.layer);
        }
        if !deltas.contains(&p.delta_t) {
            deltas.push(p.delta_t);
        }
    }
    let mut s = String::from("delta_t");
    for l in &layers {
        let _ = write!(s, ",layer_{l}");
    }
    s.push('\n');
    for &dt in &deltas {
        let _ = write!(s, "{dt}");
        for &l in &layers {
            match points.iter().find(|p| p.layer == l && p.delta_t == dt) {
                Some(p) => {
                    let _ = write!(s, ",{}", p.pooled);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    write_file(dir, "report.json", serde_json::to_string_pretty(report)?, &mut files)?;
    write_file(dir, "layers_qk.csv", layers_csv(&report.qk_pck), &mut files)?;
    write_file(dir, "layers_head.csv", layers_csv(&report.head_pck), &mut files)?;
    write_file(dir, "delta_qk.csv", delta_csv(&report.qk_pck_by_delta), &mut files)?;
    write_file(dir, "delta_head.csv", delta_csv(&report.head_pck_by_delta), &mut files)?;

    let mut cal = String::from(
        "family,layer,rho,mean_conf_correct,mean_conf_incorrect,n_correct,n_incorrect\n",
    );
    for (family, stats) in [("qk", &report.calibration_qk), ("head", &report.calibration_head)] {
        for c in stats {
            let rho = c.rho.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(
                cal,
                "{family},{},{rho},{},{},{},{}",
                c.layer, c.mean_conf_correct, c.mean_conf_incorrect, c.n_correct, c.n_incorrect
            );
        }
    }
    write_file(dir, "calibration.csv", cal, &mut files)?;

    let mut rob = String::from("family,layer,delta_t,pck,y\n");
    for (family, layer, points) in [
        ("qk", report.best_qk_layer, &report.robustness_qk),
        ("head", report.best_head_layer, &report.robustness_head),
    ] {
        for p in points {
            let y = p.y.map(|y| y.to_string()).unwrap_or_default();
            let _ = writeln!(rob, "{family},{layer},{},{},{y}", p.delta_t, p.pck);
        }
    }
    write_file(dir, "robustness.csv", rob, &mut files)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_table_pivots_layer_major_points() {
        let mk = |layer, delta_t, pooled| CurvePoint {
            layer,
            delta_t,
            mean: pooled,
            std: 0.0,
            pooled,
            sequences: 1,
        };
        let csv = delta_csv(&[mk(1, 1, 0.5), mk(1, 2, 0.25), mk(2, 1, 0.75), mk(2, 2, 0.5)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "delta_t,layer_1,layer_2");
        assert_eq!(lines[1], "1,0.5,0.75");
        assert_eq!(lines[2], "2,0.25,0.5");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn layer_table_has_one_row_per_layer() {
        let stats = vec![
            LayerStat { layer: 1, mean: 0.5, std: 0.1, pooled: 0.5, sequences: 3 },
            LayerStat { layer: 2, mean: 0.75, std: 0.0, pooled: 0.7, sequences: 3 },
        ];
        let csv = layers_csv(&stats);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("2,0.75,"));
    }
}
