//! Evaluation command: probes a trained (or freshly initialized) model on the
//! held-out split and writes the report plus curve CSVs.

use std::path::{Path, PathBuf};

use gasp_core::eval::{evaluate, DataSplit, EvalReport};
use gasp_core::model::init_model;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_split;
use crate::errors::CliError;
use crate::report::write_eval_outputs;
use crate::seeds::model_init_seed;

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub files: Vec<PathBuf>,
}

pub fn run(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
    untrained: bool,
) -> Result<EvalOutcome, CliError> {
    cfg.validate()?;
    let model = if untrained {
        init_model(cfg.model.clone(), model_init_seed(cfg))?
    } else {
        let path = checkpoint.ok_or_else(|| {
            CliError::InvalidConfig("eval needs --checkpoint unless --untrained is set".into())
        })?;
        load_checkpoint(path, Some(&cfg.model))?
    };

    let stored = load_split(dataset_dir, DataSplit::Test)?;
    if stored.is_empty() {
        return Err(CliError::CorruptDataset("dataset has no test split".into()));
    }
    let sequences: Vec<_> =
        stored.iter().map(|s| s.to_eval_sequence(DataSplit::Test)).collect();
    let report = evaluate(&model, &sequences, &cfg.eval)?;
    let files = write_eval_outputs(out_dir, &report)?;
    Ok(EvalOutcome { report, files })
}

/// Console summary: headline numbers someone skimming a run wants first.
pub fn print_summary(report: &EvalReport) {
    let head_best = report
        .head_pck
        .iter()
        .find(|s| s.layer == report.best_head_layer);
    let qk_best = report.qk_pck.iter().find(|s| s.layer == report.best_qk_layer);
    if let Some(s) = head_best {
        println!(
            "best head layer {}: PCK {:.4} (pooled {:.4}, {} sequences)",
            s.layer, s.mean, s.pooled, s.sequences
        );
    }
    if let Some(s) = qk_best {
        println!(
            "best qk layer {}: PCK {:.4} (pooled {:.4}, {} sequences)",
            s.layer, s.mean, s.pooled, s.sequences
        );
    }
    if let Some(c) = report
        .calibration_head
        .iter()
        .find(|c| c.layer == report.best_head_layer)
    {
        match c.rho {
            Some(r) => println!("head calibration rho at layer {}: {:+.4}", c.layer, r),
            None => println!("head calibration rho at layer {}: undefined", c.layer),
        }
    }
    let y24 = report
        .robustness_head
        .iter()
        .find(|p| p.delta_t == 24)
        .and_then(|p| p.y);
    match y24 {
        Some(y) if report.robustness_head_defined => println!("head robustness Y(24): {y:.4}"),
        _ => println!("head robustness Y(24): undefined"),
    }
    println!("chance PCK at this threshold: {:.4}", report.chance_pck);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{datagen, train_cmd};

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 33;
        cfg.dataset.num_train = 2;
        cfg.dataset.num_test = 2;
        cfg.scene.points_per_surface = 300;
        cfg.scene.num_surfaces = 3;
        cfg.train.epochs = 1;
        cfg.eval.num_sequences = 2;
        cfg
    }

    #[test]
    fn untrained_eval_writes_report_files() {
        let cfg = small_config();
        let data_dir = tempfile::tempdir().unwrap();
        datagen::run(&cfg, data_dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let outcome = run(&cfg, None, data_dir.path(), out.path(), true).unwrap();
        assert_eq!(outcome.report.num_sequences, 2);
        assert_eq!(outcome.report.head_pck.len(), cfg.model.head_layers.len());
        assert_eq!(outcome.report.qk_pck.len(), cfg.model.num_layers);
        for f in &outcome.files {
            assert!(f.exists(), "missing report file {}", f.display());
        }
        assert!(out.path().join("report.json").exists());
    }

    #[test]
    fn trained_eval_accepts_checkpoint() {
        let cfg = small_config();
        let data_dir = tempfile::tempdir().unwrap();
        datagen::run(&cfg, data_dir.path()).unwrap();
        let train_out = tempfile::tempdir().unwrap();
        let trained = train_cmd::run(&cfg, data_dir.path(), train_out.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let outcome = run(
            &cfg,
            Some(trained.final_checkpoint.as_path()),
            data_dir.path(),
            out.path(),
            false,
        )
        .unwrap();
        assert!(outcome.report.chance_pck > 0.0);
        // Missing checkpoint argument without --untrained is a config error.
        let err = run(&cfg, None, data_dir.path(), out.path(), false).unwrap_err();
        assert!(matches!(err, CliError::InvalidConfig(_)));
    }
}
