//! Ablation command: trains one model per setting of a single axis on the
//! same data and seed, then writes a comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gasp_core::eval::{ablation_sweep, AblationRow, AblationSetting, DataSplit};

use crate::config::{parse_head_layers, RunConfig};
use crate::dataset::load_split;
use crate::errors::CliError;
use crate::seeds::{effective_train_seed, grammar_for, model_init_seed};

pub const CSV_NAME: &str = "ablation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    LoraRank,
    HeadLayers,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "lora-rank" => Ok(AblationAxis::LoraRank),
            "head-layers" => Ok(AblationAxis::HeadLayers),
            other => Err(CliError::InvalidConfig(format!(
                "unknown ablation axis '{other}' (expected lora-rank or head-layers)"
            ))),
        }
    }
}

/// `lora-rank` values are comma-separated ranks; `head-layers` values are
/// semicolon-separated layer lists, each in range or comma form.
pub fn parse_settings(axis: AblationAxis, values: &str) -> Result<Vec<AblationSetting>, CliError> {
    let trimmed = values.trim();
    if trimmed.is_empty() {
        return Err(CliError::InvalidConfig("no ablation values given".into()));
    }
    match axis {
        AblationAxis::LoraRank => trimmed
            .split(',')
            .map(|p| {
                let rank: usize = p.trim().parse().map_err(|_| {
                    CliError::InvalidConfig(format!("bad rank '{}' in ablation values", p.trim()))
                })?;
                if rank == 0 {
                    return Err(CliError::InvalidConfig("rank 0 is not trainable".into()));
                }
                Ok(AblationSetting::LoraRank(rank))
            })
            .collect(),
        AblationAxis::HeadLayers => trimmed
            .split(';')
            .map(|p| Ok(AblationSetting::HeadLayers(parse_head_layers(p.trim())?)))
            .collect(),
    }
}

pub struct AblateOutcome {
    pub rows: Vec<AblationRow>,
    pub csv_path: PathBuf,
}

pub fn run(
    cfg: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    settings: &[AblationSetting],
) -> Result<AblateOutcome, CliError> {
    cfg.validate()?;
    let train_stored = load_split(dataset_dir, DataSplit::Train)?;
    let test_stored = load_split(dataset_dir, DataSplit::Test)?;
    if train_stored.is_empty() || test_stored.is_empty() {
        return Err(CliError::CorruptDataset("ablation needs both dataset splits".into()));
    }
    let train_data: Vec<_> = train_stored.iter().map(|s| s.to_train_sequence()).collect();
    let test_data: Vec<_> =
        test_stored.iter().map(|s| s.to_eval_sequence(DataSplit::Test)).collect();
    let grammar = grammar_for(cfg)?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = effective_train_seed(cfg);
    train_cfg.lora_rank = cfg.model.lora_rank;
    train_cfg.head_layers = cfg.model.head_layers.clone();

    let rows = ablation_sweep(
        settings,
        &cfg.model,
        model_init_seed(cfg),
        &train_cfg,
        &cfg.loss,
        &cfg.eval,
        &train_data,
        &test_data,
        &grammar,
    )?;

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(CSV_NAME);
    let mut csv = String::from("label,avg_pck,final_l_corr\n");
    for row in &rows {
        writeln!(csv, "{},{},{}", row.label, row.avg_pck, row.final_l_corr)
            .expect("string write");
    }
    std::fs::write(&csv_path, csv)?;
    Ok(AblateOutcome { rows, csv_path })
}

pub fn print_summary(rows: &[AblationRow]) {
    for row in rows {
        println!(
            "{:<24} avg PCK {:.4}  final contrastive loss {:.4}",
            row.label, row.avg_pck, row.final_l_corr
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen;

    #[test]
    fn setting_parsers_cover_both_axes() {
        let ranks = parse_settings(AblationAxis::LoraRank, "2, 4,8").unwrap();
        assert_eq!(
            ranks,
            vec![
                AblationSetting::LoraRank(2),
                AblationSetting::LoraRank(4),
                AblationSetting::LoraRank(8)
            ]
        );
        let layers = parse_settings(AblationAxis::HeadLayers, "1-2; 4").unwrap();
        assert_eq!(
            layers,
            vec![
                AblationSetting::HeadLayers(vec![1, 2]),
                AblationSetting::HeadLayers(vec![4])
            ]
        );
        assert!(parse_settings(AblationAxis::LoraRank, "0").is_err());
        assert!(parse_settings(AblationAxis::LoraRank, "x").is_err());
        assert!(AblationAxis::parse("nope").is_err());
    }

    #[test]
    fn sweep_writes_csv_rows() {
        let mut cfg = RunConfig::default();
        cfg.seed = 44;
        cfg.dataset.num_train = 2;
        cfg.dataset.num_test = 1;
        cfg.scene.points_per_surface = 300;
        cfg.scene.num_surfaces = 3;
        cfg.train.epochs = 1;
        cfg.eval.num_sequences = 1;
        let data_dir = tempfile::tempdir().unwrap();
        datagen::run(&cfg, data_dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let settings = parse_settings(AblationAxis::LoraRank, "2,4").unwrap();
        let outcome = run(&cfg, data_dir.path(), out.path(), &settings).unwrap();
        assert_eq!(outcome.rows.len(), 2);
        let text = std::fs::read_to_string(&outcome.csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,avg_pck,final_l_corr");
        assert!(lines[1].starts_with("lora_rank=2,"));
        assert!(lines[2].starts_with("lora_rank=4,"));
    }
}
