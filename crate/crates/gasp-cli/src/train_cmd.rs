//! Training command: loads the train split, runs the optimizer, streams a
//! JSONL step log, and checkpoints every epoch plus a final snapshot.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gasp_core::eval::DataSplit;
use gasp_core::model::{init_model, ToyModel};
use gasp_core::trainer::{
    train, OptimizerState, StepRecord, TrainObserver, TrainSequence, TrainSummary,
};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_split;
use crate::errors::CliError;
use crate::seeds::{effective_train_seed, grammar_for, model_init_seed};

pub const STEP_LOG_NAME: &str = "steps.jsonl";
pub const FINAL_CKPT_NAME: &str = "ckpt-final.gaspckpt";

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub model: ToyModel,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

struct JsonlObserver {
    writer: BufWriter<File>,
    ckpt_dir: PathBuf,
    failure: Option<String>,
}

impl TrainObserver for JsonlObserver {
    fn on_step(&mut self, record: &StepRecord) {
        let line = match serde_json::to_string(record) {
            Ok(l) => l,
            Err(e) => {
                self.failure.get_or_insert(e.to_string());
                return;
            }
        };
        if let Err(e) = writeln!(self.writer, "{line}") {
            self.failure.get_or_insert(e.to_string());
        }
    }

    fn on_checkpoint(
        &mut self,
        epoch: usize,
        model: &ToyModel,
        _state: &OptimizerState,
    ) -> Option<String> {
        let path = self.ckpt_dir.join(format!("ckpt-epoch-{epoch}.gaspckpt"));
        match save_checkpoint(&path, model) {
            Ok(()) => Some(path.display().to_string()),
            Err(e) => {
                self.failure.get_or_insert(e.to_string());
                None
            }
        }
    }
}

pub fn run(cfg: &RunConfig, dataset_dir: &Path, out_dir: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let stored = load_split(dataset_dir, DataSplit::Train)?;
    if stored.is_empty() {
        return Err(CliError::CorruptDataset("dataset has no training split".into()));
    }
    let data: Vec<TrainSequence> = stored.iter().map(|s| s.to_train_sequence()).collect();
    let grammar = grammar_for(cfg)?;
    let mut model = init_model(cfg.model.clone(), model_init_seed(cfg))?;

    // The model section is the single source of truth for the fields the
    // trainer mirrors.
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = effective_train_seed(cfg);
    train_cfg.lora_rank = cfg.model.lora_rank;
    train_cfg.head_layers = cfg.model.head_layers.clone();

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(STEP_LOG_NAME);
    let mut observer = JsonlObserver {
        writer: BufWriter::new(File::create(&log_path)?),
        ckpt_dir: out_dir.to_path_buf(),
        failure: None,
    };

    let summary = train(&mut model, &data, &grammar, &train_cfg, &cfg.loss, &mut observer)?;
    observer.writer.flush()?;
    if let Some(msg) = observer.failure {
        return Err(CliError::Io(std::io::Error::other(msg)));
    }

    let final_checkpoint = out_dir.join(FINAL_CKPT_NAME);
    save_checkpoint(&final_checkpoint, &model)?;
    Ok(TrainOutcome { summary, model, final_checkpoint, log_path })
}
