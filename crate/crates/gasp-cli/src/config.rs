//! Merged run configuration: defaults, optional TOML file, then command
//! line flags, in increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gasp_core::eval::EvalConfig;
use gasp_core::geometry::SamplingPolicy;
use gasp_core::losses::LossConfig;
use gasp_core::model::ModelConfig;
use gasp_core::scenegen::{RenderParams, SceneSpec};
use gasp_core::trainer::TrainConfig;

use crate::errors::CliError;

/// Dataset-shaping options that live above the per-scene spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub num_train: usize,
    pub num_test: usize,
    /// Coarse query grid stored with every sequence; evaluation reads it.
    pub coarse_grid: (usize, usize),
    /// Fine grid stored alongside for denser training anchors.
    pub fine_grid: (usize, usize),
    /// Timeline offsets of the frames rendered per sequence, relative to a
    /// per-sequence random start. The ladder spacing realizes pair offsets
    /// from 1 up to the largest entry.
    pub frame_offsets: Vec<usize>,
    /// Every k-th training scene is a twin-object scene (0 disables).
    pub twin_every: usize,
    /// Language sentence length range attached to training sequences.
    pub lang_len_range: (usize, usize),
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            num_train: 200,
            num_test: 200,
            coarse_grid: (8, 8),
            fine_grid: (24, 24),
            frame_offsets: vec![0, 1, 2, 4, 8, 12, 16, 24],
            twin_every: 4,
            lang_len_range: (4, 12),
        }
    }
}

impl DatasetOptions {
    pub fn validate(&self, render: &RenderParams) -> Result<(), CliError> {
        if self.num_train == 0 || self.num_test == 0 {
            return Err(CliError::InvalidConfig("dataset counts must be positive".into()));
        }
        let offs = &self.frame_offsets;
        if offs.len() < 2 || offs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::InvalidConfig(
                "frame_offsets must be strictly increasing with at least two entries".into(),
            ));
        }
        if offs[offs.len() - 1] >= render.t_max {
            return Err(CliError::InvalidConfig(format!(
                "frame_offsets reach {} but the timeline ends at {}",
                offs[offs.len() - 1],
                render.t_max
            )));
        }
        if self.lang_len_range.0 < 2 || self.lang_len_range.0 > self.lang_len_range.1 {
            return Err(CliError::InvalidConfig("lang_len_range must be ordered, min >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every command derives its own streams from it.
    pub seed: u64,
    pub scene: SceneSpec,
    pub sampling: SamplingPolicy,
    pub render: RenderParams,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetOptions,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate().map_err(CliError::Eval)?;
        self.scene.validate()?;
        self.dataset.validate(&self.render)?;
        let grid = self.model_patch_grid()?;
        if self.render.image_height % grid.0 != 0 || self.render.image_width % grid.1 != 0 {
            return Err(CliError::InvalidConfig(format!(
                "patch grid {:?} does not divide the {}x{} image",
                grid, self.render.image_height, self.render.image_width
            )));
        }
        if self.model.max_frames < self.dataset.frame_offsets.len() {
            return Err(CliError::InvalidConfig(format!(
                "model supports {} frame slots but sequences have {} frames",
                self.model.max_frames,
                self.dataset.frame_offsets.len()
            )));
        }
        if self.eval.query_grid != self.dataset.coarse_grid {
            return Err(CliError::InvalidConfig(
                "eval.query_grid must match dataset.coarse_grid".into(),
            ));
        }
        Ok(())
    }

    /// The square patch grid implied by the model's patch count.
    pub fn model_patch_grid(&self) -> Result<(usize, usize), CliError> {
        let side = patch_side(self.model.patches_per_frame);
        if side * side != self.model.patches_per_frame {
            return Err(CliError::InvalidConfig(format!(
                "patches_per_frame {} is not a square",
                self.model.patches_per_frame
            )));
        }
        Ok((side, side))
    }
}

fn patch_side(n: usize) -> usize {
    let mut s = 1usize;
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

/// Loads the config file when given, otherwise the defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::InvalidConfig(e.to_string()))
        }
    }
}

/// Parses a head-layer selection: either a closed range `a-b` or a comma
/// list `1,2,4`.
pub fn parse_head_layers(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = |m: &str| CliError::InvalidConfig(format!("head layers `{s}`: {m}"));
    let parse_one =
        |t: &str| t.trim().parse::<usize>().map_err(|_| bad("entries must be integers"));
    let layers: Vec<usize> = if let Some((a, b)) = s.split_once('-') {
        let (lo, hi) = (parse_one(a)?, parse_one(b)?);
        if lo > hi {
            return Err(bad("range is reversed"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(parse_one).collect::<Result<_, _>>()?
    };
    if layers.is_empty() || layers[0] == 0 {
        return Err(bad("layers are 1-based and at least one is required"));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_file_overrides_only_named_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[train]\nepochs = 7\n[loss]\nlambda_d = 0.0\n",
        )
        .unwrap();
        let cfg = load_run_config(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.loss.lambda_d, 0.0);
        // Everything not named keeps its default.
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.loss.lambda_c, RunConfig::default().loss.lambda_c);
        assert_eq!(cfg.model, RunConfig::default().model);
    }

    #[test]
    fn bad_toml_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "train = 3\n").unwrap();
        assert!(matches!(load_run_config(Some(&path)), Err(CliError::InvalidConfig(_))));
    }

    #[test]
    fn head_layer_flag_accepts_ranges_and_lists() {
        assert_eq!(parse_head_layers("22-28").unwrap(), vec![22, 23, 24, 25, 26, 27, 28]);
        assert_eq!(parse_head_layers("1,2,4").unwrap(), vec![1, 2, 4]);
        assert_eq!(parse_head_layers("4").unwrap(), vec![4]);
        assert!(parse_head_layers("5-2").is_err());
        assert!(parse_head_layers("0").is_err());
        assert!(parse_head_layers("a-b").is_err());
    }

    #[test]
    fn frame_ladder_must_fit_the_timeline() {
        let mut cfg = RunConfig::default();
        cfg.dataset.frame_offsets = vec![0, 70];
        assert!(matches!(cfg.validate(), Err(CliError::InvalidConfig(_))));
        cfg.dataset.frame_offsets = vec![4, 4];
        assert!(cfg.validate().is_err());
    }
}
