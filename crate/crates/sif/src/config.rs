//! Run configuration: training hyperparameters with the reference defaults,
//! loadable from a strict TOML file; command-line flags override file values.
//! Every run freezes its effective config to the run directory before any
//! compute.

use crate::error::{Result, SifError};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: String,
    pub seed: u64,
    /// Behavior sequence length L (reference setup: 1000).
    pub seq_len: usize,
    /// SIF blocks N.
    pub n_blocks: usize,
    pub heads: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Reference setup uses 4096; desk-scale default is 256.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// VQ-loss weight in the joint objective.
    pub beta: f64,
    /// Alignment-loss weight.
    pub gamma: f64,
    /// Auxiliary engagement-loss weight (flag-controlled fourth term).
    pub token_loss_weight: f64,
    pub route_vq_term: bool,
    pub route_aux_to_codes: bool,
    pub route_seq_to_codes: bool,
    /// Optional caps on examples per epoch (most recent kept).
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "full".into(),
            seed: 1,
            seq_len: 1000,
            n_blocks: 4,
            heads: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 256,
            max_epochs: 10,
            patience: 3,
            beta: 1.0,
            gamma: 0.25,
            token_loss_weight: 1.0,
            route_vq_term: true,
            route_aux_to_codes: true,
            route_seq_to_codes: true,
            train_limit: None,
            val_limit: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SifError::Format {
            file: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Writes the frozen effective config.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| SifError::Data(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_train_options(&self) -> crate::training::TrainOptions {
        crate::training::TrainOptions {
            seq_len: self.seq_len,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            adam: crate::training::AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            weights: crate::model::LossWeights {
                beta: self.beta,
                gamma: self.gamma,
                token_weight: self.token_loss_weight,
            },
            routes: crate::model::RouteFlags {
                vq_term: self.route_vq_term,
                aux_to_codes: self.route_aux_to_codes,
                seq_to_codes: self.route_seq_to_codes,
            },
            seed: self.seed,
            train_limit: self.train_limit,
            val_limit: self.val_limit,
            run_dir: None,
            quiet: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.n_blocks, 4);
        assert_eq!(c.heads, 8);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.weight_decay, 1e-5);
        assert_eq!(c.seq_len, 1000);
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.gamma, 0.25);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn strict_load_and_snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "variant = \"pooled\"\nseq_len = 16\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.variant, "pooled");
        assert_eq!(c.seq_len, 16);
        assert_eq!(c.n_blocks, 4);
        let snap = dir.path().join("snap.toml");
        c.snapshot(&snap).unwrap();
        assert_eq!(RunConfig::load(&snap).unwrap(), c);
        // unknown keys are rejected
        std::fs::write(&path, "bogus = 3\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
