use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tokens the spatial attention of a frame may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// All joints of all persons in the frame.
    Group,
    /// Only the joints of the same person; every person uses encoding slot 0.
    PerPerson,
}

/// Network hyper-parameters. Defaults follow the full-size model; the
/// [`ModelConfig::tiny`] preset is meant for CPU experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_persons: usize,
    pub joints: usize,
    pub max_frames: usize,
    pub dropout: f64,
    /// Hidden width of the feed-forward sublayer, as a multiple of `channels`.
    pub ffn_expansion: usize,
    /// Learned person encodings added to every token of a person.
    pub person_encoding: bool,
    pub attention_scope: AttentionScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 512,
            depth: 8,
            heads: 8,
            max_persons: 10,
            joints: 19,
            max_frames: 243,
            dropout: 0.1,
            ffn_expansion: 2,
            person_encoding: true,
            attention_scope: AttentionScope::Group,
        }
    }
}

impl ModelConfig {
    /// Small model for desk-scale experiments and tests.
    pub fn tiny(joints: usize) -> Self {
        ModelConfig {
            channels: 32,
            depth: 2,
            heads: 4,
            joints,
            dropout: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("depth", self.depth),
            ("heads", self.heads),
            ("max_persons", self.max_persons),
            ("joints", self.joints),
            ("max_frames", self.max_frames),
            ("ffn_expansion", self.ffn_expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model `{name}` must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !self.channels.is_multiple_of(2) {
            return Err(Error::Config("channels must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.channels * self.ffn_expansion
    }
}
