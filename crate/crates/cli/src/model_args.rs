use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use hmnet::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Model selection and the ablation switches. Flags override the config file.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config JSON, e.g. a `config.json` written by an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "B3-tiny")]
    pub variant: String,
    /// Parameter initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Write events without the learnable gate column.
    #[arg(long)]
    pub no_event_gate: bool,
    /// Drop the top-down transfers between levels.
    #[arg(long)]
    pub no_down_write: bool,
    /// Time step in microseconds.
    #[arg(long)]
    pub dt_us: Option<u64>,
    /// Operating cycle per level, e.g. `1,3,9`.
    #[arg(long, value_delimiter = ',')]
    pub cycles: Option<Vec<usize>>,
    /// Frame write period in microseconds; enables sensor fusion.
    #[arg(long)]
    pub image_cadence_us: Option<u64>,
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub height: Option<u16>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        self.resolve_with_sensor(None)
    }

    /// `sensor` fills in the geometry when neither the config file nor the
    /// flags give it.
    pub fn resolve_with_sensor(&self, sensor: Option<(u16, u16)>) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ModelConfig::from_json(&text)?
            }
            None => {
                let mut c = ModelConfig::variant(&self.variant)?;
                if let Some((w, h)) = sensor {
                    (c.width, c.height) = (w, h);
                }
                c
            }
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.no_event_gate {
            c.event_gate = false;
        }
        if self.no_down_write {
            c.down_write = false;
        }
        if let Some(dt) = self.dt_us {
            c.dt_us = dt;
        }
        if let Some(cy) = &self.cycles {
            c.cycles = cy.clone();
        }
        if self.image_cadence_us.is_some() {
            c.image_cadence_us = self.image_cadence_us;
        }
        if let Some(w) = self.width {
            c.width = w;
        }
        if let Some(h) = self.height {
            c.height = h;
        }
        c.validate()?;
        Ok(c)
    }
}
