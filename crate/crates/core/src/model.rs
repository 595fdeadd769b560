//! Model configuration, named variants and parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esca::EscaParams;
use crate::memory::{
    initial_grid, residual_blocks, DownWriteParams, ImageWriteParams, MemoryState, ReadoutParams,
    UpWriteParams, UpdateParams,
};
use crate::numerics::layers::GROUPS;
use crate::numerics::{ceil_div, ParamId, ParameterStore, Real, Tensor};

pub const DEFAULT_STRIDES: [usize; 3] = [4, 8, 16];
pub const DEFAULT_CYCLES: [usize; 3] = [1, 3, 9];
pub const DEFAULT_DT_US: u64 = 5000;
pub const DEFAULT_SENSOR: u16 = 64;

fn default_sensor() -> u16 {
    DEFAULT_SENSOR
}

/// Resolved model and schedule configuration; also the JSON config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    pub levels: usize,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub strides: Vec<usize>,
    pub cycles: Vec<usize>,
    pub dt_us: u64,
    /// Frame write period; `None` disables fusion.
    pub image_cadence_us: Option<u64>,
    pub down_write: bool,
    pub event_gate: bool,
    pub seed: u64,
    #[serde(default = "default_sensor")]
    pub width: u16,
    #[serde(default = "default_sensor")]
    pub height: u16,
}

impl ModelConfig {
    /// Presets: `B1`, `L1`, `B3`, `L3` and the reduced `B1-tiny`, `B3-tiny`.
    pub fn variant(name: &str) -> Result<Self> {
        let (dims, heads): (Vec<usize>, Vec<usize>) = match name {
            "B1" => (vec![128], vec![4]),
            "L1" => (vec![256], vec![8]),
            "B3" => (vec![128, 256, 256], vec![4, 8, 8]),
            "L3" => (vec![256, 256, 256], vec![8, 8, 8]),
            "B1-tiny" => (vec![16], vec![2]),
            "B3-tiny" => (vec![16, 32, 32], vec![2, 4, 4]),
            other => {
                return Err(Error::Unknown {
                    what: "variant",
                    name: other.to_string(),
                })
            }
        };
        let levels = dims.len();
        Ok(ModelConfig {
            variant: name.to_string(),
            levels,
            dims,
            heads,
            strides: DEFAULT_STRIDES[..levels].to_vec(),
            cycles: DEFAULT_CYCLES[..levels].to_vec(),
            dt_us: DEFAULT_DT_US,
            image_cadence_us: None,
            down_write: levels > 1,
            event_gate: true,
            seed: 0,
            width: DEFAULT_SENSOR,
            height: DEFAULT_SENSOR,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = self.levels;
        if l == 0 {
            return bad("levels must be >= 1".into());
        }
        for (name, len) in [
            ("dims", self.dims.len()),
            ("heads", self.heads.len()),
            ("strides", self.strides.len()),
            ("cycles", self.cycles.len()),
        ] {
            if len != l {
                return bad(format!("{name} has {len} entries for {l} levels"));
            }
        }
        for i in 0..l {
            let (d, h) = (self.dims[i], self.heads[i]);
            if h == 0 || d % h != 0 || d % 4 != 0 || d % GROUPS != 0 {
                return bad(format!(
                    "level {}: width {d} must be divisible by 4, by {GROUPS} and by {h} heads",
                    i + 1
                ));
            }
            if self.cycles[i] == 0 || self.strides[i] == 0 {
                return bad(format!("level {}: cycle and stride must be positive", i + 1));
            }
            if i > 0 {
                if self.strides[i] != 2 * self.strides[i - 1] {
                    return bad(format!("strides must double per level, got {:?}", self.strides));
                }
                if self.cycles[i] % self.cycles[i - 1] != 0 {
                    return bad(format!("each cycle must divide the next, got {:?}", self.cycles));
                }
            }
        }
        if self.cycles[0] != 1 {
            return bad("the first level must run every step".into());
        }
        if self.dt_us == 0 {
            return bad("dt_us must be positive".into());
        }
        if let Some(c) = self.image_cadence_us {
            if c == 0 || c % self.dt_us != 0 {
                return bad(format!("image cadence {c} us is not a multiple of dt {} us", self.dt_us));
            }
        }
        if self.width == 0 || self.height == 0 {
            return bad("sensor dims must be positive".into());
        }
        Ok(())
    }

    /// Grid `(rows, cols)` at a 1-based level.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let s = self.strides[level - 1];
        (ceil_div(self.height as usize, s), ceil_div(self.width as usize, s))
    }

    /// Steps between frame writes, if fusion is on.
    pub fn image_period_steps(&self) -> Option<usize> {
        self.image_cadence_us.map(|c| (c / self.dt_us) as usize)
    }
}

/// Parameters owned by one memory level.
#[derive(Debug, Clone)]
pub struct LevelParams {
    pub level: usize,
    pub init: ParamId,
    /// Transfer from the level below; absent at level 1.
    pub up: Option<UpWriteParams>,
    /// Transfer from the level above; absent at the top level.
    pub down: Option<DownWriteParams>,
    pub update: UpdateParams,
    pub readout: ReadoutParams,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
    pub esca: EscaParams,
    pub levels: Vec<LevelParams>,
    pub image: Option<ImageWriteParams>,
}

impl<T: Real> Model<T> {
    /// Initializes in `f64` from `config.seed` and casts, so both precisions
    /// start from the same values.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::<f64>::new();
        let c = &config;
        let esca = EscaParams::new(&mut store, c.dims[0], c.heads[0], &mut rng)?;
        let mut levels = Vec::with_capacity(c.levels);
        for l in 1..=c.levels {
            let i = l - 1;
            let (d, h) = (c.dims[i], c.heads[i]);
            let init = store.insert(format!("mem{l}.init"), Tensor::zeros(&[d]))?;
            let up = if l > 1 {
                Some(UpWriteParams::new(&mut store, l, c.dims[i - 1], d, h, &mut rng)?)
            } else {
                None
            };
            let down = if l < c.levels {
                Some(DownWriteParams::new(&mut store, l, d, c.dims[i + 1], h, &mut rng)?)
            } else {
                None
            };
            let update = UpdateParams::new(&mut store, l, d, residual_blocks(l), &mut rng)?;
            let readout = ReadoutParams::new(&mut store, l, d, &mut rng)?;
            levels.push(LevelParams {
                level: l,
                init,
                up,
                down,
                update,
                readout,
            });
        }
        let image = if c.image_cadence_us.is_some() {
            let top = c.levels;
            Some(ImageWriteParams::new(
                &mut store,
                top,
                c.strides[top - 1],
                c.dims[top - 1],
                c.heads[top - 1],
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            config,
            store: store.cast(),
            esca,
            levels,
            image,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.config.levels
    }

    pub fn level(&self, level: usize) -> &LevelParams {
        &self.levels[level - 1]
    }

    /// Broadcast initial state of every level.
    pub fn initial_states(&self) -> Vec<MemoryState<T>> {
        (1..=self.num_levels())
            .map(|l| {
                let (h, w) = self.config.grid(l);
                let z = initial_grid(
                    &self.store,
                    self.level(l).init,
                    self.config.strides[l - 1],
                    h,
                    w,
                );
                MemoryState::new(l, z)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            esca: self.esca,
            levels: self.levels.clone(),
            image: self.image,
        }
    }
}
