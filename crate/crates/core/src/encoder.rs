//! Per-point feature extractor.
//!
//! Each point is described by its color, its offset inside its voxel and the
//! mean color of that voxel; a small MLP maps those nine numbers to `C`
//! channels. Absolute position never enters, so shifting a scene by whole
//! voxels leaves the features unchanged.

use r3d_tensor::{Mlp, ParamId, ParamStore, Tape, Tensor, Trainable, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{voxel_offset, voxelize, PointCloud};

pub const ENCODER_INPUTS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dims: Vec<usize>,
    pub out_channels: usize,
    pub voxel_size: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels < 4 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs C >= 4 and positive hidden widths, got C={} hidden={:?}",
                self.out_channels, self.hidden_dims
            )));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        Ok(())
    }
}

/// The `N×9` encoder input for a scene.
pub fn encoder_inputs(pc: &PointCloud, voxel_size: f64) -> Result<Tensor> {
    let vox = voxelize(pc, voxel_size)?;
    let mut data = Vec::with_capacity(pc.len() * ENCODER_INPUTS);
    for (i, (p, c)) in pc.positions().iter().zip(pc.colors()).enumerate() {
        data.extend_from_slice(c);
        data.extend_from_slice(&voxel_offset(p, voxel_size));
        data.extend_from_slice(&vox.features[vox.voxel_of_point[i]][..3]);
    }
    Ok(Tensor::new(vec![pc.len(), ENCODER_INPUTS], data)?)
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub mlp: Mlp,
    pub config: EncoderConfig,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![ENCODER_INPUTS];
        dims.extend(&config.hidden_dims);
        dims.push(config.out_channels);
        let mlp = Mlp::new(store, "encoder", &dims, rng)?;
        Ok(Self { mlp, config })
    }

    /// `inputs` is the `N×9` matrix from [`encoder_inputs`]; returns `N×C`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Var> {
        Ok(self.mlp.forward(tape, store, inputs)?)
    }

    /// Encodes a scene without recording gradients.
    pub fn encode_scene(&self, store: &ParamStore, pc: &PointCloud) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(encoder_inputs(pc, self.config.voxel_size)?);
        let out = self.forward(&mut tape, store, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.params() {
            store.set_trainable(id, Trainable::Frozen);
        }
    }
}
