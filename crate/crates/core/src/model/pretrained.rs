//! Pretrained backbone weights from a safetensors file.
//!
//! Each backbone parameter is looked up first by its own name
//! (`backbone.block{b}.conv{c}.weight|bias`, 1-based) and then by the
//! torchvision VGG name `features.{i}.weight|bias`, where `i` indexes the
//! `nn.Sequential` of conv, ReLU and pool modules. Weights are
//! `[out, in, 3, 3]` in either case; F32 and F64 tensors are accepted.

use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::{ConvBlock, ModelError, Network};

/// Torchvision `features` index of conv `conv` (0-based) in block `block` (0-based).
pub fn torchvision_vgg_key(blocks: &[ConvBlock], block: usize, conv: usize, suffix: &str) -> String {
    // every conv is followed by a ReLU module, every block by a pool
    let offset: usize = blocks[..block].iter().map(|b| 2 * b.convs + 1).sum();
    format!("features.{}.{suffix}", offset + 2 * conv)
}

pub(crate) fn tensor_to_f64(view: &TensorView<'_>) -> Result<Vec<f64>, String> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()),
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect()),
        other => Err(format!("unsupported dtype {other:?}")),
    }
}

/// Overwrites the backbone convolutions of `net` with weights from `path`.
/// Returns the number of tensors loaded.
pub fn load_pretrained_backbone(net: &mut Network, path: &Path) -> Result<usize, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Pretrained(format!("{}: {e}", path.display())))?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| ModelError::Pretrained(format!("{}: {e}", path.display())))?;
    let blocks = net.spec().backbone.blocks.clone();
    let mut loaded = 0;
    for (b, block) in blocks.iter().enumerate() {
        for c in 0..block.convs {
            for suffix in ["weight", "bias"] {
                let own = format!("backbone.block{}.conv{}.{suffix}", b + 1, c + 1);
                let tv = torchvision_vgg_key(&blocks, b, c, suffix);
                let view = file
                    .tensor(&own)
                    .or_else(|_| file.tensor(&tv))
                    .map_err(|_| ModelError::Pretrained(format!("neither {own} nor {tv} found")))?;
                let id = net.params().find(&own).expect("backbone parameter registered");
                let param = net.params_mut().get_mut(id);
                if view.shape() != param.shape.as_slice() {
                    return Err(ModelError::Pretrained(format!(
                        "{own}: expected shape {:?}, file has {:?}",
                        param.shape,
                        view.shape()
                    )));
                }
                param.data = tensor_to_f64(&view).map_err(|e| ModelError::Pretrained(format!("{own}: {e}")))?;
                loaded += 1;
            }
        }
    }
    Ok(loaded)
}
