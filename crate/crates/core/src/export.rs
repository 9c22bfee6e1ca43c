//! Writes the spatial attention maps of co-attentive units as greyscale
//! images at input resolution.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{SharingNetwork, StageMaps};
use crate::data::{quantize, Sample};
use crate::error::{io_err, Error, Result};
use crate::pnm::Image;
use crate::sharing::Task;
use crate::tensor::Tensor;

/// `<id>_layer<stage>_task<A|B>.pgm`
pub fn map_filename(id: &str, stage: usize, task: Task) -> String {
    format!("{id}_layer{stage}_task{}.pgm", task.label())
}

/// Nearest-neighbour upscale of a `[1, h, w, 1]` map to `height x width`,
/// quantised with `round_half_even(v * 255)`.
pub fn map_to_image(map: &Tensor, height: usize, width: usize) -> Result<Image> {
    let s = map.shape();
    if s.n() != 1 || s.c() != 1 || s.h() == 0 || s.w() == 0 {
        return Err(Error::InvalidShape(format!("expected a [1,h,w,1] map, got {s:?}")));
    }
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            data.push(quantize(map.at([0, y * s.h() / height, x * s.w() / width, 0])));
        }
    }
    Image::gray(width, height, data)
}

/// Spatial maps for one image. Errors if the network has no unit that
/// produces them.
pub fn attention_maps(net: &SharingNetwork, image: &Tensor) -> Result<Vec<StageMaps>> {
    if !net.has_cas() {
        return Err(Error::Config(
            "network has no co-attentive sharing unit, so there are no attention maps".into(),
        ));
    }
    let maps = net.forward(image)?.maps;
    if maps.is_empty() {
        return Err(Error::Config(
            "the co-attentive units in this network have no spatial attention branch".into(),
        ));
    }
    Ok(maps)
}

/// Writes one map per sample, unit and task into `out_dir` and returns
/// the paths in write order.
pub fn export_attention_maps(net: &SharingNetwork, samples: &[Sample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for sample in samples {
        let s = sample.image.shape();
        for m in attention_maps(net, &sample.image)? {
            for (task, map) in [(Task::A, &m.a), (Task::B, &m.b)] {
                let img = map_to_image(map, s.h(), s.w())?;
                let path = out_dir.join(map_filename(&sample.id, m.stage, task));
                fs::write(&path, img.encode()).map_err(io_err(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
