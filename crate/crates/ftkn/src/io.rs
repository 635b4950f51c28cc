//! Little-endian binary records for scenes and spilled focal frames,
//! a line-oriented text export, and model checkpoints.
//!
//! A frame record is
//! `frame u32 | point count u32 | points (x, y, z, intensity) f64 x 4 |
//! box count u32 | boxes (center 3, size 3, yaw, velocity 2) f64 x 9, class u32`.
//! A scene file is its frame records back to back. Point ids are not
//! stored; reading assigns `point_id(frame, row)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ftkn_core::geometry::{Box7, PointSet};
use ftkn_core::memory::point_id;
use ftkn_core::{FasterModel, ModelConfig};

use crate::error::{io_err, HarnessError, Result};
use crate::scene::{Frame, Scene};

pub const POINT_BYTES: usize = 4 * 8;
pub const BOX_BYTES: usize = 9 * 8 + 4;

fn fmt_err(detail: impl Into<String>) -> HarnessError {
    HarnessError::Format { what: "frame record", detail: detail.into() }
}

pub fn encode_frame(out: &mut Vec<u8>, index: usize, cloud: &PointSet, boxes: &[Box7]) -> Result<()> {
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| fmt_err(format!("{what} {v} exceeds u32")));
    if cloud.extra_dim != 1 {
        return Err(fmt_err(format!("records hold one extra feature, cloud has {}", cloud.extra_dim)));
    }
    out.extend_from_slice(&to_u32(index, "frame index")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cloud.len(), "point count")?.to_le_bytes());
    for i in 0..cloud.len() {
        for v in cloud.coords[i].iter().chain(cloud.extras_of(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&to_u32(boxes.len(), "box count")?.to_le_bytes());
    for b in boxes {
        let v = b.velocity_or_zero();
        for x in b.center.iter().chain(&b.size).chain([&b.yaw]).chain(&v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&b.class_id.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            fmt_err(format!("truncated at byte {} (need {n} more of {})", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode one record starting at `*pos`, advancing it.
pub fn decode_frame(bytes: &[u8], pos: &mut usize) -> Result<Frame> {
    let mut r = Reader { bytes, pos: *pos };
    let index = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n.saturating_mul(POINT_BYTES) > bytes.len() - r.pos {
        return Err(fmt_err(format!("frame {index} claims {n} points beyond the end of the data")));
    }
    let mut cloud = PointSet::with_capacity(1, n);
    for row in 0..n {
        let p = [r.f64()?, r.f64()?, r.f64()?];
        let intensity = r.f64()?;
        cloud.push(p, &[intensity], 0.0, point_id(index, row));
    }
    let nb = r.u32()? as usize;
    if nb.saturating_mul(BOX_BYTES) > bytes.len() - r.pos {
        return Err(fmt_err(format!("frame {index} claims {nb} boxes beyond the end of the data")));
    }
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = r.f64()?;
        }
        let class = r.u32()?;
        let b = Box7::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])?.with_velocity([v[7], v[8]]).with_class(class);
        boxes.push(b);
    }
    *pos = r.pos;
    Ok(Frame { index, cloud, boxes })
}

pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for f in &scene.frames {
        encode_frame(&mut out, f.index, &f.cloud, &f.boxes)?;
    }
    Ok(out)
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    let mut pos = 0;
    let mut frames = Vec::new();
    while pos < bytes.len() {
        frames.push(decode_frame(bytes, &mut pos)?);
    }
    Ok(Scene { frames })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)?).map_err(io_err(path))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    decode_scene(&fs::read(path).map_err(io_err(path))?)
}

/// One line per frame header, point and box, for inspection.
pub fn scene_text(scene: &Scene) -> String {
    let mut s = String::new();
    for f in &scene.frames {
        let _ = writeln!(s, "frame {} points {} boxes {}", f.index, f.cloud.len(), f.boxes.len());
        for i in 0..f.cloud.len() {
            let p = f.cloud.coords[i];
            let _ = writeln!(s, "p {} {} {} {}", p[0], p[1], p[2], f.cloud.extras_of(i)[0]);
        }
        for b in &f.boxes {
            let v = b.velocity_or_zero();
            let _ = writeln!(
                s,
                "b {} {} {} {} {} {} {} {} {} {}",
                b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw, v[0], v[1], b.class_id
            );
        }
    }
    s
}

/// Scene files `scene_NNNN.bin` of a directory, in name order.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.bin")
}

/// Parameters go to `<stem>.ckpt`, the model config to `<stem>.json`.
pub fn save_model(stem: &Path, model: &FasterModel) -> Result<()> {
    let ckpt = stem.with_extension("ckpt");
    let json = stem.with_extension("json");
    fs::write(&ckpt, model.store.to_checkpoint_bytes()).map_err(io_err(&ckpt))?;
    let cfg = serde_json::to_string_pretty(&model.config).expect("config serializes");
    fs::write(&json, cfg).map_err(io_err(&json))
}

pub fn load_model(stem: &Path) -> Result<FasterModel> {
    let ckpt = stem.with_extension("ckpt");
    let json = stem.with_extension("json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| HarnessError::Format { what: "model config", detail: e.to_string() })?;
    let mut model = FasterModel::new(cfg, 0)?;
    model.store.load_checkpoint_bytes(&fs::read(&ckpt).map_err(io_err(&ckpt))?)?;
    Ok(model)
}
