//! Little-endian binary file formats.
//!
//! * TSDF: `SGNN-TSDF1`, f32 voxel size, f32 truncation, u64 count, then
//!   sorted records `(i32 x, i32 y, i32 z, f32 d, f32 w, u8 observed)`.
//! * Depth frame: `SGNN-DEP1`, u32 width, u32 height, f64 fx fy cx cy,
//!   16 f64 row-major camera-to-world pose, `width·height` f32 depths.
//! * Checkpoint: `SGNN-CKPT1`, u32 header length, `key=value` header text,
//!   u32 count + parameter blocks (u16 name length, name, u8 rank, u32 dims,
//!   f32 values), u32 count + optimizer blocks in the same layout, u64
//!   iteration.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix4;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::grid::{SparseTsdf, TsdfEntry, VoxelCoord};
use crate::model::{ModelConfig, SgnnModel};
use crate::synthcam::{CameraIntrinsics, DepthFrame, Pose};

const TSDF_MAGIC: &[u8] = b"SGNN-TSDF1";
const DEPTH_MAGIC: &[u8] = b"SGNN-DEP1";
const CKPT_MAGIC: &[u8] = b"SGNN-CKPT1";

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.vec(magic.len())? != magic {
            return Err(Error::Format(format!(
                "missing {} header",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.vec(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn at_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after end of data".into())),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<fs::File>>> {
    Ok(Reader {
        inner: BufReader::new(fs::File::open(path)?),
    })
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_tsdf(s: &SparseTsdf) -> Vec<u8> {
    let entries = s.sorted_entries();
    let mut out = Vec::with_capacity(32 + entries.len() * 21);
    out.extend_from_slice(TSDF_MAGIC);
    out.extend_from_slice(&s.voxel_size.to_le_bytes());
    out.extend_from_slice(&s.truncation.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (c, e) in entries {
        for v in [c.x, c.y, c.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&e.d.to_le_bytes());
        out.extend_from_slice(&e.w.to_le_bytes());
        out.push(e.observed as u8);
    }
    out
}

fn decode_tsdf<R: Read>(r: &mut Reader<R>) -> Result<SparseTsdf> {
    r.magic(TSDF_MAGIC)?;
    let voxel_size = r.f32()?;
    let truncation = r.f32()?;
    if !(voxel_size > 0.0 && truncation > 0.0) {
        return Err(Error::Format("non-positive voxel size or truncation".into()));
    }
    let n = r.u64()? as usize;
    let mut s = SparseTsdf::with_capacity(voxel_size, truncation, n.min(1 << 24));
    for _ in 0..n {
        let c = VoxelCoord::new(r.i32()?, r.i32()?, r.i32()?);
        let (d, w, observed) = (r.f32()?, r.f32()?, r.u8()?);
        if observed > 1 || !d.is_finite() || !w.is_finite() {
            return Err(Error::Format(format!("invalid record at {c:?}")));
        }
        s.insert(c, TsdfEntry::new(d, w, observed == 1));
    }
    r.at_end()?;
    Ok(s)
}

pub fn write_tsdf(path: &Path, s: &SparseTsdf) -> Result<()> {
    fs::write(path, encode_tsdf(s))?;
    Ok(())
}

pub fn read_tsdf(path: &Path) -> Result<SparseTsdf> {
    decode_tsdf(&mut open(path)?)
}

pub fn encode_depth(f: &DepthFrame) -> Vec<u8> {
    let i = &f.intrinsics;
    let mut out = Vec::with_capacity(180 + f.depths.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(i.width as u32).to_le_bytes());
    out.extend_from_slice(&(i.height as u32).to_le_bytes());
    let m = f.pose.0;
    for x in [i.fx, i.fy, i.cx, i.cy].into_iter().chain((0..16).map(|k| m[(k / 4, k % 4)])) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    put_f32s(&mut out, &f.depths);
    out
}

pub fn write_depth(path: &Path, f: &DepthFrame) -> Result<()> {
    fs::write(path, encode_depth(f))?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthFrame> {
    let mut r = open(path)?;
    r.magic(DEPTH_MAGIC)?;
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let k = r.f64s(4)?;
    let intrinsics = CameraIntrinsics {
        fx: k[0],
        fy: k[1],
        cx: k[2],
        cy: k[3],
        width,
        height,
    };
    intrinsics.validate()?;
    let p = r.f64s(16)?;
    let pose = Pose(Matrix4::from_fn(|i, j| p[i * 4 + j]));
    let depths = r.f32s(width * height)?;
    r.at_end()?;
    Ok(DepthFrame {
        intrinsics,
        pose,
        depths,
    })
}

/// Model weights, optimizer state and training progress.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Values plus Adam moments and step counts.
    pub params: ParamStore,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_model(model: &SgnnModel, iteration: u64) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            iteration,
        }
    }

    /// Rebuilds the model with the stored weights and optimizer state.
    pub fn into_model(self) -> Result<SgnnModel> {
        let mut model = SgnnModel::new(self.config, 0)?;
        model.params.load_from(&self.params)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}

fn put_block(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(out, values);
}

fn get_block<R: Read>(r: &mut Reader<R>) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let n = r.u16()? as usize;
    let name = String::from_utf8(r.vec(n)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
    let rank = r.u8()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    Ok((name, dims, r.f32s(numel)?))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let header = ck.config.to_text();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let params: Vec<_> = ck.params.iter().collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let kind = if p.trainable { "" } else { "buffer:" };
        put_block(&mut out, &format!("{kind}{}", p.name), &p.dims, &p.value);
    }
    let trainable: Vec<_> = params.iter().filter(|p| p.trainable).collect();
    out.extend_from_slice(&((trainable.len() * 3) as u32).to_le_bytes());
    for p in trainable {
        put_block(&mut out, &format!("{}.adam_m", p.name), &p.dims, &p.m);
        put_block(&mut out, &format!("{}.adam_v", p.name), &p.dims, &p.v);
        // Step counts are far below 2^24, so f32 stores them exactly.
        put_block(&mut out, &format!("{}.adam_step", p.name), &[1], &[p.step as f32]);
    }
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    out
}

fn decode_checkpoint<R: Read>(r: &mut Reader<R>) -> Result<Checkpoint> {
    r.magic(CKPT_MAGIC)?;
    let hl = r.u32()? as usize;
    let header = String::from_utf8(r.vec(hl)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let config = ModelConfig::from_text(&header)?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let (name, dims, values) = get_block(r)?;
        if params.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        match name.strip_prefix("buffer:") {
            Some(n) => params.add_buffer(n, &dims, values),
            None => params.add(&name, &dims, values),
        };
    }
    for _ in 0..r.u32()? {
        let (name, _, values) = get_block(r)?;
        let (base, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("bad optimizer block {name}")))?;
        let id = params
            .id(base)
            .ok_or_else(|| Error::Format(format!("optimizer block for unknown parameter {base}")))?;
        let p = params.get_mut(id);
        let check = |v: &Vec<f32>| {
            if v.len() == p.value.len() {
                Ok(())
            } else {
                Err(Error::Format(format!("optimizer block {name} has wrong size")))
            }
        };
        match field {
            "adam_m" => {
                check(&values)?;
                p.m = values;
            }
            "adam_v" => {
                check(&values)?;
                p.v = values;
            }
            "adam_step" => p.step = values.first().copied().unwrap_or(0.0) as u64,
            _ => return Err(Error::Format(format!("unknown optimizer block {name}"))),
        }
    }
    let iteration = r.u64()?;
    r.at_end()?;
    Ok(Checkpoint {
        config,
        params,
        iteration,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_checkpoint(ck))?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&mut open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcam::{CameraIntrinsics, Pose, Vec3};

    #[test]
    fn tsdf_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsdf");
        let mut s = SparseTsdf::new(0.05, 3.0);
        s.insert(VoxelCoord::new(-1, 2, 3), TsdfEntry::new(0.25, 2.0, true));
        s.insert(VoxelCoord::new(4, 0, 0), TsdfEntry::new(-3.0, 1.0, false));
        write_tsdf(&path, &s).unwrap();
        assert_eq!(read_tsdf(&path).unwrap(), s);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tsdf(&path), Err(Error::Format(_))));
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(read_tsdf(&path), Err(Error::Format(_))));
    }

    #[test]
    fn depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.depth");
        let intrinsics = CameraIntrinsics::with_fov(4, 3, 60.0);
        let pose = Pose::look_at(Vec3::new(0.5, 0.25, 1.5), Vec3::new(2.0, 2.0, 1.0));
        let f = DepthFrame {
            intrinsics,
            pose,
            depths: (0..12).map(|i| i as f32 * 0.5).collect(),
        };
        write_depth(&path, &f).unwrap();
        let g = read_depth(&path).unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = SgnnModel::new(ModelConfig::test_scale(), 3).unwrap();
        let id = model.params.id("enc1.conv1.w").unwrap();
        let p = model.params.get_mut(id);
        p.m[0] = 0.125;
        p.v[1] = 3.5;
        p.step = 17;
        let ck = Checkpoint::from_model(&model, 42);
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.config, model.config);
        let restored = back.into_model().unwrap();
        for (a, b) in restored.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
            assert_eq!(a.step, b.step);
            assert_eq!(a.trainable, b.trainable);
        }
    }
}
