//! Versioned binary checkpoints for [`ConvNet`].
//!
//! Layout (all little-endian): magic `AKM1`, format version `u16`, arch tag
//! `u8`, input channels `u8`, input height and width `u32`, class count
//! `u32`, tensor count `u32`, then each parameter tensor as a `u64` length
//! followed by raw `f64` values in checkpoint order. Loading a checkpoint
//! reproduces the saved network bit for bit.

use std::path::Path;

use super::{ArchId, ConvNet, ModelError};

const MAGIC: &[u8; 4] = b"AKM1";
const VERSION: u16 = 1;

fn arch_tag(arch: ArchId) -> u8 {
    match arch {
        ArchId::CnnA => 0,
        ArchId::CnnB => 1,
        ArchId::MiniResnet => 2,
    }
}

fn arch_from_tag(tag: u8) -> Result<ArchId, ModelError> {
    match tag {
        0 => Ok(ArchId::CnnA),
        1 => Ok(ArchId::CnnB),
        2 => Ok(ArchId::MiniResnet),
        other => Err(ModelError::Checkpoint(format!("unknown arch tag {other}"))),
    }
}

pub fn to_bytes(net: &ConvNet) -> Vec<u8> {
    let tensors = net.param_slices();
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(24 + tensors.len() * 8 + total * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(arch_tag(net.arch()));
    out.push(net.in_channels() as u8);
    let (h, w) = net.input_hw();
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(net.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for tensor in tensors {
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ConvNet, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let arch = arch_from_tag(r.u8()?)?;
    let in_c = r.u8()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let tensor_count = r.u32()? as usize;

    let mut net = ConvNet::new(arch, (h, w), in_c, classes, 0)?;
    let mut slots = net.param_slices_mut();
    if slots.len() != tensor_count {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {tensor_count} tensors, architecture wants {}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let len = r.u64()? as usize;
        if len != slot.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor length {len} does not match expected {}",
                slot.len()
            )));
        }
        for v in slot.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(net)
}

pub fn save(net: &ConvNet, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ConvNet, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_image;

    #[test]
    fn round_trip_is_bitwise() {
        for arch in ArchId::ALL {
            let net = ConvNet::new(arch, (16, 16), 3, 6, 31).unwrap();
            let back = from_bytes(&to_bytes(&net)).unwrap();
            assert_eq!(net, back);
            let img = rand_image(70, 16, 16, 3);
            assert_eq!(
                net.logits(&img).unwrap().to_vec(),
                back.logits(&img).unwrap().to_vec()
            );
        }
    }

    #[test]
    fn round_trip_survives_head_replacement() {
        let mut net = ConvNet::new(ArchId::CnnA, (8, 8), 3, 4, 0).unwrap();
        let w = ndarray::Array2::from_shape_fn((9, 32), |(r, c)| (r * 37 + c) as f64 * 0.01);
        let b = ndarray::Array1::from_shape_fn(9, |i| i as f64);
        net.set_head(w, b).unwrap();
        let back = from_bytes(&to_bytes(&net)).unwrap();
        assert_eq!(net, back);
        assert_eq!(back.num_classes(), 9);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let net = ConvNet::new(ArchId::CnnB, (8, 8), 3, 2, 5).unwrap();
        let bytes = to_bytes(&net);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(from_bytes(&bad_version).is_err());

        let mut bad_arch = bytes.clone();
        bad_arch[6] = 7;
        assert!(from_bytes(&bad_arch).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(from_bytes(truncated).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let net = ConvNet::new(ArchId::MiniResnet, (16, 16), 3, 3, 8).unwrap();
        save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(net, back);
    }
}
