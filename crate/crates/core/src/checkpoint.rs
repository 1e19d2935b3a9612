//! Binary checkpoint format.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "EBM1"
//! version      u32      = 1
//! arch_len     u32, then arch_len x u32:
//!              height, width, first_kernel, kernel, hidden, channels...
//! bn_momentum  f64
//! bn_epsilon   f64
//! n_params     u32, then n_params records
//! has_adam     u8; if 1: step u64, lr/beta1/beta2/eps f64, n u32, then n
//!              records named "adam/m/<param>" and n named "adam/v/<param>"
//! has_rng      u8; if 1: seed [u8; 32], stream u64, word_pos u128
//! epoch        u64      completed epochs
//!
//! record:      name_len u16, name (UTF-8), dtype u8 (1 = f32, 2 = f64),
//!              rank u8, rank x u32 dims, prod(dims) raw values
//! ```
//!
//! Loading parses the whole file before building anything, so a failure
//! never yields a partially loaded network.

use std::fs;
use std::io;
use std::path::Path;

use crate::net::{Arch, EnergyNet, NetError};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor, FLOAT_DTYPE};

pub const MAGIC: &[u8; 4] = b"EBM1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("{name}: unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: EnergyNet,
    pub optimizer: Option<(AdamConfig, AdamState)>,
    pub rng: Option<RngState>,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_net(net: EnergyNet) -> Self {
        Checkpoint {
            net,
            optimizer: None,
            rng: None,
            epoch: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = self.net.arch().to_words();
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        for w in arch {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.net.bn_momentum.to_le_bytes());
        out.extend_from_slice(&self.net.bn_epsilon.to_le_bytes());
        let params = self.net.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            write_record(&mut out, &p.name, &p.tensor);
        }
        match &self.optimizer {
            None => out.push(0),
            Some((cfg, st)) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for v in [cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                let names: Vec<&str> = params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
                out.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
                for (kind, tensors) in [("m", &st.m), ("v", &st.v)] {
                    for (name, t) in names.iter().zip(tensors) {
                        write_record(&mut out, &format!("adam/{kind}/{name}"), t);
                    }
                }
            }
        }
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let arch_len = r.u32("architecture length")? as usize;
        if arch_len > 64 {
            return Err(CheckpointError::Corrupt(format!("architecture length {arch_len}")));
        }
        let words = (0..arch_len)
            .map(|_| r.u32("architecture"))
            .collect::<Result<Vec<_>, _>>()?;
        let arch = Arch::from_words(&words)?;
        let bn_momentum = r.f64("batch-norm momentum")?;
        let bn_epsilon = r.f64("batch-norm epsilon")?;
        let n = r.u32("parameter count")? as usize;
        let mut stored = Vec::with_capacity(n.min(1024));
        for i in 0..n {
            stored.push(r.record(&format!("parameter #{i}"))?);
        }
        let net = EnergyNet::from_params(arch, stored, bn_momentum, bn_epsilon)?;

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let cfg = AdamConfig {
                    learning_rate: r.f64("optimizer config")?,
                    beta1: r.f64("optimizer config")?,
                    beta2: r.f64("optimizer config")?,
                    epsilon: r.f64("optimizer config")?,
                };
                let count = r.u32("optimizer slot count")? as usize;
                let trainable: Vec<_> = net.params().iter().filter(|p| p.trainable).collect();
                if count != trainable.len() {
                    return Err(CheckpointError::Corrupt(format!(
                        "{count} optimizer slots for {} trainable parameters",
                        trainable.len()
                    )));
                }
                let mut moments = [Vec::new(), Vec::new()];
                for (kind, dst) in ["m", "v"].iter().zip(moments.iter_mut()) {
                    for p in &trainable {
                        let want = format!("adam/{kind}/{}", p.name);
                        let (name, t) = r.record(&want)?;
                        if name != want || t.shape() != p.tensor.shape() {
                            return Err(CheckpointError::Corrupt(format!(
                                "expected {want} {:?}, found {name} {:?}",
                                p.tensor.shape(),
                                t.shape()
                            )));
                        }
                        dst.push(t);
                    }
                }
                let [m, v] = moments;
                Some((cfg, AdamState { step, m, v }))
            }
            f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
        };
        let rng = match r.u8("rng flag")? {
            0 => None,
            1 => {
                let mut seed = [0u8; 32];
                seed.copy_from_slice(r.take(32, "rng seed")?);
                let stream = r.u64("rng stream")?;
                let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(CheckpointError::Corrupt(format!("rng flag {f}"))),
        };
        let epoch = r.u64("epoch")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            net,
            optimizer,
            rng,
            epoch,
        })
    }

    /// Write via a temporary sibling and rename, so an existing file at
    /// `path` stays intact if writing fails.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(FLOAT_DTYPE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self, what: &str) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u16(&format!("name of {what}"))? as usize;
        let name = String::from_utf8(self.take(len, &format!("name of {what}"))?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what}: name is not UTF-8")))?;
        let dtype = self.u8(&format!("dtype of parameter {name}"))?;
        let width = match dtype {
            1 => 4,
            2 => 8,
            code => return Err(CheckpointError::UnknownDtype { name, code }),
        };
        let rank = self.u8(&format!("rank of parameter {name}"))? as usize;
        let dims = (0..rank)
            .map(|_| self.u32(&format!("dims of parameter {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = match count {
            Some(c) if rank > 0 && c > 0 => c,
            _ => return Err(CheckpointError::Corrupt(format!("parameter {name}: bad dims {dims:?}"))),
        };
        let raw = self.take(
            count.checked_mul(width).unwrap_or(usize::MAX),
            &format!("data of parameter {name}"),
        )?;
        let data: Vec<Float> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Float)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Float)
                .collect()
        };
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use crate::rng::seeded;
    use rand::Rng;

    fn mini() -> EnergyNet {
        EnergyNet::with_arch(Arch::mini(), 4).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_with_optimizer_and_rng() {
        let mut net = mini();
        for p in net.params_mut() {
            p.tensor.data_mut()[0] = 0.123_456_79;
        }
        let shapes: Vec<Vec<usize>> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut adam = Adam::new(AdamConfig::default(), &shape_refs);
        let mut ps: Vec<Vec<Float>> = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        let gs: Vec<Vec<Float>> = ps.iter().map(|p| vec![0.5; p.len()]).collect();
        let mut views: Vec<&mut [Float]> = ps.iter_mut().map(|p| p.as_mut_slice()).collect();
        adam.step(&mut views, &gs.iter().map(|g| g.as_slice()).collect::<Vec<_>>());
        let mut rng = seeded(3);
        rng.random::<u64>();
        let ck = Checkpoint {
            net,
            optimizer: Some((adam.config, adam.state().clone())),
            rng: Some(RngState::capture(&rng)),
            epoch: 7,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn full_network_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ebm");
        let net = EnergyNet::build(8);
        Checkpoint::from_net(net.clone()).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for (a, b) in back.net.params().iter().zip(net.params()) {
            let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits() as u32).collect();
            let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits() as u32).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
        assert_eq!(back.net.count_params().total, 832_257);
    }

    #[test]
    fn load_preserves_energies() {
        let net = mini();
        let mut rng = seeded(2);
        let x = Tensor::uniform(&[3, 8, 16, 1], 0.0, 1.0, &mut rng).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_net(net.clone()).to_bytes()).unwrap();
        assert_eq!(back.net.energy_infer(&x).unwrap(), net.energy_infer(&x).unwrap());
    }

    #[test]
    fn truncation_names_the_parameter() {
        let bytes = Checkpoint::from_net(mini()).to_bytes();
        // Cut inside the data of the first dense kernel.
        let net = mini();
        let mut offset = 4 + 4 + 4 + 4 * net.arch().to_words().len() + 16 + 4;
        for p in net.params() {
            let header = 2 + p.name.len() + 2 + 4 * p.tensor.shape().len();
            if p.name == "dense/kernel" {
                offset += header + 10;
                break;
            }
            offset += header + p.tensor.len() * std::mem::size_of::<Float>();
        }
        let err = Checkpoint::from_bytes(&bytes[..offset]).unwrap_err();
        assert!(err.to_string().contains("dense/kernel"), "{err}");
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut bytes = Checkpoint::from_net(mini()).to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
        assert!(matches!(Checkpoint::from_bytes(b"EB"), Err(CheckpointError::Truncated(_))));
    }
}
