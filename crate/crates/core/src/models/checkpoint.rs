//! Checkpoint container: a versioned magic string, a JSON header with
//! the model configs and bookkeeping, and raw little-endian f64 data
//! for every parameter array keyed by its hierarchical name.
//!
//! Round-trips are bit-exact: values are written as raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use super::{DiscriminatorConfig, GeneratorConfig, ProjectionHeadConfig};
use crate::error::ModelError;
use crate::rng::RngState;

const MAGIC: &[u8; 8] = b"MCDCKPT1";

/// Everything a resumed run needs besides the arrays themselves.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub projection: ProjectionHeadConfig,
    /// Seed of the whole run.
    pub seed: u64,
    pub epoch: u64,
    pub global_step: u64,
    /// Adam step counters.
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
}

impl CheckpointMeta {
    pub fn new(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        projection: ProjectionHeadConfig,
        seed: u64,
    ) -> Self {
        Self {
            generator,
            discriminator,
            projection,
            seed,
            epoch: 0,
            global_step: 0,
            opt_g_step: 0,
            opt_d_step: 0,
            rng_seed: seed,
            rng_word_pos_hi: 0,
            rng_word_pos_lo: 0,
        }
    }

    pub fn set_rng_state(&mut self, state: RngState) {
        self.rng_seed = state.seed;
        self.rng_word_pos_hi = (state.word_pos >> 64) as u64;
        self.rng_word_pos_lo = state.word_pos as u64;
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            word_pos: ((self.rng_word_pos_hi as u128) << 64) | self.rng_word_pos_lo as u128,
        }
    }
}

/// A named-array container with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    version: u32,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let header = Header {
        version: 1,
        meta: ckpt.meta.clone(),
        arrays: ckpt
            .arrays
            .iter()
            .map(|(name, v)| ArrayEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| ModelError::Checkpoint(e.to_string());
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_u64::<LittleEndian>(header_json.len() as u64).map_err(io_err)?;
    out.write_all(&header_json).map_err(io_err)?;
    for (_, v) in &ckpt.arrays {
        for &x in v.iter() {
            out.write_f64::<LittleEndian>(x).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let file = File::open(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let io_err = |_: std::io::Error| ModelError::Checkpoint("truncated checkpoint".into());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic string".into()));
    }
    let header_len = input.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json).map_err(io_err)?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.version != 1 {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(input.read_f64::<LittleEndian>().map_err(io_err)?);
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        arrays.push((entry.name, arr));
    }
    Ok(Checkpoint {
        meta: header.meta,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = SeededRng::new(1);
        for _ in 0..321 {
            rng.uniform(); // advance the stream to a nontrivial word pos
        }
        let mut meta = CheckpointMeta::new(
            GeneratorConfig::desk_scale(),
            DiscriminatorConfig::desk_scale(),
            ProjectionHeadConfig::default(),
            77,
        );
        meta.epoch = 5;
        meta.global_step = 123;
        meta.opt_g_step = 123;
        meta.opt_d_step = 122;
        meta.set_rng_state(rng.state());

        let mut mk = SeededRng::new(2);
        let arrays: Vec<(String, ArrayD<f64>)> = vec![
            (
                "gen.enc0.weight".into(),
                ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 1, 4, 4]), |_| mk.normal()),
            ),
            (
                "adam_g.m.gen.enc0.weight".into(),
                ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 1, 4, 4]), |_| mk.normal() * 1e-9),
            ),
            ("disc.head.bias".into(), ArrayD::zeros(ndarray::IxDyn(&[1]))),
        ];
        let ckpt = Checkpoint {
            meta,
            arrays,
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.arrays.len(), ckpt.arrays.len());
        for ((na, va), (nb, vb)) in ckpt.arrays.iter().zip(back.arrays.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.shape(), vb.shape());
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // restored rng continues the identical stream
        let mut restored = SeededRng::restore(back.meta.rng_state());
        assert_eq!(rng.uniform().to_bits(), restored.uniform().to_bits());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
