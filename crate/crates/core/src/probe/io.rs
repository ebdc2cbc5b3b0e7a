// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.cpb` probe files. All fields little-endian, in this order:
//!
//! ```text
//! magic "CPRB"
//! u32 version = 1
//! u32 arch code (0 = linear, 1 = mlp)
//! u32 input dim d
//! u32 trained_on_layer
//! u32 number of hidden layers n
//! n x u32 hidden widths
//! f64 dropout_p
//! 4 x f64 class weights used in training
//! per affine map, input to output: f64 W (out x in, row-major), then f64 b (out)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, Probe, ProbeArch, ProbeKind, NUM_CLASSES};
use crate::error::{Error, Result};

pub const PROBE_MAGIC: &[u8; 4] = b"CPRB";
const VERSION: u32 = 1;

pub fn save_probe(probe: &Probe, path: &Path) -> Result<()> {
    probe.validate()?;
    let arch = &probe.arch;
    let mut buf = Vec::with_capacity(64 + probe.num_params() * 8);
    buf.extend_from_slice(PROBE_MAGIC);
    let words = [
        VERSION,
        arch.kind.code(),
        to_u32(arch.input_dim)?,
        to_u32(probe.trained_on_layer)?,
        to_u32(arch.hidden_dims.len())?,
    ];
    for w in words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for &w in &arch.hidden_dims {
        buf.extend_from_slice(&to_u32(w)?.to_le_bytes());
    }
    buf.extend_from_slice(&arch.dropout_p.to_le_bytes());
    for w in probe.class_weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for layer in &probe.layers {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Shape(format!(
                "truncated probe file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn load_probe(path: &Path) -> Result<Probe> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != PROBE_MAGIC {
        return Err(Error::BadMagic {
            expected: "CPRB".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let kind = ProbeKind::from_code(r.u32("arch code")?)?;
    let input_dim = r.u32("input dim")? as usize;
    let trained_on_layer = r.u32("trained_on_layer")? as usize;
    let n_hidden = r.u32("hidden layer count")? as usize;
    let mut hidden_dims = Vec::with_capacity(n_hidden.min(16));
    for _ in 0..n_hidden {
        hidden_dims.push(r.u32("hidden width")? as usize);
    }
    let dropout_p = r.f64("dropout_p")?;
    let mut class_weights = [0.0; NUM_CLASSES];
    for w in &mut class_weights {
        *w = r.f64("class weight")?;
    }
    let arch = ProbeArch {
        kind,
        input_dim,
        hidden_dims,
        dropout_p,
    };
    arch.validate().map_err(|e| Error::Shape(e.to_string()))?;

    let mut layers = Vec::new();
    for (i, (out, fan_in)) in arch.layer_shapes().into_iter().enumerate() {
        let w = r.f64s(out * fan_in, &format!("layer {i} weights"))?;
        let b = r.f64s(out, &format!("layer {i} bias"))?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((out, fan_in), w).expect("length checked by reader"),
            bias: Array1::from(b),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Shape(format!(
            "{} trailing bytes after probe weights",
            bytes.len() - r.pos
        )));
    }
    let probe = Probe {
        arch,
        layers,
        trained_on_layer,
        class_weights,
    };
    probe.validate()?;
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probe(arch: ProbeArch, seed: u64) -> Probe {
        let mut p = Probe::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            layer.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            layer.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        p.trained_on_layer = 5;
        p.class_weights = [1.0, 6.5, 7.25, 8.0];
        p
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (i, arch) in [ProbeArch::linear(7), ProbeArch::mlp_scaled(7, 0.02)].into_iter().enumerate() {
            let p = random_probe(arch, i as u64);
            let path = dir.path().join(format!("p{i}.cpb"));
            save_probe(&p, &path).unwrap();
            let q = load_probe(&path).unwrap();
            assert_eq!(p, q);
            for (a, b) in p.layers.iter().zip(&q.layers) {
                assert!(a.weight.iter().zip(b.weight.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_file_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cpb");
        save_probe(&random_probe(ProbeArch::linear(3), 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_probe(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_arch_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cpb");
        save_probe(&random_probe(ProbeArch::linear(3), 1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_probe(&path).unwrap_err();
        assert!(err.to_string().contains("unknown arch"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cpb");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_probe(&path), Err(Error::BadMagic { .. })));
    }
}
