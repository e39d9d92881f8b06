//! EAIM model checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "EAIM" | version u32 = 1
//! emo_dim u32 | acu_dim u32 | d_model u32 | sinc_kernel u32 | ablation flags u8
//! tensor count u32
//! per tensor in declaration order: rows u32 | cols u32 | rows·cols f64
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_store::ByteReader;
use crate::matrix::Matrix;
use crate::model::{Ablation, Model, ModelConfig, ModelParameters};

pub const EAIM_MAGIC: [u8; 4] = *b"EAIM";
pub const EAIM_VERSION: u32 = 1;

fn dim(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + 8 * model.params.num_scalars());
    out.extend_from_slice(&EAIM_MAGIC);
    out.extend_from_slice(&EAIM_VERSION.to_le_bytes());
    for (v, what) in [
        (c.emo_dim, "emotion dimension"),
        (c.acu_dim, "acoustic dimension"),
        (c.d_model, "model dimension"),
        (c.sinc_kernel, "sinc kernel length"),
    ] {
        out.extend_from_slice(&dim(v, what)?);
    }
    out.push(c.ablation.to_bits());
    let count = model.params.iter().count();
    out.extend_from_slice(&dim(count, "tensor count")?);
    for (_, name, m) in model.params.iter() {
        if !m.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite values in tensor {name}")));
        }
        out.extend_from_slice(&dim(m.rows(), "rows")?);
        out.extend_from_slice(&dim(m.cols(), "cols")?);
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != EAIM_MAGIC {
        return Err(Error::BadMagic {
            expected: EAIM_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != EAIM_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let emo_dim = r.u32("emotion dimension")? as usize;
    let acu_dim = r.u32("acoustic dimension")? as usize;
    let d_model = r.u32("model dimension")? as usize;
    let sinc_kernel = r.u32("sinc kernel length")? as usize;
    let ablation = Ablation::from_bits(r.take(1, "ablation flags")?[0])?;
    let config = ModelConfig {
        emo_dim,
        acu_dim,
        d_model,
        sinc_kernel,
        ablation,
    };
    config.validate()?;

    let count = r.u32("tensor count")? as usize;
    let template = ModelParameters::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let expected = template.iter().count();
    if count != expected {
        return Err(Error::DimensionMismatch {
            context: "tensor count",
            expected,
            actual: count,
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (_, name, want) in template.iter() {
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        if (rows, cols) != want.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                want.rows(),
                want.cols()
            )));
        }
        let data = r.f64s(rows * cols, "tensor data")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        tensors.push(Matrix::from_vec(rows, cols, data));
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after tensors", r.remaining())));
    }
    let mut tensors = tensors.into_iter();
    let params = template.map(|_, _, _| tensors.next().expect("count checked"));
    Model::new(config, params)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let config = ModelConfig {
            d_model: 4,
            ablation: Ablation {
                no_hig: true,
                ..Ablation::default()
            },
            ..ModelConfig::new(3, 5)
        };
        Model::init(config, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, _, a), (_, _, b)) in back.params.iter().zip(m.params.iter()) {
            let bits = |x: &Matrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes(&long).is_err());
        let mut flags = bytes;
        flags[24] = 0x80;
        assert!(from_bytes(&flags).is_err());
    }
}
