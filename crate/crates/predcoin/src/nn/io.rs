//! Weight-file format.
//!
//! Magic `PCNN`, u32 version (=1), u32 layer count, then per layer:
//! u32 rows, u32 cols, u8 activation tag (0=relu, 1=softmax, 2=identity),
//! row-major little-endian f64 weights followed by biases. All integers are
//! little-endian. A JSON sidecar at `<path>.json` records the architecture,
//! seed, and training configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, DenseNetwork, Layer, TrainConfig};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PCNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Vec<usize>,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn save_model(net: &DenseNetwork, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for layer in &net.layers {
        w.write_all(&(layer.rows as u32).to_le_bytes())?;
        w.write_all(&(layer.cols as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.tag()])?;
        for v in &layer.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let sidecar = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(sidecar), &net.meta)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_model(path: &Path) -> Result<DenseNetwork> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            actual: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_layers = read_u32(&mut r, "layer count")? as usize;
    if n_layers == 0 {
        return Err(Error::InvalidConfig("zero layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let rows = read_u32(&mut r, "rows")? as usize;
        let cols = read_u32(&mut r, "cols")? as usize;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "activation tag")?;
        let activation = Activation::from_tag(tag[0])?;
        let mut layer = Layer::zeros(rows, cols, activation);
        let mut buf = [0u8; 8];
        for v in layer.weights.iter_mut() {
            read_exact(&mut r, &mut buf, &format!("layer {i} weights"))?;
            *v = f64::from_le_bytes(buf);
        }
        for v in layer.bias.iter_mut() {
            read_exact(&mut r, &mut buf, &format!("layer {i} biases"))?;
            *v = f64::from_le_bytes(buf);
        }
        layers.push(layer);
    }
    let mut net = DenseNetwork::from_layers(layers)?;
    if let Ok(f) = File::open(sidecar_path(path)) {
        if let Ok(meta) = serde_json::from_reader::<_, ModelMeta>(BufReader::new(f)) {
            net.meta = meta;
        }
    }
    Ok(net)
}
