//! `KFEP` binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "KFEP" | u32 version | u32 input rank | u32 dims.. | u32 layer count | layers.. | u32 factor count | factors..
//! layer  : u8 tag | u32 entry count | entries..
//! factor : u32 layer index | u8 tag (5) | u32 entry count | entries..
//! entry  : u8 name length | name | u8 dtype (0 f64, 1 u32) | u32 rank | u32 dims.. | payload
//! ```
//!
//! Tags: 0 dense, 1 conv, 2 relu, 3 flatten, 4 bottleneck, 5 factors.
//! Masked dense and conv layers store only their kept weights, so the
//! `f64` payload of the layer section equals the live parameter count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kfac::{FactorVariant, KronFactors};
use crate::linalg::Matrix;
use crate::nn::{Conv, ConvGeom, Dense, Layer, Network};
use crate::reparam::{Basis, BottleneckLayer, Core};

pub const MAGIC: &[u8; 4] = b"KFEP";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_BOTTLENECK: u8 = 4;
const TAG_FACTORS: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

/// A network plus optional curvature snapshots keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub factors: Vec<(usize, KronFactors)>,
}

fn f64_entry(name: &str, dims: &[usize], values: &[f64]) -> Entry {
    Entry {
        name: name.into(),
        dims: dims.to_vec(),
        payload: Payload::F64(values.to_vec()),
    }
}

fn u32_entry(name: &str, values: &[usize]) -> Entry {
    Entry {
        name: name.into(),
        dims: vec![values.len()],
        payload: Payload::U32(values.iter().map(|&v| v as u32).collect()),
    }
}

fn matrix_entry(name: &str, m: &Matrix) -> Entry {
    f64_entry(name, &[m.rows(), m.cols()], m.as_slice())
}

fn weight_entries(weight: &Matrix, mask: Option<&[bool]>) -> Vec<Entry> {
    match mask {
        None => vec![matrix_entry("weight", weight)],
        Some(keep) => {
            let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            let values: Vec<f64> = idx.iter().map(|&i| weight.as_slice()[i]).collect();
            vec![
                u32_entry("shape", &[weight.rows(), weight.cols()]),
                u32_entry("kept_index", &idx),
                f64_entry("kept_weight", &[values.len()], &values),
            ]
        }
    }
}

fn geom_entry(g: ConvGeom) -> Entry {
    u32_entry("geom", &[g.k, g.stride, g.pad])
}

fn layer_record(layer: &Layer) -> (u8, Vec<Entry>) {
    match layer {
        Layer::Dense(d) => {
            let mut e = weight_entries(&d.weight, d.mask.as_deref());
            e.push(f64_entry("bias", &[d.bias.len()], &d.bias));
            (TAG_DENSE, e)
        }
        Layer::Conv(c) => {
            let mut e = weight_entries(&c.weight, c.mask.as_deref());
            e.push(f64_entry("bias", &[c.bias.len()], &c.bias));
            e.push(geom_entry(c.geom));
            (TAG_CONV, e)
        }
        Layer::Relu => (TAG_RELU, vec![]),
        Layer::Flatten => (TAG_FLATTEN, vec![]),
        Layer::Bottleneck(b) => {
            let (core_kind, core) = match &b.core {
                Core::Full(m) => (0, m),
                Core::Depthwise(m) => (1, m),
            };
            let basis = match b.basis {
                Basis::Dense => 0,
                Basis::ConvPatch => 1,
                Basis::ConvChannel => 2,
            };
            (
                TAG_BOTTLENECK,
                vec![
                    matrix_entry("qa", &b.qa),
                    matrix_entry("core", core),
                    matrix_entry("qs", &b.qs),
                    f64_entry("bias", &[b.bias.len()], &b.bias),
                    geom_entry(b.geom),
                    u32_entry("basis", &[basis]),
                    u32_entry("core_kind", &[core_kind]),
                    u32_entry("kept_rows", &b.kept_rows),
                    u32_entry("kept_cols", &b.kept_cols),
                ],
            )
        }
    }
}

fn factor_record(f: &KronFactors) -> Vec<Entry> {
    let variant = match f.variant {
        FactorVariant::Dense => 0,
        FactorVariant::ConvFull => 1,
        FactorVariant::ConvChannel => 2,
    };
    vec![
        matrix_entry("a", &f.a),
        matrix_entry("s", &f.s),
        u32_entry("samples", &[f.sample_count]),
        u32_entry("variant", &[variant]),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, tag: u8, entries: &[Entry]) {
    out.push(tag);
    put_u32(out, entries.len());
    for e in entries {
        out.push(e.name.len() as u8);
        out.extend_from_slice(e.name.as_bytes());
        match &e.payload {
            Payload::F64(_) => out.push(0),
            Payload::U32(_) => out.push(1),
        }
        put_u32(out, e.dims.len());
        for &d in &e.dims {
            put_u32(out, d);
        }
        match &e.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, ckpt.network.input_shape.len());
    for &d in &ckpt.network.input_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, ckpt.network.layers.len());
    for layer in &ckpt.network.layers {
        let (tag, entries) = layer_record(layer);
        put_record(&mut out, tag, &entries);
    }
    put_u32(&mut out, ckpt.factors.len());
    for (idx, f) in &ckpt.factors {
        put_u32(&mut out, *idx);
        put_record(&mut out, TAG_FACTORS, &factor_record(f));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn record(&mut self) -> Result<(u8, Vec<Entry>)> {
        let tag = self.u8()?;
        let count = self.u32()?;
        let mut entries = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = self.u8()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = self.u8()?;
            let rank = self.u32()?;
            if rank > 8 {
                return Err(Error::Format(format!("entry {name:?} has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| self.u32()).collect::<Result<_>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= self.bytes.len())
                .ok_or_else(|| Error::Format(format!("entry {name:?} dimensions {dims:?} are too large")))?;
            let payload = match dtype {
                0 => Payload::F64(
                    self.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => Payload::U32(
                    self.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("entry {name:?} has unknown dtype {other}"))),
            };
            entries.push(Entry { name, dims, payload });
        }
        Ok((tag, entries))
    }
}

struct Fields(Vec<Entry>);

impl Fields {
    fn get(&self, name: &str) -> Option<&Entry> {
        self.0.iter().find(|e| e.name == name)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing checkpoint entry {name:?}")))
    }

    fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        match &self.entry(name)?.payload {
            Payload::F64(v) => Ok(v.clone()),
            Payload::U32(_) => Err(Error::Format(format!("entry {name:?} should be f64"))),
        }
    }

    fn u32s(&self, name: &str) -> Result<Vec<usize>> {
        match &self.entry(name)?.payload {
            Payload::U32(v) => Ok(v.iter().map(|&x| x as usize).collect()),
            Payload::F64(_) => Err(Error::Format(format!("entry {name:?} should be u32"))),
        }
    }

    fn scalar(&self, name: &str) -> Result<usize> {
        match self.u32s(name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Format(format!("entry {name:?} should hold one value, has {}", other.len()))),
        }
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let e = self.entry(name)?;
        let [r, c] = e.dims[..] else {
            return Err(Error::Format(format!("entry {name:?} is not a matrix")));
        };
        Matrix::from_vec(r, c, self.f64s(name)?)
    }

    fn geom(&self) -> Result<ConvGeom> {
        match self.u32s("geom")?.as_slice() {
            &[k, stride, pad] if k > 0 && stride > 0 => Ok(ConvGeom { k, stride, pad }),
            other => Err(Error::Format(format!("invalid conv geometry {other:?}"))),
        }
    }

    /// Dense weight matrix and keep-mask, from either storage form.
    fn weight(&self) -> Result<(Matrix, Option<Vec<bool>>)> {
        if self.get("weight").is_some() {
            return Ok((self.matrix("weight")?, None));
        }
        let [rows, cols] = self.u32s("shape")?[..] else {
            return Err(Error::Format("masked weight shape must have two entries".into()));
        };
        let idx = self.u32s("kept_index")?;
        let values = self.f64s("kept_weight")?;
        if idx.len() != values.len() {
            return Err(Error::Format("kept weight and index lengths differ".into()));
        }
        let mut w = Matrix::zeros(rows, cols);
        let mut keep = vec![false; rows * cols];
        for (&i, &v) in idx.iter().zip(&values) {
            if i >= rows * cols {
                return Err(Error::Format(format!("kept index {i} out of range")));
            }
            w.as_mut_slice()[i] = v;
            keep[i] = true;
        }
        Ok((w, Some(keep)))
    }
}

fn decode_layer(tag: u8, f: &Fields) -> Result<Layer> {
    let layer = match tag {
        TAG_DENSE => {
            let (w, mask) = f.weight()?;
            let mut d = Dense::new(w, f.f64s("bias")?)?;
            d.mask = mask;
            Layer::Dense(d)
        }
        TAG_CONV => {
            let (w, mask) = f.weight()?;
            let geom = f.geom()?;
            let slices = geom.slices();
            if w.rows() % slices != 0 {
                return Err(Error::Format("conv weight rows are not a multiple of k²".into()));
            }
            let mut c = Conv::new(w.clone(), f.f64s("bias")?, w.rows() / slices, geom)?;
            c.mask = mask;
            Layer::Conv(c)
        }
        TAG_RELU => Layer::Relu,
        TAG_FLATTEN => Layer::Flatten,
        TAG_BOTTLENECK => {
            let basis = match f.scalar("basis")? {
                0 => Basis::Dense,
                1 => Basis::ConvPatch,
                2 => Basis::ConvChannel,
                other => return Err(Error::Format(format!("unknown bottleneck basis {other}"))),
            };
            let core = match f.scalar("core_kind")? {
                0 => Core::Full(f.matrix("core")?),
                1 => Core::Depthwise(f.matrix("core")?),
                other => return Err(Error::Format(format!("unknown core kind {other}"))),
            };
            let b = BottleneckLayer {
                qa: f.matrix("qa")?,
                core,
                qs: f.matrix("qs")?,
                bias: f.f64s("bias")?,
                basis,
                geom: f.geom()?,
                kept_rows: f.u32s("kept_rows")?,
                kept_cols: f.u32s("kept_cols")?,
            };
            b.validate()?;
            Layer::Bottleneck(b)
        }
        other => return Err(Error::Format(format!("unknown layer tag {other}"))),
    };
    Ok(layer)
}

fn decode_factors(f: &Fields) -> Result<KronFactors> {
    let variant = match f.scalar("variant")? {
        0 => FactorVariant::Dense,
        1 => FactorVariant::ConvFull,
        2 => FactorVariant::ConvChannel,
        other => return Err(Error::Format(format!("unknown factor variant {other}"))),
    };
    Ok(KronFactors {
        a: f.matrix("a")?,
        s: f.matrix("s")?,
        sample_count: f.scalar("samples")?,
        variant,
    })
}

fn header(r: &mut Reader) -> Result<Vec<usize>> {
    if r.take(4).map_err(|_| Error::Format("file too short for a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("not a KFEP checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let rank = r.u32()?;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("invalid input rank {rank}")));
    }
    (0..rank).map(|_| r.u32()).collect()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let input_shape = header(&mut r)?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let (tag, entries) = r.record()?;
        layers.push(decode_layer(tag, &Fields(entries))?);
    }
    let network = Network::new(layers, input_shape).map_err(|e| Error::Format(format!("inconsistent network: {e}")))?;
    let n_factors = r.u32()?;
    let mut factors = Vec::new();
    for _ in 0..n_factors {
        let idx = r.u32()?;
        let (tag, entries) = r.record()?;
        if tag != TAG_FACTORS || idx >= network.layers.len() {
            return Err(Error::Format(format!("invalid factor record for layer {idx}")));
        }
        factors.push((idx, decode_factors(&Fields(entries))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { network, factors })
}

/// Number of `f64` values stored in the layer section of an encoded
/// checkpoint, read straight from the entry headers.
pub fn layer_payload_len(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0 };
    header(&mut r)?;
    let mut total = 0;
    for _ in 0..r.u32()? {
        for e in r.record()?.1 {
            if let Payload::F64(v) = e.payload {
                total += v.len();
            }
        }
    }
    Ok(total)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfac::EigenFactors;
    use crate::reparam::{eigenprune, to_kfe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Network::cnn([1, 6, 6], &[3, 4], &[1, 2], 3, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_plain_and_masked() {
        let mut net = sample_net();
        if let Layer::Dense(d) = net.layers.last_mut().unwrap() {
            let mut keep = vec![true; d.weight.rows() * d.weight.cols()];
            keep[3] = false;
            keep[10] = false;
            d.mask = Some(keep);
        }
        for l in &mut net.layers {
            l.apply_mask();
        }
        let mut f = KronFactors::new(FactorVariant::ConvChannel, 3, 4);
        f.a = Matrix::identity(3);
        f.sample_count = 7;
        let ckpt = Checkpoint {
            network: net,
            factors: vec![(2, f)],
        };
        let bytes = encode(&ckpt);
        assert_eq!(decode(&bytes).unwrap(), ckpt);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
        let live = ckpt.network.param_count() - 2;
        assert_eq!(layer_payload_len(&bytes).unwrap(), live);
    }

    #[test]
    fn round_trip_bottleneck() {
        let mut net = sample_net();
        let eig = EigenFactors {
            qa: Matrix::identity(3),
            lambda_a: vec![1.0; 3],
            qs: Matrix::identity(4),
            lambda_s: vec![1.0; 4],
        };
        let b = eigenprune(&to_kfe(&net.layers[2], &eig, Basis::ConvChannel).unwrap(), &[1], &[0, 3]).unwrap();
        net.layers[2] = Layer::Bottleneck(b);
        let ckpt = Checkpoint {
            network: net,
            factors: vec![],
        };
        let bytes = encode(&ckpt);
        assert_eq!(decode(&bytes).unwrap(), ckpt);
        assert_eq!(layer_payload_len(&bytes).unwrap(), ckpt.network.param_count());
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = encode(&Checkpoint {
            network: sample_net(),
            factors: vec![],
        });
        assert!(matches!(decode(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Format(_))));
        assert!(matches!(decode(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load(Path::new("/nonexistent/model.kfep")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.kfep"));
        assert_eq!(err.exit_code(), 2);
    }
}
