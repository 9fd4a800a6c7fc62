//! Binary checkpoints, weight streams and CSV helpers.
//!
//! All binary formats are little-endian. A checkpoint holds the lattice
//! header followed by every network of a hierarchy:
//!
//! ```text
//! "HANCKPT1" L:u32 k:u32 l:u32 dtau:f64 nets:u32
//! per net: n_ctx:u32 n_out:u32 hidden:u32 order:[u32; n_out]
//!          hidden_degree:[u32; hidden] mask1:(u32,u32) mask2:(u32,u32)
//!          W1 b1 alpha W2 b2 : f64 row-major
//! ```
//!
//! A weight stream stores the log importance weights of one matrix element:
//!
//! ```text
//! "HANWTS01" L:u32 k:u32 l:u32 dtau:f64 mu:u32 nu:u32 seed:u64 n:u64 [f64; n]
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autoreg::MaskedNet;
use crate::error::{Error, Result};
use crate::lattice::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HANCKPT1";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"HANWTS01";

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, x: usize) {
        self.buf.extend_from_slice(&(x as u32).to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Lattice header stored in checkpoints and weight streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeHeader {
    pub chain: usize,
    pub k: usize,
    pub l: usize,
    pub dtau: f64,
}

impl LatticeHeader {
    pub fn of(p: &ModelParams) -> Self {
        Self { chain: p.chain, k: p.k, l: p.subsystem, dtau: p.dtau }
    }

    /// Errors unless the header describes the same lattice as `p`.
    pub fn check(&self, p: &ModelParams) -> Result<()> {
        if *self != Self::of(p) {
            return Err(Error::Format(format!("file is for {self:?}, expected {:?}", Self::of(p))));
        }
        Ok(())
    }

    fn write(&self, w: &mut Writer) {
        w.u32(self.chain);
        w.u32(self.k);
        w.u32(self.l);
        w.f64(self.dtau);
    }

    fn read(r: &mut Reader) -> Result<Self> {
        Ok(Self { chain: r.u32()?, k: r.u32()?, l: r.u32()?, dtau: r.f64()? })
    }
}

pub(crate) fn write_nets(w: &mut Writer, nets: &[MaskedNet]) {
    w.u32(nets.len());
    for net in nets {
        w.u32(net.n_ctx());
        w.u32(net.n_out());
        w.u32(net.hidden());
        net.order().iter().for_each(|&o| w.u32(o));
        net.hidden_degree().iter().for_each(|&d| w.u32(d));
        w.u32(net.hidden());
        w.u32(net.n_in());
        w.u32(net.n_out());
        w.u32(net.hidden());
        for t in net.tensors() {
            w.f64s(t);
        }
    }
}

pub(crate) fn read_nets(r: &mut Reader) -> Result<Vec<MaskedNet>> {
    let count = r.u32()?;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let (n_ctx, n_out, hidden) = (r.u32()?, r.u32()?, r.u32()?);
        let order = (0..n_out).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let degree = (0..hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if dims != [hidden, n_ctx + n_out, n_out, hidden] {
            return Err(Error::Format(format!("inconsistent mask dims {dims:?}")));
        }
        let n_params = hidden * (n_ctx + n_out) + 2 * hidden + n_out * hidden + n_out;
        let params = r.f64s(n_params)?;
        nets.push(MaskedNet::from_parts(n_ctx, order, degree, params)?);
    }
    Ok(nets)
}

/// Serialized checkpoint bytes.
pub fn encode_checkpoint(params: &ModelParams, nets: &[MaskedNet]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    LatticeHeader::of(params).write(&mut w);
    write_nets(&mut w, nets);
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(LatticeHeader, Vec<MaskedNet>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let header = LatticeHeader::read(&mut r)?;
    let nets = read_nets(&mut r)?;
    if !r.finished() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((header, nets))
}

/// Short content hash used to tag derived outputs.
pub fn content_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// A checkpoint read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: LatticeHeader,
    pub nets: Vec<MaskedNet>,
    pub id: String,
}

/// Writes a checkpoint and returns its id.
pub fn save_checkpoint(path: &Path, params: &ModelParams, nets: &[MaskedNet]) -> Result<String> {
    let bytes = encode_checkpoint(params, nets);
    write_atomic(path, &bytes)?;
    Ok(content_id(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let (header, nets) = decode_checkpoint(&bytes)?;
    Ok(Checkpoint { header, nets, id: content_id(&bytes) })
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Log-weights of one `(μ_A, ν_A)` element with their provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStream {
    pub header: LatticeHeader,
    pub mu: usize,
    pub nu: usize,
    pub seed: u64,
    pub log_weights: Vec<f64>,
}

impl WeightStream {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(WEIGHTS_MAGIC);
        self.header.write(&mut w);
        w.u32(self.mu);
        w.u32(self.nu);
        w.u64(self.seed);
        w.u64(self.log_weights.len() as u64);
        w.f64s(&self.log_weights);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(WEIGHTS_MAGIC)?;
        let header = LatticeHeader::read(&mut r)?;
        let (mu, nu, seed) = (r.u32()?, r.u32()?, r.u64()?);
        let n = r.u64()? as usize;
        let log_weights = r.f64s(n)?;
        if !r.finished() {
            return Err(Error::Format("trailing bytes after weight stream".into()));
        }
        Ok(Self { header, mu, nu, seed, log_weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// `# key=value ...` provenance line placed at the top of every CSV.
pub fn header_line(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

/// Shortest round-trip float formatting, stable across runs.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 0.4, 4, 2, 1).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params();
        let plan = crate::han::build_hierarchy(&p).unwrap();
        let nets = plan.init_nets(2, 11).unwrap();
        let bytes = encode_checkpoint(&p, &nets);
        let (h, back) = decode_checkpoint(&bytes).unwrap();
        h.check(&p).unwrap();
        assert_eq!(back, nets);
        assert_eq!(content_id(&bytes).len(), 16);
        assert_eq!(encode_checkpoint(&p, &back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = params();
        let nets = crate::han::build_hierarchy(&p).unwrap().init_nets(1, 3).unwrap();
        let bytes = encode_checkpoint(&p, &nets);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let other = ModelParams::new(1.0, 1.0, 0.3, 4, 2, 1).unwrap();
        let (h, _) = decode_checkpoint(&encode_checkpoint(&p, &nets)).unwrap();
        assert!(h.check(&other).is_err());
    }

    #[test]
    fn weight_stream_round_trip() {
        let ws = WeightStream {
            header: LatticeHeader::of(&params()),
            mu: 1,
            nu: 0,
            seed: 42,
            log_weights: vec![-1.5, 0.25, f64::MIN_POSITIVE],
        };
        assert_eq!(WeightStream::decode(&ws.encode()).unwrap(), ws);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -3.25e-17, 1.0 / 3.0, 12345.678] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::NAN), "");
    }
}
