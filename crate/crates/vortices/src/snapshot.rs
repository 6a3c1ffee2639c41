//! Versioned field snapshots: a compact little-endian binary format and a
//! CSV layout for grid fields.
//!
//! Binary layout (all little-endian):
//!   magic   16 bytes  b"VORTXFLDSNAP0001"
//!   version u32       currently 1
//!   ns, nt  u32, u32
//!   ls, lt  f64, f64
//!   lambda  f64 * (ns*nt)
//!   n, r    u32, u32
//!   w       i64 * (n*r)
//!   tau     f64 * r
//!   degree  i64 * r
//!   epsilon f64
//!   z       f64 * (2*n*ns*nt)   (re, im per component)
//!   a_s     f64 * (r*ns*nt)
//!   a_t     f64 * (r*ns*nt)

use crate::error::{Result, VortexError};
use crate::field::{LinkField, SiteField};
use crate::geometry::{make_torus, LambdaSpec, TorusGeometry};
use crate::target::WeightModel;
use crate::vortex::VortexState;
use num_complex::Complex64;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 16] = b"VORTXFLDSNAP0001";
pub const VERSION: u32 = 1;

/// Everything needed to resume or verify a solve.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub geom: TorusGeometry,
    pub model: WeightModel,
    pub state: VortexState,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_i64(buf: &mut Vec<u8>, v: i64) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VortexError::SnapshotVersionMismatch(
                "truncated snapshot".into(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn encode(snap: &Snapshot) -> Vec<u8> {
    let g = &snap.geom;
    let m = &snap.model;
    let st = &snap.state;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, g.ns as u32);
    put_u32(&mut buf, g.nt as u32);
    put_f64(&mut buf, g.ls);
    put_f64(&mut buf, g.lt);
    for l in &g.lambda {
        put_f64(&mut buf, *l);
    }
    put_u32(&mut buf, m.n as u32);
    put_u32(&mut buf, m.r as u32);
    for w in &m.w {
        put_i64(&mut buf, *w);
    }
    for t in &m.tau {
        put_f64(&mut buf, *t);
    }
    for d in &st.a.degree {
        put_i64(&mut buf, *d);
    }
    put_f64(&mut buf, st.epsilon);
    for z in &st.z.z {
        put_f64(&mut buf, z.re);
        put_f64(&mut buf, z.im);
    }
    for a in &st.a.a_s {
        put_f64(&mut buf, *a);
    }
    for a in &st.a.a_t {
        put_f64(&mut buf, *a);
    }
    buf
}

pub fn decode(buf: &[u8]) -> Result<Snapshot> {
    let mut rd = Reader { buf, pos: 0 };
    let magic = rd.take(16)?;
    if magic != MAGIC {
        return Err(VortexError::SnapshotVersionMismatch(format!(
            "bad magic {:?}",
            &magic[..8.min(magic.len())]
        )));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(VortexError::SnapshotVersionMismatch(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let ns = rd.u32()? as usize;
    let nt = rd.u32()? as usize;
    let ls = rd.f64()?;
    let lt = rd.f64()?;
    let mut lambda = Vec::with_capacity(ns * nt);
    for _ in 0..ns * nt {
        lambda.push(rd.f64()?);
    }
    let geom = make_torus(ns, nt, ls, lt, &LambdaSpec::PerSite(lambda))?;
    let n = rd.u32()? as usize;
    let r = rd.u32()? as usize;
    let mut w = Vec::with_capacity(n * r);
    for _ in 0..n * r {
        w.push(rd.i64()?);
    }
    let mut tau = Vec::with_capacity(r);
    for _ in 0..r {
        tau.push(rd.f64()?);
    }
    let model = WeightModel::new(n, r, w, tau)?;
    let mut degree = Vec::with_capacity(r);
    for _ in 0..r {
        degree.push(rd.i64()?);
    }
    let epsilon = rd.f64()?;
    let mut z = SiteField::zeros(&geom, n);
    for v in z.z.iter_mut() {
        let re = rd.f64()?;
        let im = rd.f64()?;
        *v = Complex64::new(re, im);
    }
    let mut a = LinkField::zeros(&geom, r, degree);
    for v in a.a_s.iter_mut() {
        *v = rd.f64()?;
    }
    for v in a.a_t.iter_mut() {
        *v = rd.f64()?;
    }
    if rd.pos != buf.len() {
        return Err(VortexError::SnapshotVersionMismatch(
            "trailing bytes in snapshot".into(),
        ));
    }
    let state = VortexState::new(z, a, epsilon)?;
    Ok(Snapshot { geom, model, state })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("snap")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, snap: &Snapshot) -> Result<()> {
    write_atomic(path, &encode(snap))
}

pub fn load(path: &Path) -> Result<Snapshot> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// CSV layout v1 for a site field: header comment, then
/// `i,j,re_z0,im_z0,...` per site in row-major order.
pub fn site_field_csv(geom: &TorusGeometry, z: &SiteField) -> String {
    let mut out = String::from("# vortices-site-field-csv v1\n");
    out.push_str("i,j");
    for nu in 0..z.n {
        out.push_str(&format!(",re_z{nu},im_z{nu}"));
    }
    out.push('\n');
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            out.push_str(&format!("{i},{j}"));
            for nu in 0..z.n {
                let v = z.at(geom.idx(i, j), nu);
                out.push_str(&format!(",{:.17e},{:.17e}", v.re, v.im));
            }
            out.push('\n');
        }
    }
    out
}

/// CSV layout v1 for a link field: `i,j,a_s_0,..,a_t_0,..` per site.
pub fn link_field_csv(geom: &TorusGeometry, a: &LinkField) -> String {
    let mut out = String::from("# vortices-link-field-csv v1\n");
    out.push_str("i,j");
    for k in 0..a.r {
        out.push_str(&format!(",a_s_{k}"));
    }
    for k in 0..a.r {
        out.push_str(&format!(",a_t_{k}"));
    }
    out.push('\n');
    for j in 0..geom.nt {
        for i in 0..geom.ns {
            let site = geom.idx(i, j);
            out.push_str(&format!("{i},{j}"));
            for k in 0..a.r {
                out.push_str(&format!(",{:.17e}", a.a_s[site * a.r + k]));
            }
            for k in 0..a.r {
                out.push_str(&format!(",{:.17e}", a.a_t[site * a.r + k]));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vortex::random_state;

    #[test]
    fn roundtrip() {
        let geom = make_torus(8, 8, 1.0, 1.0, &LambdaSpec::Constant(1.0)).unwrap();
        let model = WeightModel::new(2, 1, vec![1, 1], vec![2.5]).unwrap();
        let state = random_state(&geom, &model, &[1], 0.5, 1.0, 42);
        let snap = Snapshot {
            geom: geom.clone(),
            model: model.clone(),
            state,
        };
        let bytes = encode(&snap);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.geom, geom);
        assert_eq!(back.model.w, model.w);
        assert_eq!(back.state.z.z, snap.state.z.z);
        assert_eq!(back.state.a.a_t, snap.state.a.a_t);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let geom = make_torus(4, 4, 1.0, 1.0, &LambdaSpec::Constant(1.0)).unwrap();
        let model = WeightModel::vortex(1, 1.0);
        let state = random_state(&geom, &model, &[0], 1.0, 1.0, 7);
        let snap = Snapshot { geom, model, state };
        let mut bytes = encode(&snap);
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(VortexError::SnapshotVersionMismatch(_))
        ));
        let mut bytes2 = encode(&snap);
        bytes2[16] = 9;
        assert!(matches!(
            decode(&bytes2),
            Err(VortexError::SnapshotVersionMismatch(_))
        ));
    }
}
