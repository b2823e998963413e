//! Flat little-endian container for [`EnvironmentDataset`].
//!
//! Layout: magic `IIBD`, version `u16`, sample count `u32`, number of
//! feature dims `u16`, each dim `u32`, class count `u16`, domain `u16`, then
//! all features as `f64`, labels as `u16` and group tags as `u8`.

use std::io::{Read, Write};

use super::{EnvironmentDataset, GroupTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IIBD";
pub const VERSION: u16 = 1;

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit the container")))
}

pub fn write_dataset<W: Write>(ds: &EnvironmentDataset, mut w: W) -> Result<()> {
    ds.validate()?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&narrow::<u32>(ds.len(), "sample count")?.to_le_bytes())?;
    w.write_all(&narrow::<u16>(ds.feature_shape.len(), "dim count")?.to_le_bytes())?;
    for &d in &ds.feature_shape {
        w.write_all(&narrow::<u32>(d, "feature dim")?.to_le_bytes())?;
    }
    w.write_all(&narrow::<u16>(ds.n_classes, "class count")?.to_le_bytes())?;
    w.write_all(&narrow::<u16>(ds.domain, "domain")?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(ds.inputs.len() * 8 + ds.len() * 3);
    for v in ds.inputs.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    buf.extend(ds.groups.iter().map(|g| g.code()));
    w.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated IIBD stream: {e}")))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<EnvironmentDataset> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not an IIBD stream".into()));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported IIBD version {version}")));
    }
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let n_dims = u16::from_le_bytes(take(&mut r)?) as usize;
    let mut feature_shape = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        feature_shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
    }
    let n_classes = u16::from_le_bytes(take(&mut r)?) as usize;
    let domain = u16::from_le_bytes(take(&mut r)?) as usize;
    let width: usize = feature_shape.iter().product();
    if n == 0 || width == 0 {
        return Err(Error::Format("IIBD header declares an empty dataset".into()));
    }
    let mut data = Vec::with_capacity(n * width);
    for _ in 0..n * width {
        data.push(f64::from_le_bytes(take(&mut r)?));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u16::from_le_bytes(take(&mut r)?) as usize);
    }
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let [code] = take::<1, _>(&mut r)?;
        groups.push(GroupTag::from_code(code).ok_or_else(|| Error::Format(format!("bad group tag {code}")))?);
    }
    let ds = EnvironmentDataset {
        inputs: Tensor::matrix(n, width, data)?,
        feature_shape,
        labels,
        n_classes,
        domain,
        groups,
        spurious: None,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &EnvironmentDataset, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<EnvironmentDataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}
