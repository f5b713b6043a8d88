//! Named tensors concatenated into one binary blob, indexed by byte offset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

pub fn pack<'a>(arrays: impl IntoIterator<Item = (String, &'a Tensor)>) -> (Vec<u8>, Vec<ArchiveEntry>) {
    let mut bytes = Vec::new();
    let mut index = Vec::new();
    for (name, t) in arrays {
        index.push(ArchiveEntry {
            name,
            offset: bytes.len() as u64,
            shape: t.shape().to_vec(),
        });
        t.write_to(&mut bytes).expect("writing to a Vec cannot fail");
    }
    (bytes, index)
}

pub fn read_entry(bytes: &[u8], entry: &ArchiveEntry) -> Result<Tensor> {
    let start = usize::try_from(entry.offset)
        .ok()
        .filter(|&o| o < bytes.len())
        .ok_or_else(|| Error::Format(format!("offset of `{}` out of range", entry.name)))?;
    let t = Tensor::read_from(&mut &bytes[start..])?;
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::Format(format!(
            "`{}` has shape {:?}, index says {:?}",
            entry.name,
            t.shape(),
            entry.shape
        )));
    }
    Ok(t)
}

pub fn find<'a>(index: &'a [ArchiveEntry], name: &str) -> Result<&'a ArchiveEntry> {
    index
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("archive has no array `{name}`")))
}
