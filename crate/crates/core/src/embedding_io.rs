//! The `EMB1` file of precomputed per-token embeddings.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! b"EMB1"
//! u32 dim
//! u32 tag_len, tag_len bytes of UTF-8 source tag
//! u32 instance_count
//! per instance: u32 token_count, token_count * dim f32 values (row-major)
//! ```

use std::io::{self, Read, Write};

use ndarray::{Array2, ArrayView2};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
const FORMAT: &str = "EMB1";

/// Token vectors of one instance: `n_tokens x dim`, finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEmbeddings {
    vectors: Array2<f32>,
}

impl InstanceEmbeddings {
    pub fn new(vectors: Array2<f32>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if let Some(((row, col), v)) = vectors.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding value {v} at row {row}, column {col}")));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let vectors = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(vectors)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f32> {
        self.vectors.view()
    }

    pub fn n_tokens(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Upcast to the 64-bit compute precision.
    pub fn to_f64(&self) -> Array2<f64> {
        self.vectors.mapv(f64::from)
    }

    /// Reorders rows so that row `k` of the result is row `perm[k]` here.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_tokens() {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} rows",
                perm.len(),
                self.n_tokens()
            )));
        }
        let vectors = self.vectors.select(ndarray::Axis(0), perm);
        Ok(Self { vectors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    source_tag: String,
    per_instance: Vec<InstanceEmbeddings>,
}

impl EmbeddingFile {
    pub fn new(
        dim: usize,
        source_tag: impl Into<String>,
        per_instance: Vec<InstanceEmbeddings>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if dim > u32::MAX as usize || per_instance.len() > u32::MAX as usize {
            return Err(Error::invalid("embedding file too large for EMB1"));
        }
        for (k, inst) in per_instance.iter().enumerate() {
            if inst.dim() != dim {
                return Err(Error::Shape(format!(
                    "instance {k} has dimension {}, file declares {dim}",
                    inst.dim()
                )));
            }
        }
        Ok(Self {
            dim,
            source_tag: source_tag.into(),
            per_instance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn instances(&self) -> &[InstanceEmbeddings] {
        &self.per_instance
    }

    pub fn len(&self) -> usize {
        self.per_instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_instance.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.per_instance.iter().map(InstanceEmbeddings::n_tokens).sum()
    }
}

fn read_u32<R: Read>(src: &mut R, context: impl FnOnce() -> String) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(src, &mut buf, context)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], context: impl FnOnce() -> String) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated {
            format: FORMAT,
            context: context(),
        },
        _ => Error::Io(e),
    })
}

/// Reads exactly `len` bytes, growing the buffer only as data arrives so a
/// corrupt length cannot trigger a huge allocation up front.
fn read_payload<R: Read>(src: &mut R, len: u64, context: impl FnOnce() -> String) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    src.take(len).read_to_end(&mut buf)?;
    if (buf.len() as u64) < len {
        return Err(Error::Truncated {
            format: FORMAT,
            context: context(),
        });
    }
    Ok(buf)
}

pub fn read_emb<R: Read>(mut source: R) -> Result<EmbeddingFile> {
    let mut magic = [0u8; 4];
    read_exact(&mut source, &mut magic, || "magic".into())?;
    if &magic != MAGIC {
        return Err(Error::Format {
            format: FORMAT,
            message: format!("bad magic {magic:?}"),
        });
    }
    let dim = read_u32(&mut source, || "dim".into())? as usize;
    if dim == 0 {
        return Err(Error::Format {
            format: FORMAT,
            message: "dim is 0".into(),
        });
    }
    let tag_len = read_u32(&mut source, || "tag length".into())?;
    let tag = read_payload(&mut source, u64::from(tag_len), || "source tag".into())?;
    let source_tag = String::from_utf8(tag).map_err(|_| Error::Format {
        format: FORMAT,
        message: "source tag is not UTF-8".into(),
    })?;
    let count = read_u32(&mut source, || "instance count".into())? as usize;

    let mut per_instance = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let n = read_u32(&mut source, || format!("token count of instance {k} of {count}"))? as usize;
        let len = n as u64 * dim as u64 * 4;
        let bytes = read_payload(&mut source, len, || format!("vectors of instance {k} of {count}"))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let vectors = Array2::from_shape_vec((n, dim), values).expect("payload length matches shape");
        let inst = InstanceEmbeddings::new(vectors).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("instance {k}: {msg}")),
            other => other,
        })?;
        per_instance.push(inst);
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Format {
            format: FORMAT,
            message: "trailing bytes after last instance".into(),
        });
    }
    EmbeddingFile::new(dim, source_tag, per_instance)
}

pub fn write_emb<W: Write>(ef: &EmbeddingFile, mut sink: W) -> Result<()> {
    let tag = ef.source_tag.as_bytes();
    let tag_len = u32::try_from(tag.len()).map_err(|_| Error::invalid("source tag too long"))?;
    sink.write_all(MAGIC)?;
    sink.write_all(&(ef.dim as u32).to_le_bytes())?;
    sink.write_all(&tag_len.to_le_bytes())?;
    sink.write_all(tag)?;
    sink.write_all(&(ef.per_instance.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for inst in &ef.per_instance {
        let n = u32::try_from(inst.n_tokens()).map_err(|_| Error::invalid("too many tokens"))?;
        buf.clear();
        buf.extend_from_slice(&n.to_le_bytes());
        for v in inst.vectors.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

/// Checks that `ef` holds one matrix per corpus instance, in order, with one
/// row per token.
pub fn validate_alignment(corpus: &Corpus, ef: &EmbeddingFile) -> Result<()> {
    if corpus.len() != ef.len() {
        return Err(Error::Alignment(format!(
            "corpus `{}` has {} instances, embedding file `{}` has {}",
            corpus.split_name(),
            corpus.len(),
            ef.source_tag(),
            ef.len()
        )));
    }
    for (inst, emb) in corpus.iter().zip(ef.instances()) {
        if inst.len() != emb.n_tokens() {
            return Err(Error::Alignment(format!(
                "instance `{}`: expected {} token vectors, found {}",
                inst.id(),
                inst.len(),
                emb.n_tokens()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnnotatedInstance;

    fn sample() -> EmbeddingFile {
        let a = InstanceEmbeddings::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.25], vec![0.0, 1e-3]]).unwrap();
        let b = InstanceEmbeddings::from_rows(&[vec![7.0, 8.0]]).unwrap();
        EmbeddingFile::new(2, "unit", vec![a, b]).unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let mut bytes = Vec::new();
        write_emb(&sample(), &mut bytes).unwrap();
        let back = read_emb(bytes.as_slice()).unwrap();
        assert_eq!(back, sample());
        let mut again = Vec::new();
        write_emb(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_only_file() {
        let ef = EmbeddingFile::new(768, "bert-base-uncased", vec![]).unwrap();
        let mut bytes = Vec::new();
        write_emb(&ef, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + "bert-base-uncased".len() + 4);
        assert_eq!(read_emb(bytes.as_slice()).unwrap(), ef);
    }

    #[test]
    fn declared_count_larger_than_content() {
        let one = EmbeddingFile::new(2, "t", vec![sample().instances()[1].clone()]).unwrap();
        let mut bytes = Vec::new();
        write_emb(&one, &mut bytes).unwrap();
        // bump instance_count from 1 to 2
        let at = 4 + 4 + 4 + 1;
        bytes[at..at + 4].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_emb(bytes.as_slice()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut bytes = Vec::new();
        write_emb(&sample(), &mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_emb(bad_magic.as_slice()), Err(Error::Format { .. })));

        let mut zero_dim = bytes.clone();
        zero_dim[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_emb(zero_dim.as_slice()), Err(Error::Format { .. })));

        let mut nan = bytes.clone();
        let first_value = 4 + 4 + 4 + 4 + 4 + 4;
        nan[first_value..first_value + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_emb(nan.as_slice()), Err(Error::NonFinite(_))));

        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(read_emb(&bytes[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(read_emb(trailing.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn alignment() {
        let inst = AnnotatedInstance::from_parts("x", [("a", None, 0), ("b", None, 1), ("c", None, 2)], 2)
            .unwrap();
        let corpus = Corpus::new(vec![inst], "dev").unwrap();
        let three = InstanceEmbeddings::new(Array2::zeros((3, 4))).unwrap();
        let two = InstanceEmbeddings::new(Array2::zeros((2, 4))).unwrap();
        assert!(validate_alignment(&corpus, &EmbeddingFile::new(4, "t", vec![three]).unwrap()).is_ok());
        let err = validate_alignment(&corpus, &EmbeddingFile::new(4, "t", vec![two]).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`x`") && msg.contains('3') && msg.contains('2'), "{msg}");
        assert!(validate_alignment(&corpus, &EmbeddingFile::new(4, "t", vec![]).unwrap()).is_err());
    }
}
