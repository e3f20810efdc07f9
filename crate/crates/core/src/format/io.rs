//! `.blco` binary container.
//!
//! All integers are little-endian and fixed width:
//!
//! ```text
//! magic        [u8; 4]  "BLCO"
//! version      u16
//! order N      u16
//! dims         u64 × N
//! target_bits  u8
//! mode_bits    u8 × N
//! max_nnz      u64      per-block element limit used at construction
//! block_count  u64
//! per block:   key u64, nnz u64, indices u64 × nnz, values f64 × nnz
//! ```

use std::io::{Read, Seek, SeekFrom, Write};

use super::{BlcoBlock, BlcoTensor, ELEMENT_BYTES};
use crate::error::{Error, Result};
use crate::exec::ExecConfig;
use crate::linearize::BitLayout;

pub const MAGIC: [u8; 4] = *b"BLCO";
pub const FORMAT_VERSION: u16 = 1;

/// Elements decoded per read call.
const CHUNK: usize = 1 << 14;

pub fn serialize_blco<W: Write>(tensor: &BlcoTensor, mut out: W) -> Result<()> {
    let layout = tensor.layout();
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(layout.order() as u16).to_le_bytes())?;
    for &d in layout.dims() {
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&[layout.target_bits() as u8])?;
    let mode_bits: Vec<u8> = layout.mode_bits().iter().map(|&b| b as u8).collect();
    out.write_all(&mode_bits)?;
    out.write_all(&tensor.max_nnz_per_block().to_le_bytes())?;
    out.write_all(&(tensor.blocks().len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(CHUNK * 8);
    for block in tensor.blocks() {
        out.write_all(&block.key().to_le_bytes())?;
        out.write_all(&(block.nnz() as u64).to_le_bytes())?;
        for chunk in block.linear_indices().chunks(CHUNK) {
            buf.clear();
            chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            out.write_all(&buf)?;
        }
        for chunk in block.values().chunks(CHUNK) {
            buf.clear();
            chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            out.write_all(&buf)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a whole container and validates it.
pub fn deserialize_blco<R: Read>(input: R) -> Result<BlcoTensor> {
    let mut reader = BlcoReader::new(input)?;
    let mut blocks = Vec::with_capacity(reader.header().block_count.min(1 << 20) as usize);
    while let Some(block) = reader.read_block()? {
        blocks.push(block);
    }
    let mut probe = [0u8; 1];
    if reader.inner.read(&mut probe)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last block".into()));
    }
    let header = reader.header;
    let tensor = BlcoTensor::from_parts(
        header.layout,
        header.max_nnz_per_block,
        blocks,
        ExecConfig::default().elements_per_workgroup(),
    )?;
    tensor.validate()?;
    Ok(tensor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlcoHeader {
    pub layout: BitLayout,
    pub max_nnz_per_block: u64,
    pub block_count: u64,
}

impl BlcoHeader {
    pub fn dims(&self) -> &[u64] {
        self.layout.dims()
    }

    /// Bytes before the first block record.
    pub fn encoded_len(&self) -> u64 {
        let n = self.layout.order() as u64;
        4 + 2 + 2 + 8 * n + 1 + n + 8 + 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRecordHeader {
    pub key: u64,
    pub nnz: u64,
}

impl BlockRecordHeader {
    pub fn size_bytes(&self) -> u64 {
        self.nnz.saturating_mul(ELEMENT_BYTES)
    }

    /// Bytes of the whole record including key and count.
    pub fn record_len(&self) -> u64 {
        16u64.saturating_add(self.size_bytes())
    }
}

/// Incremental container reader: the header is parsed up front, blocks are
/// read one record at a time.
pub struct BlcoReader<R> {
    inner: R,
    header: BlcoHeader,
    next_block: u64,
    pending: Option<BlockRecordHeader>,
    bytes: Vec<u8>,
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(Error::from_read)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    read_array::<8, _>(r).map(u64::from_le_bytes)
}

impl<R: Read> BlcoReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        if read_array::<4, _>(&mut inner)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(&mut inner)?);
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let order = u16::from_le_bytes(read_array(&mut inner)?) as usize;
        if order == 0 {
            return Err(Error::Corrupt("order 0".into()));
        }
        let dims = (0..order)
            .map(|_| read_u64(&mut inner))
            .collect::<Result<Vec<_>>>()?;
        let [target_bits] = read_array::<1, _>(&mut inner)?;
        let mut mode_bits = vec![0u8; order];
        inner.read_exact(&mut mode_bits).map_err(Error::from_read)?;
        let max_nnz_per_block = read_u64(&mut inner)?;
        let block_count = read_u64(&mut inner)?;

        let layout = BitLayout::new(&dims, target_bits as u32)
            .map_err(|e| Error::Corrupt(format!("header layout: {e}")))?;
        if layout.mode_bits().iter().zip(&mode_bits).any(|(&a, &b)| a != b as u32) {
            return Err(Error::Corrupt("mode bit widths disagree with dims".into()));
        }
        if max_nnz_per_block == 0 {
            return Err(Error::Corrupt("zero block limit".into()));
        }
        Ok(BlcoReader {
            inner,
            header: BlcoHeader {
                layout,
                max_nnz_per_block,
                block_count,
            },
            next_block: 0,
            pending: None,
            bytes: Vec::new(),
        })
    }

    pub fn header(&self) -> &BlcoHeader {
        &self.header
    }

    /// Blocks whose records have been fully consumed.
    pub fn blocks_consumed(&self) -> u64 {
        self.next_block
    }

    /// Reads the next record header (key and element count) without its
    /// payload. Returns `None` after the last block.
    pub fn next_block_header(&mut self) -> Result<Option<BlockRecordHeader>> {
        if let Some(h) = self.pending {
            return Ok(Some(h));
        }
        if self.next_block >= self.header.block_count {
            return Ok(None);
        }
        let key = read_u64(&mut self.inner)?;
        let nnz = read_u64(&mut self.inner)?;
        if nnz == 0 || nnz > self.header.max_nnz_per_block {
            return Err(Error::Corrupt(format!(
                "block {} claims {nnz} elements (limit {})",
                self.next_block, self.header.max_nnz_per_block
            )));
        }
        let h = BlockRecordHeader { key, nnz };
        self.pending = Some(h);
        Ok(Some(h))
    }

    /// Reads the pending block's payload into caller-owned buffers, which are
    /// cleared first and grown only as needed.
    pub fn read_block_into(
        &mut self,
        indices: &mut Vec<u64>,
        values: &mut Vec<f64>,
    ) -> Result<Option<BlockRecordHeader>> {
        indices.clear();
        values.clear();
        self.read_block_extend(indices, values)
    }

    /// Like [`read_block_into`](Self::read_block_into) but appends.
    pub fn read_block_extend(
        &mut self,
        indices: &mut Vec<u64>,
        values: &mut Vec<f64>,
    ) -> Result<Option<BlockRecordHeader>> {
        let Some(h) = self.next_block_header()? else {
            return Ok(None);
        };
        let nnz = h.nnz as usize;
        self.read_words(nnz, |w| indices.push(w))?;
        self.read_words(nnz, |w| values.push(f64::from_bits(w)))?;
        self.pending = None;
        self.next_block += 1;
        Ok(Some(h))
    }

    pub fn read_block(&mut self) -> Result<Option<BlcoBlock>> {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        match self.read_block_into(&mut indices, &mut values)? {
            Some(h) => Ok(Some(BlcoBlock::new(&self.header.layout, h.key, indices, values))),
            None => Ok(None),
        }
    }

    fn read_words(&mut self, count: usize, mut push: impl FnMut(u64)) -> Result<()> {
        let mut remaining = count;
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            self.bytes.resize(n * 8, 0);
            self.inner
                .read_exact(&mut self.bytes)
                .map_err(Error::from_read)?;
            for word in self.bytes.chunks_exact(8) {
                push(u64::from_le_bytes(word.try_into().expect("8-byte chunk")));
            }
            remaining -= n;
        }
        Ok(())
    }
}

impl<R: Read + Seek> BlcoReader<R> {
    /// Positions the reader at block `index`, whose record starts at byte
    /// `offset` of the container.
    pub fn seek_block(&mut self, index: u64, offset: u64) -> Result<()> {
        if index > self.header.block_count {
            return Err(Error::Config(format!(
                "block {index} beyond {} blocks",
                self.header.block_count
            )));
        }
        self.inner.seek(SeekFrom::Start(offset))?;
        self.pending = None;
        self.next_block = index;
        Ok(())
    }

    /// Skips the pending block's payload.
    pub fn skip_block(&mut self) -> Result<Option<BlockRecordHeader>> {
        let Some(h) = self.next_block_header()? else {
            return Ok(None);
        };
        let bytes = h.size_bytes();
        let offset = i64::try_from(bytes).map_err(|_| Error::Corrupt("block too large".into()))?;
        self.inner.seek(SeekFrom::Current(offset))?;
        self.pending = None;
        self.next_block += 1;
        Ok(Some(h))
    }

    /// Scans every block record header, then rewinds to the first block.
    pub fn scan_block_headers(&mut self) -> Result<Vec<BlockRecordHeader>> {
        if self.next_block != 0 || self.pending.is_some() {
            return Err(Error::Config("scan must start before the first block".into()));
        }
        let start = self.inner.stream_position()?;
        let mut headers = Vec::new();
        while let Some(h) = self.skip_block()? {
            headers.push(h);
        }
        self.inner.seek(SeekFrom::Start(start))?;
        self.next_block = 0;
        Ok(headers)
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::fixtures::example_tensor;
    use crate::format::build_blco;

    fn example_bytes() -> (BlcoTensor, Vec<u8>) {
        let t = build_blco(&example_tensor(), 5, 6).unwrap();
        let mut bytes = Vec::new();
        serialize_blco(&t, &mut bytes).unwrap();
        (t, bytes)
    }

    #[test]
    fn header_layout_is_fixed() {
        let (_, bytes) = example_bytes();
        assert_eq!(&bytes[..4], b"BLCO");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &3u16.to_le_bytes());
        assert_eq!(&bytes[8..16], &4u64.to_le_bytes());
        assert_eq!(bytes[32], 5);
        assert_eq!(&bytes[33..36], &[2, 2, 2]);
        assert_eq!(&bytes[36..44], &6u64.to_le_bytes());
        assert_eq!(&bytes[44..52], &2u64.to_le_bytes());
        // block 0: key 0, nnz 6
        assert_eq!(&bytes[52..60], &0u64.to_le_bytes());
        assert_eq!(&bytes[60..68], &6u64.to_le_bytes());
        assert_eq!(&bytes[68..76], &0u64.to_le_bytes());
        assert_eq!(&bytes[76..84], &16u64.to_le_bytes());
        assert_eq!(bytes.len(), 52 + 2 * (16 + 6 * 16));
    }

    #[test]
    fn roundtrip() {
        let (t, bytes) = example_bytes();
        let back = deserialize_blco(bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        serialize_blco(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn corrupted_magic() {
        let (_, mut bytes) = example_bytes();
        bytes[0] = b'X';
        let err = deserialize_blco(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn version_mismatch() {
        let (_, mut bytes) = example_bytes();
        bytes[4] = 9;
        assert!(matches!(deserialize_blco(bytes.as_slice()), Err(Error::Version(9))));
    }

    #[test]
    fn truncated_payload() {
        let (_, bytes) = example_bytes();
        for cut in [3, 20, 50, 60, 100, bytes.len() - 1] {
            let err = deserialize_blco(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated), "cut {cut}: {err}");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (_, mut bytes) = example_bytes();
        bytes.push(0);
        assert!(matches!(deserialize_blco(bytes.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn invariant_violation_after_load() {
        let (_, mut bytes) = example_bytes();
        // Swap the first two indices of block 0: breaks ascending order.
        let (a, b) = (68, 76);
        for i in 0..8 {
            bytes.swap(a + i, b + i);
        }
        assert!(matches!(deserialize_blco(bytes.as_slice()), Err(Error::Corrupt(_))));

        let (_, mut bytes) = example_bytes();
        // Index 32 needs 6 bits in a 5-bit layout.
        bytes[68..76].copy_from_slice(&32u64.to_le_bytes());
        assert!(matches!(deserialize_blco(bytes.as_slice()), Err(Error::Corrupt(_))));

        let (_, mut bytes) = example_bytes();
        bytes[33] = 3;
        assert!(matches!(deserialize_blco(bytes.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn header_only_descriptor_for_huge_tensor() {
        // Hand-built container: 3 modes of 2^21, one block of 1.7e9 elements,
        // payload absent.
        let nnz: u64 = 1_700_000_000;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"BLCO");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&(1u64 << 21).to_le_bytes());
        }
        bytes.push(64);
        bytes.extend_from_slice(&[21, 21, 21]);
        bytes.extend_from_slice(&(1u64 << 31).to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&nnz.to_le_bytes());

        let mut reader = BlcoReader::new(Cursor::new(&bytes)).unwrap();
        assert_eq!(reader.header().dims(), &[1 << 21; 3]);
        assert_eq!(reader.header().block_count, 1);
        let h = reader.next_block_header().unwrap().unwrap();
        assert_eq!(h.nnz, nnz);
        assert_eq!(h.size_bytes(), nnz * 16);
        // Payload is missing: a full read must fail without allocating it.
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        assert!(matches!(
            reader.read_block_into(&mut idx, &mut vals),
            Err(Error::Truncated)
        ));
        assert!(idx.capacity() < 1 << 20);
    }

    #[test]
    fn scan_then_stream_blocks() {
        let t = build_blco(&example_tensor(), 5, 4).unwrap();
        let mut bytes = Vec::new();
        serialize_blco(&t, &mut bytes).unwrap();
        let mut reader = BlcoReader::new(Cursor::new(bytes)).unwrap();
        let headers = reader.scan_block_headers().unwrap();
        let nnz: Vec<u64> = headers.iter().map(|h| h.nnz).collect();
        assert_eq!(nnz, vec![4, 2, 4, 2]);
        let mut seen = Vec::new();
        while let Some(b) = reader.read_block().unwrap() {
            seen.push(b);
        }
        assert_eq!(seen, t.blocks());
        assert_eq!(reader.blocks_consumed(), 4);
    }
}
