//! Byte-level layout of the store file.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CRVO"
//!      4     4  format version (u32)
//!      8     4  flags (u32, bit 0 = marker section present)
//!     12     4  section count (u32)
//!     16     8  n_cells (u64)
//!     24     8  n_genes (u64)
//!     32     4  CRC32 of the header + section table with this field zeroed
//!     36     4  reserved, zero
//!     40  32*k  section table: kind u32, crc32 u32, offset u64, length u64,
//!               reserved u64
//! ```
//!
//! Sections follow the table, each starting on an 8-byte boundary. All
//! integers and floats are little-endian.

use super::StoreError;

pub const MAGIC: [u8; 4] = *b"CRVO";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
pub const SECTION_ENTRY_LEN: usize = 32;

pub const FLAG_MARKERS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum SectionKind {
    GeneNames = 1,
    GeneIndex = 2,
    ExpressionCells = 3,
    ExpressionValues = 4,
    Annotations = 5,
    Embeddings = 6,
    Markers = 7,
}

impl SectionKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => SectionKind::GeneNames,
            2 => SectionKind::GeneIndex,
            3 => SectionKind::ExpressionCells,
            4 => SectionKind::ExpressionValues,
            5 => SectionKind::Annotations,
            6 => SectionKind::Embeddings,
            7 => SectionKind::Markers,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionEntry {
    pub kind: SectionKind,
    pub crc32: u32,
    pub offset: u64,
    pub length: u64,
}

/// Parsed fixed header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub format_version: u32,
    pub flags: u32,
    pub n_cells: u64,
    pub n_genes: u64,
    pub sections: Vec<SectionEntry>,
}

impl StoreHeader {
    pub fn has_markers(&self) -> bool {
        self.flags & FLAG_MARKERS != 0
    }

    pub fn section(&self, kind: SectionKind) -> Option<&SectionEntry> {
        self.sections.iter().find(|s| s.kind == kind)
    }

    pub fn encoded_len(section_count: usize) -> usize {
        HEADER_LEN + SECTION_ENTRY_LEN * section_count
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.sections.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.n_cells.to_le_bytes());
        out.extend_from_slice(&self.n_genes.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.kind as u32).to_le_bytes());
            out.extend_from_slice(&s.crc32.to_le_bytes());
            out.extend_from_slice(&s.offset.to_le_bytes());
            out.extend_from_slice(&s.length.to_le_bytes());
            out.extend_from_slice(&0u64.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out[32..36].copy_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes and validates the header against the total file length.
    /// Magic and version are checked before anything else is read.
    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 8 || bytes[0..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        if bytes.len() < HEADER_LEN {
            return Err(StoreError::CorruptSection("truncated header".into()));
        }
        let mut r = Reader::new(&bytes[8..HEADER_LEN]);
        let flags = r.u32()?;
        let count = r.u32()? as usize;
        let n_cells = r.u64()?;
        let n_genes = r.u64()?;
        let stored_crc = r.u32()?;
        let table_end = Self::encoded_len(count);
        if count > 64 || bytes.len() < table_end {
            return Err(StoreError::CorruptSection("truncated section table".into()));
        }
        let mut check = bytes[..table_end].to_vec();
        check[32..36].fill(0);
        if crc32fast::hash(&check) != stored_crc {
            return Err(StoreError::CorruptSection("header checksum mismatch".into()));
        }
        let mut r = Reader::new(&bytes[HEADER_LEN..table_end]);
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = r.u32()?;
            let kind = SectionKind::from_u32(kind)
                .ok_or_else(|| StoreError::CorruptSection(format!("unknown section kind {kind}")))?;
            let crc32 = r.u32()?;
            let offset = r.u64()?;
            let length = r.u64()?;
            r.u64()?;
            let end = offset.checked_add(length);
            if offset < table_end as u64 || end.is_none_or(|e| e > bytes.len() as u64) {
                return Err(StoreError::CorruptSection(format!(
                    "{kind:?} section [{offset}, +{length}) outside file of {} bytes",
                    bytes.len()
                )));
            }
            sections.push(SectionEntry {
                kind,
                crc32,
                offset,
                length,
            });
        }
        Ok(StoreHeader {
            format_version: version,
            flags,
            n_cells,
            n_genes,
            sections,
        })
    }
}

/// Little-endian append helpers.
#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StoreError::CorruptSection("read past end of section".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32, StoreError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, StoreError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, StoreError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| StoreError::CorruptSection("invalid UTF-8 string".into()))
    }
    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> StoreHeader {
        StoreHeader {
            format_version: FORMAT_VERSION,
            flags: 0,
            n_cells: 2,
            n_genes: 3,
            sections: vec![SectionEntry {
                kind: SectionKind::GeneNames,
                crc32: 7,
                offset: StoreHeader::encoded_len(1) as u64,
                length: 4,
            }],
        }
    }

    #[test]
    fn header_round_trip() {
        let h = header();
        let mut bytes = h.encode();
        bytes.extend_from_slice(&[0; 4]);
        assert_eq!(StoreHeader::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn magic_and_version_checked_first() {
        let mut bytes = header().encode();
        bytes.extend_from_slice(&[0; 4]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(StoreHeader::decode(&bad), Err(StoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            StoreHeader::decode(&bad),
            Err(StoreError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn section_outside_file_is_corrupt() {
        let bytes = header().encode();
        // no payload bytes after the table: the section overruns the file
        assert!(matches!(
            StoreHeader::decode(&bytes),
            Err(StoreError::CorruptSection(_))
        ));
    }

    #[test]
    fn flipped_header_bit_is_detected() {
        let mut bytes = header().encode();
        bytes.extend_from_slice(&[0; 4]);
        bytes[17] ^= 1;
        assert!(matches!(
            StoreHeader::decode(&bytes),
            Err(StoreError::CorruptSection(_))
        ));
    }
}
