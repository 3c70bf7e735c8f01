//! Versioned bitstream container.
//!
//! Byte layout (all integers little-endian; normative, see docs/bitstream.md):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `UQC1`                   |
//! | 4      | 1    | version (1)                    |
//! | 5      | 1    | dither generator id            |
//! | 6      | 8    | seed, u64                      |
//! | 14     | 8    | model hash (SHA-256 prefix)    |
//! | 22     | 4    | alpha, f32                     |
//! | 26     | 4    | image width, u32               |
//! | 30     | 4    | image height, u32              |
//! | 34     | 2    | channel count, u16             |
//! | 36     | 8    | payload length, u64            |
//! | 44     | n    | range-coded payload            |
//! | 44+n   | 4    | CRC32 over bytes [0, 44+n)     |

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"UQC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 44;

#[derive(Debug, Error, PartialEq)]
pub enum BitstreamError {
    #[error("not a coded stream (bad magic)")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    BadVersion(u8),
    #[error("unknown dither generator id {0}")]
    UnknownGenerator(u8),
    #[error("stream truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("model hash mismatch: stream was encoded with a different model")]
    ModelHashMismatch,
}

/// Everything the decoder needs before touching the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub generator: u8,
    pub seed: u64,
    pub model_hash: [u8; 8],
    pub alpha: f32,
    pub width: u32,
    pub height: u32,
    pub channels: u16,
}

pub fn write_bitstream(header: &BitstreamHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(header.generator);
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&header.model_hash);
    out.extend_from_slice(&header.alpha.to_le_bytes());
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.channels.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_bitstream(bytes: &[u8]) -> Result<(BitstreamHeader, &[u8]), BitstreamError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(BitstreamError::Truncated { need: HEADER_LEN + 4, have: bytes.len() });
    }
    if bytes[0..4] != MAGIC {
        return Err(BitstreamError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(BitstreamError::BadVersion(bytes[4]));
    }
    let payload_len = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
    let need = HEADER_LEN + payload_len + 4;
    if bytes.len() < need {
        return Err(BitstreamError::Truncated { need, have: bytes.len() });
    }
    let body = &bytes[..HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(
        bytes[HEADER_LEN + payload_len..HEADER_LEN + payload_len + 4].try_into().unwrap(),
    );
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(BitstreamError::CrcMismatch { stored, computed });
    }
    let header = BitstreamHeader {
        generator: bytes[5],
        seed: u64::from_le_bytes(bytes[6..14].try_into().unwrap()),
        model_hash: bytes[14..22].try_into().unwrap(),
        alpha: f32::from_le_bytes(bytes[22..26].try_into().unwrap()),
        width: u32::from_le_bytes(bytes[26..30].try_into().unwrap()),
        height: u32::from_le_bytes(bytes[30..34].try_into().unwrap()),
        channels: u16::from_le_bytes(bytes[34..36].try_into().unwrap()),
    };
    Ok((header, &bytes[HEADER_LEN..HEADER_LEN + payload_len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> BitstreamHeader {
        BitstreamHeader {
            generator: 1,
            seed: 0xDEAD_BEEF_0123_4567,
            model_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            alpha: 4.5,
            width: 512,
            height: 768,
            channels: 32,
        }
    }

    #[test]
    fn round_trip_preserves_fields_and_payload() {
        let payload = vec![9u8, 8, 7, 6, 5, 4, 3, 2, 1, 0];
        let bytes = write_bitstream(&header(), &payload);
        let (h, p) = read_bitstream(&bytes).unwrap();
        assert_eq!(h, header());
        assert_eq!(p, &payload[..]);
    }

    #[test]
    fn layout_is_byte_exact() {
        let bytes = write_bitstream(&header(), &[0xAA]);
        assert_eq!(&bytes[0..4], b"UQC1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..14], &0xDEAD_BEEF_0123_4567u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &4.5f32.to_le_bytes());
        assert_eq!(&bytes[26..30], &512u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &768u32.to_le_bytes());
        assert_eq!(&bytes[34..36], &32u16.to_le_bytes());
        assert_eq!(&bytes[36..44], &1u64.to_le_bytes());
        assert_eq!(bytes[44], 0xAA);
        assert_eq!(bytes.len(), 44 + 1 + 4);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut bytes = write_bitstream(&header(), &[1, 2, 3, 4]);
        bytes[46] ^= 0x01;
        assert!(matches!(read_bitstream(&bytes), Err(BitstreamError::CrcMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = write_bitstream(&header(), &[]);
        bytes[0] = b'X';
        assert_eq!(read_bitstream(&bytes), Err(BitstreamError::BadMagic));
        let mut bytes = write_bitstream(&header(), &[]);
        bytes[4] = 9;
        // Version is checked before the CRC so future formats can extend it.
        assert_eq!(read_bitstream(&bytes), Err(BitstreamError::BadVersion(9)));
    }

    #[test]
    fn truncation_is_reported_with_sizes() {
        let bytes = write_bitstream(&header(), &[1, 2, 3, 4, 5, 6, 7, 8]);
        let err = read_bitstream(&bytes[..bytes.len() - 6]).unwrap_err();
        assert!(matches!(err, BitstreamError::Truncated { .. }));
    }
}
