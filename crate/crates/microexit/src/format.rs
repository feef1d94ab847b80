//! Shared pieces of the on-disk formats: the checksum, the text header
//! block, and little-endian value blocks.
//!
//! Every artifact file in this crate follows the same skeleton: a 5-byte
//! magic line (four ASCII letters plus newline, the fourth character being
//! the format version), a block of `key=value` text lines closed by a `---`
//! line, a raw little-endian payload, and a trailing 8-byte little-endian
//! checksum over everything before it. Readers verify the checksum before
//! parsing, so a truncated or bit-flipped file fails as a checksum mismatch
//! rather than as a confusing parse error.

use crate::{Error, Result};

/// 64-bit FNV-1a hash. Used both as the file checksum and, in the CLI, as
/// the config fingerprint in report provenance headers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Header terminator line separating text from the binary payload.
pub const HEADER_END: &str = "---";

/// Serializes ordered `key=value` lines plus the terminator.
pub fn write_header(lines: &[(String, String)]) -> Vec<u8> {
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out.push_str(HEADER_END);
    out.push('\n');
    out.into_bytes()
}

/// Ordered header entries with position-independent lookup.
#[derive(Debug, Clone)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    /// First value stored under `key`, or a format error naming it.
    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("header is missing the {key} key")))
    }

    /// Parses the value under `key` with its `FromStr`.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header key {key} has unparseable value {raw:?}")))
    }

    /// All values whose key starts with `prefix`, in file order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// A checksum-verified artifact file split into its three parts.
#[derive(Debug)]
pub struct VerifiedFile {
    pub header: Header,
    pub payload: Vec<u8>,
}

/// Reads `bytes` as an artifact file with the given magic line.
///
/// Checks, in order: the file is long enough to hold magic and checksum;
/// the magic matches (a recognizable magic with a different version digit
/// reports an incompatible version, anything else a malformed file); the
/// trailing checksum matches the rest of the bytes; the header block is
/// well-formed UTF-8 `key=value` lines closed by the terminator.
pub fn open_verified(bytes: &[u8], magic: &str) -> Result<VerifiedFile> {
    debug_assert!(magic.len() == 5 && magic.ends_with('\n'));
    if bytes.len() < magic.len() + 8 {
        return Err(Error::Format(format!(
            "file too short to be a {} artifact: {} bytes",
            magic.trim_end(),
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let got_magic = &body[..magic.len()];
    if got_magic != magic.as_bytes() {
        let same_family = got_magic[..3] == magic.as_bytes()[..3] && got_magic[4] == b'\n';
        return Err(if same_family {
            Error::Incompatible(format!(
                "unsupported {} format version {:?}, expected {:?}",
                &magic[..3],
                (got_magic[3] as char).to_string(),
                (magic.as_bytes()[3] as char).to_string(),
            ))
        } else {
            Error::Format(format!("bad magic: expected {:?}", magic.trim_end()))
        });
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte checksum tail"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let text_region = &body[magic.len()..];
    let mut entries = Vec::new();
    let mut cursor = 0;
    loop {
        let rest = &text_region[cursor..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("header block is not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Format("header block is not valid UTF-8".into()))?;
        cursor += nl + 1;
        if line == HEADER_END {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
        entries.push((k.to_string(), v.to_string()));
    }
    Ok(VerifiedFile {
        header: Header { entries },
        payload: text_region[cursor..].to_vec(),
    })
}

/// Assembles a complete artifact file: magic, header, payload, checksum.
pub fn seal(magic: &str, header_lines: &[(String, String)], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(magic.len() + payload.len() + 64);
    out.extend_from_slice(magic.as_bytes());
    out.extend_from_slice(&write_header(header_lines));
    out.extend_from_slice(payload);
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Appends `values` to `payload` as little-endian `f64`.
pub fn push_f64s(payload: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `count` little-endian `f64` values from the front of `payload`,
/// advancing it.
pub fn take_f64s(payload: &mut &[u8], count: usize) -> Result<Vec<f64>> {
    let need = count * 8;
    if payload.len() < need {
        return Err(Error::Format(format!(
            "payload ended early: needed {need} more bytes, found {}",
            payload.len()
        )));
    }
    let (head, rest) = payload.split_at(need);
    *payload = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn seal_and_open_round_trip() {
        let header = vec![("kind".to_string(), "test".to_string()), ("n".to_string(), "3".to_string())];
        let bytes = seal("MXT1\n", &header, &[1, 2, 3]);
        let file = open_verified(&bytes, "MXT1\n").unwrap();
        assert_eq!(file.header.get("kind").unwrap(), "test");
        assert_eq!(file.header.parse::<usize>("n").unwrap(), 3);
        assert_eq!(file.payload, vec![1, 2, 3]);
    }

    #[test]
    fn corruption_is_a_checksum_error() {
        let mut bytes = seal("MXT1\n", &[("a".to_string(), "b".to_string())], &[9; 16]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match open_verified(&bytes, "MXT1\n") {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = seal("MXT1\n", &[("a".to_string(), "b".to_string())], &[9; 64]);
        let cut = &bytes[..bytes.len() - 20];
        match open_verified(cut, "MXT1\n") {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_wrong_magic_are_distinct() {
        let bytes = seal("MXT2\n", &[], &[]);
        match open_verified(&bytes, "MXT1\n") {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
        let bytes = seal("ZZZZ\n", &[], &[]);
        assert!(matches!(open_verified(&bytes, "MXT1\n"), Err(Error::Format(_))));
    }

    #[test]
    fn f64_blocks_round_trip_bit_exactly() {
        let values = [0.1, -3.5e300, f64::MIN_POSITIVE, 0.0, 1e-12];
        let mut payload = Vec::new();
        push_f64s(&mut payload, &values);
        let mut cursor = payload.as_slice();
        let back = take_f64s(&mut cursor, values.len()).unwrap();
        assert!(cursor.is_empty());
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut short = payload.as_slice();
        assert!(take_f64s(&mut short, values.len() + 1).is_err());
    }
}
