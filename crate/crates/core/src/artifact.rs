//! Artifact plumbing: config hashing and CSV emission with header comments.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

/// FNV-1a 64-bit hash as lowercase hex; used to stamp artifacts with the
/// config they were produced from.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Writes a CSV file: `# `-prefixed comment lines, a header row, then rows.
/// Floats rendered with the shortest round-trip representation, so equal
/// inputs produce byte-identical files.
pub fn write_csv(
    path: &Path,
    comments: &[String],
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Standard artifact comment lines: config hash and seed.
pub fn standard_comments(config_json: &str, seed: u64) -> Vec<String> {
    vec![
        format!("config_hash={}", fnv1a_hex(config_json.as_bytes())),
        format!("seed={seed}"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"tabunc"), fnv1a_hex(b"tabunc"));
        assert_ne!(fnv1a_hex(b"a"), fnv1a_hex(b"b"));
    }

    #[test]
    fn csv_is_byte_identical_across_writes() {
        let dir = std::env::temp_dir().join("tabunc-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.csv");
        let p2 = dir.join("b.csv");
        let rows = || (0..5).map(|i| format!("{},{}", i, i as f64 * 0.1));
        write_csv(&p1, &standard_comments("{}", 7), "id,v", rows()).unwrap();
        write_csv(&p2, &standard_comments("{}", 7), "id,v", rows()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("# config_hash="));
        assert!(text.contains("# seed=7"));
    }
}
