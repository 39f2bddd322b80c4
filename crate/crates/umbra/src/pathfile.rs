//! Text dump of a scan path: a header line `rows cols patch_size kind`
//! followed by one `row col` line per visited patch.

use std::fmt::Write as _;

use umbra_core::{Coord, ScanKind, ScanPath};

pub fn format_path(path: &ScanPath, patch_size: usize) -> String {
    let mut s = format!("{} {} {} {}\n", path.rows(), path.cols(), patch_size, path.kind().as_str());
    for c in path.coords() {
        writeln!(s, "{} {}", c.row, c.col).unwrap();
    }
    s
}

/// Parses a dump back into the path and its patch size. Start cells are
/// not part of the format and come back as `None`.
pub fn parse_path(text: &str) -> Result<(ScanPath, usize), String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("empty path file")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [r, c, s, kind] = fields[..] else {
        return Err(format!("header {header:?} is not \"rows cols patch_size kind\""));
    };
    let num = |v: &str, what: &str| v.parse::<usize>().map_err(|_| format!("bad {what} {v:?} in header"));
    let (rows, cols, s) = (num(r, "rows")?, num(c, "cols")?, num(s, "patch size")?);
    let kind: ScanKind = kind.parse().map_err(|e| format!("{e}"))?;
    let mut coords = Vec::with_capacity(rows * cols);
    for (i, line) in lines {
        let mut it = line.split_whitespace().map(|v| v.parse::<usize>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(row)), Some(Ok(col)), None) => coords.push(Coord::new(row, col)),
            _ => return Err(format!("line {}: expected \"row col\", got {line:?}", i + 1)),
        }
    }
    let path = ScanPath::new(rows, cols, coords, kind).map_err(|e| e.to_string())?;
    Ok((path, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use umbra_core::scan::horizontal_order;

    #[test]
    fn roundtrip() {
        let p = horizontal_order(2, 3).unwrap();
        let text = format_path(&p, 4);
        assert_eq!(text, "2 3 4 horizontal\n0 0\n0 1\n0 2\n1 0\n1 1\n1 2\n");
        let (q, s) = parse_path(&text).unwrap();
        assert_eq!(s, 4);
        assert_eq!(q.coords(), p.coords());
        assert_eq!(q.kind(), ScanKind::Horizontal);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_path("").is_err());
        assert!(parse_path("2 2 1\n").is_err());
        assert!(parse_path("1 2 1 MAS\n0 0\n0 0\n").is_err());
        assert!(parse_path("1 2 1 MAS\n0 0\n0 1 2\n").is_err());
        assert!(parse_path("1 2 1 zigzag\n0 0\n0 1\n").is_err());
    }
}
