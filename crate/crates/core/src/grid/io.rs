//! Grid file formats.
//!
//! CSV: a literal `rows,cols,cell_size` header line, one line with those three
//! values, then `rows` lines of `cols` comma-separated values.
//!
//! Binary (little-endian): magic `PTG1`, `u32` rows, `u32` cols, `f32` cell
//! size, then `rows * cols` `f64` values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GridError, Result, ScalarGrid};

const MAGIC: &[u8; 4] = b"PTG1";
const CSV_HEADER: &str = "rows,cols,cell_size";

pub fn write_grid_csv<W: Write>(grid: &ScalarGrid, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    writeln!(w, "{},{},{}", grid.rows(), grid.cols(), grid.cell_size())?;
    for row in grid.values().chunks(grid.cols()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_grid_csv<R: Read>(r: R) -> Result<ScalarGrid> {
    let mut lines = BufReader::new(r).lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| GridError::Format(format!("missing {what}")))
    };
    let header = next_line("header")?;
    if header.trim() != CSV_HEADER {
        return Err(GridError::Format(format!("expected header `{CSV_HEADER}`, got `{header}`")));
    }
    let dims = next_line("dimension line")?;
    let parts: Vec<&str> = dims.trim().split(',').collect();
    if parts.len() != 3 {
        return Err(GridError::Format(format!("bad dimension line `{dims}`")));
    }
    let rows: usize = parse(parts[0], 2)?;
    let cols: usize = parse(parts[1], 2)?;
    let cell_size: f64 = parse(parts[2], 2)?;
    let mut values = Vec::with_capacity(rows.saturating_mul(cols));
    for i in 0..rows {
        let line = next_line(&format!("row {i}"))?;
        let before = values.len();
        for tok in line.trim().split(',') {
            values.push(parse::<f64>(tok, i + 3)?);
        }
        if values.len() - before != cols {
            return Err(GridError::Format(format!(
                "line {}: expected {cols} values, got {}",
                i + 3,
                values.len() - before
            )));
        }
    }
    ScalarGrid::new(rows, cols, cell_size, values)
}

fn parse<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.trim()
        .parse()
        .map_err(|_| GridError::Format(format!("line {line}: cannot parse `{tok}`")))
}

pub fn write_grid_binary<W: Write>(grid: &ScalarGrid, mut w: W) -> Result<()> {
    let rows = u32::try_from(grid.rows()).map_err(|_| GridError::Format("too many rows".into()))?;
    let cols = u32::try_from(grid.cols()).map_err(|_| GridError::Format("too many cols".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&(grid.cell_size() as f32).to_le_bytes())?;
    for v in grid.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid_binary<R: Read>(mut r: R) -> Result<ScalarGrid> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(GridError::Format("bad magic, expected PTG1".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cell_size = f32::from_le_bytes(header[12..16].try_into().unwrap()) as f64;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| GridError::Format("grid dimensions overflow".into()))?;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScalarGrid::new(rows, cols, cell_size, values)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes CSV for `.csv` paths, the binary format otherwise.
pub fn write_grid(grid: &ScalarGrid, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if is_csv(path) {
        write_grid_csv(grid, &mut w)?;
    } else {
        write_grid_binary(grid, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<ScalarGrid> {
    let f = fs::File::open(path)?;
    if is_csv(path) {
        read_grid_csv(f)
    } else {
        read_grid_binary(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_layout_is_stable() {
        let g = ScalarGrid::new(2, 3, 0.1, vec![1.0, 2.5, -3.0, 0.0, 4.0, 5.0]).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "rows,cols,cell_size\n2,3,0.1\n1,2.5,-3\n0,4,5\n"
        );
    }

    #[test]
    fn binary_header_layout() {
        let g = ScalarGrid::new(1, 2, 0.5, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_grid_binary(&g, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        assert_eq!(&buf[0..4], b"PTG1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &0.5f32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_grid_csv("rows,cols\n".as_bytes()).is_err());
        assert!(read_grid_csv("rows,cols,cell_size\n1,2,0.1\n1\n".as_bytes()).is_err());
        assert!(read_grid_csv("rows,cols,cell_size\n1,2,0.1\n1,x\n".as_bytes()).is_err());
        assert!(read_grid_binary(&b"XXXX00000000000000000000"[..]).is_err());
    }

    proptest! {
        #[test]
        fn formats_round_trip(rows in 1usize..6, cols in 1usize..6, seed in proptest::collection::vec(-1e6f64..1e6, 36)) {
            // 0.25 is exact in f32, so the binary header round-trips it.
            let g = ScalarGrid::new(rows, cols, 0.25, seed[..rows * cols].to_vec()).unwrap();
            let mut csv = Vec::new();
            write_grid_csv(&g, &mut csv).unwrap();
            prop_assert_eq!(read_grid_csv(csv.as_slice()).unwrap(), g.clone());
            let mut bin = Vec::new();
            write_grid_binary(&g, &mut bin).unwrap();
            prop_assert_eq!(read_grid_binary(bin.as_slice()).unwrap(), g);
        }
    }
}
