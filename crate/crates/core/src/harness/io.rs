//! Binary grid files: `LMGR`, version, shape, value width, then row-major little-endian `f64`.

use std::path::Path;

use crate::error::Result;
use crate::format::{Reader, Writer};
use crate::grid::LatentGrid;

const MAGIC: &[u8; 4] = b"LMGR";
const VERSION: u32 = 1;
const VALUE_WIDTH: u32 = 8;

pub fn write_grid(path: &Path, grid: &LatentGrid) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.shape(grid.shape());
    w.u32(VALUE_WIDTH);
    w.f64s(grid.values());
    w.write_to(path)
}

pub fn read_grid(path: &Path) -> Result<LatentGrid> {
    let mut r = Reader::open(path, MAGIC, VERSION)?;
    let shape = r.shape()?;
    let width = r.u32()?;
    if width != VALUE_WIDTH {
        return Err(r.fail(format!("unsupported value width {width}")));
    }
    let values = r.f64s(shape.len())?;
    r.finish()?;
    LatentGrid::from_vec(shape, values).map_err(|e| r.fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::grid::Shape;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grid");
        let g = LatentGrid::from_vec(Shape::new(2, 1, 3).unwrap(), vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap();
        write_grid(&path, &g).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_grid(&path), Err(Error::Format { .. })));
        assert!(matches!(read_grid(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
