//! Flat binary layout for ensembles and CSV export for adapted processes.
//!
//! Binary layout, little-endian throughout:
//! magic `b"BENS"`, version u32, seed u64, n_paths u64, dim u32,
//! n_nodes u32, the grid nodes as f64, then the increments row-major per
//! path (`path, step, component`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{AdaptedProcess, PathEnsemble, TimeGrid};

const MAGIC: &[u8; 4] = b"BENS";
const VERSION: u32 = 1;

pub fn write_ensemble(path: &Path, ensemble: &PathEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ensemble.seed().to_le_bytes())?;
    w.write_all(&(ensemble.n_paths() as u64).to_le_bytes())?;
    w.write_all(&(ensemble.dim() as u32).to_le_bytes())?;
    let nodes = ensemble.grid().nodes();
    w.write_all(&(nodes.len() as u32).to_le_bytes())?;
    for &t in nodes {
        w.write_all(&t.to_le_bytes())?;
    }
    for &v in ensemble.increments() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl std::io::Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_ensemble(path: &Path) -> Result<Arc<PathEnsemble>> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad ensemble magic".into()));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let seed = u64::from_le_bytes(read_exact::<8>(&mut r)?);
    let n_paths = u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize;
    let dim = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let n_nodes = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    if n_nodes < 2 || n_paths == 0 || dim == 0 {
        return Err(Error::Format("degenerate ensemble header".into()));
    }
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        nodes.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
    }
    let grid = TimeGrid::from_nodes(nodes)?;
    let count = n_paths * grid.n_steps() * dim;
    let mut increments = vec![0.0; count];
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        increments[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(PathEnsemble::from_parts(grid, n_paths, dim, seed, increments))
}

/// Writes `path_id,node_index,time,c0,c1,...` rows.
pub fn write_process_csv(path: &Path, process: &AdaptedProcess) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let ensemble = process.ensemble();
    let grid = ensemble.grid();
    let d = process.dim_out();
    write!(w, "path_id,node_index,time")?;
    for c in 0..d {
        write!(w, ",c{c}")?;
    }
    writeln!(w)?;
    for p in 0..ensemble.n_paths() {
        for node in 0..process.n_nodes() {
            write!(w, "{p},{node},{}", grid.node(node))?;
            for &v in process.value(p, node) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}
