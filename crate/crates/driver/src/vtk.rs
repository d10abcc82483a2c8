//! Legacy ASCII VTK (structured points) output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use blockforge_core::blockgrid::BlockStorage;
use blockforge_core::comms::{bytes_to_f64s, f64s_to_bytes, gather_bytes, CommError, Transport};

use crate::{DriverError, Stage};

/// C `%.{prec}g`: `prec` significant digits, trailing zeros removed, exponent
/// form when the decimal exponent is below -4 or at least `prec`.
pub fn format_g(x: f64, prec: usize) -> String {
    let prec = prec.max(1);
    if x.is_nan() {
        return if x.is_sign_negative() { "-nan".into() } else { "nan".into() };
    }
    if x.is_infinite() {
        return if x < 0.0 { "-inf".into() } else { "inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    // the exponent after rounding to `prec` digits decides the style
    let sci = format!("{:.*e}", prec - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= prec as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (prec as i32 - 1 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Nine significant digits, as written to VTK files.
pub fn format_g9(x: f64) -> String {
    format_g(x, 9)
}

/// Collective. Gathers the interior of the named fields onto root: one vector
/// per field, global x-fastest cell order, components interleaved. Cells of
/// discarded blocks are 0. `None` off root.
pub fn gather_fields<T: Transport + ?Sized>(
    storage: &BlockStorage,
    fields: &[&str],
    t: &T,
) -> Result<Option<Vec<Vec<f64>>>, DriverError> {
    let err = |e: String| DriverError::new(Stage::Vtk, e);
    let Some(first) = storage.blocks().first() else {
        return Err(err("storage has no blocks".into()));
    };
    let mut comps = Vec::with_capacity(fields.len());
    for &name in fields {
        comps.push(first.field(name).map_err(|e| err(e.to_string()))?.read().f_size());
    }
    // per local block: id, then each field's interior values cell-major
    let mut mine = Vec::new();
    for b in storage.local_blocks(t.rank()).map_err(|e| err(e.to_string()))? {
        mine.push(b.id() as f64);
        for &name in fields {
            let f = b.field(name).map_err(|e| err(e.to_string()))?.read();
            for c in f.interior_cells() {
                for k in 0..f.f_size() {
                    mine.push(f.get(c[0], c[1], c[2], k));
                }
            }
        }
    }
    let comm = |e: CommError| err(e.to_string());
    let Some(parts) = gather_bytes(t, &f64s_to_bytes(&mine)).map_err(comm)? else {
        return Ok(None);
    };
    let [nx, ny, nz] = storage.cell_count();
    let mut global: Vec<Vec<f64>> = comps.iter().map(|&c| vec![0.0; nx * ny * nz * c]).collect();
    for p in parts {
        let v = bytes_to_f64s(&p).map_err(comm)?;
        let mut pos = 0;
        while pos < v.len() {
            let id = v[pos] as usize;
            pos += 1;
            let b = storage.block(id).ok_or_else(|| err(format!("unknown block {id}")))?;
            let iv = *b.interval();
            for (fi, &nc) in comps.iter().enumerate() {
                // interior_cells runs x fastest, like the interval
                for cell in iv.cells() {
                    let gi = cell[0] as usize + nx * (cell[1] as usize + ny * cell[2] as usize);
                    global[fi][gi * nc..(gi + 1) * nc].copy_from_slice(&v[pos..pos + nc]);
                    pos += nc;
                }
            }
        }
    }
    Ok(Some(global))
}

/// Collective. The VTK text on root, `None` elsewhere. One-component fields
/// become `SCALARS`, three-component fields `VECTORS`; scalars come first.
pub fn render_vtk<T: Transport + ?Sized>(
    storage: &BlockStorage,
    fields: &[&str],
    step: u64,
    t: &T,
) -> Result<Option<String>, DriverError> {
    let Some(global) = gather_fields(storage, fields, t)? else {
        return Ok(None);
    };
    let [nx, ny, nz] = storage.cell_count();
    let n = nx * ny * nz;
    let comps: Vec<usize> = global.iter().map(|g| g.len() / n.max(1)).collect();
    if let Some(i) = comps.iter().position(|&c| c != 1 && c != 3) {
        return Err(DriverError::new(
            Stage::Vtk,
            format!("field {} has {} components, only 1 or 3 can be written", fields[i], comps[i]),
        ));
    }
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "blockforge step {step}");
    out.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
    let _ = writeln!(out, "DIMENSIONS {nx} {ny} {nz}");
    out.push_str("ORIGIN 0 0 0\nSPACING 1 1 1\n");
    let _ = writeln!(out, "POINT_DATA {n}");
    for (fi, &name) in fields.iter().enumerate().filter(|(i, _)| comps[*i] == 1) {
        let _ = writeln!(out, "SCALARS {name} double 1");
        out.push_str("LOOKUP_TABLE default\n");
        for &x in &global[fi] {
            out.push_str(&format_g9(x));
            out.push('\n');
        }
    }
    for (fi, &name) in fields.iter().enumerate().filter(|(i, _)| comps[*i] == 3) {
        let _ = writeln!(out, "VECTORS {name} double");
        for v in global[fi].chunks_exact(3) {
            let _ = writeln!(out, "{} {} {}", format_g9(v[0]), format_g9(v[1]), format_g9(v[2]));
        }
    }
    Ok(Some(out))
}

pub fn vtk_file_name(step: u64) -> String {
    format!("blockforge_{step:06}.vtk")
}

/// Collective. Root writes `<dir>/blockforge_<step>.vtk` and gets its path.
pub fn write_vtk<T: Transport + ?Sized>(
    storage: &BlockStorage,
    fields: &[&str],
    step: u64,
    dir: &Path,
    t: &T,
) -> Result<Option<PathBuf>, DriverError> {
    let Some(text) = render_vtk(storage, fields, step, t)? else {
        return Ok(None);
    };
    let path = dir.join(vtk_file_name(step));
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, text))
        .map_err(|e| DriverError::new(Stage::Vtk, format!("{}: {e}", path.display())))?;
    Ok(Some(path))
}
