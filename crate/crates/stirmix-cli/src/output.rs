//! Output-directory plumbing: exclusive lock, CSV files with a metadata
//! comment line, and legacy-VTK field exports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use stirmix::mesh::TriMesh;
use stirmix::transport::{DgField, DgSpace};

use crate::CliError;

/// Exclusive claim on an output directory for the lifetime of one command.
/// A second command pointed at the same directory fails instead of
/// interleaving writes.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".stirmix.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "output directory {} is locked by another run (remove {} if that run is dead)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::Runtime(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Run timestamp for metadata lines. Honors SOURCE_DATE_EPOCH (seconds)
/// so archived runs and byte-for-byte reproduction tests can pin it;
/// otherwise the wall clock is used.
fn run_timestamp() -> String {
    let t = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|secs| UNIX_EPOCH + Duration::from_secs(secs))
        .unwrap_or_else(SystemTime::now);
    humantime::format_rfc3339_seconds(t).to_string()
}

/// One CSV file: a `#`-prefixed metadata comment (tool version, command,
/// ISO timestamp, configuration pairs), a header row, then data rows.
pub struct Csv {
    w: BufWriter<File>,
    path: PathBuf,
    columns: usize,
}

impl Csv {
    pub fn create(
        path: &Path,
        command: &str,
        pairs: &[(String, String)],
        header: &[&str],
    ) -> Result<Csv, CliError> {
        let f = File::create(path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        let mut meta = format!(
            "# stirmix {} | {} | {}",
            env!("CARGO_PKG_VERSION"),
            command,
            run_timestamp()
        );
        for (k, v) in pairs {
            meta.push_str(&format!(" | {k}={v}"));
        }
        writeln!(w, "{meta}").map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w, "{}", header.join(",")).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(Csv {
            w,
            path: path.to_path_buf(),
            columns: header.len(),
        })
    }

    /// One data row; cells are written verbatim.
    pub fn row(&mut self, cells: &[String]) -> Result<(), CliError> {
        debug_assert_eq!(cells.len(), self.columns);
        writeln!(self.w, "{}", cells.join(","))
            .map_err(|e| CliError::Runtime(format!("write {}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w
            .flush()
            .map_err(|e| CliError::Runtime(format!("flush {}: {e}", self.path.display())))
    }
}

/// Shortest round-trip decimal form; deterministic for a given value.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Export one transported field as a legacy-VTK unstructured grid:
/// triangle cells with the cell-average value, plus (optionally) values
/// sampled at the vertices, averaged over the triangles sharing each
/// vertex since the field is discontinuous across edges.
pub fn write_field_vtk(
    path: &Path,
    title: &str,
    mesh: &TriMesh,
    dg: &DgSpace,
    field: &DgField,
    name: &str,
    vertex_values: bool,
) -> Result<(), CliError> {
    let cell = dg
        .centroid_values(field)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut point: Vec<f64> = Vec::new();
    if vertex_values {
        let mut sum = vec![0.0f64; mesh.n_vertices()];
        let mut count = vec![0u32; mesh.n_vertices()];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            for &v in tri {
                let [x, y] = mesh.vertices[v];
                let val = dg
                    .evaluate_in_tri(field, t, x, y)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                sum[v] += val;
                count[v] += 1;
            }
        }
        point = sum
            .iter()
            .zip(&count)
            .map(|(s, c)| s / f64::from((*c).max(1)))
            .collect();
    }
    write_vtk(path, title, mesh, Some((name, &cell)), if vertex_values {
        Some((name, &point))
    } else {
        None
    })
}

/// Export the bare mesh (no attached data).
pub fn write_mesh_vtk(path: &Path, title: &str, mesh: &TriMesh) -> Result<(), CliError> {
    write_vtk(path, title, mesh, None, None)
}

fn write_vtk(
    path: &Path,
    title: &str,
    mesh: &TriMesh,
    cell_data: Option<(&str, &[f64])>,
    point_data: Option<(&str, &[f64])>,
) -> Result<(), CliError> {
    let f = File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    let io = |e: std::io::Error| CliError::Runtime(format!("write {}: {e}", path.display()));
    writeln!(w, "# vtk DataFile Version 3.0").map_err(io)?;
    writeln!(w, "{title}").map_err(io)?;
    writeln!(w, "ASCII").map_err(io)?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID").map_err(io)?;
    writeln!(w, "POINTS {} double", mesh.n_vertices()).map_err(io)?;
    for [x, y] in &mesh.vertices {
        writeln!(w, "{x} {y} 0").map_err(io)?;
    }
    writeln!(w, "CELLS {} {}", mesh.n_triangles(), 4 * mesh.n_triangles()).map_err(io)?;
    for [a, b, c] in &mesh.triangles {
        writeln!(w, "3 {a} {b} {c}").map_err(io)?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.n_triangles()).map_err(io)?;
    for _ in 0..mesh.n_triangles() {
        writeln!(w, "5").map_err(io)?;
    }
    if let Some((name, values)) = cell_data {
        writeln!(w, "CELL_DATA {}", mesh.n_triangles()).map_err(io)?;
        writeln!(w, "SCALARS {name} double 1").map_err(io)?;
        writeln!(w, "LOOKUP_TABLE default").map_err(io)?;
        for v in values {
            writeln!(w, "{v}").map_err(io)?;
        }
    }
    if let Some((name, values)) = point_data {
        writeln!(w, "POINT_DATA {}", mesh.n_vertices()).map_err(io)?;
        writeln!(w, "SCALARS {name}_vertex double 1").map_err(io)?;
        writeln!(w, "LOOKUP_TABLE default").map_err(io)?;
        for v in values {
            writeln!(w, "{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
