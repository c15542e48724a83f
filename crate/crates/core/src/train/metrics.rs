//! `iter,phase,loss,mean_iu` CSV, one row per write, flushed immediately.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "iter,phase,loss,mean_iu";

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    last_iter: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
            last_iter: 0,
        })
    }

    /// Appends a row; `iter` must not go backwards.
    pub fn row(
        &mut self,
        iter: u64,
        phase: &str,
        loss: Option<f64>,
        mean_iu: Option<f64>,
    ) -> Result<()> {
        if iter < self.last_iter {
            return Err(Error::Invalid(format!(
                "metrics iteration {} after {}",
                iter, self.last_iter
            )));
        }
        self.last_iter = iter;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let line = format!("{iter},{phase},{},{}\n", fmt(loss), fmt(mean_iu));
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}
