//! Log records go to stderr and to the `.log` file of the current run.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Mutex, Once};

static RUN_LOG: Mutex<Option<File>> = Mutex::new(None);
static INIT: Once = Once::new();

struct Tee;

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let _ = io::stderr().write_all(buf);
        if let Some(f) = RUN_LOG.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = RUN_LOG.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            f.flush()?;
        }
        io::stderr().flush()
    }
}

/// Starts logging into `path`, replacing the file of any previous run in this
/// process. The level comes from `RUST_LOG` (default `info`).
pub fn start(path: &Path) -> io::Result<()> {
    let file = File::create(path)?;
    *RUN_LOG.lock().unwrap_or_else(|e| e.into_inner()) = Some(file);
    INIT.call_once(|| {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .target(env_logger::Target::Pipe(Box::new(Tee)))
            .try_init();
    });
    Ok(())
}

pub fn finish() {
    let mut guard = RUN_LOG.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(f) = guard.as_mut() {
        let _ = f.flush();
    }
    *guard = None;
}
