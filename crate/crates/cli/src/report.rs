//! Report files, output layout and the wall-clock lock file.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use poolleak_core::timing::{wallclock_self_test, JitterCheck};
use serde::Serialize;

use crate::chart::{render, PlotData};
use crate::config::{ExperimentConfig, ResolvedSeeds};
use crate::CliError;

pub const TOOL: &str = "poolleak";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const NOISY_FLAG: &str = "NOISY";

/// Wall-clock measurement conditions. Surrogate reports carry none, so they
/// stay identical across machines.
#[derive(Clone, Debug, Serialize)]
pub struct Environment {
    pub clock_resolution_ns: u64,
    pub self_test: JitterCheck,
}

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub seeds: ResolvedSeeds,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub environment: Option<Environment>,
    pub result: T,
}

/// Files written by one command, in write order.
pub struct Output {
    dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(path.clone());
        Ok(path)
    }

    pub fn report<T: Serialize>(
        &mut self,
        name: &str,
        command: &str,
        cfg: &ExperimentConfig,
        environment: Option<Environment>,
        result: T,
    ) -> Result<PathBuf, CliError> {
        let noisy = environment.as_ref().is_some_and(|e| e.self_test.noisy);
        let report = Report {
            tool: TOOL,
            version: VERSION,
            command,
            config: cfg,
            seeds: cfg.seeds(),
            flags: if noisy { vec![NOISY_FLAG] } else { Vec::new() },
            environment,
            result,
        };
        let mut text = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `<stem>.dat` and the chart `<stem>.svg` rendered from it.
    pub fn chart(&mut self, stem: &str, data: &PlotData) -> Result<(), CliError> {
        let text = data.to_text();
        self.write(&format!("{stem}.dat"), text.as_bytes())?;
        let svg = crate::chart::render_text(&text)?;
        debug_assert_eq!(svg, render(data)?);
        self.write(&format!("{stem}.svg"), svg.as_bytes())?;
        Ok(())
    }
}

/// Cross-process lock held for the whole of a wall-clock experiment.
pub struct WallLock {
    path: PathBuf,
}

pub fn wall_lock_path() -> PathBuf {
    std::env::temp_dir().join("poolleak-collection.lock")
}

impl WallLock {
    pub fn acquire() -> Result<Self, CliError> {
        Self::acquire_at(wall_lock_path())
    }

    pub fn acquire_at(path: PathBuf) -> Result<Self, CliError> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WallLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "another wall-clock collection holds {}; remove it if no experiment is running",
                path.display()
            ))),
            Err(e) => Err(CliError::Runtime(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for WallLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Lock and environment record for wall-clock runs; nothing for surrogate runs.
pub fn wall_setup(cfg: &ExperimentConfig) -> Result<(Option<WallLock>, Option<Environment>), CliError> {
    if !cfg.channel_kind().is_wall_clock() {
        return Ok((None, None));
    }
    let lock = WallLock::acquire()?;
    let check = wallclock_self_test(cfg.wall.self_test_samples, cfg.wall.jitter_budget_ns)?;
    if check.noisy {
        log::warn!(
            "timing environment is noisy: p95 - p5 = {:.0} ns exceeds the {:.0} ns budget",
            check.p95_ns - check.p5_ns,
            check.jitter_budget_ns
        );
    }
    Ok((
        Some(lock),
        Some(Environment {
            clock_resolution_ns: check.clock_resolution_ns,
            self_test: check,
        }),
    ))
}
