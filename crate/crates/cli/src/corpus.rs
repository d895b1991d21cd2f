//! Reading a data path into windowed scene files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rehearsal_core::data::{build_windows, parse_ethucy, SceneFile, SceneWindow};
use rehearsal_core::training::RunConfig;

use crate::manifest::Artifact;

/// Scene files under `path` (a directory of `.txt` files, or one file),
/// in name order, with their hashes.
pub fn load_scenes(path: &Path, run: &RunConfig) -> Result<(Vec<SceneFile>, Vec<Artifact>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .with_context(|| format!("listing {}", path.display()))?;
        v.retain(|p| p.extension().is_some_and(|e| e == "txt"));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let h = &run.model.horizon;
    let mut scenes = Vec::with_capacity(files.len());
    let mut hashes = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        let text = String::from_utf8_lossy(&bytes);
        let records = parse_ethucy(&text).with_context(|| format!("parsing {}", f.display()))?;
        let windows = build_windows(&records, h.t_h, h.t_f, run.data.stride, run.data.dt)?;
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        scenes.push(SceneFile { name, windows });
        hashes.push(Artifact::of_bytes(f.display().to_string(), &bytes));
    }
    Ok((scenes, hashes))
}

/// `(train, test)`: leave-one-out when a scene is held out, otherwise every
/// window on both sides.
pub fn split(
    scenes: &[SceneFile],
    held_out: Option<&str>,
) -> Result<(Vec<SceneWindow>, Vec<SceneWindow>)> {
    match held_out {
        Some(name) => Ok(rehearsal_core::data::split_leave_one_out(scenes, name)?),
        None => {
            let all: Vec<SceneWindow> = scenes.iter().flat_map(|s| s.windows.clone()).collect();
            Ok((all.clone(), all))
        }
    }
}
