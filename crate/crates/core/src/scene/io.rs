use std::path::Path;

use super::Scene;
use crate::error::{Error, Result};
use crate::jsonl;

/// Reads a scene file and validates every scene.
pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = jsonl::read(path.as_ref())?;
    for (i, s) in scenes.iter().enumerate() {
        s.validate()
            .map_err(|e| Error::Data(format!("{} scene {i} ({}): {e}", path.as_ref().display(), s.id)))?;
    }
    Ok(scenes)
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    jsonl::write(path, scenes)
}
