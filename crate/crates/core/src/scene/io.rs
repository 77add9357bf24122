//! Dataset files: one JSON-encoded scene per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Scene, SceneError};

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for scene in scenes {
        serde_json::to_writer(&mut out, scene).map_err(|e| io_err(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Blank lines are skipped; an empty file yields no scenes.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut scenes = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| SceneError::Parse {
            path: path.display().to_string(),
            line: k + 1,
            msg,
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        scene.validate().map_err(parse)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GeneratorConfig};

    #[test]
    fn roundtrip_is_exact() {
        let cfg = GeneratorConfig {
            num_scenes: 5,
            d_app: 8,
            ..Default::default()
        };
        let scenes = generate_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        save_scenes(&path, &scenes).unwrap();
        assert_eq!(load_scenes(&path).unwrap(), scenes);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_scenes(&path).unwrap().is_empty());
    }

    #[test]
    fn parse_error_reports_line() {
        let cfg = GeneratorConfig {
            num_scenes: 1,
            d_app: 4,
            ..Default::default()
        };
        let scenes = generate_dataset(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&scenes[0]).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_scenes(&path) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_scenes(Path::new("/nonexistent/scenes.jsonl")),
            Err(SceneError::Io { .. })
        ));
    }
}
