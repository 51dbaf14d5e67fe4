//! Manifest files: one path per line, `#` starts a comment. Relative
//! entries resolve against the manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub fn parse(text: &str, base: &Path) -> Vec<PathBuf> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(|line| {
            let p = Path::new(line);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries = parse(&text, base);
    if entries.is_empty() {
        bail!("manifest {} lists no files", path.display());
    }
    Ok(entries)
}

/// Positional WAV paths followed by the entries of each manifest.
pub fn collect(wavs: &[PathBuf], manifests: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = wavs.to_vec();
    for m in manifests {
        out.extend(read(m)?);
    }
    if out.is_empty() {
        bail!("no input files given");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_relative_paths() {
        let text = "# speech set\na.wav\n\n  /abs/b.wav  # trailing\n   # only a comment\nsub/c.wav\n";
        let got = parse(text, Path::new("/data"));
        assert_eq!(
            got,
            vec![
                PathBuf::from("/data/a.wav"),
                PathBuf::from("/abs/b.wav"),
                PathBuf::from("/data/sub/c.wav"),
            ]
        );
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "# nothing\n").unwrap();
        assert!(read(&path).is_err());
        assert!(collect(&[], &[]).is_err());
    }
}
