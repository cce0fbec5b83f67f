//! File loaders for the text formats the pipeline passes between stages.

use std::path::Path;

use anyhow::{Context, Result};

/// Non-empty lines of a UTF-8 text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.to_string())
        .collect())
}

/// Text records for training/eval. Curated manifests (`.tsv`) carry a
/// `source\t` prefix per line, which is stripped; any other file is plain
/// one-record-per-line text.
pub fn load_text_records(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    let is_manifest = path.extension().is_some_and(|e| e == "tsv");
    Ok(lines
        .into_iter()
        .map(|l| {
            if is_manifest {
                l.split_once('\t').map(|(_, t)| t.to_string()).unwrap_or(l)
            } else {
                l
            }
        })
        .collect())
}

/// Instruction pairs: one `instruction\tresponse` per line. Lines without a
/// tab are dropped (and counted).
pub fn load_sft_pairs(path: &Path) -> Result<(Vec<(String, String)>, usize)> {
    let lines = read_lines(path)?;
    let mut pairs = Vec::with_capacity(lines.len());
    let mut malformed = 0usize;
    for line in lines {
        match line.split_once('\t') {
            Some((i, r)) => pairs.push((i.to_string(), r.to_string())),
            None => malformed += 1,
        }
    }
    Ok((pairs, malformed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn manifest_lines_strip_source_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "corpus.tsv", "wiki\thello there\nweb\tsecond\n");
        assert_eq!(
            load_text_records(&path).unwrap(),
            vec!["hello there", "second"]
        );
    }

    #[test]
    fn plain_lines_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "corpus.txt", "hello there\n\nsecond\n");
        assert_eq!(
            load_text_records(&path).unwrap(),
            vec!["hello there", "second"]
        );
    }

    #[test]
    fn sft_pairs_split_on_first_tab() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp(&dir, "sft.tsv", "ask\tanswer\nbroken line\nq\ta\tb\n");
        let (pairs, malformed) = load_sft_pairs(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], ("ask".to_string(), "answer".to_string()));
        assert_eq!(pairs[1], ("q".to_string(), "a\tb".to_string()));
        assert_eq!(malformed, 1);
    }
}
