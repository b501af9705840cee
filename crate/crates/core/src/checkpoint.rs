//! Portable binary checkpoints.
//!
//! Layout: the magic `HEKP4NBR-CKPT-v1` and a newline, a length-prefixed
//! UTF-8 header (config echo, catalog, surface names, vocabulary), then the
//! named tensors: length-prefixed name, rank and dims as little-endian u64,
//! values as little-endian f32. Training keeps f64 master weights; rounding
//! happens here, and evaluation always runs on the rounded values so a
//! saved and reloaded model reproduces its metrics bit for bit.

use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::knowledge::{TemplateSet, Tokenizer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 16] = b"HEKP4NBR-CKPT-v1";

/// Everything evaluation needs: config, catalog, names, vocabulary and all
/// parameter plus derived-buffer tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub catalog: Vec<String>,
    pub names: Vec<String>,
    pub vocab_lines: String,
    /// Prompt templates the model was trained with; evaluation must render
    /// with the same wording.
    pub templates: TemplateSet,
    pub tensors: Vec<(String, Tensor)>,
}

/// Round every value through f32, the checkpoint storage width.
pub fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_lines(&self.vocab_lines)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str("[config]\n");
        header.push_str(&self.config.echo());
        header.push_str(&format!("[catalog {}]\n", self.catalog.len()));
        for c in &self.catalog {
            header.push_str(c);
            header.push('\n');
        }
        header.push_str(&format!("[names {}]\n", self.names.len()));
        for n in &self.names {
            header.push_str(n);
            header.push('\n');
        }
        let vocab: Vec<&str> = if self.vocab_lines.is_empty() {
            Vec::new()
        } else {
            self.vocab_lines.lines().collect()
        };
        header.push_str(&format!("[vocab {}]\n", vocab.len()));
        for v in &vocab {
            header.push_str(v);
            header.push('\n');
        }
        let tpl_lines = self.templates.to_lines();
        header.push_str(&format!("[templates {}]\n", tpl_lines.len()));
        for l in &tpl_lines {
            header.push_str(l);
            header.push('\n');
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(16)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        if r.take(1)? != b"\n" {
            return Err(Error::Checkpoint("malformed magic terminator".into()));
        }
        let header_len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_string();
        let (config, catalog, names, vocab_lines, templates) = parse_header(&header)?;

        let n_tensors = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = r.take(4)?;
                data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64);
            }
            tensors.push((name, Tensor::from_vec(shape, data)));
        }
        Ok(Checkpoint {
            config,
            catalog,
            names,
            vocab_lines,
            templates,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

type HeaderParts = (Config, Vec<String>, Vec<String>, String, TemplateSet);

fn parse_header(header: &str) -> Result<HeaderParts> {
    let mut lines = header.lines();
    if lines.next() != Some("[config]") {
        return Err(Error::Checkpoint("header must start with [config]".into()));
    }
    let mut config_text = String::new();
    let mut catalog_count = None;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("[catalog ") {
            let n: usize = rest
                .trim_end_matches(']')
                .parse()
                .map_err(|_| Error::Checkpoint("bad catalog count".into()))?;
            catalog_count = Some(n);
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let nc = catalog_count.ok_or_else(|| Error::Checkpoint("missing [catalog] section".into()))?;
    let config = Config::parse_str(&config_text)?;

    let mut catalog = Vec::with_capacity(nc);
    for _ in 0..nc {
        catalog.push(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("catalog truncated".into()))?
                .to_string(),
        );
    }
    let names_header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing [names] section".into()))?;
    let nn: usize = names_header
        .strip_prefix("[names ")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad names header".into()))?;
    let mut names = Vec::with_capacity(nn);
    for _ in 0..nn {
        names.push(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("names truncated".into()))?
                .to_string(),
        );
    }
    let vocab_header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing [vocab] section".into()))?;
    let nv: usize = vocab_header
        .strip_prefix("[vocab ")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad vocab header".into()))?;
    let mut vocab = Vec::with_capacity(nv);
    for _ in 0..nv {
        vocab.push(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("vocab truncated".into()))?
                .to_string(),
        );
    }
    let tpl_header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing [templates] section".into()))?;
    let nt: usize = tpl_header
        .strip_prefix("[templates ")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad templates header".into()))?;
    let mut tpl_lines = Vec::with_capacity(nt);
    for _ in 0..nt {
        tpl_lines.push(
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("templates truncated".into()))?
                .to_string(),
        );
    }
    let templates = TemplateSet::from_lines(&tpl_lines)?;
    Ok((config, catalog, names, vocab.join("\n"), templates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{build_vocab, SPECIALS};
    use crate::rng::rng_from;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = rng_from(3);
        let tok = build_vocab(&["alpha beta gamma".to_string()], 1, &["i1".to_string()]);
        Checkpoint {
            config: Config::default(),
            catalog: vec!["i1".into(), "i2".into()],
            names: vec!["apple".into(), "pear".into()],
            vocab_lines: tok.to_lines(),
            templates: crate::knowledge::TemplateSet::builtin(),
            tensors: vec![
                ("w.a".into(), round_f32(&Tensor::randn(&[3, 2], 1.0, &mut rng))),
                ("w.b".into(), round_f32(&Tensor::randn(&[4], 1.0, &mut rng))),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..16], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        // byte-determinism
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn tokenizer_reconstructs_with_specials() {
        let ckpt = sample_checkpoint();
        let tok = ckpt.tokenizer().unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(tok.id_of(s), i);
        }
        assert!(tok.contains("i1"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample_checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
