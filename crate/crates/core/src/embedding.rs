//! Word representation layer: each token id maps to the concatenation of a
//! general pretrained vector and a task-specific vector trained on the
//! corpus. Missing spans are zero-filled, so a word absent from the general
//! inventory still carries its task-specific half and vice versa.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOU_ID, PAD_ID, UNK_ID};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// |V| x (d_g + d_t) embedding matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    matrix: Tensor<f32>,
    general_dim: usize,
    task_dim: usize,
    trainable: bool,
}

/// Parse a text embedding file: one token per line followed by its vector.
/// A leading "count dim" header of exactly two integers is skipped.
/// Duplicate tokens keep their first occurrence.
pub fn load_embedding_file(path: &Path, expected_dim: usize) -> Result<HashMap<String, Vec<f32>>> {
    let file = std::fs::File::open(path)?;
    let mut map = HashMap::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let values: Vec<&str> = parts.collect();
        if i == 0 && values.len() == 1 {
            let header_ok = token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok();
            if header_ok {
                continue;
            }
        }
        if values.len() != expected_dim {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {expected_dim} values for token {token}, found {}",
                    values.len()
                ),
            ));
        }
        let mut vector = Vec::with_capacity(expected_dim);
        for v in values {
            vector.push(
                v.parse::<f32>()
                    .map_err(|_| parse_err(line_no, format!("unparseable value {v:?}")))?,
            );
        }
        map.entry(token.to_string()).or_insert(vector);
    }
    Ok(map)
}

/// Assemble the full table: row(w) = general(w) or zeros, concatenated with
/// task(w) or zeros. The padding row stays all-zero; the unknown and
/// separator rows receive only their task-specific halves.
pub fn combine_embeddings(
    vocab: &Vocabulary,
    general: &HashMap<String, Vec<f32>>,
    task: &HashMap<String, Vec<f32>>,
    general_dim: usize,
    task_dim: usize,
) -> Result<EmbeddingTable> {
    let width = general_dim + task_dim;
    let mut data = vec![0.0f32; vocab.len() * width];
    for id in 0..vocab.len() {
        if id == PAD_ID {
            continue;
        }
        let token = vocab.token(id)?;
        let row = &mut data[id * width..(id + 1) * width];
        if id != UNK_ID && id != EOU_ID {
            if let Some(vector) = general.get(token) {
                if vector.len() != general_dim {
                    return Err(Error::Mismatch(format!(
                        "general vector for {token} has dim {}, expected {general_dim}",
                        vector.len()
                    )));
                }
                row[..general_dim].copy_from_slice(vector);
            }
        }
        if let Some(vector) = task.get(token) {
            if vector.len() != task_dim {
                return Err(Error::Mismatch(format!(
                    "task vector for {token} has dim {}, expected {task_dim}",
                    vector.len()
                )));
            }
            row[general_dim..].copy_from_slice(vector);
        }
    }
    Ok(EmbeddingTable {
        matrix: Tensor::new(vec![vocab.len(), width], data)?,
        general_dim,
        task_dim,
        trainable: false,
    })
}

impl EmbeddingTable {
    pub fn from_matrix(
        matrix: Tensor<f32>,
        general_dim: usize,
        task_dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[1] != general_dim + task_dim {
            return Err(Error::Mismatch(format!(
                "embedding matrix shape {:?} does not match dims {general_dim}+{task_dim}",
                matrix.shape()
            )));
        }
        Ok(EmbeddingTable {
            matrix,
            general_dim,
            task_dim,
            trainable,
        })
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn general_dim(&self) -> usize {
        self.general_dim
    }

    pub fn task_dim(&self) -> usize {
        self.task_dim
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Fraction of non-special vocabulary rows with a nonzero general half.
    pub fn general_coverage(&self, vocab: &Vocabulary) -> f64 {
        let candidates = vocab.len().saturating_sub(3);
        if candidates == 0 {
            return 0.0;
        }
        let covered = (3..vocab.len())
            .filter(|&id| {
                let row = &self.matrix.data()[id * self.width()..];
                row[..self.general_dim].iter().any(|&v| v != 0.0)
            })
            .count();
        covered as f64 / candidates as f64
    }

    /// Row-gather: ids to a len x width tensor. The padding id yields a zero
    /// row by the table invariant.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let width = self.width();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= self.vocab_size() {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    limit: self.vocab_size(),
                });
            }
            data.extend_from_slice(&self.matrix.data()[id * width..(id + 1) * width]);
        }
        Tensor::new(vec![ids.len(), width], data)
    }

    /// Binary row dump for byte-identity checks.
    pub fn byte_digest(&self) -> Vec<u8> {
        self.matrix
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Little-endian f32 text-free binary format: "EMB1", vocab, d_g, d_t as
    /// u32, then the row-major matrix.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = Vec::with_capacity(16 + self.matrix.numel() * 4);
        out.extend_from_slice(b"EMB1");
        out.extend_from_slice(&(self.vocab_size() as u32).to_le_bytes());
        out.extend_from_slice(&(self.general_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.task_dim as u32).to_le_bytes());
        out.extend(self.byte_digest());
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != b"EMB1" {
            return Err(fail("not an embedding table file"));
        }
        let word =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (vocab, d_g, d_t) = (word(4), word(8), word(12));
        let expected = 16 + vocab * (d_g + d_t) * 4;
        if bytes.len() != expected {
            return Err(fail("payload length does not match header"));
        }
        let data: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(EmbeddingTable {
            matrix: Tensor::new(vec![vocab, d_g + d_t], data)?,
            general_dim: d_g,
            task_dim: d_t,
            trainable: false,
        })
    }
}
