//! Pairwise relation cells over a bag's entities and self-attention across them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::nn::{Linear, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Entities per bag, endpoints included.
    pub max_entities: usize,
    /// Restrict each path's readout to cells of entities that path mentions.
    pub masked_readout: bool,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig { num_layers: 2, num_heads: 4, max_entities: 32, masked_readout: true }
    }
}

impl ReasonerConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_heads == 0 || !dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("reasoner heads {} must divide {dim}", self.num_heads)));
        }
        if self.max_entities < 2 {
            return Err(Error::Config("max_entities must be at least 2".into()));
        }
        Ok(())
    }
}

/// Flat row of cell `(u, v)` in an `n`-entity matrix.
pub fn pair_index(n: usize, u: usize, v: usize) -> usize {
    u * n + v
}

/// Flat row read out per path: the (source, target) cell.
pub const TARGET_CELL: usize = 1;

/// Entity order for the matrix: source, target, then bridges by id. Over the cap, the
/// bridges with the highest priority survive.
pub fn select_entities(
    source: &EntityId,
    target: &EntityId,
    bridges: &BTreeMap<EntityId, f64>,
    max_entities: usize,
) -> Vec<EntityId> {
    let mut ranked: Vec<(&EntityId, f64)> =
        bridges.iter().filter(|(e, _)| *e != source && *e != target).map(|(e, p)| (e, *p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_entities.saturating_sub(2));
    let kept: BTreeSet<&EntityId> = ranked.into_iter().map(|(e, _)| e).collect();
    let mut out = vec![source.clone(), target.clone()];
    out.extend(kept.into_iter().cloned());
    out
}

/// `paths × n²` readout mask: path `i` may attend to cell `(u, v)` iff both are members.
pub fn readout_mask(n: usize, members: &[Vec<bool>]) -> Array2<bool> {
    Array2::from_shape_fn((members.len(), n * n), |(i, flat)| members[i][flat / n] && members[i][flat % n])
}

#[derive(Debug, Clone)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    pub head: Linear,
    pub tail: Linear,
    pub combine: Linear,
    pub blocks: Vec<TransformerBlock>,
}

pub struct ReasonOutput {
    /// One row per path.
    pub per_path: Var,
    /// Matrix after the full stack, `n² × d`.
    pub cells: Var,
}

impl Reasoner {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, config: ReasonerConfig) -> Result<Self> {
        config.validate(dim)?;
        Ok(Reasoner {
            config,
            head: Linear::new(store, rng, "reasoner.head", dim, dim),
            tail: Linear::new(store, rng, "reasoner.tail", dim, dim),
            combine: Linear::new(store, rng, "reasoner.combine", dim, dim),
            blocks: (0..config.num_layers)
                .map(|l| TransformerBlock::new(store, rng, &format!("reasoner.layer{l}"), dim, config.num_heads))
                .collect(),
        })
    }

    /// `relu(combine(relu(head(x_u) + tail(x_v))))` for every ordered pair, row `u·n + v`.
    pub fn relation_cells(&self, t: &mut Tape, entities: Var) -> Var {
        let n = t.value(entities).nrows();
        let a = self.head.forward(t, entities);
        let b = self.tail.forward(t, entities);
        let us: Vec<usize> = (0..n * n).map(|f| f / n).collect();
        let vs: Vec<usize> = (0..n * n).map(|f| f % n).collect();
        let au = t.gather(a, &us);
        let bv = t.gather(b, &vs);
        let s = t.add(au, bv);
        let h = t.relu(s);
        let h = self.combine.forward(t, h);
        t.relu(h)
    }

    /// Run the attention stack over `cells` and read one representation per path.
    /// `members[i][u]` says whether entity `u` belongs to path `i`.
    pub fn reason(&self, t: &mut Tape, cells: Var, members: &[Vec<bool>]) -> ReasonOutput {
        let rows = t.value(cells).nrows();
        let n = (rows as f64).sqrt().round() as usize;
        debug_assert_eq!(n * n, rows);
        let readout_rows = vec![TARGET_CELL; members.len()];
        let Some((last, earlier)) = self.blocks.split_last() else {
            let per_path = t.gather(cells, &readout_rows);
            return ReasonOutput { per_path, cells };
        };
        let mut x = cells;
        for b in earlier {
            x = b.forward(t, x, None, None);
        }
        let out = last.forward(t, x, None, None);
        let per_path = if self.config.masked_readout {
            let mask = readout_mask(n, members);
            last.forward_rows(t, x, &readout_rows, Some(&mask))
        } else {
            t.gather(out, &readout_rows)
        };
        ReasonOutput { per_path, cells: out }
    }

    /// Standalone evaluation of one cell, off any training tape.
    pub fn relation_rep(&self, store: &ParamStore, e_u: &[f64], e_v: &[f64]) -> Vec<f64> {
        let mut t = Tape::new(store);
        let x = Mat::from_shape_fn((2, e_u.len()), |(r, c)| if r == 0 { e_u[c] } else { e_v[c] });
        let x = t.constant(x);
        let cells = self.relation_cells(&mut t, x);
        t.value(cells).row(pair_index(2, 0, 1)).to_vec()
    }
}

/// Snapshot of a bag's matrix for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub entities: Vec<EntityId>,
    /// `n² × d`, row `u·n + v`.
    pub cells: Mat,
}

impl RelationMatrix {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn cell(&self, u: usize, v: usize) -> Vec<f64> {
        self.cells.row(pair_index(self.len(), u, v)).to_vec()
    }

    pub fn pair_index(&self) -> BTreeMap<(EntityId, EntityId), usize> {
        let n = self.len();
        let mut out = BTreeMap::new();
        for (u, eu) in self.entities.iter().enumerate() {
            for (v, ev) in self.entities.iter().enumerate() {
                out.insert((eu.clone(), ev.clone()), pair_index(n, u, v));
            }
        }
        out
    }

    /// Binary tensor (`XDRM`, u32 rows, u32 cols, little-endian f64 row-major) plus an
    /// index TSV mapping flat rows to entity pairs.
    pub fn write_dump(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{stem}.xdrm"));
        let mut bytes = Vec::with_capacity(12 + self.cells.len() * 8);
        bytes.extend_from_slice(b"XDRM");
        bytes.extend_from_slice(&(self.cells.nrows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.cells.ncols() as u32).to_le_bytes());
        for x in self.cells.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;

        let idx = dir.join(format!("{stem}.index.tsv"));
        let mut f = std::fs::File::create(&idx).map_err(|e| Error::io(&idx, e))?;
        let n = self.len();
        let mut text = String::from("row\tentity_u\tentity_v\n");
        for u in 0..n {
            for v in 0..n {
                text.push_str(&format!("{}\t{}\t{}\n", pair_index(n, u, v), self.entities[u], self.entities[v]));
            }
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&idx, e))
    }

    pub fn read_dump(bin: &Path) -> Result<Mat> {
        let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
        if bytes.len() < 12 || &bytes[..4] != b"XDRM" {
            return Err(Error::validation(bin.display().to_string(), "not a matrix dump"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 12 + rows * cols * 8 {
            return Err(Error::validation(bin.display().to_string(), "truncated matrix dump"));
        }
        let data = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Mat::from_shape_vec((rows, cols), data).expect("shape checked"))
    }
}
