//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PQCK" | version u16 | model name (u16 len + UTF-8) | entry count u16
//! entry: name (u16 len + UTF-8) | rank u32 | extents u32 × rank | f32 × numel
//!        | has_mask u8 | [mask bitset, ceil(O/8) bytes, LSB first, 1 = pruned]
//! ```
//!
//! Entries are `<conv>.weight`, `fc.weight`, `fc.bias` and `<layer>.act_alpha`
//! for every layer with a calibrated activation range. Writing the same
//! network twice yields identical bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ActRange, ModelKind, Network};
use crate::prune::PruneMask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PQCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub mask: Option<PruneMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub entries: Vec<Entry>,
}

fn alpha_entry(layer: &str, range: &ActRange) -> Option<Entry> {
    range.alpha.map(|a| Entry {
        name: format!("{layer}.act_alpha"),
        tensor: Tensor::new(&[1], vec![a]).expect("one value"),
        mask: None,
    })
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        let mut entries = Vec::new();
        for conv in net.convs() {
            entries.push(Entry {
                name: format!("{}.weight", conv.name),
                tensor: strip_grad(&conv.weight),
                mask: conv.mask.clone(),
            });
        }
        entries.push(Entry {
            name: "fc.weight".into(),
            tensor: strip_grad(&net.fc.weight),
            mask: None,
        });
        entries.push(Entry {
            name: "fc.bias".into(),
            tensor: strip_grad(&net.fc.bias),
            mask: None,
        });
        for conv in net.convs() {
            entries.extend(alpha_entry(&conv.name, &conv.act_range));
        }
        entries.extend(alpha_entry("fc", &net.fc.act_range));
        Checkpoint {
            model: net.kind.name().to_string(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Layer names that own a weight tensor.
    pub fn layers(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter_map(|e| e.name.strip_suffix(".weight"))
            .collect()
    }

    /// Full-precision weights of `layer` (either `conv1` or `conv1.weight`).
    pub fn layer_weights(&self, layer: &str) -> Result<&Tensor> {
        let key = if layer.ends_with(".weight") {
            layer.to_string()
        } else {
            format!("{layer}.weight")
        };
        self.entry(&key).map(|e| &e.tensor).ok_or_else(|| {
            Error::Config(format!(
                "unknown layer '{layer}' (layers: {})",
                self.layers().join(", ")
            ))
        })
    }

    /// Rebuilds the network described by this checkpoint.
    pub fn to_network(&self) -> Result<Network> {
        let kind = ModelKind::from_name(&self.model)?;
        let bias = self.require("fc.bias")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(kind, bias.tensor.numel(), &mut rng);
        for conv in net.convs_mut() {
            let e = self.require(&format!("{}.weight", conv.name))?;
            copy_into(&mut conv.weight, &e.tensor, &e.name)?;
            if let Some(m) = &e.mask {
                if m.filters() != conv.out_channels() {
                    return Err(self.err(format!(
                        "mask of {} covers {} filters",
                        e.name,
                        m.filters()
                    )));
                }
            }
            conv.mask = e.mask.clone();
            conv.act_range = self.range(&conv.name)?;
        }
        let w = self.require("fc.weight")?;
        copy_into(&mut net.fc.weight, &w.tensor, "fc.weight")?;
        copy_into(&mut net.fc.bias, &bias.tensor, "fc.bias")?;
        net.fc.act_range = self.range("fc")?;
        let expected = net.convs().len() + 2;
        let weights = self
            .entries
            .iter()
            .filter(|e| !e.name.ends_with(".act_alpha"))
            .count();
        if weights != expected {
            return Err(self.err(format!(
                "{weights} weight entries, {} expects {expected}",
                self.model
            )));
        }
        Ok(net)
    }

    fn err(&self, msg: String) -> Error {
        Error::Format {
            path: format!("<{} checkpoint>", self.model).into(),
            msg,
        }
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.entry(name)
            .ok_or_else(|| self.err(format!("missing entry '{name}'")))
    }

    fn range(&self, layer: &str) -> Result<ActRange> {
        match self.entry(&format!("{layer}.act_alpha")) {
            None => Ok(ActRange::default()),
            Some(e) if e.tensor.numel() == 1 => Ok(ActRange {
                alpha: Some(e.tensor.data()[0]),
                frozen: true,
            }),
            Some(e) => Err(self.err(format!("{} has {} values", e.name, e.tensor.numel()))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.model)?;
        put_len_u16(&mut out, self.entries.len(), "entry count")?;
        for e in &self.entries {
            put_str(&mut out, &e.name)?;
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Overflow(format!("extent {d} of {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &e.mask {
                None => out.push(0),
                Some(m) => {
                    out.push(1);
                    let mut bits = vec![0u8; m.filters().div_ceil(8)];
                    for j in m.pruned() {
                        bits[j / 8] |= 1 << (j % 8);
                    }
                    out.extend_from_slice(&bits);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let model = r.string()?;
        let count = r.u16()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.err(&format!("entry '{name}' has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| r.err("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data)?;
            let mask = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let filters = *shape
                        .first()
                        .ok_or_else(|| r.err("mask on a scalar entry"))?;
                    let bits = r.take(filters.div_ceil(8))?;
                    let pruned: Vec<usize> = (0..filters)
                        .filter(|&j| bits[j / 8] >> (j % 8) & 1 == 1)
                        .collect();
                    let layer = name.strip_suffix(".weight").unwrap_or(&name);
                    Some(PruneMask::from_pruned(layer, filters, &pruned))
                }
                b => return Err(r.err(&format!("mask flag {b}"))),
            };
            entries.push(Entry { name, tensor, mask });
        }
        if r.pos != bytes.len() {
            return Err(r.err(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?, path)
    }
}

fn strip_grad(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.clear_grad();
    t
}

fn copy_into(dst: &mut Tensor, src: &Tensor, name: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Shape(format!(
            "{name}: checkpoint {:?} vs model {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn put_len_u16(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u16::try_from(n).map_err(|_| Error::Overflow(format!("{what} {n} exceeds u16")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len_u16(out, s.len(), "string length")?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }
}
