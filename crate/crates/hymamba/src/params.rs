//! Parameter grouping, tape binding, and the weight checkpoint format.
//!
//! Weight structs implement [`ParamGroup`], which gives three things: a
//! structural `bind` that attaches every tensor to a tape as a
//! differentiable leaf, and name-prefixed visitors used by the optimizer,
//! the trainable-set filter, and checkpoint IO. Traversal order is struct
//! declaration order, so checkpoints and optimizer state are deterministic.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! magic "HYMBCKP1" | u32 config_len | config UTF-8 | u32 n_records
//! then per record: name bytes | 0x00 | u32 ndim | ndim x u32 dims | f64 data
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYMBCKP1";

/// A tree of named tensors.
pub trait ParamGroup: Sized {
    /// The same structure with every tensor attached to `tape` as a leaf.
    fn bind(&self, tape: &Tape) -> Self;
    /// Visit tensors as (dotted name, tensor) in declaration order.
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    /// Mutable visit in the same order.
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

impl ParamGroup for Tensor {
    fn bind(&self, tape: &Tape) -> Self {
        tape.var(self)
    }
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl<T: ParamGroup> ParamGroup for Vec<T> {
    fn bind(&self, tape: &Tape) -> Self {
        self.iter().map(|g| g.bind(tape)).collect()
    }
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, g) in self.iter().enumerate() {
            g.for_each(&format!("{prefix}.{i}"), f);
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, g) in self.iter_mut().enumerate() {
            g.for_each_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Implements [`ParamGroup`] for a struct of ParamGroup fields.
#[macro_export]
macro_rules! param_group {
    ($name:ident { $($field:ident),+ $(,)? }) => {
        impl $crate::params::ParamGroup for $name {
            fn bind(&self, tape: &$crate::tensor::Tape) -> Self {
                $name { $($field: self.$field.bind(tape)),+ }
            }
            fn for_each<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor),
            ) {
                $(self.$field.for_each(&format!("{}.{}", prefix, stringify!($field)), f);)+
            }
            fn for_each_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor),
            ) {
                $(self.$field.for_each_mut(&format!("{}.{}", prefix, stringify!($field)), f);)+
            }
        }
    };
}

/// Weight + bias of one linear map.
#[derive(Clone)]
pub struct LinearW {
    pub w: Tensor,
    pub b: Tensor,
}

param_group!(LinearW { w, b });

impl LinearW {
    /// Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weights, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        LinearW {
            w: Tensor::rand_uniform([d_in, d_out], -bound, bound, rng),
            b: Tensor::zeros([d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearW {
            w: Tensor::zeros([d_in, d_out]),
            b: Tensor::zeros([d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::linear(x, &self.w, &self.b)
    }
}

/// Flat (name, tensor) listing of a group.
pub fn named_tensors<'a, G: ParamGroup>(group: &'a G, prefix: &str) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    group.for_each(prefix, &mut |name, t| out.push((name, t)));
    out
}

pub fn count_params<G: ParamGroup>(group: &G) -> usize {
    named_tensors(group, "p").iter().map(|(_, t)| t.numel()).sum()
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize a param group plus a config echo string.
pub fn save_checkpoint<G: ParamGroup>(path: &Path, config_echo: &str, group: &G) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let records = named_tensors(group, "model");
    (|| -> std::io::Result<()> {
        file.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut file, config_echo.len() as u32)?;
        file.write_all(config_echo.as_bytes())?;
        write_u32(&mut file, records.len() as u32)?;
        for (name, t) in &records {
            file.write_all(name.as_bytes())?;
            file.write_all(&[0])?;
            write_u32(&mut file, t.shape().len() as u32)?;
            for &d in t.shape() {
                write_u32(&mut file, d as u32)?;
            }
            for &v in t.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()
    })()
    .map_err(io_err)
}

/// Read the config echo without loading tensors.
pub fn read_checkpoint_config(path: &Path) -> Result<String> {
    let io_err = |e| Error::io(path, e);
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Contract(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let len = read_u32(&mut file).map_err(io_err)? as usize;
    let mut cfg = vec![0u8; len];
    file.read_exact(&mut cfg).map_err(io_err)?;
    String::from_utf8(cfg).map_err(|_| Error::Contract("checkpoint config is not UTF-8".into()))
}

/// Load tensors into an existing group of matching structure. Every record
/// must match a name, and shapes must agree; mismatches name the offender.
pub fn load_checkpoint<G: ParamGroup>(path: &Path, group: &mut G) -> Result<String> {
    let io_err = |e| Error::io(path, e);
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Contract(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let cfg_len = read_u32(&mut file).map_err(io_err)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    file.read_exact(&mut cfg).map_err(io_err)?;
    let config_echo = String::from_utf8(cfg)
        .map_err(|_| Error::Contract("checkpoint config is not UTF-8".into()))?;
    let n_records = read_u32(&mut file).map_err(io_err)? as usize;

    let mut loaded: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let mut name = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            file.read_exact(&mut byte).map_err(io_err)?;
            if byte[0] == 0 {
                break;
            }
            name.push(byte[0]);
        }
        let name = String::from_utf8(name)
            .map_err(|_| Error::Contract("checkpoint record name is not UTF-8".into()))?;
        let ndim = read_u32(&mut file).map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut file).map_err(io_err)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            file.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        loaded.push((name, shape, data));
    }

    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = loaded
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    let mut err: Option<Error> = None;
    group.for_each_mut("model", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&name) {
            None => err = Some(Error::Contract(format!("checkpoint missing record '{name}'"))),
            Some((shape, data)) => {
                if shape != t.shape() {
                    err = Some(Error::Contract(format!(
                        "checkpoint record '{name}' has shape {:?}, model expects {:?}",
                        shape,
                        t.shape()
                    )));
                } else {
                    *t = Tensor::new(shape, data).expect("validated shape");
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Contract(format!(
            "checkpoint record '{name}' does not exist in the model"
        )));
    }
    Ok(config_echo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    struct Demo {
        lin: LinearW,
        gains: Vec<Tensor>,
    }
    param_group!(Demo { lin, gains });

    fn demo() -> Demo {
        let mut rng = crate::rng(1);
        Demo {
            lin: LinearW::init(3, 2, &mut rng),
            gains: vec![Tensor::full([2], 1.5), Tensor::zeros([4])],
        }
    }

    #[test]
    fn names_follow_declaration_order() {
        let d = demo();
        let names: Vec<String> = named_tensors(&d, "model")
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            names,
            vec!["model.lin.w", "model.lin.b", "model.gains.0", "model.gains.1"]
        );
    }

    #[test]
    fn bind_produces_differentiable_leaves() {
        let d = demo();
        let tape = Tape::new();
        let bound = d.bind(&tape);
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let y = bound.lin.apply(&x).unwrap();
        let loss = ops::sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gw = grads.get(&bound.lin.w).unwrap();
        assert_eq!(gw.shape(), &[3, 2]);
        assert_eq!(gw.data()[0], 1.0); // d sum / dw[0][0] = x[0]
        assert_eq!(gw.data()[2], 2.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.ckpt");
        let d = demo();
        save_checkpoint(&path, "demo = 1\n", &d).unwrap();
        assert_eq!(read_checkpoint_config(&path).unwrap(), "demo = 1\n");

        let mut fresh = Demo {
            lin: LinearW::zeros(3, 2),
            gains: vec![Tensor::zeros([2]), Tensor::zeros([4])],
        };
        let echo = load_checkpoint(&path, &mut fresh).unwrap();
        assert_eq!(echo, "demo = 1\n");
        assert_eq!(fresh.lin.w.data(), d.lin.w.data());
        assert_eq!(fresh.gains[0].data(), d.gains[0].data());
    }

    #[test]
    fn checkpoint_shape_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.ckpt");
        save_checkpoint(&path, "", &demo()).unwrap();
        let mut wrong = Demo {
            lin: LinearW::zeros(4, 2),
            gains: vec![Tensor::zeros([2]), Tensor::zeros([4])],
        };
        let err = load_checkpoint(&path, &mut wrong).unwrap_err().to_string();
        assert!(err.contains("model.lin.w"), "{err}");
    }
}
