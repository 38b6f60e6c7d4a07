//! Checkpoint directories.
//!
//! A checkpoint holds `config.txt` (the training config), `manifest.txt`
//! and one CPT1 blob per parameter, running statistic and momentum buffer.
//! The manifest records the step counter, the sampler RNG state and, per
//! blob, its kind, name, dtype, shape and file. Blobs are written in store
//! order, so saving a loaded checkpoint reproduces every file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::network::CpNet;
use crate::param::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::{Element, Tensor};
use crate::train::Trainer;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
const HEADER: &str = "cpnet-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub rng: Rng,
    pub store: ParamStore<f32>,
    /// One momentum buffer per parameter, in store order.
    pub velocities: Vec<Tensor<f32>>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

struct Entry {
    kind: String,
    name: String,
    shape: Vec<usize>,
    file: String,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            step: t.step,
            rng: t.rng.clone(),
            store: t.store.clone(),
            velocities: t.optimizer.velocities.clone(),
        }
    }

    fn blobs(&self) -> Vec<(&'static str, &str, &Tensor<f32>)> {
        let mut out = Vec::new();
        for p in self.store.params() {
            out.push(("param", p.name.as_str(), &p.value));
        }
        for n in self.store.norms() {
            out.push(("running_mean", n.name.as_str(), &n.state.running_mean));
            out.push(("running_var", n.name.as_str(), &n.state.running_var));
        }
        for (p, v) in self.store.params().iter().zip(&self.velocities) {
            out.push(("velocity", p.name.as_str(), v));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_bytes(&dir.join(CONFIG), self.config.to_text().as_bytes())?;
        let mut manifest = format!("{HEADER}\nstep {}\nrng {}\n", self.step, rng::state_to_string(&self.rng));
        for (i, (kind, name, t)) in self.blobs().into_iter().enumerate() {
            let file = format!("{i:04}.cpt");
            writeln!(manifest, "{kind} {name} {} {} {file}", f32::DTYPE.name(), shape_str(t.shape())).unwrap();
            io::save_cpt(&dir.join(&file), t)?;
        }
        io::write_bytes(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::load(&dir.join(CONFIG))?;
        let path = dir.join(MANIFEST);
        let text = String::from_utf8(io::read_bytes(&path)?).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
        let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("unrecognised header".into()));
        }
        let step = lines
            .next()
            .and_then(|l| l.strip_prefix("step "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing step".into()))?;
        let rng = lines
            .next()
            .and_then(|l| l.strip_prefix("rng "))
            .and_then(rng::state_from_str)
            .ok_or_else(|| bad("missing rng state".into()))?;
        let entries = lines
            .map(|l| {
                let f: Vec<&str> = l.split(' ').collect();
                match f[..] {
                    [kind, name, dtype, shape, file] if dtype == f32::DTYPE.name() => Ok(Entry {
                        kind: kind.into(),
                        name: name.into(),
                        shape: parse_shape(shape).ok_or_else(|| bad(format!("bad shape `{shape}`")))?,
                        file: file.into(),
                    }),
                    _ => Err(bad(format!("malformed entry `{l}`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        // A fresh network of the same config fixes the expected layout.
        let mut store = ParamStore::new();
        CpNet::new(config.network(), &mut store, config.seed)?;
        let mut velocities: Vec<Tensor<f32>> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let expected = {
            let probe = Checkpoint {
                config: config.clone(),
                step,
                rng: rng.clone(),
                store: store.clone(),
                velocities: velocities.clone(),
            };
            probe
                .blobs()
                .into_iter()
                .map(|(k, n, t)| (k.to_string(), n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if expected.len() != entries.len() {
            return Err(bad(format!("{} blobs listed, network needs {}", entries.len(), expected.len())));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (e, (kind, name, shape)) in entries.iter().zip(&expected) {
            if (&e.kind, &e.name, &e.shape) != (kind, name, shape) {
                return Err(bad(format!("entry {} {} {:?} does not match {kind} {name} {shape:?}", e.kind, e.name, e.shape)));
            }
            let t: Tensor<f32> = io::load_cpt(&dir.join(&e.file))?;
            if t.shape() != &shape[..] {
                return Err(bad(format!("{} holds {:?}, manifest says {shape:?}", e.file, t.shape())));
            }
            tensors.push(t);
        }

        let mut it = tensors.into_iter();
        for p in store.params_mut() {
            p.value = it.next().unwrap();
        }
        for n in store.norms_mut() {
            n.state.running_mean = it.next().unwrap();
            n.state.running_var = it.next().unwrap();
        }
        for v in &mut velocities {
            *v = it.next().unwrap();
        }
        Ok(Checkpoint {
            config,
            step,
            rng,
            store,
            velocities,
        })
    }

    /// The network and its trained parameters.
    pub fn network(&self) -> Result<(CpNet, ParamStore<f32>)> {
        let mut scratch = ParamStore::<f32>::new();
        let net = CpNet::new(self.config.network(), &mut scratch, self.config.seed)?;
        Ok((net, self.store.clone()))
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config)?;
        t.store = self.store;
        t.optimizer.velocities = self.velocities;
        t.step = self.step;
        t.rng = self.rng;
        Ok(t)
    }
}
