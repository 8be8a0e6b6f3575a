//! Text checkpoints for denoisers (with their noise schedule) and classifiers.
//!
//! ```text
//! iois-checkpoint v1
//! kind,denoiser
//! activation,relu
//! head,linear
//! layer_dims,18,128,128,2
//! time_embed_dim,16
//! betas,0.001,...
//! w0,...
//! b0,...
//! ```
//!
//! Floats use shortest round-trip formatting, so a reload is bit-exact and a
//! model written twice produces identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::ClassifierModel;
use crate::diffusion::{DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numeric::{Activation, FeedForwardNet, NumArray, OutputHead};

pub const MAGIC: &str = "iois-checkpoint v1";

fn write_row<T: std::fmt::Display>(out: &mut String, key: &str, values: impl IntoIterator<Item = T>) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn net_rows(out: &mut String, net: &FeedForwardNet) {
    write_row(out, "activation", [net.activation().name()]);
    write_row(out, "head", [net.head().name()]);
    write_row(out, "layer_dims", net.layer_dims().iter());
}

fn param_rows(out: &mut String, net: &FeedForwardNet) {
    for (i, layer) in net.layers().iter().enumerate() {
        write_row(out, &format!("w{i}"), layer.weights().data().iter());
        write_row(out, &format!("b{i}"), layer.bias().data().iter());
    }
}

pub fn denoiser_to_string(model: &DenoiserModel, sched: &NoiseSchedule) -> String {
    let mut out = format!("{MAGIC}\nkind,denoiser\n");
    net_rows(&mut out, model.net());
    write_row(&mut out, "time_embed_dim", [model.time_embed_dim()]);
    write_row(&mut out, "betas", sched.betas().iter());
    param_rows(&mut out, model.net());
    out
}

pub fn classifier_to_string(model: &ClassifierModel) -> String {
    let mut out = format!("{MAGIC}\nkind,classifier\n");
    net_rows(&mut out, model.net());
    param_rows(&mut out, model.net());
    out
}

pub fn save_denoiser(path: &Path, model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
    std::fs::write(path, denoiser_to_string(model, sched)).map_err(|e| Error::io(path, e))
}

pub fn save_classifier(path: &Path, model: &ClassifierModel) -> Result<()> {
    std::fs::write(path, classifier_to_string(model)).map_err(|e| Error::io(path, e))
}

/// Load a denoiser checkpoint; with `expected_dim`, reject a model trained on
/// data of a different dimension.
pub fn load_denoiser(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<(DenoiserModel, NoiseSchedule)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_denoiser(&text, path, expected_dim)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_classifier(&text, path)
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, path: &'a Path) -> Result<Self> {
        let mut r = Self {
            lines: text.lines().enumerate().peekable(),
            path,
        };
        match r.lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => Ok(r),
            Some((_, l)) => Err(r.error(1, format!("unsupported checkpoint header `{l}`"))),
            None => Err(r.error(1, "empty checkpoint".into())),
        }
    }

    fn error(&self, line: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message,
        }
    }

    /// Next `key,v1,v2,...` row; the key must match.
    fn row(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, line) = self
            .lines
            .next()
            .ok_or_else(|| self.error(0, format!("missing `{key}` row")))?;
        let mut fields = line.trim_end().split(',');
        let found = fields.next().unwrap_or_default();
        if found != key {
            return Err(self.error(i + 1, format!("expected `{key}`, found `{found}`")));
        }
        Ok((i + 1, fields.collect()))
    }

    fn word(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (line, v) = self.row(key)?;
        match v.as_slice() {
            [w] => Ok((line, w)),
            _ => Err(self.error(line, format!("`{key}` takes exactly one value"))),
        }
    }

    fn numbers<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let (line, v) = self.row(key)?;
        v.iter()
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| self.error(line, format!("bad value `{s}` in `{key}`")))
            })
            .collect()
    }

    fn net(&mut self, expected_kind: &str) -> Result<FeedForwardNet> {
        let (line, kind) = self.word("kind")?;
        if kind != expected_kind {
            return Err(self.error(
                line,
                format!("checkpoint holds a {kind}, expected a {expected_kind}"),
            ));
        }
        let (line, act) = self.word("activation")?;
        let activation = Activation::parse(act)
            .ok_or_else(|| self.error(line, format!("unknown activation `{act}`")))?;
        let (line, head) = self.word("head")?;
        let head = OutputHead::parse(head)
            .ok_or_else(|| self.error(line, format!("unknown output head `{head}`")))?;
        let dims: Vec<usize> = self.numbers("layer_dims")?;
        // Placeholder net; parameters are filled in by `params`.
        FeedForwardNet::zeros(&dims, activation, head)
    }

    fn params(&mut self, shape: &FeedForwardNet) -> Result<FeedForwardNet> {
        let dims = shape.layer_dims().to_vec();
        let mut pairs = Vec::new();
        for i in 0..dims.len() - 1 {
            let w: Vec<f64> = self.numbers(&format!("w{i}"))?;
            let b: Vec<f64> = self.numbers(&format!("b{i}"))?;
            pairs.push((NumArray::vector(w), NumArray::vector(b)));
        }
        if let Some((i, l)) = self.lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(self.error(i + 1, format!("unexpected trailing row `{l}`")));
        }
        FeedForwardNet::from_parameters(&dims, shape.activation(), shape.head(), pairs)
    }
}

pub fn parse_denoiser(
    text: &str,
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<(DenoiserModel, NoiseSchedule)> {
    let mut r = Reader::new(text, path)?;
    let shape = r.net("denoiser")?;
    let embed: Vec<usize> = r.numbers("time_embed_dim")?;
    let embed = match embed.as_slice() {
        [e] => *e,
        _ => return Err(r.error(0, "`time_embed_dim` takes exactly one value".into())),
    };
    let betas: Vec<f64> = r.numbers("betas")?;
    let sched = NoiseSchedule::from_betas(betas)?;
    let net = r.params(&shape)?;
    let model = DenoiserModel::from_net(net, embed)?;
    if let Some(d) = expected_dim {
        let found = crate::diffusion::NoisePredictor::data_dim(&model);
        if found != d {
            return Err(Error::Config(format!(
                "{}: denoiser was trained on {found}-dimensional data, dataset has {d}",
                path.display()
            )));
        }
    }
    Ok((model, sched))
}

pub fn parse_classifier(text: &str, path: &Path) -> Result<ClassifierModel> {
    let mut r = Reader::new(text, path)?;
    let shape = r.net("classifier")?;
    ClassifierModel::from_net(r.params(&shape)?)
}
