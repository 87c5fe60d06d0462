//! The EEG-ConvTransformer network: local feature extractor, two
//! ConvTransformer modules, convolutional encoder and classifier.
//!
//! Parameters live in a [`Model`]; a forward pass runs inside a [`Session`]
//! that binds them to a [`Tape`] so training can differentiate through it.

mod config;

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{Variant, VariantConfig};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    checkpoint, ConvGeometry, DropoutKey, Mode, RunningStats, Scalar, Tape, Tensor, Var,
};

/// Number of ConvTransformer modules.
pub const CT_MODULES: usize = 2;

/// Named parameters plus BatchNorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    cfg: VariantConfig,
    params: IndexMap<String, Tensor<S>>,
    stats: IndexMap<String, RunningStats<S>>,
}

/// Exact trainable scalar count with a per-module breakdown.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub modules: IndexMap<String, usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleSummary {
    pub name: String,
    pub parameters: usize,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArchitectureSummary {
    pub config: VariantConfig,
    pub total_parameters: usize,
    pub modules: Vec<ModuleSummary>,
}

fn kernel_name(kt: usize) -> String {
    format!("conv_k{kt}")
}

/// Module a parameter belongs to in the breakdown.
fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        ct if ct.starts_with("ct") => {
            if parts[1] == "cfe" {
                format!("{ct}.cfe")
            } else {
                format!("{ct}.mha")
            }
        }
        "classifier" => format!("classifier.{}", parts[1]),
        other => other.to_string(),
    }
}

/// Parameter shapes in a fixed order, with their fan-in (0 for biases and
/// BatchNorm affine terms).
fn layout(cfg: &VariantConfig) -> Vec<(String, Vec<usize>, usize)> {
    let (c, d, e, f, p) = (
        cfg.channels,
        cfg.head_dim,
        cfg.expanded,
        cfg.final_channels,
        cfg.patches(),
    );
    let splits = cfg.temporal_kernels.len();
    let km = cfg.spatial_kernel;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| out.push((name, shape, fan_in));
    let bn = |push: &mut dyn FnMut(String, Vec<usize>, usize), name: &str, ch: usize| {
        push(format!("{name}.gamma"), vec![ch], 0);
        push(format!("{name}.beta"), vec![ch], 0);
    };
    for &kt in &cfg.temporal_kernels {
        let k = kernel_name(kt);
        push(
            format!("lfe.{k}.weight"),
            vec![c / splits, 1, km, km, kt],
            km * km * kt,
        );
        push(format!("lfe.{k}.bias"), vec![c / splits], 0);
    }
    bn(&mut push, "lfe.bn", c);
    for ct in 1..=CT_MODULES {
        for h in 0..cfg.heads {
            for proj in ["q", "k", "v"] {
                push(format!("ct{ct}.head{h}.{proj}"), vec![d, c, 1, 1], c);
            }
        }
        bn(&mut push, &format!("ct{ct}.mha_bn"), c);
        for &kt in &cfg.temporal_kernels {
            let k = kernel_name(kt);
            push(
                format!("ct{ct}.cfe.{k}.weight"),
                vec![e / splits, c, 1, kt],
                c * kt,
            );
            push(format!("ct{ct}.cfe.{k}.bias"), vec![e / splits], 0);
        }
        bn(&mut push, &format!("ct{ct}.cfe.bn1"), e);
        push(format!("ct{ct}.cfe.pointwise"), vec![c, e, 1, 1], e);
        bn(&mut push, &format!("ct{ct}.cfe.bn2"), c);
    }
    for &kt in &cfg.temporal_kernels {
        let k = kernel_name(kt);
        push(
            format!("encoder.{k}.weight"),
            vec![f / splits, c, p, kt],
            c * p * kt,
        );
        push(format!("encoder.{k}.bias"), vec![f / splits], 0);
    }
    bn(&mut push, "encoder.bn", f);
    let mut width = cfg.classifier_input();
    for (i, &next) in cfg.hidden.iter().chain([&cfg.num_classes]).enumerate() {
        push(
            format!("classifier.fc{}.weight", i + 1),
            vec![width, next],
            width,
        );
        push(format!("classifier.fc{}.bias", i + 1), vec![next], 0);
        width = next;
    }
    out
}

/// BatchNorm layers and their channel counts.
fn bn_layers(cfg: &VariantConfig) -> Vec<(String, usize)> {
    let mut out = vec![("lfe.bn".to_string(), cfg.channels)];
    for ct in 1..=CT_MODULES {
        out.push((format!("ct{ct}.mha_bn"), cfg.channels));
        out.push((format!("ct{ct}.cfe.bn1"), cfg.expanded));
        out.push((format!("ct{ct}.cfe.bn2"), cfg.channels));
    }
    out.push(("encoder.bn".to_string(), cfg.final_channels));
    out
}

impl<S: Scalar> Model<S> {
    /// Allocates and initializes every parameter. Weights are uniform in
    /// ±√(6/fan_in), biases zero, BatchNorm γ = 1 and β = 0. Values are drawn
    /// in 64-bit, so f32 and f64 models from one seed agree up to rounding.
    pub fn build(cfg: &VariantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape, fan_in) in layout(cfg) {
            let t = if fan_in > 0 {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| S::of(rng.random_range(-bound..bound)))
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, S::one())
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        let stats = bn_layers(cfg)
            .into_iter()
            .map(|(n, ch)| (n, RunningStats::new(ch)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            params,
            stats,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn running_stats(&self) -> &IndexMap<String, RunningStats<S>> {
        &self.stats
    }

    pub fn set_running_stats(&mut self, stats: IndexMap<String, RunningStats<S>>) -> Result<()> {
        if stats.len() != self.stats.len()
            || stats
                .iter()
                .any(|(k, v)| self.stats.get(k).map(|s| s.channels()) != Some(v.channels()))
        {
            return Err(Error::InvalidArgument(
                "running statistics do not match the model".into(),
            ));
        }
        self.stats = stats;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let cast_vec = |v: &[S]| v.iter().map(|x| T::of(x.as_f64())).collect();
        Model {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: cast_vec(&s.mean),
                            var: cast_vec(&s.var),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let mut modules = IndexMap::new();
        for (name, t) in &self.params {
            *modules.entry(module_of(name)).or_insert(0) += t.numel();
        }
        ParameterCount {
            total: modules.values().sum(),
            modules,
        }
    }

    pub fn architecture_summary(&self) -> ArchitectureSummary {
        let cfg = &self.cfg;
        let counts = self.count_parameters();
        let (c, p, t) = (cfg.channels, cfg.patches(), cfg.frames);
        let shape_of = |module: &str| -> Vec<usize> {
            match module {
                "encoder" => vec![cfg.final_channels, 1, t],
                m if m.starts_with("classifier.fc") => {
                    let i: usize = m["classifier.fc".len()..].parse().unwrap_or(1);
                    vec![*cfg.hidden.get(i - 1).unwrap_or(&cfg.num_classes)]
                }
                _ => vec![c, p, t],
            }
        };
        let modules = counts
            .modules
            .iter()
            .map(|(name, &n)| ModuleSummary {
                name: name.clone(),
                parameters: n,
                output_shape: shape_of(name),
            })
            .collect();
        ArchitectureSummary {
            config: cfg.clone(),
            total_parameters: counts.total,
            modules,
        }
    }

    /// Records parameters then running statistics, all as f32.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self
                .checkpoint_records()?
                .iter()
                .map(|(n, t)| (n.clone(), t))
                .collect::<Vec<_>>(),
        )
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let records = self.checkpoint_records()?;
        Ok(checkpoint::encode(
            &records
                .iter()
                .map(|(n, t)| (n.clone(), t))
                .collect::<Vec<_>>(),
        ))
    }

    fn checkpoint_records(&self) -> Result<Vec<(String, Tensor<S>)>> {
        let mut out: Vec<(String, Tensor<S>)> = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        for (name, s) in &self.stats {
            let ch = s.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[ch], s.mean.clone())?,
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[ch], s.var.clone())?,
            ));
        }
        Ok(out)
    }

    /// Restores a model saved with [`Model::save_checkpoint`] for `cfg`.
    pub fn load_checkpoint(cfg: &VariantConfig, path: &Path) -> Result<Self> {
        let mut model = Self::build(cfg, 0)?;
        let mut records: IndexMap<String, Tensor<f32>> =
            checkpoint::load(path)?.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
            let t = records
                .shift_remove(name)
                .ok_or_else(|| Error::format(path, format!("missing record {name}")))?;
            if t.shape() != shape {
                return Err(Error::format(
                    path,
                    format!(
                        "record {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    ),
                ));
            }
            Ok(t.cast())
        };
        for (name, t) in model.params.iter_mut() {
            *t = take(name, t.shape())?;
        }
        for (name, s) in model.stats.iter_mut() {
            let ch = s.channels();
            s.mean = take(&format!("{name}.running_mean"), &[ch])?.into_data();
            s.var = take(&format!("{name}.running_var"), &[ch])?.into_data();
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::format(path, format!("unexpected record {extra}")));
        }
        Ok(model)
    }

    /// Forward pass without gradient tracking; returns `B×K` logits.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut s = Session::new(
            self,
            &mut tape,
            Mode::Eval,
            false,
            DropoutKey {
                seed: 0,
                layer: 0,
                step: 0,
            },
        );
        let trace = s.forward(xv)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Context output of every head of CT module `ct_index` (1-based), each
    /// `B×D×P×T`, from an eval-mode forward pass.
    pub fn head_representations(&self, x: &Tensor<S>, ct_index: usize) -> Result<Vec<Tensor<S>>> {
        if !(1..=CT_MODULES).contains(&ct_index) {
            return Err(Error::InvalidArgument(format!(
                "CT module index {ct_index} outside 1..={CT_MODULES}"
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut s = Session::new(
            self,
            &mut tape,
            Mode::Eval,
            false,
            DropoutKey {
                seed: 0,
                layer: 0,
                step: 0,
            },
        );
        let trace = s.forward(xv)?;
        Ok(trace.ct[ct_index - 1]
            .heads
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }
}

/// Values recorded by one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    /// `B×D×P×T` context.
    pub context: Var,
    /// `B×P×P` attention weights, rows over keys.
    pub attention: Var,
}

/// Values recorded by one ConvTransformer module.
#[derive(Clone, Debug)]
pub struct CtTrace {
    pub heads: Vec<Var>,
    pub attention: Vec<Var>,
    pub heads_concat: Var,
    pub mha_out: Var,
    pub cfe_out: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Var,
    pub lfe: Var,
    pub ct: Vec<CtTrace>,
    pub encoder: Var,
    pub logits: Var,
}

/// Model parameters bound to a tape for one forward (and backward) pass.
/// BatchNorm statistics updated in train mode are kept in the session and
/// handed back by [`Session::into_running_stats`].
pub struct Session<'a, S: Scalar> {
    cfg: &'a VariantConfig,
    tape: &'a mut Tape<S>,
    vars: IndexMap<String, Var>,
    stats: IndexMap<String, RunningStats<S>>,
    mode: Mode,
    dropout: DropoutKey,
}

impl<'a, S: Scalar> Session<'a, S> {
    /// Copies the parameters onto `tape`; with `trainable` they receive
    /// gradients on backward. `dropout` supplies seed and step; the layer id
    /// is set per dropout layer.
    pub fn new(
        model: &'a Model<S>,
        tape: &'a mut Tape<S>,
        mode: Mode,
        trainable: bool,
        dropout: DropoutKey,
    ) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self {
            cfg: &model.cfg,
            tape,
            vars,
            stats: model.stats.clone(),
            mode,
            dropout,
        }
    }

    pub fn tape(&self) -> &Tape<S> {
        self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<S> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn into_running_stats(self) -> IndexMap<String, RunningStats<S>> {
        self.stats
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (
            self.var(&format!("{name}.gamma"))?,
            self.var(&format!("{name}.beta"))?,
        );
        let stats = self
            .stats
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no BatchNorm layer {name}")))?;
        self.tape.batch_norm(x, g, b, stats, self.mode)
    }

    fn expect_shape(&self, x: Var, want: &[usize], what: &str) -> Result<()> {
        let got = self.tape.shape(x);
        if got.len() != want.len() || got.iter().zip(want).any(|(g, w)| *w != 0 && g != w) {
            return Err(shape_err!(
                "{what} input {:?}, expected {:?} (0 = any)",
                got,
                want
            ));
        }
        Ok(())
    }

    /// `B×1×M×M×T` meshes to `B×C×P×T` patch features.
    pub fn lfe_forward(&mut self, x: Var) -> Result<Var> {
        let cfg = self.cfg;
        self.expect_shape(x, &[0, 1, cfg.mesh, cfg.mesh, cfg.frames], "LFE")?;
        let mut parts = Vec::new();
        for &kt in &cfg.temporal_kernels {
            let k = kernel_name(kt);
            let (w, b) = (
                self.var(&format!("lfe.{k}.weight"))?,
                self.var(&format!("lfe.{k}.bias"))?,
            );
            parts.push(self.tape.conv3d(
                x,
                w,
                Some(b),
                ConvGeometry::same_temporal(cfg.spatial_stride, kt),
            )?);
        }
        let y = self.tape.concat(&parts, 1)?;
        let y = self.bn(y, "lfe.bn")?;
        let y = self.tape.elu(y)?;
        let batch = self.tape.shape(y)[0];
        self.tape
            .reshape(y, &[batch, cfg.channels, cfg.patches(), cfg.frames])
    }

    /// Scaled dot-product attention between patches for one head.
    pub fn attention_head(&mut self, ct: usize, head: usize, x: Var) -> Result<HeadTrace> {
        let cfg = self.cfg;
        self.expect_shape(x, &[0, cfg.channels, 0, 0], "attention head")?;
        let s = self.tape.shape(x).to_vec();
        let (batch, p, t, d) = (s[0], s[2], s[3], cfg.head_dim);
        let mut project = |name: &str| -> Result<Var> {
            let w = self.var(&format!("ct{ct}.head{head}.{name}"))?;
            let y = self.tape.conv_temporal(x, w, None)?;
            // B×D×P×T → B×P×(D·T)
            let y = self.tape.permute(y, &[0, 2, 1, 3])?;
            self.tape.reshape(y, &[batch, p, d * t])
        };
        let q = project("q")?;
        let k = project("k")?;
        let v = project("v")?;
        let scores = self.tape.bmm(q, k, true)?;
        let scores = self
            .tape
            .scale(scores, S::of(1.0 / ((d * t) as f64).sqrt()))?;
        let attention = self.tape.softmax(scores, 2)?;
        let ctx = self.tape.bmm(attention, v, false)?;
        let ctx = self.tape.reshape(ctx, &[batch, p, d, t])?;
        let context = self.tape.permute(ctx, &[0, 2, 1, 3])?;
        Ok(HeadTrace { context, attention })
    }

    /// All heads concatenated on channels, added to the input, normalized.
    pub fn mha_block(&mut self, ct: usize, x: Var) -> Result<(Vec<HeadTrace>, Var, Var)> {
        let heads = (0..self.cfg.heads)
            .map(|h| self.attention_head(ct, h, x))
            .collect::<Result<Vec<_>>>()?;
        let contexts: Vec<Var> = heads.iter().map(|h| h.context).collect();
        let concat = self.tape.concat(&contexts, 1)?;
        let sum = self.tape.add(concat, x)?;
        let out = self.bn(sum, &format!("ct{ct}.mha_bn"))?;
        Ok((heads, concat, out))
    }

    /// Temporal expansion to E channels, point-wise projection back to C,
    /// residual sum and BatchNorm.
    pub fn cfe_forward(&mut self, ct: usize, x: Var) -> Result<Var> {
        let cfg = self.cfg;
        self.expect_shape(x, &[0, cfg.channels, 0, 0], "CFE")?;
        let mut parts = Vec::new();
        for &kt in &cfg.temporal_kernels {
            let k = kernel_name(kt);
            let w = self.var(&format!("ct{ct}.cfe.{k}.weight"))?;
            let b = self.var(&format!("ct{ct}.cfe.{k}.bias"))?;
            parts.push(self.tape.conv_temporal(x, w, Some(b))?);
        }
        let y = self.tape.concat(&parts, 1)?;
        let y = self.bn(y, &format!("ct{ct}.cfe.bn1"))?;
        let y = self.tape.elu(y)?;
        let w = self.var(&format!("ct{ct}.cfe.pointwise"))?;
        let y = self.tape.conv_temporal(y, w, None)?;
        let sum = self.tape.add(y, x)?;
        self.bn(sum, &format!("ct{ct}.cfe.bn2"))
    }

    /// One kernel spans every patch, collapsing `B×C×P×T` to `B×F×1×T`.
    pub fn encoder_forward(&mut self, x: Var) -> Result<Var> {
        let cfg = self.cfg;
        let (c, p, t) = (cfg.channels, cfg.patches(), cfg.frames);
        self.expect_shape(x, &[0, c, p, t], "encoder")?;
        let batch = self.tape.shape(x)[0];
        let x5 = self.tape.reshape(x, &[batch, c, p, 1, t])?;
        let mut parts = Vec::new();
        for &kt in &cfg.temporal_kernels {
            let k = kernel_name(kt);
            let w = self.var(&format!("encoder.{k}.weight"))?;
            let b = self.var(&format!("encoder.{k}.bias"))?;
            let ws = self.tape.shape(w).to_vec();
            let w5 = self.tape.reshape(w, &[ws[0], c, p, 1, kt])?;
            parts.push(
                self.tape
                    .conv3d(x5, w5, Some(b), ConvGeometry::same_temporal(1, kt))?,
            );
        }
        let y = self.tape.concat(&parts, 1)?;
        let y = self.tape.reshape(y, &[batch, cfg.final_channels, 1, t])?;
        let y = self.bn(y, "encoder.bn")?;
        self.tape.elu(y)
    }

    /// Channel-major flatten, then fully connected layers with dropout and
    /// ReLU between them.
    pub fn classifier_forward(&mut self, x: Var) -> Result<Var> {
        let cfg = self.cfg;
        let batch = self.tape.shape(x)[0];
        let mut y = self.tape.reshape(x, &[batch, cfg.classifier_input()])?;
        let layers = cfg.hidden.len() + 1;
        for i in 1..=layers {
            let w = self.var(&format!("classifier.fc{i}.weight"))?;
            let b = self.var(&format!("classifier.fc{i}.bias"))?;
            y = self.tape.linear(y, w, b)?;
            if i < layers {
                let key = DropoutKey {
                    layer: i as u32,
                    ..self.dropout
                };
                y = self.tape.dropout(y, cfg.dropout, self.mode, key)?;
                y = self.tape.relu(y)?;
            }
        }
        Ok(y)
    }

    /// Full network on `B×1×M×M×T` meshes.
    pub fn forward(&mut self, x: Var) -> Result<ForwardTrace> {
        let lfe = self.lfe_forward(x)?;
        let mut h = lfe;
        let mut ct = Vec::new();
        for i in 1..=CT_MODULES {
            let (heads, heads_concat, mha_out) = self.mha_block(i, h)?;
            let cfe_out = self.cfe_forward(i, mha_out)?;
            ct.push(CtTrace {
                heads: heads.iter().map(|t| t.context).collect(),
                attention: heads.iter().map(|t| t.attention).collect(),
                heads_concat,
                mha_out,
                cfe_out,
            });
            h = cfe_out;
        }
        let encoder = self.encoder_forward(h)?;
        let logits = self.classifier_forward(encoder)?;
        Ok(ForwardTrace {
            input: x,
            lfe,
            ct,
            encoder,
            logits,
        })
    }
}
