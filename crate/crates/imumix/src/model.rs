//! The MLP-Mixer for 6-channel IMU windows.
//!
//! A `[B x L x 3]` accelerometer batch and its gyroscope twin are cut into
//! `c` clips, each clip embedded by a bias-free linear map into `h` features.
//! Every mixer layer then runs an inter-clip MLP (across the clip axis, per
//! feature) followed by an intra-clip MLP (across features, per clip), both
//! with residual connections. A mean over clips and a final linear head
//! produce the `K` class logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, LayerNormVars, Linear, LinearVars, Param};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;

pub const IMU_CHANNELS: usize = 6;
pub const DEFAULT_WINDOW_LEN: usize = 128;
pub const DEFAULT_NUM_CLASSES: usize = 18;

const CHECKPOINT_MAGIC: &[u8; 8] = b"IMUMIXCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Samples per classification window (`L`).
    pub window_len: usize,
    /// Samples per clip; must divide `window_len`.
    pub clip_len: usize,
    /// Feature width of the clip embeddings (`h`).
    pub hidden_dim: usize,
    /// Number of stacked mixer layers.
    pub num_layers: usize,
    /// Output classes.
    pub num_classes: usize,
    /// Hidden width of the inter-clip MLP (defaults to `4c`).
    pub token_hidden: usize,
    /// Hidden width of the intra-clip MLP (defaults to `4h`).
    pub channel_hidden: usize,
}

impl MixerConfig {
    /// Config with the default window (128), class count (18) and MLP widths
    /// (`token_hidden = 4c`, `channel_hidden = 4h`).
    pub fn new(clip_len: usize, hidden_dim: usize, num_layers: usize) -> Result<Self> {
        let window_len = DEFAULT_WINDOW_LEN;
        if clip_len == 0 || window_len % clip_len != 0 {
            return Err(Error::Config(format!(
                "window length {window_len} is not divisible by clip length {clip_len}"
            )));
        }
        let num_clips = window_len / clip_len;
        let cfg = MixerConfig {
            window_len,
            clip_len,
            hidden_dim,
            num_layers,
            num_classes: DEFAULT_NUM_CLASSES,
            token_hidden: 4 * num_clips,
            channel_hidden: 4 * hidden_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named variant lookup: `mixer/{es|ms|s}/{32|16|8}`, case-insensitive.
    /// ES/MS/S select 2/4/8 layers at hidden width 128/256/512; the suffix is
    /// the clip length.
    pub fn variant(name: &str) -> Result<Self> {
        const VALID: &str = "mixer/{es,ms,s}/{32,16,8}";
        let lower = name.to_ascii_lowercase();
        let mut parts = lower.split('/');
        let (family, scale, len) = (parts.next(), parts.next(), parts.next());
        if family != Some("mixer") || parts.next().is_some() {
            return Err(Error::Config(format!(
                "unknown model variant {name:?}; valid variants are {VALID}"
            )));
        }
        let (num_layers, hidden_dim) = match scale {
            Some("es") => (2, 128),
            Some("ms") => (4, 256),
            Some("s") => (8, 512),
            _ => {
                return Err(Error::Config(format!(
                    "unknown model variant {name:?}; valid variants are {VALID}"
                )))
            }
        };
        let clip_len = match len {
            Some("32") => 32,
            Some("16") => 16,
            Some("8") => 8,
            _ => {
                return Err(Error::Config(format!(
                    "unknown model variant {name:?}; valid variants are {VALID}"
                )))
            }
        };
        MixerConfig::new(clip_len, hidden_dim, num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.window_len == 0 || self.window_len % self.clip_len != 0 {
            return Err(Error::Config(format!(
                "window length {} is not divisible by clip length {}",
                self.window_len, self.clip_len
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::Config("hidden_dim must be at least 2".into()));
        }
        if self.num_layers == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "num_layers and num_classes must be positive".into(),
            ));
        }
        if self.token_hidden == 0 || self.channel_hidden == 0 {
            return Err(Error::Config("MLP hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.window_len / self.clip_len
    }

    /// Width of one flattened clip: 6 channels times the clip length.
    pub fn input_width(&self) -> usize {
        IMU_CHANNELS * self.clip_len
    }

    /// Exact trainable-parameter count: embedding, all mixer-layer weights,
    /// biases and layer-norm affine terms, head weight and bias.
    pub fn count_params(&self) -> usize {
        let c = self.num_clips();
        let h = self.hidden_dim;
        let th = self.token_hidden;
        let ch = self.channel_hidden;
        let embed = self.input_width() * h;
        let per_layer = 2 * h            // ln1 gain + shift
            + (c * th + th)              // token_in
            + (th * c + c)               // token_out
            + 2 * h                      // ln2
            + (h * ch + ch)              // channel_in
            + (ch * h + h); // channel_out
        let head = h * self.num_classes + self.num_classes;
        embed + self.num_layers * per_layer + head
    }

    /// Multiply-accumulate count of one forward pass over one window, with
    /// one MAC counted as one FLOP. Normalization and activation costs are
    /// excluded from the headline figure.
    pub fn count_flops(&self) -> usize {
        let c = self.num_clips();
        let h = self.hidden_dim;
        let embed = c * self.input_width() * h;
        let token = 2 * h * c * self.token_hidden;
        let channel = 2 * c * h * self.channel_hidden;
        let head = h * self.num_classes;
        embed + self.num_layers * (token + channel) + head
    }
}

/// One mixer layer: inter-clip MLP then intra-clip MLP, each behind a layer
/// norm and wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct MixerLayer<F: Scalar> {
    pub ln1: LayerNorm<F>,
    pub token_in: Linear<F>,
    pub token_out: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub channel_in: Linear<F>,
    pub channel_out: Linear<F>,
}

pub struct MixerLayerVars {
    ln1: LayerNormVars,
    token_in: LinearVars,
    token_out: LinearVars,
    ln2: LayerNormVars,
    channel_in: LinearVars,
    channel_out: LinearVars,
}

impl<F: Scalar> MixerLayer<F> {
    fn new(config: &MixerConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = config.num_clips();
        let h = config.hidden_dim;
        MixerLayer {
            ln1: LayerNorm::new(h),
            token_in: Linear::new(c, config.token_hidden, true, rng),
            token_out: Linear::new(config.token_hidden, c, true, rng),
            ln2: LayerNorm::new(h),
            channel_in: Linear::new(h, config.channel_hidden, true, rng),
            channel_out: Linear::new(config.channel_hidden, h, true, rng),
        }
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> Result<MixerLayerVars> {
        Ok(MixerLayerVars {
            ln1: self.ln1.stage(tape)?,
            token_in: self.token_in.stage(tape)?,
            token_out: self.token_out.stage(tape)?,
            ln2: self.ln2.stage(tape)?,
            channel_in: self.channel_in.stage(tape)?,
            channel_out: self.channel_out.stage(tape)?,
        })
    }

    /// `[B x c x h] -> [B x c x h]`.
    ///
    /// Inter-clip mixing: `u = e + W2 gelu(W1 ln1(e))` applied per feature
    /// column across clips. Intra-clip mixing: `v = u + W4 gelu(W3 ln2(u))`
    /// applied per clip row across features.
    pub fn forward(&self, tape: &mut Tape<F>, vars: &MixerLayerVars, e: VarId) -> Result<VarId> {
        let normed = self.ln1.forward(tape, &vars.ln1, e)?;
        let cols = tape.transpose(normed)?; // [B x h x c]
        let mixed = self.token_in.forward(tape, &vars.token_in, cols)?;
        let mixed = tape.gelu(mixed)?;
        let mixed = self.token_out.forward(tape, &vars.token_out, mixed)?;
        let rows = tape.transpose(mixed)?; // [B x c x h]
        let u = tape.add(e, rows)?;

        let normed = self.ln2.forward(tape, &vars.ln2, u)?;
        let mixed = self.channel_in.forward(tape, &vars.channel_in, normed)?;
        let mixed = tape.gelu(mixed)?;
        let mixed = self.channel_out.forward(tape, &vars.channel_out, mixed)?;
        tape.add(u, mixed)
    }

    fn harvest(&mut self, vars: &MixerLayerVars, grads: &mut Gradients<F>) -> Result<()> {
        self.ln1.harvest(&vars.ln1, grads)?;
        self.token_in.harvest(&vars.token_in, grads)?;
        self.token_out.harvest(&vars.token_out, grads)?;
        self.ln2.harvest(&vars.ln2, grads)?;
        self.channel_in.harvest(&vars.channel_in, grads)?;
        self.channel_out.harvest(&vars.channel_out, grads)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MixerModel<F: Scalar> {
    config: MixerConfig,
    pub embed: Linear<F>,
    pub layers: Vec<MixerLayer<F>>,
    pub head: Linear<F>,
}

pub struct ModelVars {
    embed: LinearVars,
    layers: Vec<MixerLayerVars>,
    head: LinearVars,
}

impl<F: Scalar> MixerModel<F> {
    /// Fresh model with seeded initialization: weights uniform in
    /// `±1/sqrt(in)`, biases zero, layer-norm gain one / shift zero.
    pub fn new(config: MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Linear::new(config.input_width(), config.hidden_dim, false, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| MixerLayer::new(&config, &mut rng))
            .collect();
        let head = Linear::new(config.hidden_dim, config.num_classes, true, &mut rng);
        Ok(MixerModel {
            config,
            embed,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> Result<ModelVars> {
        Ok(ModelVars {
            embed: self.embed.stage(tape)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.stage(tape))
                .collect::<Result<Vec<_>>>()?,
            head: self.head.stage(tape)?,
        })
    }

    /// Interleaves accelerometer and gyroscope windows into clip rows:
    /// `[B x L x 3] x 2 -> [B x c x 6*clip_len]`. Sample `t` of a clip
    /// contributes `(ax, ay, az, gx, gy, gz)` at offset `6 t`.
    pub fn assemble_clips(&self, acc: &Tensor<F>, gyro: &Tensor<F>) -> Result<Tensor<F>> {
        let l = self.config.window_len;
        if acc.rank() != 3 || acc.shape()[1] != l || acc.shape()[2] != 3 {
            return Err(Error::Shape {
                op: "assemble_clips",
                detail: format!("accelerometer input must be [Bx{l}x3], got {:?}", acc.shape()),
            });
        }
        if gyro.shape() != acc.shape() {
            return Err(Error::Shape {
                op: "assemble_clips",
                detail: format!(
                    "gyroscope shape {:?} does not match accelerometer {:?}",
                    gyro.shape(),
                    acc.shape()
                ),
            });
        }
        let batch = acc.shape()[0];
        let c = self.config.num_clips();
        let clip_len = self.config.clip_len;
        let width = self.config.input_width();
        let mut out = vec![F::zero(); batch * c * width];
        let av = acc.data();
        let gv = gyro.data();
        for b in 0..batch {
            for j in 0..c {
                for t in 0..clip_len {
                    let src = (b * l + j * clip_len + t) * 3;
                    let dst = (b * c + j) * width + t * IMU_CHANNELS;
                    out[dst..dst + 3].copy_from_slice(&av[src..src + 3]);
                    out[dst + 3..dst + 6].copy_from_slice(&gv[src..src + 3]);
                }
            }
        }
        Tensor::new(vec![batch, c, width], out)
    }

    /// Clip cutting plus the bias-free per-clip embedding: `-> [B x c x h]`.
    pub fn cut_and_embed(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        acc: &Tensor<F>,
        gyro: &Tensor<F>,
    ) -> Result<VarId> {
        let clips = self.assemble_clips(acc, gyro)?;
        let input = tape.leaf(clips)?;
        self.embed.forward(tape, &vars.embed, input)
    }

    /// Full forward pass to logits `[B x K]`.
    pub fn forward_staged(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        acc: &Tensor<F>,
        gyro: &Tensor<F>,
    ) -> Result<VarId> {
        let mut e = self.cut_and_embed(tape, vars, acc, gyro)?;
        for (layer, lv) in self.layers.iter().zip(&vars.layers) {
            e = layer.forward(tape, lv, e)?;
        }
        let pooled = crate::layers::global_avg_pool(tape, e)?;
        self.head.forward(tape, &vars.head, pooled)
    }

    /// Stages parameters and runs the forward pass in one call (inference).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        acc: &Tensor<F>,
        gyro: &Tensor<F>,
    ) -> Result<VarId> {
        let vars = self.stage(tape)?;
        self.forward_staged(tape, &vars, acc, gyro)
    }

    /// Copies this backward pass's gradients into the parameters.
    pub fn harvest_grads(&mut self, vars: &ModelVars, grads: &mut Gradients<F>) -> Result<()> {
        self.embed.harvest(&vars.embed, grads)?;
        for (layer, lv) in self.layers.iter_mut().zip(&vars.layers) {
            layer.harvest(lv, grads)?;
        }
        self.head.harvest(&vars.head, grads)
    }

    /// Parameters in checkpoint order with dotted-path names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out: Vec<(String, &mut Param<F>)> = Vec::new();
        out.push(("embed.weight".into(), &mut self.embed.weight));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &mut layer.ln1.gain));
            out.push((format!("layers.{i}.ln1.shift"), &mut layer.ln1.shift));
            out.push((format!("layers.{i}.token_in.weight"), &mut layer.token_in.weight));
            out.push((
                format!("layers.{i}.token_in.bias"),
                layer.token_in.bias.as_mut().expect("token_in bias"),
            ));
            out.push((format!("layers.{i}.token_out.weight"), &mut layer.token_out.weight));
            out.push((
                format!("layers.{i}.token_out.bias"),
                layer.token_out.bias.as_mut().expect("token_out bias"),
            ));
            out.push((format!("layers.{i}.ln2.gain"), &mut layer.ln2.gain));
            out.push((format!("layers.{i}.ln2.shift"), &mut layer.ln2.shift));
            out.push((
                format!("layers.{i}.channel_in.weight"),
                &mut layer.channel_in.weight,
            ));
            out.push((
                format!("layers.{i}.channel_in.bias"),
                layer.channel_in.bias.as_mut().expect("channel_in bias"),
            ));
            out.push((
                format!("layers.{i}.channel_out.weight"),
                &mut layer.channel_out.weight,
            ));
            out.push((
                format!("layers.{i}.channel_out.bias"),
                layer.channel_out.bias.as_mut().expect("channel_out bias"),
            ));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push((
            "head.bias".into(),
            self.head.bias.as_mut().expect("head bias"),
        ));
        out
    }

    /// Total number of scalar parameters held by the instantiated tensors.
    pub fn param_element_count(&mut self) -> usize {
        self.named_params_mut()
            .iter()
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Writes a versioned binary checkpoint: magic, format version, config
    /// block, then each parameter tensor in `named_params_mut` order as a
    /// little-endian u64 length followed by f64 values.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&mut self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = &self.config;
        for v in [
            cfg.window_len,
            cfg.clip_len,
            cfg.hidden_dim,
            cfg.num_layers,
            cfg.num_classes,
            cfg.token_hidden,
            cfg.channel_hidden,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let params = self.named_params_mut();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for (_, p) in params {
            w.write_all(&(p.value.len() as u64).to_le_bytes())?;
            for &v in p.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        Self::read_checkpoint(&mut r)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "magic bytes")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMagic);
        }
        let version = read_u32(r, "format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut fields = [0u64; 7];
        for (f, what) in fields.iter_mut().zip([
            "window_len",
            "clip_len",
            "hidden_dim",
            "num_layers",
            "num_classes",
            "token_hidden",
            "channel_hidden",
        ]) {
            *f = read_u64(r, what)?;
        }
        let config = MixerConfig {
            window_len: fields[0] as usize,
            clip_len: fields[1] as usize,
            hidden_dim: fields[2] as usize,
            num_layers: fields[3] as usize,
            num_classes: fields[4] as usize,
            token_hidden: fields[5] as usize,
            channel_hidden: fields[6] as usize,
        };
        config.validate()?;
        let mut model = MixerModel::new(config, 0)?;
        let tensor_count = read_u64(r, "tensor count")? as usize;
        {
            let params = model.named_params_mut();
            if tensor_count != params.len() {
                return Err(Error::CheckpointParamMismatch {
                    what: format!(
                        "config implies {} tensors, file declares {tensor_count}",
                        params.len()
                    ),
                });
            }
            for (name, p) in params {
                let len = read_u64(r, "tensor length")? as usize;
                if len != p.value.len() {
                    return Err(Error::CheckpointParamMismatch {
                        what: format!(
                            "{name} expects {} elements, file declares {len}",
                            p.value.len()
                        ),
                    });
                }
                let mut buf = [0u8; 8];
                for v in p.value.data_mut() {
                    read_exact(r, &mut buf, "tensor data")?;
                    *v = F::from_f64(f64::from_le_bytes(buf));
                }
            }
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing)? {
            0 => Ok(model),
            _ => Err(Error::CheckpointParamMismatch {
                what: "trailing bytes after final parameter".into(),
            }),
        }
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CheckpointTruncated { what }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
