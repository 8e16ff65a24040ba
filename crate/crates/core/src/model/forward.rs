use std::collections::HashMap;

use super::weights::ParamKind;
use super::ViPFormer;
use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenize::{ImagePatchSequence, PointPatchSequence};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Which parameters are recorded as gradient-tracking leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    None,
    All,
    /// Only the classification head (frozen-encoder finetuning).
    HeadOnly,
}

/// One forward evaluation of a [`ViPFormer`] recorded on a tape.
///
/// Parameters are bound lazily: each one is copied onto the tape the first
/// time a call site needs it, and every later call site (both modality
/// branches included) reuses that same leaf.
pub struct Forward<'a, T: Real> {
    model: &'a ViPFormer<T>,
    pub tape: &'a mut Tape<T>,
    vars: HashMap<String, Var>,
    train: bool,
    grad: GradMode,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub(crate) fn new(
        model: &'a ViPFormer<T>,
        tape: &'a mut Tape<T>,
        train: bool,
        grad: GradMode,
    ) -> Self {
        Self {
            model,
            tape,
            vars: HashMap::new(),
            train,
            grad,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Tape leaf for parameter `name`.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let value = self.model.weights.expect(name).clone();
        let track = match self.grad {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::HeadOnly => name.starts_with("head."),
        };
        let v = self.tape.leaf(value, track);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Parameters bound so far, in binding order of their tape index.
    pub fn bound(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self.vars.iter().map(|(k, v)| (k.clone(), *v)).collect();
        out.sort_by_key(|(_, v)| v.index());
        out
    }

    /// Gradients accumulated by `tape.backward`, keyed by parameter name.
    pub fn grads(&self) -> HashMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(name, v)| self.tape.grad(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    /// Running-statistic updates collected from training-mode batch norms.
    pub fn into_bn_updates(self) -> Vec<(String, BatchStats<T>)> {
        self.bn_updates
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.tape.linear(x, w, Some(b))
    }

    fn two_layer(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// `z_i = x_i·E_I + E_I^pos` for a batch of images → `[B, M, D]`.
    pub fn embed_image(&mut self, seqs: &[ImagePatchSequence<T>]) -> Result<Var> {
        let cfg = &self.model.config;
        for s in seqs {
            if s.patches.shape() != [cfg.image_tokens(), cfg.image_patch_width()] {
                return Err(Error::shape(format!(
                    "image patches {:?} do not match config [{}, {}]",
                    s.patches.shape(),
                    cfg.image_tokens(),
                    cfg.image_patch_width()
                )));
            }
        }
        let x = Tensor::stack(&seqs.iter().map(|s| s.patches.clone()).collect::<Vec<_>>())?;
        let x = self.tape.constant(x);
        let z = self.linear(x, "image_adapter")?;
        let pos = self.param("image_pos");
        self.tape.add(z, pos)
    }

    /// `z_p = MLP(x_p) + PosMLP(centers)` for a batch of clouds → `[B, G, D]`.
    pub fn embed_points(&mut self, seqs: &[PointPatchSequence<T>]) -> Result<Var> {
        let cfg = &self.model.config;
        for s in seqs {
            if s.patches.shape()[1] != cfg.point_patch_width()
                || s.centers.shape()[1] != cfg.point_channels
            {
                return Err(Error::shape(format!(
                    "point patches {:?} / centers {:?} do not match config (k·C = {}, C = {})",
                    s.patches.shape(),
                    s.centers.shape(),
                    cfg.point_patch_width(),
                    cfg.point_channels
                )));
            }
        }
        let x = Tensor::stack(&seqs.iter().map(|s| s.patches.clone()).collect::<Vec<_>>())?;
        let c = Tensor::stack(&seqs.iter().map(|s| s.centers.clone()).collect::<Vec<_>>())?;
        let x = self.tape.constant(x);
        let c = self.tape.constant(c);
        let z = self.two_layer(x, "point_adapter")?;
        let pos = self.two_layer(c, "point_pos")?;
        self.tape.add(z, pos)
    }

    /// One pre-LN block:
    /// `ẑ = Dropout(MSA(LN(z))) + z`, `z' = Dropout(MLP(LN(ẑ))) + ẑ`.
    pub fn encoder_block(&mut self, z: Var, layer: usize, rng: &mut RngStream) -> Result<Var> {
        let cfg = &self.model.config;
        let (heads, rate) = (cfg.heads, if self.train { cfg.dropout } else { 0.0 });
        let p = format!("encoder.{layer}");
        let g1 = self.param(&format!("{p}.ln1.gamma"));
        let b1 = self.param(&format!("{p}.ln1.beta"));
        let h = self.tape.layer_norm(z, g1, b1, NORM_EPS)?;
        let qkv = self.linear(h, &format!("{p}.attn.qkv"))?;
        let a = self.tape.attention(qkv, heads)?;
        let a = self.linear(a, &format!("{p}.attn.proj"))?;
        let a = self.tape.dropout(a, rate, rng)?;
        let z = self.tape.add(z, a)?;

        let g2 = self.param(&format!("{p}.ln2.gamma"));
        let b2 = self.param(&format!("{p}.ln2.beta"));
        let h = self.tape.layer_norm(z, g2, b2, NORM_EPS)?;
        let h = self.linear(h, &format!("{p}.mlp.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &format!("{p}.mlp.fc2"))?;
        let h = self.tape.dropout(h, rate, rng)?;
        self.tape.add(z, h)
    }

    /// The shared `L`-block encoder over `[B, T, D]` tokens.
    pub fn encoder(&mut self, z: Var, rng: &mut RngStream) -> Result<Var> {
        let s = self.tape.shape(z);
        if s.len() != 3 || s[2] != self.model.config.dim || s[1] == 0 {
            return Err(Error::shape(format!(
                "encoder expects [B, T, {}], got {s:?}",
                self.model.config.dim
            )));
        }
        let mut z = z;
        for layer in 0..self.model.config.layers {
            z = self.encoder_block(z, layer, rng)?;
        }
        Ok(z)
    }

    /// `r = [max_t z ; mean_t z]` → `[B, 2D]`.
    pub fn pool(&mut self, z: Var) -> Result<Var> {
        self.tape.pool_max_mean(z)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        if self.train {
            let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, NORM_EPS)?;
            self.bn_updates.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let w = &self.model.weights;
            if w.expect(&format!("{prefix}.updates")).data()[0] <= T::zero() {
                return Err(Error::contract(format!(
                    "batch-norm running statistics of {prefix} are uninitialised; \
                     train the model or run calibrate_batch_norm before evaluating"
                )));
            }
            let mean = w.expect(&format!("{prefix}.running_mean")).data();
            let var = w.expect(&format!("{prefix}.running_var")).data();
            self.tape.batch_norm_eval(x, gamma, beta, mean, var, NORM_EPS)
        }
    }

    /// `o = Linear(ReLU(BN(Linear(ReLU(BN(r))))))`, `[B, 2D] → [B, out_dim]`.
    pub fn output_adapter(&mut self, r: Var) -> Result<Var> {
        let h = self.batch_norm(r, "output_adapter.bn1")?;
        let h = self.tape.relu(h);
        let h = self.linear(h, "output_adapter.fc1")?;
        let h = self.batch_norm(h, "output_adapter.bn2")?;
        let h = self.tape.relu(h);
        self.linear(h, "output_adapter.fc2")
    }

    pub fn pooled_points(&mut self, seqs: &[PointPatchSequence<T>], rng: &mut RngStream) -> Result<Var> {
        let z = self.embed_points(seqs)?;
        let z = self.encoder(z, rng)?;
        self.pool(z)
    }

    pub fn pooled_image(&mut self, seqs: &[ImagePatchSequence<T>], rng: &mut RngStream) -> Result<Var> {
        let z = self.embed_image(seqs)?;
        let z = self.encoder(z, rng)?;
        self.pool(z)
    }

    /// Point-cloud features `p`, `[B, out_dim]`.
    pub fn forward_points(&mut self, seqs: &[PointPatchSequence<T>], rng: &mut RngStream) -> Result<Var> {
        let r = self.pooled_points(seqs, rng)?;
        self.output_adapter(r)
    }

    /// Image features `f`, `[B, out_dim]`.
    pub fn forward_image(&mut self, seqs: &[ImagePatchSequence<T>], rng: &mut RngStream) -> Result<Var> {
        let r = self.pooled_image(seqs, rng)?;
        self.output_adapter(r)
    }

    /// Class logits from the pooled point feature; the contrastive output
    /// adapter is bypassed.
    pub fn classify(&mut self, seqs: &[PointPatchSequence<T>], rng: &mut RngStream) -> Result<Var> {
        if !self.model.weights.contains("head.fc2.weight") {
            return Err(Error::contract(
                "classifier head is not initialised; call add_classifier first",
            ));
        }
        let rate = if self.train { self.model.config.dropout } else { 0.0 };
        let r = self.pooled_points(seqs, rng)?;
        let h = self.linear(r, "head.fc1")?;
        let h = self.tape.relu(h);
        let h = self.tape.dropout(h, rate, rng)?;
        self.linear(h, "head.fc2")
    }
}

/// Every learnable tensor of `store` must appear in `grads` or be treated
/// as zero by the caller; buffers are never returned.
pub fn learnable_names<T: Real>(store: &super::ParamStore<T>) -> Vec<String> {
    store
        .iter()
        .filter(|p| p.kind == ParamKind::Learnable)
        .map(|p| p.name.clone())
        .collect()
}
