//! The training loop: batch sampling, forward per setup, masked backward,
//! AdamW, EMA, loss log and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{params_hash, read_tensors, write_tensors, Manifest};
use super::data::{pad_channels, stack, PairDataset};
use super::flow::{fm_sample_xt, fm_target};
use super::optim::{AdamW, Ema};
use super::setup::{crop_sample, grad_scope, Objective, TrainMode, TrainSetup};
use crate::backbone::{Conditioning, Encoded, ModelConfig, P3d};
use crate::context::{decode_regions, encode_regions, forward_context, ContextConfig, ContextModel, RegionLayout};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{concat, mse, Graph, ParamStore, Session, Tensor};

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// A model input/target batch together with the pairs it came from.
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub conds: Vec<Conditioning>,
    pub pairs: Vec<usize>,
}

type CachedEncoding = (Tensor<f32>, Vec<Tensor<f32>>);

pub struct Trainer {
    pub model: P3d,
    pub context: Option<ContextModel>,
    pub store: ParamStore<f32>,
    pub setup: TrainSetup,
    pub opt: AdamW<f32>,
    pub ema: Ema<f32>,
    pub step: usize,
    pub seed: u64,
    /// Where encoder outputs are cached on disk in precompute mode.
    pub cache_dir: Option<PathBuf>,
    /// Where a checkpoint is dumped when the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
    rng: ChaCha8Rng,
    cache: HashMap<(usize, usize), CachedEncoding>,
    cache_key: Option<String>,
}

impl Trainer {
    /// Fresh model (and context model when given) initialised from `seed`.
    pub fn init(
        model_cfg: &ModelConfig,
        ctx_cfg: Option<&ContextConfig>,
        setup: TrainSetup,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let model = P3d::new(model_cfg, &mut store, &mut init_rng)?;
        let context = ctx_cfg
            .map(|c| ContextModel::new(c, &model, &mut store, &mut init_rng))
            .transpose()?;
        Self::new(model, context, store, setup, seed)
    }

    pub fn new(
        model: P3d,
        context: Option<ContextModel>,
        store: ParamStore<f32>,
        setup: TrainSetup,
        seed: u64,
    ) -> Result<Self> {
        setup.validate()?;
        if setup.mode.uses_context() != context.is_some() {
            return Err(Error::Config(format!(
                "mode {:?} {} a context model",
                setup.mode,
                if context.is_some() { "does not take" } else { "needs" }
            )));
        }
        if let Objective::FlowMatching { with_input, .. } = setup.objective {
            if !model.cfg.time_embed {
                return Err(Error::Config("flow matching needs a model with time embedding".into()));
            }
            if with_input && model.cfg.in_channels <= model.cfg.out_channels {
                return Err(Error::Config(
                    "flow matching with an input state needs in_channels > out_channels".into(),
                ));
            }
        }
        let opt = AdamW::new(setup.optimizer, &store);
        let ema = Ema::new(setup.ema_decay, &store);
        Ok(Trainer {
            model,
            context,
            store,
            setup,
            opt,
            ema,
            step: 0,
            seed,
            cache_dir: None,
            dump_dir: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00),
            cache: HashMap::new(),
            cache_key: None,
        })
    }

    /// Spatial extent one training sample covers.
    fn sample_dims(&self, state: [usize; 3]) -> [usize; 3] {
        match self.setup.mode {
            TrainMode::FullDomain => state,
            _ => self.setup.crop.unwrap_or(state),
        }
    }

    fn layout(&self, dims: [usize; 3]) -> Result<RegionLayout> {
        let region = self
            .setup
            .region
            .ok_or_else(|| Error::Config("no region size".into()))?;
        RegionLayout::new(dims, region, self.model.cfg.token_spacing())
    }

    /// Draws `setup.batch` pairs, crops them, pads channels, and for flow
    /// matching builds the noisy model input and velocity target.
    pub fn sample_batch(&mut self, data: &PairDataset<f32>) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Config("training set has no pairs".into()));
        }
        let shape = data.state_shape().expect("non-empty");
        let state = [shape[1], shape[2], shape[3]];
        let dims = self.sample_dims(state);
        let (cin, cout) = (self.model.cfg.in_channels, self.model.cfg.out_channels);
        let mut inputs = Vec::with_capacity(self.setup.batch);
        let mut targets = Vec::with_capacity(self.setup.batch);
        let mut conds = Vec::with_capacity(self.setup.batch);
        let mut pairs = Vec::with_capacity(self.setup.batch);
        for _ in 0..self.setup.batch {
            let i = self.rng.random_range(0..data.len());
            let (u_in, u_out, cond) = data.pair(i);
            let (u_in, u_out) = if dims == state {
                (u_in.clone(), u_out.clone())
            } else {
                let (a, b, _) = crop_sample(u_in, u_out, dims, &mut self.rng)?;
                (a, b)
            };
            match self.setup.objective {
                Objective::Mse => {
                    inputs.push(pad_channels(&u_in, cin)?);
                    targets.push(pad_channels(&u_out, cout)?);
                    conds.push(cond.clone());
                }
                Objective::FlowMatching { sigma_min, with_input } => {
                    let u_out = pad_channels(&u_out, cout)?;
                    let t: f64 = self.rng.random();
                    let eps = Tensor::<f32>::randn(u_out.shape(), &mut self.rng);
                    let xt = fm_sample_xt(&u_out, &eps, t, sigma_min)?;
                    let x = if with_input {
                        Tensor::concat(&[&pad_channels(&u_in, cin - cout)?, &xt], 0)?
                    } else {
                        pad_channels(&xt, cin)?
                    };
                    inputs.push(x);
                    targets.push(fm_target(&u_out, &eps, sigma_min)?);
                    conds.push(cond.with_t(t));
                }
            }
            pairs.push(i);
        }
        Ok(Batch {
            input: stack(&inputs)?,
            target: stack(&targets)?,
            conds,
            pairs,
        })
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self, data: &PairDataset<f32>) -> Result<StepStats> {
        let batch = self.sample_batch(data)?;
        self.train_on(data, &batch)
    }

    /// One optimisation step on a given batch.
    pub fn train_on(&mut self, data: &PairDataset<f32>, batch: &Batch) -> Result<StepStats> {
        let regions = if self.setup.mode.uses_context() {
            let sh = batch.input.shape();
            Some(self.layout([sh[2], sh[3], sh[4]])?)
        } else {
            None
        };
        let mask = regions
            .as_ref()
            .map(|l| grad_scope(&self.setup.mode, l.count(), &mut self.rng));
        let precompute = matches!(
            self.setup.mode,
            TrainMode::ContextFrozenEncoder { precompute: true, .. }
        );
        if precompute {
            self.fill_cache(data, batch, regions.as_ref().expect("context layout"))?;
        }
        let (loss, grads, active) = {
            let g = Graph::new();
            let sess = Session::new(&g, &self.store);
            if matches!(self.setup.mode, TrainMode::ContextFrozenEncoder { .. }) {
                sess.freeze(self.model.cond_params());
            }
            let x = g.constant(batch.input.clone());
            let out = match (&self.context, &regions, &mask) {
                (Some(ctx), Some(layout), Some(mask)) if precompute => {
                    let e = self.model.embed(&sess, &batch.conds)?;
                    let encoded = self.cached_encodings(&g, batch, layout)?;
                    decode_regions(&self.model, ctx, &sess, &encoded, e, layout, mask)?
                }
                (Some(ctx), Some(layout), Some(mask)) => {
                    forward_context(&self.model, ctx, &sess, x, &batch.conds, layout, mask)?
                }
                _ => self.model.forward(&sess, x, &batch.conds)?,
            };
            let loss = mse(out, g.constant(batch.target.clone()))?;
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(self.nonfinite(lv));
            }
            let grads = sess.param_grads(&g.backward(loss)?);
            (lv, grads, sess.touched())
        };
        let grad_norm = grads
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .flat_map(|(g, _)| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(self.nonfinite(grad_norm));
        }
        self.opt.step(&mut self.store, &grads, &active)?;
        self.ema.update(&self.store)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr: self.setup.optimizer.lr,
            grad_norm,
        })
    }

    fn nonfinite(&self, v: f64) -> Error {
        let mut msg = format!("value {v} at step {}", self.step + 1);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite-step{}", self.step + 1));
            match self.save(&path) {
                Ok(()) => msg.push_str(&format!("; state dumped to {}", path.display())),
                Err(e) => msg.push_str(&format!("; dump failed: {e}")),
            }
        }
        Error::NonFinite(msg)
    }

    /// Encoder outputs of each `(pair, region)` in the batch, computed with
    /// fixed parameters and remembered in memory and optionally on disk.
    fn fill_cache(&mut self, data: &PairDataset<f32>, batch: &Batch, layout: &RegionLayout) -> Result<()> {
        let shape = data.state_shape().expect("non-empty");
        if [shape[1], shape[2], shape[3]] != layout.domain {
            return Err(Error::Config(
                "precomputed encodings need uncropped training states".into(),
            ));
        }
        if self.cache_key.is_none() {
            let mut ids = self.model.encoder_params();
            ids.extend(self.model.cond_params());
            let salt = serde_json::to_string(&self.model.cfg)?;
            self.cache_key = Some(params_hash(&self.store, &ids, &salt));
        }
        let key = self.cache_key.clone().expect("set above");
        for (b, &pair) in batch.pairs.iter().enumerate() {
            if (0..layout.count()).all(|r| self.cache.contains_key(&(pair, r))) {
                continue;
            }
            let x = batch.input.narrow(0, b, 1)?;
            let computed = self.encode_one(&x, &batch.conds[b], layout)?;
            for (r, enc) in computed.into_iter().enumerate() {
                let enc = match &self.cache_dir {
                    Some(dir) => load_or_store(&dir.join(&key), pair, r, enc)?,
                    None => enc,
                };
                self.cache.insert((pair, r), enc);
            }
        }
        Ok(())
    }

    fn encode_one(&self, x: &Tensor<f32>, cond: &Conditioning, layout: &RegionLayout) -> Result<Vec<CachedEncoding>> {
        let g = Graph::new();
        let sess = Session::new(&g, &self.store);
        sess.with_frozen(true, || {
            let e = self.model.embed(&sess, std::slice::from_ref(cond))?;
            let enc = encode_regions(
                &self.model,
                &sess,
                g.constant(x.clone()),
                e,
                layout,
                &vec![false; layout.count()],
            )?;
            Ok(enc
                .into_iter()
                .map(|en| {
                    (
                        (*en.tokens.value()).clone(),
                        en.residuals.iter().map(|r| (*r.value()).clone()).collect(),
                    )
                })
                .collect())
        })
    }

    fn cached_encodings<'g>(
        &self,
        g: &'g Graph<f32>,
        batch: &Batch,
        layout: &RegionLayout,
    ) -> Result<Vec<Encoded<'g, f32>>> {
        let grid = self.model.cfg.token_grid(layout.region)?;
        let mut out = Vec::with_capacity(layout.count());
        for r in 0..layout.count() {
            let items: Vec<&CachedEncoding> = batch.pairs.iter().map(|&p| &self.cache[&(p, r)]).collect();
            let tokens = concat(&items.iter().map(|c| g.constant(c.0.clone())).collect::<Vec<_>>(), 0)?;
            let nres = items[0].1.len();
            let residuals = (0..nres)
                .map(|k| concat(&items.iter().map(|c| g.constant(c.1[k].clone())).collect::<Vec<_>>(), 0))
                .collect::<Result<Vec<_>>>()?;
            out.push(Encoded {
                tokens,
                residuals,
                grid,
            });
        }
        Ok(out)
    }

    /// Runs `steps` steps, appending `step,loss,lr,grad_norm` rows to `log`
    /// and writing a checkpoint to `out/step{n}` every `checkpoint_every`
    /// steps and to `out/last` at the end.
    pub fn run(
        &mut self,
        data: &PairDataset<f32>,
        steps: usize,
        log: &mut dyn Write,
        out: Option<&Path>,
        checkpoint_every: Option<usize>,
    ) -> Result<Vec<StepStats>> {
        let mut stats = Vec::with_capacity(steps);
        for _ in 0..steps {
            let s = self.train_step(data)?;
            writeln!(log, "{},{},{},{}", s.step, s.loss, s.lr, s.grad_norm).map_err(|e| Error::io("loss log", e))?;
            if let (Some(dir), Some(every)) = (out, checkpoint_every) {
                if every > 0 && s.step % every == 0 {
                    self.save(&dir.join(format!("step{}", s.step)))?;
                }
            }
            stats.push(s);
        }
        if let Some(dir) = out {
            self.save(&dir.join("last"))?;
        }
        Ok(stats)
    }

    /// Mean loss over the given pairs with the current (or EMA) weights and
    /// no gradient. Uses whole stored states, or crops of the training size
    /// taken at the origin.
    pub fn eval_loss(&self, data: &PairDataset<f32>, pairs: &[usize], use_ema: bool) -> Result<f64> {
        if !matches!(self.setup.objective, Objective::Mse) {
            return Err(Error::Config("evaluation loss is defined for the MSE objective".into()));
        }
        let store = if use_ema { &self.ema.shadow } else { &self.store };
        let mut total = 0.0;
        for &i in pairs {
            let (u_in, u_out, cond) = data.pair(i);
            let shape = u_in.shape();
            let dims = self.sample_dims([shape[1], shape[2], shape[3]]);
            let cut = |t: &Tensor<f32>| t.read_block(&[0, 0, 0, 0], &[t.shape()[0], dims[0], dims[1], dims[2]]);
            let x = stack(&[pad_channels(&cut(u_in)?, self.model.cfg.in_channels)?])?;
            let y = stack(&[pad_channels(&cut(u_out)?, self.model.cfg.out_channels)?])?;
            let g = Graph::new();
            let sess = Session::new(&g, store);
            let l = sess.with_frozen(true, || -> Result<f64> {
                let xv = g.constant(x);
                let c = std::slice::from_ref(cond);
                let out = match &self.context {
                    Some(ctx) => {
                        let layout = self.layout(dims)?;
                        forward_context(
                            &self.model,
                            ctx,
                            &sess,
                            xv,
                            c,
                            &layout,
                            &crate::context::RegionMask::all(layout.count()),
                        )?
                    }
                    None => self.model.forward(&sess, xv, c)?,
                };
                Ok(mse(out, g.constant(y))?.value().item() as f64)
            })?;
            total += l;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            model: self.model.cfg.clone(),
            context: self.context.as_ref().map(|c| c.cfg.clone()),
            layout: None,
            setup: Some(self.setup.clone()),
            step: self.step,
            seed: self.seed,
            rng_word_pos: Some(self.rng.get_word_pos().to_string()),
            params: self.store.ids().map(|i| self.store.name(i).to_string()).collect(),
            ema: true,
            optimizer_counts: Some(self.opt.counts.clone()),
        }
    }

    /// Writes parameters, EMA weights, optimizer moments and the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_tensors(&dir.join("params"), &self.store, &[])?;
        write_tensors(&dir.join("ema"), &self.ema.shadow, &[])?;
        write_tensors(
            &dir.join("optimizer"),
            &self.store,
            &[("m", self.opt.m.as_slice()), ("v", self.opt.v.as_slice())],
        )?;
        self.manifest().write(dir)
    }

    /// Restores a trainer saved by [`Trainer::save`], including its random
    /// stream, so that continuing reproduces an uninterrupted run.
    pub fn resume(dir: &Path) -> Result<Self> {
        let m = Manifest::read(dir)?;
        let setup = m
            .setup
            .clone()
            .ok_or_else(|| Error::Config(format!("{} has no training setup", dir.display())))?;
        let mut t = Self::init(&m.model, m.context.as_ref(), setup, m.seed)?;
        t.load_weights(dir, &[])?;
        read_tensors(&dir.join("ema"), &mut t.ema.shadow, &[])?;
        let mut opt_store = t.store.clone();
        let extras = read_tensors(&dir.join("optimizer"), &mut opt_store, &[])?;
        for (i, ex) in extras.into_iter().enumerate() {
            for (tag, v) in ex.unwrap_or_default() {
                match tag.as_str() {
                    "m" => t.opt.m[i] = v,
                    "v" => t.opt.v[i] = v,
                    _ => {}
                }
            }
        }
        if let Some(c) = m.optimizer_counts {
            if c.len() != t.opt.counts.len() {
                return Err(shape_err!("optimizer counts for {} parameters", c.len()));
            }
            t.opt.counts = c;
        }
        t.step = m.step;
        if let Some(pos) = m.rng_word_pos {
            let pos: u128 = pos
                .parse()
                .map_err(|_| Error::Config(format!("bad rng position {pos}")))?;
            t.rng.set_word_pos(pos);
        }
        Ok(t)
    }

    /// Loads parameter values from a checkpoint's `params/` (or `ema/` when
    /// `ema` is set). Names starting with one of `optional` may be missing,
    /// which is how a pretrained backbone is loaded under a new context model.
    pub fn load_weights(&mut self, dir: &Path, optional: &[&str]) -> Result<()> {
        read_tensors(&dir.join("params"), &mut self.store, optional)?;
        self.ema = Ema::new(self.setup.ema_decay, &self.store);
        self.opt = AdamW::new(self.setup.optimizer, &self.store);
        Ok(())
    }
}

fn cache_file(dir: &Path, pair: usize, region: usize) -> PathBuf {
    dir.join(format!("pair{pair}-region{region}.blob"))
}

fn load_or_store(dir: &Path, pair: usize, region: usize, enc: CachedEncoding) -> Result<CachedEncoding> {
    let path = cache_file(dir, pair, region);
    if path.exists() {
        let mut recs = crate::numerics::blob::read_file::<f32>(&path)?;
        if recs.is_empty() || recs[0].0 != "tokens" {
            return Err(Error::Corrupt {
                path,
                reason: "missing tokens record".into(),
            });
        }
        let tokens = recs.remove(0).1;
        return Ok((tokens, recs.into_iter().map(|(_, t)| t).collect()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..enc.1.len()).map(|k| format!("residual{k}")).collect();
    let mut records: Vec<(&str, &Tensor<f32>)> = vec![("tokens", &enc.0)];
    records.extend(names.iter().map(|n| n.as_str()).zip(enc.1.iter()));
    crate::numerics::blob::write_file(&path, &records)?;
    Ok(enc)
}
