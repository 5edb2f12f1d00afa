//! Trainable VL encoder head and logistic classifier.
//!
//! `g = PreOutput(drop(img_proj(f_img)) ⊙ drop(txt_proj(f_txt)))`, where the
//! pre-output stack is `(Linear -> ReLU -> Dropout) x (L-1) -> Linear`.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::neural::{
    dot, dropout, dropout_backward, relu_backward, relu_forward, LinearLayer, Mode, ParamSet,
    TrainRng,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VlEncoderParams {
    pub img_proj: LinearLayer,
    pub txt_proj: LinearLayer,
    pub pre_output: Vec<LinearLayer>,
    pub dropout_rate: f64,
}

/// Everything the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_img: Vec<f64>,
    x_txt: Vec<f64>,
    img: Vec<f64>,
    txt: Vec<f64>,
    img_mask: Vec<f64>,
    txt_mask: Vec<f64>,
    /// Input to each pre-output layer.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden (non-final) pre-output layers.
    pre_acts: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl VlEncoderParams {
    pub fn init(d_img: usize, d_txt: usize, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.projection_dim;
        let img_proj = LinearLayer::init(d_img, n, rng);
        let txt_proj = LinearLayer::init(d_txt, n, rng);
        let pre_output = (0..cfg.pre_output_layers).map(|_| LinearLayer::init(n, n, rng)).collect();
        VlEncoderParams { img_proj, txt_proj, pre_output, dropout_rate: cfg.dropout_rate }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        VlEncoderParams {
            img_proj: LinearLayer::zeros(self.img_proj.in_dim, self.img_proj.out_dim),
            txt_proj: LinearLayer::zeros(self.txt_proj.in_dim, self.txt_proj.out_dim),
            pre_output: self.pre_output.iter().map(|l| LinearLayer::zeros(l.in_dim, l.out_dim)).collect(),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn d_img(&self) -> usize {
        self.img_proj.in_dim
    }

    pub fn d_txt(&self) -> usize {
        self.txt_proj.in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.pre_output.last().map_or(self.img_proj.out_dim, |l| l.out_dim)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.img_proj.out_dim;
        let mut ok = self.txt_proj.out_dim == n && !self.pre_output.is_empty();
        let mut prev = n;
        for l in &self.pre_output {
            ok &= l.in_dim == prev;
            prev = l.out_dim;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("encoder layer shapes do not chain".into()))
        }
    }

    fn forward(
        &self,
        f_img: &[f64],
        f_txt: &[f64],
        mut rng: Option<&mut TrainRng>,
    ) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let p = self.dropout_rate;
        let mut drop = |x: Vec<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
            match rng.as_deref_mut() {
                Some(r) => dropout(&x, p, Mode::Train, r),
                None => Ok((x, Vec::new())),
            }
        };
        let (img, img_mask) = drop(self.img_proj.forward(f_img)?)?;
        let (txt, txt_mask) = drop(self.txt_proj.forward(f_txt)?)?;
        let mut h: Vec<f64> = img.iter().zip(&txt).map(|(a, b)| a * b).collect();

        let last = self.pre_output.len() - 1;
        let mut layer_inputs = Vec::with_capacity(last + 1);
        let mut pre_acts = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        for (i, layer) in self.pre_output.iter().enumerate() {
            let z = layer.forward(&h)?;
            let next = if i == last {
                z.clone()
            } else {
                let (d, m) = drop(relu_forward(&z))?;
                masks.push(m);
                d
            };
            layer_inputs.push(std::mem::replace(&mut h, next));
            if i != last {
                pre_acts.push(z);
            }
        }
        let cache = rng.is_some().then(|| ForwardCache {
            x_img: f_img.to_vec(),
            x_txt: f_txt.to_vec(),
            img,
            txt,
            img_mask,
            txt_mask,
            layer_inputs,
            pre_acts,
            masks,
        });
        Ok((h, cache))
    }

    /// Train-mode forward: dropout active, cache returned for backward.
    pub fn encode_train(
        &self,
        f_img: &[f64],
        f_txt: &[f64],
        rng: &mut TrainRng,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let (g, cache) = self.forward(f_img, f_txt, Some(rng))?;
        Ok((g, cache.expect("train forward keeps its cache")))
    }

    /// Eval-mode forward. Pure: no dropout, no RNG.
    pub fn encode_eval(&self, f_img: &[f64], f_txt: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(f_img, f_txt, None)?.0)
    }

    /// Mode-dispatching forward. The cache is `Some` only in train mode.
    pub fn encode(
        &self,
        f_img: &[f64],
        f_txt: &[f64],
        mode: Mode,
        rng: &mut TrainRng,
    ) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        match mode {
            Mode::Train => self.forward(f_img, f_txt, Some(rng)),
            Mode::Eval => self.forward(f_img, f_txt, None),
        }
    }

    /// Backpropagates `dg` through the cached forward and adds the parameter
    /// gradients into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, dg: &[f64], grads: &mut VlEncoderParams) -> Result<()> {
        if cache.layer_inputs.len() != self.pre_output.len()
            || dg.len() != self.embed_dim()
            || grads.pre_output.len() != self.pre_output.len()
            || cache.x_img.len() != self.d_img()
            || cache.x_txt.len() != self.d_txt()
        {
            return Err(Error::ShapeMismatch("stale or mismatched forward cache".into()));
        }
        let add = |dst: &mut LinearLayer, dw: &[f64], db: &[f64]| {
            dst.weight.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            dst.bias.iter_mut().zip(db).for_each(|(a, b)| *a += b);
        };

        let last = self.pre_output.len() - 1;
        let mut dh = dg.to_vec();
        for i in (0..=last).rev() {
            let dz = if i == last {
                dh
            } else {
                relu_backward(&cache.pre_acts[i], &dropout_backward(&cache.masks[i], &dh))
            };
            let lg = self.pre_output[i].backward(&cache.layer_inputs[i], &dz)?;
            add(&mut grads.pre_output[i], &lg.dw, &lg.db);
            dh = lg.dx;
        }

        let d_img: Vec<f64> = dh.iter().zip(&cache.txt).map(|(d, b)| d * b).collect();
        let d_txt: Vec<f64> = dh.iter().zip(&cache.img).map(|(d, a)| d * a).collect();
        let d_img = dropout_backward(&cache.img_mask, &d_img);
        let d_txt = dropout_backward(&cache.txt_mask, &d_txt);
        let gi = self.img_proj.backward(&cache.x_img, &d_img)?;
        add(&mut grads.img_proj, &gi.dw, &gi.db);
        let gt = self.txt_proj.backward(&cache.x_txt, &d_txt)?;
        add(&mut grads.txt_proj, &gt.dw, &gt.db);
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache, dg: &[f64]) -> Result<VlEncoderParams> {
        let mut grads = self.zeros_like();
        self.backward_into(cache, dg, &mut grads)?;
        Ok(grads)
    }
}

impl ParamSet for VlEncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.img_proj.tensors();
        out.extend(self.txt_proj.tensors());
        for l in &self.pre_output {
            out.extend(l.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.img_proj.tensors_mut();
        out.extend(self.txt_proj.tensors_mut());
        for l in &mut self.pre_output {
            out.extend(l.tensors_mut());
        }
        out
    }
}

/// Logistic regression on the joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Vec<f64>,
    pub b: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ClassifierHead {
    pub fn init(n: usize, rng: &mut impl Rng) -> Self {
        let l = LinearLayer::init(n, 1, rng);
        ClassifierHead { w: l.weight, b: l.bias[0] }
    }

    pub fn zeros(n: usize) -> Self {
        ClassifierHead { w: vec![0.0; n], b: 0.0 }
    }

    pub fn logit(&self, g: &[f64]) -> f64 {
        dot(&self.w, g) + self.b
    }

    pub fn predict_prob(&self, g: &[f64]) -> f64 {
        sigmoid(self.logit(g))
    }

    /// Gradients of a loss with upstream `d_logit`: returns `(dw, db, dg)`.
    pub fn backward(&self, g: &[f64], d_logit: f64) -> (Vec<f64>, f64, Vec<f64>) {
        let dw = g.iter().map(|v| v * d_logit).collect();
        let dg = self.w.iter().map(|v| v * d_logit).collect();
        (dw, d_logit, dg)
    }
}

impl ParamSet for ClassifierHead {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w, std::slice::from_ref(&self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w, std::slice::from_mut(&mut self.b)]
    }
}

/// The full trainable surface: encoder plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: VlEncoderParams,
    pub head: ClassifierHead,
}

impl Model {
    /// Deterministic init: image projection, text projection, pre-output
    /// layers, then the head, all drawn from `rng` in that order.
    pub fn init(d_img: usize, d_txt: usize, cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let encoder = VlEncoderParams::init(d_img, d_txt, cfg, rng);
        let head = ClassifierHead::init(encoder.embed_dim(), rng);
        Model { encoder, head }
    }

    pub fn zeros_like(&self) -> Self {
        Model { encoder: self.encoder.zeros_like(), head: ClassifierHead::zeros(self.head.w.len()) }
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}
