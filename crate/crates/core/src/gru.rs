//! The learnable phoneme feature extractor: two bi-directional gated
//! recurrent layers, a linear classifier and a log-softmax head.
//!
//! Gate equations follow the standard update/reset formulation:
//! `r = s(W_ir x + b_ir + W_hr h + b_hr)`,
//! `z = s(W_iz x + b_iz + W_hz h + b_hz)`,
//! `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`,
//! `h' = (1 - z) * n + z * h`.
//!
//! Per-frame outputs concatenate the forward-direction hidden state first,
//! then the backward direction.

use rand::Rng;

use crate::autodiff::{
    add, affine, concat, log_softmax, matvec, mul, sigmoid, slice, tanh, Tensor, TensorError,
};
use crate::ctc::PosteriorSequence;
use crate::rng::{derive_seed, rng_from};
use crate::tensorfile::{TensorContainer, TensorFileError};

pub const DEFAULT_HIDDEN: usize = 128;

fn uniform_leaf(rng: &mut rand_pcg::Pcg64Mcg, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // draw in f32 precision so serialized models reload bit-identically
    let data: Vec<f64> = (0..n)
        .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
        .collect();
    Tensor::leaf(shape, data, true)
}

/// One scan direction of a gated recurrent layer. Gate blocks are stacked
/// rows `[reset; update; candidate]` in the `3H x I` / `3H x H` matrices.
pub(crate) struct GruDirection {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl GruDirection {
    fn seeded(seed: u64, input: usize, hidden: usize) -> Self {
        let mut rng = rng_from(seed);
        GruDirection {
            w_ih: uniform_leaf(&mut rng, vec![3 * hidden, input], input),
            w_hh: uniform_leaf(&mut rng, vec![3 * hidden, hidden], hidden),
            b_ih: uniform_leaf(&mut rng, vec![3 * hidden], hidden),
            b_hh: uniform_leaf(&mut rng, vec![3 * hidden], hidden),
            hidden,
        }
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.w_ih.clone(),
            self.w_hh.clone(),
            self.b_ih.clone(),
            self.b_hh.clone(),
        ]
    }

    fn step(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let hid = self.hidden;
        let gi = add(&matvec(&self.w_ih, x), &self.b_ih);
        let gh = add(&matvec(&self.w_hh, h), &self.b_hh);
        let r = sigmoid(&add(&slice(&gi, 0, hid), &slice(&gh, 0, hid)));
        let z = sigmoid(&add(&slice(&gi, hid, hid), &slice(&gh, hid, hid)));
        let n = tanh(&add(
            &slice(&gi, 2 * hid, hid),
            &mul(&r, &slice(&gh, 2 * hid, hid)),
        ));
        add(&mul(&affine(&z, -1.0, 1.0), &n), &mul(&z, h))
    }

    /// Hidden state per input position. `reverse` scans right-to-left but
    /// returns states indexed by the original positions.
    fn run(&self, xs: &[Tensor], reverse: bool) -> Vec<Tensor> {
        let mut h = Tensor::vector(vec![0.0; self.hidden], false);
        let mut out: Vec<Option<Tensor>> = vec![None; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for i in order {
            h = self.step(&xs[i], &h);
            out[i] = Some(h.clone());
        }
        out.into_iter().map(|t| t.unwrap()).collect()
    }
}

pub(crate) struct BiGruLayer {
    pub(crate) fwd: GruDirection,
    pub(crate) bwd: GruDirection,
}

impl BiGruLayer {
    fn seeded(seed: u64, input: usize, hidden: usize) -> Self {
        BiGruLayer {
            fwd: GruDirection::seeded(derive_seed(seed, "fwd"), input, hidden),
            bwd: GruDirection::seeded(derive_seed(seed, "bwd"), input, hidden),
        }
    }

    pub(crate) fn run(&self, xs: &[Tensor]) -> Vec<Tensor> {
        let f = self.fwd.run(xs, false);
        let b = self.bwd.run(xs, true);
        f.iter().zip(b.iter()).map(|(a, c)| concat(a, c)).collect()
    }
}

/// The full extractor: recurrent layers, classifier, log-softmax head.
pub struct GruStack {
    pub input_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    layers: Vec<BiGruLayer>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

impl GruStack {
    /// Seeded initialization; `outputs` defaults to the 42-symbol phoneme
    /// alphabet at the call sites that build real models.
    pub fn seeded(seed: u64, input_dim: usize, hidden: usize, outputs: usize) -> Self {
        let layer1 = BiGruLayer::seeded(derive_seed(seed, "layer0"), input_dim, hidden);
        let layer2 = BiGruLayer::seeded(derive_seed(seed, "layer1"), 2 * hidden, hidden);
        let mut rng = rng_from(derive_seed(seed, "classifier"));
        GruStack {
            input_dim,
            hidden,
            outputs,
            layers: vec![layer1, layer2],
            classifier_w: uniform_leaf(&mut rng, vec![outputs, 2 * hidden], 2 * hidden),
            classifier_b: uniform_leaf(&mut rng, vec![outputs], 2 * hidden),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.fwd.params());
            out.extend(layer.bwd.params());
        }
        out.push(self.classifier_w.clone());
        out.push(self.classifier_b.clone());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Per-frame normalized log-probability rows, kept on the graph so a
    /// loss can backpropagate into the parameters.
    pub fn forward_rows(&self, features: &[Vec<f32>]) -> Result<Vec<Tensor>, TensorError> {
        if features.is_empty() {
            return Err(TensorError::ShapeError(
                "zero-length feature sequence".into(),
            ));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != self.input_dim {
                return Err(TensorError::ShapeError(format!(
                    "frame {i} has dim {}, model expects {}",
                    f.len(),
                    self.input_dim
                )));
            }
        }
        let mut xs: Vec<Tensor> = features
            .iter()
            .map(|f| Tensor::vector(f.iter().map(|&x| x as f64).collect(), false))
            .collect();
        for layer in &self.layers {
            xs = layer.run(&xs);
        }
        Ok(xs
            .iter()
            .map(|h| log_softmax(&add(&matvec(&self.classifier_w, h), &self.classifier_b)))
            .collect())
    }

    /// Inference-only posteriors (log domain, rows normalized).
    pub fn posteriors(
        &self,
        features: &[Vec<f32>],
        blank: Option<usize>,
    ) -> Result<PosteriorSequence, TensorError> {
        let rows = self.forward_rows(features)?;
        let values: Vec<Vec<f64>> = rows.iter().map(|r| r.values()).collect();
        Ok(PosteriorSequence::from_log_probs(&values, blank)?)
    }

    /// Deep copy with fresh graph leaves (shadow-model snapshots).
    pub fn clone_detached(&self) -> GruStack {
        let clone_dir = |d: &GruDirection| GruDirection {
            w_ih: Tensor::leaf(d.w_ih.shape().to_vec(), d.w_ih.values(), true),
            w_hh: Tensor::leaf(d.w_hh.shape().to_vec(), d.w_hh.values(), true),
            b_ih: Tensor::leaf(d.b_ih.shape().to_vec(), d.b_ih.values(), true),
            b_hh: Tensor::leaf(d.b_hh.shape().to_vec(), d.b_hh.values(), true),
            hidden: d.hidden,
        };
        GruStack {
            input_dim: self.input_dim,
            hidden: self.hidden,
            outputs: self.outputs,
            layers: self
                .layers
                .iter()
                .map(|l| BiGruLayer {
                    fwd: clone_dir(&l.fwd),
                    bwd: clone_dir(&l.bwd),
                })
                .collect(),
            classifier_w: Tensor::leaf(
                self.classifier_w.shape().to_vec(),
                self.classifier_w.values(),
                true,
            ),
            classifier_b: Tensor::leaf(
                self.classifier_b.shape().to_vec(),
                self.classifier_b.values(),
                true,
            ),
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert(
            "meta",
            vec![4],
            vec![
                self.input_dim as f32,
                self.hidden as f32,
                self.outputs as f32,
                self.layers.len() as f32,
            ],
        );
        let put = |c: &mut TensorContainer, name: &str, t: &Tensor| {
            c.insert(
                name,
                t.shape().to_vec(),
                t.values().iter().map(|&x| x as f32).collect(),
            );
        };
        for (i, layer) in self.layers.iter().enumerate() {
            for (dir_name, dir) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                put(&mut c, &format!("layer{i}.{dir_name}.w_ih"), &dir.w_ih);
                put(&mut c, &format!("layer{i}.{dir_name}.w_hh"), &dir.w_hh);
                put(&mut c, &format!("layer{i}.{dir_name}.b_ih"), &dir.b_ih);
                put(&mut c, &format!("layer{i}.{dir_name}.b_hh"), &dir.b_hh);
            }
        }
        put(&mut c, "classifier.weight", &self.classifier_w);
        put(&mut c, "classifier.bias", &self.classifier_b);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, TensorFileError> {
        let meta = c.get("meta")?;
        let (input_dim, hidden, outputs, n_layers) = (
            meta.data[0] as usize,
            meta.data[1] as usize,
            meta.data[2] as usize,
            meta.data[3] as usize,
        );
        let grab = |name: &str| -> Result<Tensor, TensorFileError> {
            let t = c.get(name)?;
            Ok(Tensor::leaf(
                t.shape.clone(),
                t.data.iter().map(|&x| x as f64).collect(),
                true,
            ))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mut dirs = Vec::with_capacity(2);
            for dir_name in ["fwd", "bwd"] {
                dirs.push(GruDirection {
                    w_ih: grab(&format!("layer{i}.{dir_name}.w_ih"))?,
                    w_hh: grab(&format!("layer{i}.{dir_name}.w_hh"))?,
                    b_ih: grab(&format!("layer{i}.{dir_name}.b_ih"))?,
                    b_hh: grab(&format!("layer{i}.{dir_name}.b_hh"))?,
                    hidden,
                });
            }
            let bwd = dirs.pop().unwrap();
            let fwd = dirs.pop().unwrap();
            layers.push(BiGruLayer { fwd, bwd });
        }
        Ok(GruStack {
            input_dim,
            hidden,
            outputs,
            layers,
            classifier_w: grab("classifier.weight")?,
            classifier_b: grab("classifier.bias")?,
        })
    }

    pub fn content_hash(&self) -> String {
        self.to_container().content_hash()
    }
}
