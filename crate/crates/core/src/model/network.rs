use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::{ModelError, NetworkSpec};
use crate::nn::layers::{self, BatchNormCache};
use crate::nn::{FeatureMap, Grads, ParamId, ParamKind, ParamStore};
use crate::preprocess::ModelInput;

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    cout: usize,
    pool_after: bool,
}

#[derive(Debug, Clone)]
struct Pointwise {
    weight: ParamId,
    bias: ParamId,
    cout: usize,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvLayer>,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    /// ReLU 1×1 convolutions followed by the final sigmoid gate convolution.
    attention: Vec<Pointwise>,
    age: DenseLayer,
    gender: DenseLayer,
    hidden: DenseLayer,
    output: DenseLayer,
}

/// Network weights plus the fixed wiring that interprets them.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamStore,
    layout: Layout,
}

struct ConvTape {
    input: FeatureMap,
    output: FeatureMap,
    pool: Option<(Vec<u32>, (usize, usize, usize))>,
}

struct HeadTape {
    normalized: FeatureMap,
    /// Post-ReLU outputs of the hidden attention convolutions.
    attn_hidden: Vec<FeatureMap>,
    gate: Vec<f64>,
    pooled: Vec<f64>,
    aux: [f64; 2],
    mask_in: Vec<f64>,
    dense_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    mask_hidden: Vec<f64>,
    out_in: Vec<f64>,
}

/// Everything a training-mode forward pass caches for backward.
pub struct TrainPass {
    pub outputs: Vec<[f64; 2]>,
    backbone: Vec<Vec<ConvTape>>,
    bn: BatchNormCache,
    heads: Vec<HeadTape>,
}

impl TrainPass {
    /// Hash of every piecewise-linear branch taken (ReLU signs, pool winners).
    /// Two passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        for sample in &self.backbone {
            for t in sample {
                for v in t.output.data() {
                    (*v > 0.0).hash(&mut h);
                }
                if let Some((idx, _)) = &t.pool {
                    idx.hash(&mut h);
                }
            }
        }
        for head in &self.heads {
            for a in &head.attn_hidden {
                for v in a.data() {
                    (*v > 0.0).hash(&mut h);
                }
            }
            for v in &head.hidden_pre {
                (*v > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }
}

impl Network {
    pub(super) fn new(spec: NetworkSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamStore::new();
        let conv_kind = if spec.backbone.trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Frozen
        };

        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let glorot = |fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let d = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            (0..n).map(|_| d.sample(rng)).collect()
        };

        let mut convs = Vec::new();
        let mut cin = 3;
        for (b, block) in spec.backbone.blocks.iter().enumerate() {
            for c in 0..block.convs {
                let name = format!("backbone.block{}.conv{}", b + 1, c + 1);
                let cout = block.width;
                let weight = params.register(
                    format!("{name}.weight"),
                    vec![cout, cin, 3, 3],
                    he(cin * 9, cout * cin * 9, &mut rng),
                    conv_kind,
                );
                let bias = params.register(format!("{name}.bias"), vec![cout], vec![0.0; cout], conv_kind);
                convs.push(ConvLayer {
                    weight,
                    bias,
                    cout,
                    pool_after: c + 1 == block.convs,
                });
                cin = cout;
            }
        }
        let channels = cin;
        let tr = ParamKind::Trainable;
        let bn_gamma = params.register("bn.gamma", vec![channels], vec![1.0; channels], tr);
        let bn_beta = params.register("bn.beta", vec![channels], vec![0.0; channels], tr);
        let bn_mean = params.register("bn.running_mean", vec![channels], vec![0.0; channels], ParamKind::Buffer);
        let bn_var = params.register("bn.running_var", vec![channels], vec![1.0; channels], ParamKind::Buffer);

        let mut attention = Vec::new();
        let mut width = channels;
        let widths: Vec<usize> = spec.head.attn_widths.iter().copied().chain(std::iter::once(1)).collect();
        for (i, &cout) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let data = if last {
                glorot(width, cout, cout * width, &mut rng)
            } else {
                he(width, cout * width, &mut rng)
            };
            let weight = params.register(format!("attention.conv{}.weight", i + 1), vec![cout, width, 1, 1], data, tr);
            let bias = params.register(format!("attention.conv{}.bias", i + 1), vec![cout], vec![0.0; cout], tr);
            attention.push(Pointwise { weight, bias, cout });
            width = cout;
        }

        let mut neuron = |name: &str, rng: &mut ChaCha8Rng| DenseLayer {
            weight: params.register(format!("aux.{name}.weight"), vec![1, 1], glorot(1, 1, 1, rng), tr),
            bias: params.register(format!("aux.{name}.bias"), vec![1], vec![0.0], tr),
        };
        let age = neuron("age", &mut rng);
        let gender = neuron("gender", &mut rng);

        let n_in = channels + 2;
        let hw = spec.head.dense_width;
        let hidden = DenseLayer {
            weight: params.register("head.dense.weight", vec![hw, n_in], glorot(n_in, hw, hw * n_in, &mut rng), tr),
            bias: params.register("head.dense.bias", vec![hw], vec![0.0; hw], tr),
        };
        let output = DenseLayer {
            weight: params.register("head.out.weight", vec![2, hw], glorot(hw, 2, 2 * hw, &mut rng), tr),
            bias: params.register("head.out.bias", vec![2], vec![0.0; 2], tr),
        };

        Ok(Self {
            spec,
            params,
            layout: Layout {
                convs,
                bn_gamma,
                bn_beta,
                bn_mean,
                bn_var,
                attention,
                age,
                gender,
                hidden,
                output,
            },
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_batch(&self, batch: &[ModelInput]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let s = self.spec.input_side;
        for (i, input) in batch.iter().enumerate() {
            if input.image.shape() != (3, s, s) {
                return Err(ModelError::InputShape {
                    sample: i,
                    expected: (3, s, s),
                    got: input.image.shape(),
                });
            }
            if !input.image.is_finite() {
                return Err(ModelError::NonFiniteInput { sample: i, what: "image" });
            }
            for (what, value) in [("age", input.aux_age), ("gender", input.aux_gender)] {
                if !value.is_finite() {
                    return Err(ModelError::NonFiniteInput { sample: i, what });
                }
                if !(0.0..=1.0).contains(&value) {
                    return Err(ModelError::AuxOutOfRange { sample: i, what, value });
                }
            }
        }
        Ok(())
    }

    fn normalized_input(&self, input: &FeatureMap) -> FeatureMap {
        match &self.spec.backbone.input_normalization {
            None => input.clone(),
            Some(stats) => {
                let (c, h, w) = input.shape();
                let mut data = Vec::with_capacity(input.data().len());
                for ch in 0..c {
                    data.extend(input.channel(ch).iter().map(|v| (v - stats.mean[ch]) / stats.std[ch]));
                }
                FeatureMap::new(c, h, w, data)
            }
        }
    }

    fn backbone_forward(&self, input: &FeatureMap, keep_tape: bool) -> (FeatureMap, Vec<ConvTape>) {
        let mut x = self.normalized_input(input);
        let mut tape = Vec::new();
        for conv in &self.layout.convs {
            let y = layers::conv3x3_relu(&x, self.params.data(conv.weight), self.params.data(conv.bias), conv.cout);
            let (next, pool) = if conv.pool_after {
                let (p, idx) = layers::max_pool2(&y);
                (p, Some((idx, y.shape())))
            } else {
                (y.clone(), None)
            };
            if keep_tape {
                tape.push(ConvTape {
                    input: std::mem::replace(&mut x, next),
                    output: y,
                    pool,
                });
            } else {
                x = next;
            }
        }
        (x, tape)
    }

    fn backbone_backward(&self, tape: &[ConvTape], d_features: FeatureMap) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![(Vec::new(), Vec::new()); tape.len()];
        let mut d = d_features;
        for (i, (t, conv)) in tape.iter().zip(&self.layout.convs).enumerate().rev() {
            let d_out = match &t.pool {
                Some((idx, shape)) => layers::max_pool2_backward(&d, idx, *shape),
                None => d,
            };
            let g = layers::conv3x3_relu_backward(&t.input, &t.output, &d_out, self.params.data(conv.weight), i > 0);
            grads[i] = (g.weight, g.bias);
            d = g.input.unwrap_or_else(|| FeatureMap::zeros(0, 0, 0));
        }
        grads
    }

    fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
        if rate == 0.0 {
            return vec![1.0; n];
        }
        let keep = 1.0 / (1.0 - rate);
        (0..n).map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 }).collect()
    }

    fn head_forward(&self, normalized: FeatureMap, input: &ModelInput, masks: Option<&mut ChaCha8Rng>) -> ([f64; 2], HeadTape) {
        let p = &self.params;
        let l = &self.layout;
        let (_, h, w) = normalized.shape();
        let mut attn_hidden = Vec::new();
        let mut x = normalized.clone();
        let n_attn = l.attention.len();
        let mut gate = Vec::new();
        for (i, pw) in l.attention.iter().enumerate() {
            let mut y = layers::conv1x1(&x, p.data(pw.weight), p.data(pw.bias), pw.cout);
            if i + 1 == n_attn {
                gate = y.data().iter().map(|&z| layers::sigmoid(z)).collect();
            } else {
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                attn_hidden.push(y.clone());
                x = y;
            }
        }
        debug_assert_eq!(gate.len(), h * w);
        // The gate is broadcast across all channels (fixed all-ones 1×1 expansion).
        let pooled = layers::attention_pool(&normalized, &gate);
        let aux = [
            p.data(l.age.weight)[0] * input.aux_age + p.data(l.age.bias)[0],
            p.data(l.gender.weight)[0] * input.aux_gender + p.data(l.gender.bias)[0],
        ];
        let concat: Vec<f64> = pooled.iter().copied().chain(aux).collect();
        let rate = self.spec.head.dropout;
        let (mask_in, mask_hidden) = match masks {
            Some(rng) => {
                let a = Self::dropout_mask(rng, concat.len(), rate);
                let b = Self::dropout_mask(rng, self.spec.head.dense_width, rate);
                (a, b)
            }
            None => (vec![1.0; concat.len()], vec![1.0; self.spec.head.dense_width]),
        };
        let dense_in: Vec<f64> = concat.iter().zip(&mask_in).map(|(v, m)| v * m).collect();
        let hidden_pre = layers::dense(&dense_in, p.data(l.hidden.weight), p.data(l.hidden.bias));
        let out_in: Vec<f64> = hidden_pre
            .iter()
            .zip(&mask_hidden)
            .map(|(&z, m)| layers::elu(z) * m)
            .collect();
        let out = layers::dense(&out_in, p.data(l.output.weight), p.data(l.output.bias));
        (
            [out[0], out[1]],
            HeadTape {
                normalized,
                attn_hidden,
                gate,
                pooled,
                aux: [input.aux_age, input.aux_gender],
                mask_in,
                dense_in,
                hidden_pre,
                mask_hidden,
                out_in,
            },
        )
    }

    /// Returns the gradient w.r.t. the head's batch-normalized input and adds
    /// the head parameter gradients into `grads`.
    fn head_backward(&self, t: &HeadTape, d_out: &[f64; 2], grads: &mut Grads) -> FeatureMap {
        let p = &self.params;
        let l = &self.layout;
        let (dw, db, d_out_in) = layers::dense_backward(&t.out_in, d_out, p.data(l.output.weight));
        grads.accumulate(l.output.weight, &dw);
        grads.accumulate(l.output.bias, &db);
        let d_hidden_pre: Vec<f64> = d_out_in
            .iter()
            .zip(&t.mask_hidden)
            .zip(&t.hidden_pre)
            .map(|((g, m), &z)| g * m * layers::elu_grad(z))
            .collect();
        let (dw, db, d_dense_in) = layers::dense_backward(&t.dense_in, &d_hidden_pre, p.data(l.hidden.weight));
        grads.accumulate(l.hidden.weight, &dw);
        grads.accumulate(l.hidden.bias, &db);
        let d_concat: Vec<f64> = d_dense_in.iter().zip(&t.mask_in).map(|(g, m)| g * m).collect();
        let c = t.pooled.len();
        let (d_age, d_gender) = (d_concat[c], d_concat[c + 1]);
        grads.accumulate(l.age.weight, &[d_age * t.aux[0]]);
        grads.accumulate(l.age.bias, &[d_age]);
        grads.accumulate(l.gender.weight, &[d_gender * t.aux[1]]);
        grads.accumulate(l.gender.bias, &[d_gender]);

        let (mut d_norm, d_gate) = layers::attention_pool_backward(&t.normalized, &t.gate, &t.pooled, &d_concat[..c]);
        let (_, h, w) = t.normalized.shape();
        let dz: Vec<f64> = d_gate.iter().zip(&t.gate).map(|(g, a)| g * a * (1.0 - a)).collect();
        let mut d = FeatureMap::new(1, h, w, dz);
        for (i, pw) in l.attention.iter().enumerate().rev() {
            let input = if i == 0 { &t.normalized } else { &t.attn_hidden[i - 1] };
            let g = layers::conv1x1_backward(input, &d, p.data(pw.weight));
            grads.accumulate(pw.weight, &g.weight);
            grads.accumulate(pw.bias, &g.bias);
            let mut dx = g.input.expect("pointwise backward always yields an input gradient");
            if i > 0 {
                // through the ReLU of the previous hidden layer
                for (g, y) in dx.data_mut().iter_mut().zip(t.attn_hidden[i - 1].data()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                d = dx;
            } else {
                for (a, b) in d_norm.data_mut().iter_mut().zip(dx.data()) {
                    *a += b;
                }
            }
        }
        d_norm
    }

    /// Evaluation-mode forward: no dropout, running batch-norm statistics.
    /// Samples are processed independently.
    pub fn forward(&self, batch: &[ModelInput]) -> Result<Vec<[f64; 2]>, ModelError> {
        self.check_batch(batch)?;
        let l = &self.layout;
        let p = &self.params;
        let outputs: Vec<[f64; 2]> = batch
            .par_iter()
            .map(|input| {
                let (features, _) = self.backbone_forward(&input.image, false);
                let normalized = layers::batch_norm_eval(
                    &features,
                    p.data(l.bn_gamma),
                    p.data(l.bn_beta),
                    p.data(l.bn_mean),
                    p.data(l.bn_var),
                );
                self.head_forward(normalized, input, None).0
            })
            .collect();
        if outputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteOutput);
        }
        Ok(outputs)
    }

    /// Training-mode forward: batch statistics and dropout masks drawn from
    /// `dropout_seed` (one stream per sample position).
    pub fn forward_train(&self, batch: &[ModelInput], dropout_seed: u64) -> Result<TrainPass, ModelError> {
        self.check_batch(batch)?;
        let l = &self.layout;
        let p = &self.params;
        let keep_backbone = self.backbone_needs_grad();
        let (features, backbone): (Vec<FeatureMap>, Vec<Vec<ConvTape>>) = batch
            .par_iter()
            .map(|input| self.backbone_forward(&input.image, keep_backbone))
            .unzip();
        let (normalized, bn) = layers::batch_norm_train(&features, p.data(l.bn_gamma), p.data(l.bn_beta));
        let mut outputs = Vec::with_capacity(batch.len());
        let mut heads = Vec::with_capacity(batch.len());
        for (i, (norm, input)) in normalized.into_iter().zip(batch).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            rng.set_stream(i as u64);
            let (out, tape) = self.head_forward(norm, input, Some(&mut rng));
            outputs.push(out);
            heads.push(tape);
        }
        if outputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteOutput);
        }
        Ok(TrainPass {
            outputs,
            backbone,
            bn,
            heads,
        })
    }

    fn backbone_needs_grad(&self) -> bool {
        self.layout
            .convs
            .iter()
            .any(|c| self.params.get(c.weight).kind == ParamKind::Trainable)
    }

    /// Gradients of a loss whose derivative w.r.t. each output row is `d_outputs`.
    pub fn backward(&self, pass: &TrainPass, d_outputs: &[[f64; 2]]) -> Grads {
        assert_eq!(d_outputs.len(), pass.outputs.len(), "one output gradient per sample");
        let l = &self.layout;
        let mut grads = Grads::zeros_like(&self.params);
        let d_norm: Vec<FeatureMap> = pass
            .heads
            .iter()
            .zip(d_outputs)
            .map(|(t, d)| self.head_backward(t, d, &mut grads))
            .collect();
        let (d_features, d_gamma, d_beta) = layers::batch_norm_backward(&d_norm, &pass.bn, self.params.data(l.bn_gamma));
        grads.accumulate(l.bn_gamma, &d_gamma);
        grads.accumulate(l.bn_beta, &d_beta);
        if self.backbone_needs_grad() {
            let per_sample: Vec<Vec<(Vec<f64>, Vec<f64>)>> = pass
                .backbone
                .par_iter()
                .zip(d_features.into_par_iter())
                .map(|(tape, d)| self.backbone_backward(tape, d))
                .collect();
            // fixed summation order keeps results independent of scheduling
            for sample in &per_sample {
                for (conv, (dw, db)) in l.convs.iter().zip(sample) {
                    grads.accumulate(conv.weight, dw);
                    grads.accumulate(conv.bias, db);
                }
            }
        }
        grads
    }

    /// Moves the running batch-norm statistics toward those of `pass`.
    pub fn update_running_stats(&mut self, pass: &TrainPass) {
        let momentum = self.spec.head.bn_momentum;
        let mean = self.layout.bn_mean;
        let var = self.layout.bn_var;
        for (r, m) in self.params.get_mut(mean).data.iter_mut().zip(&pass.bn.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, v) in self.params.get_mut(var).data.iter_mut().zip(&pass.bn.var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }

    /// Ids of the batch-norm running statistics.
    pub fn buffer_ids(&self) -> [ParamId; 2] {
        [self.layout.bn_mean, self.layout.bn_var]
    }
}
