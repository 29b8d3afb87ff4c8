use std::f32::consts::PI;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::{
    maxpool2, relu, relu_backward, softmax, upsample2, upsample2_backward, Conv2d, Grads, Linear,
    ParamId, ParamStore, Precision,
};

/// Size of the box-promptable network. The image embedding lives at a quarter
/// of the patch resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptableConfig {
    pub embed_dim: usize,
}

impl Default for PromptableConfig {
    fn default() -> Self {
        Self { embed_dim: 32 }
    }
}

impl PromptableConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.embed_dim < 4 || !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of 4",
                self.embed_dim
            )));
        }
        if resolution == 0 || !resolution.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "patch resolution {resolution} must be a positive multiple of 4"
            )));
        }
        Ok(())
    }
}

/// Box-promptable segmenter: a frozen image encoder and prompt encoder feed
/// a trainable mask decoder.
///
/// Parameter names are prefixed `image_encoder.`, `prompt_encoder.` and
/// `mask_decoder.`; only the decoder is trainable.
#[derive(Debug, Clone)]
pub struct PromptableNet {
    pub config: PromptableConfig,
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    neck: Conv2d,
    pe_gaussian: ParamId,
    corner_embed: ParamId,
    no_mask_embed: ParamId,
    mask_token: ParamId,
    prompt_proj: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp1: Linear,
    mlp2: Linear,
    token_to_image: Linear,
    fuse: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    hyper1: Linear,
    hyper2: Linear,
    out_bias: ParamId,
}

/// Intermediate values needed to backpropagate through the mask decoder.
pub(crate) struct PromptTape {
    src: Array2<f32>,
    key_in: Array2<f32>,
    prompt_in: Array1<f32>,
    query: Array1<f32>,
    q: Array1<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    attn: Array1<f32>,
    z: Array1<f32>,
    t1: Array1<f32>,
    m: Array1<f32>,
    t: Array1<f32>,
    col_fuse: Array2<f32>,
    f: Array3<f32>,
    col_up1: Array2<f32>,
    u1: Array3<f32>,
    col_up2: Array2<f32>,
    u2: Array3<f32>,
    h1: Array1<f32>,
    wdyn: Array1<f32>,
}

impl PromptableNet {
    pub fn new(config: PromptableConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let e = config.embed_dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc1 = Conv2d::new(s, "image_encoder.conv1", 1, e / 2, 3, true, rng);
        let enc2 = Conv2d::new(s, "image_encoder.conv2", e / 2, e, 3, true, rng);
        let enc3 = Conv2d::new(s, "image_encoder.conv3", e, e, 3, true, rng);
        let neck = Conv2d::new(s, "image_encoder.neck", e, e, 1, true, rng);
        let pe_gaussian = s.add_normal("prompt_encoder.pe_gaussian", &[2, e / 2], 1.0, true, rng);
        let corner_embed = s.add_normal("prompt_encoder.corner_embed", &[2, e], 1.0, true, rng);
        let no_mask_embed = s.add_normal("prompt_encoder.no_mask_embed", &[e], 0.02, true, rng);
        let mask_token = s.add_normal("mask_decoder.mask_token", &[e], 1.0, false, rng);
        let prompt_proj = Linear::new(s, "mask_decoder.prompt_proj", 2 * e, e, false, rng);
        let wq = Linear::new(s, "mask_decoder.attn.q", e, e, false, rng);
        let wk = Linear::new(s, "mask_decoder.attn.k", e, e, false, rng);
        let wv = Linear::new(s, "mask_decoder.attn.v", e, e, false, rng);
        let wo = Linear::new(s, "mask_decoder.attn.o", e, e, false, rng);
        let mlp1 = Linear::new(s, "mask_decoder.mlp.fc1", e, 2 * e, false, rng);
        let mlp2 = Linear::new(s, "mask_decoder.mlp.fc2", 2 * e, e, false, rng);
        let token_to_image = Linear::new(s, "mask_decoder.token_to_image", e, e, false, rng);
        let fuse = Conv2d::new(s, "mask_decoder.fuse", e, e, 1, false, rng);
        let up1 = Conv2d::new(s, "mask_decoder.up1", e, e / 2, 3, false, rng);
        let up2 = Conv2d::new(s, "mask_decoder.up2", e / 2, e / 4, 3, false, rng);
        let hyper1 = Linear::new(s, "mask_decoder.hyper.fc1", e, e, false, rng);
        let hyper2 = Linear::new(s, "mask_decoder.hyper.fc2", e, e / 4, false, rng);
        let out_bias = s.add_zeros("mask_decoder.out_bias", &[1], false);
        Self {
            config,
            store,
            enc1,
            enc2,
            enc3,
            neck,
            pe_gaussian,
            corner_embed,
            no_mask_embed,
            mask_token,
            prompt_proj,
            wq,
            wk,
            wv,
            wo,
            mlp1,
            mlp2,
            token_to_image,
            fuse,
            up1,
            up2,
            hyper1,
            hyper2,
            out_bias,
        }
    }

    pub(crate) fn with_store(config: PromptableConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0);
        super::checkpoint::adopt_store(&mut net.store, store)?;
        Ok(net)
    }

    /// Random Fourier features of a point given in `[0, 1]` coordinates.
    fn positional(&self, x: f32, y: f32) -> Array1<f32> {
        let g = self.store.view2(self.pe_gaussian);
        let half = self.config.embed_dim / 2;
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let mut out = Array1::zeros(2 * half);
        for j in 0..half {
            let proj = 2.0 * PI * (cx * g[[0, j]] + cy * g[[1, j]]);
            out[j] = proj.sin();
            out[half + j] = proj.cos();
        }
        out
    }

    /// Image embedding `(E, R/4, R/4)`.
    pub fn encode_image(&self, image: &Array2<f32>, p: Precision) -> Array3<f32> {
        let s = &self.store;
        let x = p.applied(image.clone().insert_axis(Axis(0)));
        let x = p.applied(relu(self.enc1.forward(s, &x).0));
        let x = maxpool2(&x).0;
        let x = p.applied(relu(self.enc2.forward(s, &x).0));
        let x = maxpool2(&x).0;
        let x = p.applied(relu(self.enc3.forward(s, &x).0));
        p.applied(self.neck.forward(s, &x).0)
    }

    /// Sparse prompt features: the two box corners, concatenated.
    fn encode_box(&self, bbox: &BoundingBox, resolution: usize) -> Array1<f32> {
        let r = resolution as f32;
        let corners = self.store.view2(self.corner_embed);
        let tl = self.positional(bbox.x_min as f32 / r, bbox.y_min as f32 / r) + corners.row(0);
        let br = self.positional(bbox.x_max as f32 / r, bbox.y_max as f32 / r) + corners.row(1);
        ndarray::concatenate(Axis(0), &[tl.view(), br.view()]).expect("equal widths")
    }

    pub fn forward(&self, image: &Array2<f32>, bbox: &BoundingBox, p: Precision) -> Array2<f32> {
        self.forward_tape(image, bbox, p).0
    }

    pub(crate) fn forward_tape(
        &self,
        image: &Array2<f32>,
        bbox: &BoundingBox,
        p: Precision,
    ) -> (Array2<f32>, PromptTape) {
        let s = &self.store;
        let e = self.config.embed_dim;
        let resolution = image.nrows();
        let emb = self.encode_image(image, p);
        let (_, h, w) = emb.dim();
        let n = h * w;

        let mut src = emb
            .into_shape_with_order((e, n))
            .expect("contiguous embedding");
        let no_mask = s.view1(self.no_mask_embed);
        for mut col in src.axis_iter_mut(Axis(1)) {
            col += &no_mask;
        }
        let mut key_in = src.clone();
        for (idx, mut col) in key_in.axis_iter_mut(Axis(1)).enumerate() {
            let (i, j) = (idx / w, idx % w);
            col += &self.positional((j as f32 + 0.5) / w as f32, (i as f32 + 0.5) / h as f32);
        }
        let prompt_in = p.applied(self.encode_box(bbox, resolution));

        let query =
            p.applied(self.prompt_proj.forward(s, prompt_in.view()) + s.view1(self.mask_token));
        let q = p.applied(self.wq.forward(s, query.view()));
        let k = p.applied(self.wk.forward_cols(s, key_in.view()));
        let v = p.applied(self.wv.forward_cols(s, src.view()));
        let scores = p.applied(k.t().dot(&q) / (e as f32).sqrt());
        let attn = p.applied(softmax(scores.view()));
        let z = p.applied(v.dot(&attn));
        let t1 = p.applied(&query + &self.wo.forward(s, z.view()));
        let m = p.applied(relu(self.mlp1.forward(s, t1.view())));
        let t = p.applied(&t1 + &self.mlp2.forward(s, m.view()));

        let bt = self.token_to_image.forward(s, t.view());
        let mut f_in = src.clone();
        for mut col in f_in.axis_iter_mut(Axis(1)) {
            col += &bt;
        }
        let f_in = p.applied(
            f_in.into_shape_with_order((e, h, w))
                .expect("embedding grid"),
        );
        let (y, col_fuse) = self.fuse.forward(s, &f_in);
        let f = p.applied(relu(y));
        let (y, col_up1) = self.up1.forward(s, &upsample2(&f));
        let u1 = p.applied(relu(y));
        let (y, col_up2) = self.up2.forward(s, &upsample2(&u1));
        let u2 = p.applied(relu(y));
        debug_assert_eq!(u2.dim().1, resolution);

        let h1 = p.applied(relu(self.hyper1.forward(s, t.view())));
        let wdyn = p.applied(self.hyper2.forward(s, h1.view()));
        let bias = s.view1(self.out_bias)[0];
        let mut logits = Array2::from_elem((resolution, resolution), bias);
        for (c, plane) in u2.axis_iter(Axis(0)).enumerate() {
            logits.scaled_add(wdyn[c], &plane);
        }
        let logits = p.applied(logits);

        let tape = PromptTape {
            src,
            key_in,
            prompt_in,
            query,
            q,
            k,
            v,
            attn,
            z,
            t1,
            m,
            t,
            col_fuse,
            f,
            col_up1,
            u1,
            col_up2,
            u2,
            h1,
            wdyn,
        };
        (logits, tape)
    }

    /// Gradients for the trainable decoder parameters only.
    pub(crate) fn backward(&self, tape: &PromptTape, dlogits: &Array2<f32>, p: Precision) -> Grads {
        let s = &self.store;
        let e = self.config.embed_dim;
        let mut g = Grads::new(s);

        let dwdyn: Array1<f32> = tape
            .u2
            .axis_iter(Axis(0))
            .map(|plane| (&plane * dlogits).sum())
            .collect();
        g.accumulate(self.out_bias, Array1::from_elem(1, dlogits.sum()));
        let mut du2 = Array3::zeros(tape.u2.dim());
        for (c, mut plane) in du2.axis_iter_mut(Axis(0)).enumerate() {
            plane.scaled_add(tape.wdyn[c], dlogits);
        }
        let du2 = p.applied(relu_backward(&tape.u2, du2));

        let dh1 = p.applied(
            self.hyper2
                .backward(s, tape.h1.view(), dwdyn.view(), &mut g),
        );
        let dh1 = relu_backward(&tape.h1, dh1);
        let mut dt = p.applied(self.hyper1.backward(s, tape.t.view(), dh1.view(), &mut g));

        let d = self
            .up2
            .backward(s, &tape.col_up2, &du2, &mut g, true)
            .expect("input grad");
        let du1 = p.applied(relu_backward(&tape.u1, upsample2_backward(&d)));
        let d = self
            .up1
            .backward(s, &tape.col_up1, &du1, &mut g, true)
            .expect("input grad");
        let df = p.applied(relu_backward(&tape.f, upsample2_backward(&d)));
        let df_in = self
            .fuse
            .backward(s, &tape.col_fuse, &df, &mut g, true)
            .expect("input grad");
        let dbt = p.applied(df_in.sum_axis(Axis(2)).sum_axis(Axis(1)));
        dt += &p.applied(
            self.token_to_image
                .backward(s, tape.t.view(), dbt.view(), &mut g),
        );

        let dm = p.applied(self.mlp2.backward(s, tape.m.view(), dt.view(), &mut g));
        let dm = relu_backward(&tape.m, dm);
        let dt1 = p.applied(&dt + &self.mlp1.backward(s, tape.t1.view(), dm.view(), &mut g));

        let dz = p.applied(self.wo.backward(s, tape.z.view(), dt1.view(), &mut g));
        let da = tape.v.t().dot(&dz);
        let dv = outer(dz.view(), tape.attn.view());
        self.wv
            .backward_cols(s, tape.src.view(), dv.view(), &mut g, false);
        let weighted = tape.attn.dot(&da);
        let dscores = p.applied((&da - weighted) * &tape.attn / (e as f32).sqrt());
        let dq = p.applied(tape.k.dot(&dscores));
        let dk = outer(tape.q.view(), dscores.view());
        self.wk
            .backward_cols(s, tape.key_in.view(), dk.view(), &mut g, false);
        let dquery = p.applied(&dt1 + &self.wq.backward(s, tape.query.view(), dq.view(), &mut g));

        g.accumulate(self.mask_token, dquery.clone());
        self.prompt_proj
            .backward(s, tape.prompt_in.view(), dquery.view(), &mut g);
        g
    }
}

fn outer(a: ArrayView1<f32>, b: ArrayView1<f32>) -> Array2<f32> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}
