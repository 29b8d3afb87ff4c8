use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, Grads, ParamStore, PoolIndices, Precision,
};

/// Encoder/decoder widths: level `l` has `base_width * 2^l` channels and the
/// bottleneck sits at level `depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_width: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 64,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "unet depth and base width must be positive".into(),
            ));
        }
        let stride = 1usize << self.depth;
        if resolution == 0 || !resolution.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "patch resolution {resolution} must be a positive multiple of {stride} for unet depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

struct DoubleConvTape {
    col_a: Array2<f32>,
    y_a: Array3<f32>,
    col_b: Array2<f32>,
    y_b: Array3<f32>,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.conv_a"), cin, cout, 3, false, rng),
            b: Conv2d::new(store, &format!("{name}.conv_b"), cout, cout, 3, false, rng),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Array3<f32>, p: Precision) -> DoubleConvTape {
        let (y, col_a) = self.a.forward(store, x);
        let y_a = p.applied(relu(y));
        let (y, col_b) = self.b.forward(store, &y_a);
        let y_b = p.applied(relu(y));
        DoubleConvTape {
            col_a,
            y_a,
            col_b,
            y_b,
        }
    }

    fn backward(
        &self,
        store: &ParamStore,
        t: &DoubleConvTape,
        dy: Array3<f32>,
        grads: &mut Grads,
        p: Precision,
        input_grad: bool,
    ) -> Option<Array3<f32>> {
        let d = relu_backward(&t.y_b, dy);
        let d = p.applied(
            self.b
                .backward(store, &t.col_b, &d, grads, true)
                .expect("input grad"),
        );
        let d = relu_backward(&t.y_a, d);
        self.a
            .backward(store, &t.col_a, &d, grads, input_grad)
            .map(|d| p.applied(d))
    }
}

/// Classic encoder/decoder with skip connections and a one-channel logit head.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UnetConfig,
    pub store: ParamStore,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    /// Indexed by level; `reduce[l]` maps level `l + 1` widths to level `l`.
    reduce: Vec<Conv2d>,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

pub(crate) struct UnetTape {
    down: Vec<(DoubleConvTape, PoolIndices)>,
    bottom: DoubleConvTape,
    /// Indexed by level.
    up: Vec<(Array2<f32>, Array3<f32>, DoubleConvTape)>,
    head_col: Array2<f32>,
}

impl UNet {
    /// Fresh network with He-normal weights drawn from `seed`.
    pub fn new(config: UnetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let depth = config.depth;
        let down = (0..depth)
            .map(|l| {
                let cin = if l == 0 { 1 } else { config.width(l - 1) };
                DoubleConv::new(
                    &mut store,
                    &format!("unet.down{l}"),
                    cin,
                    config.width(l),
                    &mut rng,
                )
            })
            .collect();
        let bottom = DoubleConv::new(
            &mut store,
            "unet.bottom",
            config.width(depth - 1),
            config.width(depth),
            &mut rng,
        );
        let mut reduce = Vec::with_capacity(depth);
        let mut up = Vec::with_capacity(depth);
        for l in 0..depth {
            let w = config.width(l);
            reduce.push(Conv2d::new(
                &mut store,
                &format!("unet.up{l}.reduce"),
                2 * w,
                w,
                3,
                false,
                &mut rng,
            ));
            up.push(DoubleConv::new(
                &mut store,
                &format!("unet.up{l}"),
                2 * w,
                w,
                &mut rng,
            ));
        }
        let head = Conv2d::new(
            &mut store,
            "unet.head",
            config.width(0),
            1,
            1,
            false,
            &mut rng,
        );
        Self {
            config,
            store,
            down,
            bottom,
            reduce,
            up,
            head,
        }
    }

    /// Rebuilds the layer layout around an existing parameter store.
    pub(crate) fn with_store(config: UnetConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, 0);
        super::checkpoint::adopt_store(&mut net.store, store)?;
        Ok(net)
    }

    pub fn forward(&self, image: &Array2<f32>, p: Precision) -> Array2<f32> {
        self.forward_tape(image, p).0
    }

    pub(crate) fn forward_tape(
        &self,
        image: &Array2<f32>,
        p: Precision,
    ) -> (Array2<f32>, UnetTape) {
        let store = &self.store;
        let mut x = p.applied(image.clone().insert_axis(Axis(0)));
        let mut down = Vec::with_capacity(self.config.depth);
        for block in &self.down {
            let tape = block.forward(store, &x, p);
            let (pooled, idx) = maxpool2(&tape.y_b);
            x = pooled;
            down.push((tape, idx));
        }
        let bottom = self.bottom.forward(store, &x, p);
        let mut x = bottom.y_b.clone();
        let mut up: Vec<Option<_>> = (0..self.config.depth).map(|_| None).collect();
        for l in (0..self.config.depth).rev() {
            let (y, col) = self.reduce[l].forward(store, &upsample2(&x));
            let reduced = p.applied(relu(y));
            let tape = self.up[l].forward(store, &concat_channels(&down[l].0.y_b, &reduced), p);
            x = tape.y_b.clone();
            up[l] = Some((col, reduced, tape));
        }
        let (logits, head_col) = self.head.forward(store, &x);
        let logits = p.applied(logits.index_axis_move(Axis(0), 0));
        let tape = UnetTape {
            down,
            bottom,
            up: up
                .into_iter()
                .map(|t| t.expect("every level visited"))
                .collect(),
            head_col,
        };
        (logits, tape)
    }

    pub(crate) fn backward(&self, tape: &UnetTape, dlogits: &Array2<f32>, p: Precision) -> Grads {
        let store = &self.store;
        let mut grads = Grads::new(store);
        let d = dlogits.clone().insert_axis(Axis(0));
        let mut d = p.applied(
            self.head
                .backward(store, &tape.head_col, &d, &mut grads, true)
                .expect("input grad"),
        );
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            let (col, reduced, block) = &tape.up[l];
            let dcat = self.up[l]
                .backward(store, block, d, &mut grads, p, true)
                .expect("input grad");
            let w = self.config.width(l);
            let (dskip, dred) = split_channels(&dcat, w);
            skip_grads.push(dskip);
            let dred = relu_backward(reduced, dred);
            let dup = self.reduce[l]
                .backward(store, col, &dred, &mut grads, true)
                .expect("input grad");
            d = p.applied(upsample2_backward(&dup));
        }
        let mut d = self
            .bottom
            .backward(store, &tape.bottom, d, &mut grads, p, true)
            .expect("input grad");
        for l in (0..self.config.depth).rev() {
            let (block, idx) = &tape.down[l];
            let dy = maxpool2_backward(idx, &d) + &skip_grads[l];
            match self.down[l].backward(store, block, dy, &mut grads, p, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        grads
    }
}
