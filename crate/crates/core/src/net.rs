//! The full network: encoder, dual-scale fusion block, UNet of dual-path
//! groups and decoder.
//!
//! Feature maps travel as `[h·w × c]` row-major token matrices. Every level
//! of the UNet halves the resolution and reuses the same channel width.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{uniform_init, MambaBlock};
use crate::mask::{partition_patches, DEFAULT_THRESHOLD};
use crate::scan::{mas_order, ScanPath};
use crate::{Error, MaskImage, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Encoder and decoder convolution size.
pub const CONV_KERNEL: usize = 3;

/// Extra factor on the decoder's `±1/√fan_in` init. The trunk leaves the
/// residual stack with an rms around 16, and an unscaled decoder pushes
/// nearly every output pixel onto the clamp, where the gradient is zero.
pub const DECODER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub unet_depth: usize,
    pub patch_size: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub dropout: f64,
    pub residual_output: bool,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            unet_depth: 4,
            patch_size: 8,
            state_dim: 8,
            expansion: 2,
            dropout: 0.0,
            residual_output: true,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("state_dim", self.state_dim),
            ("expansion", self.expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.unet_depth > 16 {
            return Err(Error::Config(format!("unet_depth {} is unreasonably deep", self.unet_depth)));
        }
        Ok(())
    }

    /// Number of resolution levels below the input that the model touches.
    /// The fusion block always needs one even if the UNet has none.
    pub fn levels(&self) -> usize {
        self.unet_depth.max(1)
    }

    /// Checks that an `h×w` input fits the level structure.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let f = 1usize << self.levels();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("input {h}×{w} is not divisible by {f}")));
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Largest of `s, s/2, s/4, …, 1` dividing both `h` and `w`.
pub fn level_patch_size(s: usize, h: usize, w: usize) -> usize {
    let mut s = s.max(1);
    while s > 1 && (h % s != 0 || w % s != 0) {
        s /= 2;
    }
    s
}

/// Scan routing for one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRouting {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub path: ScanPath,
    /// Token visit order of the mask-aware stage.
    pub mas_tokens: Vec<usize>,
}

impl LevelRouting {
    pub fn new(mask: &MaskImage, patch_size: usize, threshold: f64) -> Result<Self> {
        let (height, width) = (mask.height(), mask.width());
        let grid = partition_patches(mask, patch_size, threshold)?;
        let path = mas_order(&grid)?;
        let mas_tokens = path.token_order(patch_size);
        Ok(LevelRouting { height, width, patch_size, path, mas_tokens })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Routing for every level, from the input resolution down. Depends only on
/// the mask and the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub levels: Vec<LevelRouting>,
}

impl Routing {
    pub fn new(cfg: &ModelConfig, mask: &MaskImage) -> Result<Self> {
        cfg.check_input(mask.height(), mask.width())?;
        let mut levels = Vec::with_capacity(cfg.levels() + 1);
        let mut m = mask.clone();
        for level in 0..=cfg.levels() {
            if level > 0 {
                m = m.max_pool2()?;
            }
            let s = level_patch_size(cfg.patch_size, m.height(), m.width());
            levels.push(LevelRouting::new(&m, s, cfg.threshold)?);
        }
        Ok(Routing { levels })
    }
}

/// Sequence position of every fine and coarse token in the dual-scale
/// interleave of an `h×w` map with its `h/2 × w/2` downsample.
///
/// Output position `k` holds row `order[k]` of `[fine; coarse]`: unit
/// `(i, j)` (row-major) is fine pixels `(2i,2j), (2i+1,2j), (2i,2j+1),
/// (2i+1,2j+1)` followed by coarse pixel `(i, j)`.
pub fn interleave_order(h: usize, w: usize) -> Result<Vec<usize>> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot interleave a {h}×{w} map with its half")));
    }
    let (hd, wd) = (h / 2, w / 2);
    let mut order = Vec::with_capacity(5 * hd * wd);
    for i in 0..hd {
        for j in 0..wd {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                order.push((2 * i + dy) * w + 2 * j + dx);
            }
            order.push(h * w + i * wd + j);
        }
    }
    Ok(order)
}

/// Sequence position of each fine pixel (row-major) in [`interleave_order`].
pub fn fold_order(h: usize, w: usize) -> Result<Vec<usize>> {
    let order = interleave_order(h, w)?;
    let mut fold = alloc::vec![0; h * w];
    for (k, &src) in order.iter().enumerate() {
        if src < h * w {
            fold[src] = k;
        }
    }
    Ok(fold)
}

/// Dual-scale token sequence of length `5·h·w/4`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

impl InterleavedSequence {
    /// `fine` is `[h·w × c]`, `coarse` is `[h·w/4 × c]`, both row-major.
    pub fn new(fine: &Tensor, coarse: &Tensor, h: usize, w: usize) -> Result<Self> {
        let c = fine.shape().get(1).copied().unwrap_or(0);
        if fine.shape() != [h * w, c] || coarse.shape() != [h * w / 4, c] {
            return Err(Error::Dimension(format!(
                "interleave of {:?} and {:?} as a {h}×{w} map",
                fine.shape(),
                coarse.shape()
            )));
        }
        let order = interleave_order(h, w)?;
        let mut stacked = fine.data().to_vec();
        stacked.extend_from_slice(coarse.data());
        let mut data = Vec::with_capacity(stacked.len());
        for &row in &order {
            data.extend_from_slice(&stacked[row * c..(row + 1) * c]);
        }
        Ok(InterleavedSequence { tokens: Tensor::new(&[order.len(), c], data)?, height: h, width: w })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fine tokens back in row-major order.
    pub fn fold(&self) -> Tensor {
        let c = self.tokens.shape()[1];
        let fold = fold_order(self.height, self.width).expect("validated at construction");
        let mut data = Vec::with_capacity(fold.len() * c);
        for &k in &fold {
            data.extend_from_slice(&self.tokens.data()[k * c..(k + 1) * c]);
        }
        Tensor::new(&[fold.len(), c], data).expect("fold shape")
    }
}

/// Horizontal stage followed by the mask-aware stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dpmg {
    pub hs: MambaBlock,
    pub mas: MambaBlock,
}

impl Dpmg {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Self {
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            MambaBlock::new(
                store,
                rng,
                &format!("{prefix}.{name}"),
                cfg.channels,
                cfg.state_dim,
                cfg.expansion,
                cfg.dropout,
            )
        };
        let hs = block(store, rng, "hs");
        let mas = block(store, rng, "mas");
        Dpmg { hs, mas }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, route: &LevelRouting) -> Result<Var> {
        let (h, w) = (route.height, route.width);
        let x = self.hs.forward(tape, store, x, None, h, w)?;
        self.mas.forward(tape, store, x, Some(&route.mas_tokens), h, w)
    }

    pub fn silence(&self, store: &mut ParamStore) {
        self.hs.silence(store);
        self.mas.silence(store);
    }
}

/// Dual-scale fusion: separate groups at full and half resolution, then a
/// bidirectional SSM over the interleaved units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfmb {
    pub fine: Dpmg,
    pub coarse: Dpmg,
    pub fusion: MambaBlock,
}

impl Dfmb {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        fine_route: &LevelRouting,
        coarse_route: &LevelRouting,
    ) -> Result<Var> {
        let (h, w) = (fine_route.height, fine_route.width);
        let map = tape.tokens_to_map(x, h, w)?;
        let down = tape.avg_pool2(map)?;
        let down = tape.map_to_tokens(down)?;
        let coarse = self.coarse.forward(tape, store, down, coarse_route)?;
        let fine = self.fine.forward(tape, store, x, fine_route)?;

        let stacked = tape.concat_rows(fine, coarse)?;
        let seq = tape.permute_rows(stacked, &interleave_order(h, w)?)?;
        let seq = self.fusion.ssm.forward(tape, store, seq)?;
        let c = tape.shape(seq)[1];
        let index = fold_order(h, w)?.into_iter().flat_map(|k| k * c..(k + 1) * c).collect();
        let folded = tape.gather(seq, index, &[h * w, c])?;
        self.fusion.mlp.forward(tape, store, folded, h, w)
    }

    pub fn silence(&self, store: &mut ParamStore) {
        self.fine.silence(store);
        self.coarse.silence(store);
        self.fusion.silence(store);
    }
}

/// Decoder stage of one UNet level: upsample, concatenate the skip, project
/// `2C → C`, then a dual-path group.
#[derive(Debug, Clone, PartialEq)]
pub struct UpStage {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub dpmg: Dpmg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub dfmb: Dfmb,
    /// Encoder groups, level 0 first.
    pub down: Vec<Dpmg>,
    pub bottleneck: Dpmg,
    /// Decoder stages indexed by the level they produce, level 0 first.
    pub up: Vec<UpStage>,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Encoder tokens `[H·W × C]`.
    pub features: Var,
    /// UNet output tokens `[H·W × C]`.
    pub trunk: Var,
    /// Predicted image `[3×H×W]`.
    pub output: Var,
}

impl Model {
    /// Builds the model and registers its parameters, initialized from `config.seed`.
    pub fn new(config: ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let k2 = CONV_KERNEL * CONV_KERNEL;
        let enc_w = store.add("enc.w", uniform_init(&mut rng, &[c, 4, CONV_KERNEL, CONV_KERNEL], 4 * k2));
        let enc_b = store.add("enc.b", Tensor::zeros(&[c]));
        let dfmb = Dfmb {
            fine: Dpmg::new(store, &mut rng, "dfmb.fine", &config),
            coarse: Dpmg::new(store, &mut rng, "dfmb.coarse", &config),
            fusion: MambaBlock::new(
                store,
                &mut rng,
                "dfmb.fusion",
                c,
                config.state_dim,
                config.expansion,
                config.dropout,
            ),
        };
        let down = (0..config.unet_depth)
            .map(|l| Dpmg::new(store, &mut rng, &format!("unet.down{l}"), &config))
            .collect();
        let bottleneck = Dpmg::new(store, &mut rng, "unet.mid", &config);
        let up = (0..config.unet_depth)
            .map(|l| UpStage {
                proj_w: store.add(format!("unet.up{l}.proj_w"), uniform_init(&mut rng, &[2 * c, c], 2 * c)),
                proj_b: store.add(format!("unet.up{l}.proj_b"), Tensor::zeros(&[c])),
                dpmg: Dpmg::new(store, &mut rng, &format!("unet.up{l}"), &config),
            })
            .collect();
        let dec_w = store.add("dec.w", uniform_init(&mut rng, &[3, c, CONV_KERNEL, CONV_KERNEL], c * k2).map(|v| v * DECODER_INIT_SCALE));
        let dec_b = store.add("dec.b", Tensor::zeros(&[3]));
        Ok(Model { config, enc_w, enc_b, dfmb, down, bottleneck, up, dec_w, dec_b })
    }

    /// `LeakyReLU(Conv3×3([image; mask]))` flattened to `[H·W × C]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: Var, mask: &MaskImage) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape != [3, mask.height(), mask.width()] {
            return Err(Error::Dimension(format!(
                "image {shape:?} does not match a {}×{} mask",
                mask.height(),
                mask.width()
            )));
        }
        let (h, w) = (mask.height(), mask.width());
        let m = tape.constant(mask.to_tensor());
        let rgb = reshape_planes(tape, image, 3)?;
        let m = reshape_planes(tape, m, 1)?;
        let planes = tape.concat_rows(rgb, m)?;
        let x = tape.gather(planes, (0..4 * h * w).collect(), &[4, h, w])?;
        let w = tape.param(store, self.enc_w);
        let b = tape.param(store, self.enc_b);
        let y = tape.conv2d(x, w)?;
        let y = tape.add_channel_bias(y, b)?;
        let y = tape.leaky_relu(y);
        tape.map_to_tokens(y)
    }

    /// UNet over fused tokens at routing level 0.
    pub fn unet(&self, tape: &mut Tape, store: &ParamStore, x: Var, routing: &Routing) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = x;
        for (level, group) in self.down.iter().enumerate() {
            let route = &routing.levels[level];
            x = group.forward(tape, store, x, route)?;
            skips.push(x);
            let map = tape.tokens_to_map(x, route.height, route.width)?;
            let map = tape.avg_pool2(map)?;
            x = tape.map_to_tokens(map)?;
        }
        x = self.bottleneck.forward(tape, store, x, &routing.levels[self.down.len()])?;
        for level in (0..self.up.len()).rev() {
            let stage = &self.up[level];
            let route = &routing.levels[level];
            let coarse = &routing.levels[level + 1];
            let map = tape.tokens_to_map(x, coarse.height, coarse.width)?;
            let map = tape.upsample2(map)?;
            let up = tape.map_to_tokens(map)?;
            let joined = tape.concat_cols(up, skips[level])?;
            let w = tape.param(store, stage.proj_w);
            let b = tape.param(store, stage.proj_b);
            let y = tape.matmul(joined, w)?;
            let y = tape.add_row_bias(y, b)?;
            x = stage.dpmg.forward(tape, store, y, route)?;
        }
        Ok(x)
    }

    /// Full pass. `image` is `[3×H×W]` with values in `[0, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        mask: &MaskImage,
        routing: &Routing,
    ) -> Result<Forward> {
        let (h, w) = (mask.height(), mask.width());
        self.config.check_input(h, w)?;
        if routing.levels.len() != self.config.levels() + 1 || routing.levels[0].height != h {
            return Err(Error::Contract("routing was built for a different mask or config".into()));
        }
        let features = self.encode(tape, store, image, mask)?;
        let fused = self.dfmb.forward(tape, store, features, &routing.levels[0], &routing.levels[1])?;
        let trunk = self.unet(tape, store, fused, routing)?;

        let map = tape.tokens_to_map(trunk, h, w)?;
        let dw = tape.param(store, self.dec_w);
        let db = tape.param(store, self.dec_b);
        let out = tape.conv2d(map, dw)?;
        let out = tape.add_channel_bias(out, db)?;
        let out = if self.config.residual_output { tape.add(image, out)? } else { out };
        let output = tape.clamp01(out);
        Ok(Forward { features, trunk, output })
    }

    /// Convenience inference: builds routing and an inference tape.
    pub fn predict(&self, store: &ParamStore, image: &Tensor, mask: &MaskImage) -> Result<Tensor> {
        let routing = Routing::new(&self.config, mask)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = self.forward(&mut tape, store, x, mask, &routing)?;
        Ok(tape.value(f.output).clone())
    }

    /// Sets every SSM path and MLP to the identity-equivalent state and every
    /// skip projection to pass the skip features through unchanged.
    pub fn silence(&self, store: &mut ParamStore) {
        self.dfmb.silence(store);
        self.bottleneck.silence(store);
        for g in &self.down {
            g.silence(store);
        }
        let c = self.config.channels;
        for stage in &self.up {
            stage.dpmg.silence(store);
            let proj = Tensor::from_fn(&[2 * c, c], |i| if i / c == c + i % c { 1.0 } else { 0.0 });
            store.set_value(stage.proj_w, proj).expect("projection shape");
            store.value_mut(stage.proj_b).data_mut().fill(0.0);
        }
    }

    pub fn zero_decoder(&self, store: &mut ParamStore) {
        store.value_mut(self.dec_w).data_mut().fill(0.0);
        store.value_mut(self.dec_b).data_mut().fill(0.0);
    }
}

// [c×h×w] → [c × h·w] so planes can be stacked with concat_rows.
fn reshape_planes(tape: &mut Tape, v: Var, c: usize) -> Result<Var> {
    let n = tape.value(v).len();
    tape.gather(v, (0..n).collect(), &[c, n / c])
}
