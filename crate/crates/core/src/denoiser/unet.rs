use tch::nn::{self, Module};
use tch::Tensor;

use super::DenoiserConfig;

fn conv3(p: nn::Path, cin: usize, cout: usize, stride: i64, zero: bool) -> nn::Conv2D {
    let mut cfg = nn::ConvConfig {
        stride,
        padding: 1,
        ..Default::default()
    };
    if zero {
        cfg.ws_init = nn::Init::Const(0.0);
    }
    nn::conv2d(p, cin as i64, cout as i64, 3, cfg)
}

fn conv1(p: nn::Path, cin: usize, cout: usize, zero: bool) -> nn::Conv2D {
    let mut cfg = nn::ConvConfig::default();
    if zero {
        cfg.ws_init = nn::Init::Const(0.0);
    }
    nn::conv2d(p, cin as i64, cout as i64, 1, cfg)
}

fn norm(p: nn::Path, groups: usize, channels: usize) -> nn::GroupNorm {
    nn::group_norm(p, groups as i64, channels as i64, Default::default())
}

/// Sinusoidal features of the (float) step, `[cos | sin]`.
pub(crate) fn timestep_features(steps: &Tensor, dim: usize) -> Tensor {
    let half = (dim / 2) as i64;
    let freqs = (Tensor::arange(half, (steps.kind(), steps.device())) * (-(10000f64.ln()) / half as f64)).exp();
    let args = steps.unsqueeze(1) * freqs.unsqueeze(0);
    Tensor::cat(&[args.cos(), args.sin()], 1)
}

#[derive(Debug)]
struct ResBlock {
    norm_in: nn::GroupNorm,
    conv_in: nn::Conv2D,
    emb: nn::Linear,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
    skip: Option<nn::Conv2D>,
}

impl ResBlock {
    fn new(p: nn::Path, cin: usize, cout: usize, emb_dim: usize, groups: usize) -> Self {
        ResBlock {
            norm_in: norm(&p / "norm_in", groups, cin),
            conv_in: conv3(&p / "conv_in", cin, cout, 1, false),
            emb: nn::linear(&p / "emb", emb_dim as i64, cout as i64, Default::default()),
            norm_out: norm(&p / "norm_out", groups, cout),
            conv_out: conv3(&p / "conv_out", cout, cout, 1, true),
            skip: (cin != cout).then(|| conv1(&p / "skip", cin, cout, false)),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.conv_in.forward(&self.norm_in.forward(x).silu());
        let e = self.emb.forward(&emb.silu()).unsqueeze(-1).unsqueeze(-1);
        let h = self.conv_out.forward(&self.norm_out.forward(&(h + e)).silu());
        match &self.skip {
            Some(s) => s.forward(x) + h,
            None => x + h,
        }
    }
}

#[derive(Debug)]
struct Attention {
    norm: nn::GroupNorm,
    qkv: nn::Conv2D,
    proj: nn::Conv2D,
    heads: i64,
}

impl Attention {
    fn new(p: nn::Path, channels: usize, heads: usize, groups: usize) -> Self {
        Attention {
            norm: norm(&p / "norm", groups, channels),
            qkv: conv1(&p / "qkv", channels, 3 * channels, false),
            proj: conv1(&p / "proj", channels, channels, true),
            heads: heads as i64,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.size4().expect("4-d activation");
        let head_dim = c / self.heads;
        let qkv = self
            .qkv
            .forward(&self.norm.forward(x))
            .reshape([b * self.heads, 3 * head_dim, h * w]);
        let parts = qkv.split(head_dim, 1);
        let scale = 1.0 / (head_dim as f64).sqrt().sqrt();
        let q = &parts[0] * scale;
        let k = &parts[1] * scale;
        let weights = q.transpose(1, 2).matmul(&k).softmax(-1, q.kind());
        let a = parts[2].matmul(&weights.transpose(1, 2)).reshape([b, c, h, w]);
        x + self.proj.forward(&a)
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Res(ResBlock),
    Attn(Attention),
    Down(nn::Conv2D),
    Up(nn::Conv2D),
}

impl Block {
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        match self {
            Block::Res(r) => r.forward(x, emb),
            Block::Attn(a) => a.forward(x),
            Block::Down(c) => c.forward(x),
            Block::Up(c) => {
                let (_, _, h, w) = x.size4().expect("4-d activation");
                c.forward(&x.upsample_nearest2d([2 * h, 2 * w], None, None))
            }
        }
    }
}

/// Encoder-decoder with concatenating skips, residual blocks conditioned on a
/// step embedding, and self-attention at the configured resolutions.
#[derive(Debug)]
pub(crate) struct UNet {
    time_dim: usize,
    time_in: nn::Linear,
    time_out: nn::Linear,
    conv_in: nn::Conv2D,
    down: Vec<Vec<Block>>,
    middle: Vec<Block>,
    up: Vec<Vec<Block>>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl UNet {
    pub(crate) fn new(p: nn::Path, cfg: &DenoiserConfig) -> Self {
        let base = cfg.base_channels;
        let emb_dim = cfg.time_embedding_dim;
        let groups = cfg.norm_groups;
        let levels = cfg.channel_multipliers.len();
        let attn_at = |res: usize| cfg.attention_resolutions.contains(&res);

        let time_in = nn::linear(&p / "time_in", base as i64, emb_dim as i64, Default::default());
        let time_out = nn::linear(&p / "time_out", emb_dim as i64, emb_dim as i64, Default::default());
        let conv_in = conv3(&p / "conv_in", cfg.in_channels, base, 1, false);

        let mut skips = vec![base];
        let mut ch = base;
        let mut res = cfg.image_size;
        let mut down = Vec::new();
        let dp = &p / "down";
        for (level, mult) in cfg.channel_multipliers.iter().enumerate() {
            for i in 0..cfg.num_res_blocks {
                let bp = &dp / format!("{level}_{i}");
                let mut blocks = vec![Block::Res(ResBlock::new(&bp / "res", ch, mult * base, emb_dim, groups))];
                ch = mult * base;
                if attn_at(res) {
                    blocks.push(Block::Attn(Attention::new(
                        &bp / "attn",
                        ch,
                        cfg.attention_heads,
                        groups,
                    )));
                }
                down.push(blocks);
                skips.push(ch);
            }
            if level + 1 != levels {
                let bp = &dp / format!("{level}_down");
                down.push(vec![Block::Down(conv3(&bp / "conv", ch, ch, 2, false))]);
                skips.push(ch);
                res /= 2;
            }
        }

        let mp = &p / "middle";
        let middle = vec![
            Block::Res(ResBlock::new(&mp / "res0", ch, ch, emb_dim, groups)),
            Block::Attn(Attention::new(&mp / "attn", ch, cfg.attention_heads, groups)),
            Block::Res(ResBlock::new(&mp / "res1", ch, ch, emb_dim, groups)),
        ];

        let mut up = Vec::new();
        let upp = &p / "up";
        for (level, mult) in cfg.channel_multipliers.iter().enumerate().rev() {
            for i in 0..=cfg.num_res_blocks {
                let bp = &upp / format!("{level}_{i}");
                let skip = skips.pop().expect("one skip per decoder block");
                let mut blocks = vec![Block::Res(ResBlock::new(
                    &bp / "res",
                    ch + skip,
                    mult * base,
                    emb_dim,
                    groups,
                ))];
                ch = mult * base;
                if attn_at(res) {
                    blocks.push(Block::Attn(Attention::new(
                        &bp / "attn",
                        ch,
                        cfg.attention_heads,
                        groups,
                    )));
                }
                if level > 0 && i == cfg.num_res_blocks {
                    blocks.push(Block::Up(conv3(&bp / "up", ch, ch, 1, false)));
                    res *= 2;
                }
                up.push(blocks);
            }
        }

        UNet {
            time_dim: base,
            time_in,
            time_out,
            conv_in,
            down,
            middle,
            up,
            norm_out: norm(&p / "norm_out", groups, ch),
            conv_out: conv3(&p / "conv_out", ch, 2, 1, true),
        }
    }

    /// `x`: `(B, in_channels, S, S)`, `steps`: `(B,)` float. Returns `(B, 2, S, S)`.
    pub(crate) fn forward(&self, x: &Tensor, steps: &Tensor) -> Tensor {
        let emb = self
            .time_out
            .forward(&self.time_in.forward(&timestep_features(steps, self.time_dim)).silu());
        let mut h = self.conv_in.forward(x);
        let mut skips = vec![h.shallow_clone()];
        for blocks in &self.down {
            for b in blocks {
                h = b.forward(&h, &emb);
            }
            skips.push(h.shallow_clone());
        }
        for b in &self.middle {
            h = b.forward(&h, &emb);
        }
        for blocks in &self.up {
            let skip = skips.pop().expect("matched skip");
            h = Tensor::cat(&[h, skip], 1);
            for b in blocks {
                h = b.forward(&h, &emb);
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }
}
