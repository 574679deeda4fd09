//! Parameter layout, counts and FLOP estimates.

use super::config::{ModelConfig, NUM_STAGES};
use crate::tensor::{Init, ParamSpec};
use crate::windowing::WindowConfig;

const LINEAR_STD: f64 = 0.02;

fn linear(specs: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize, bias: bool) {
    specs.push(ParamSpec::new(format!("{name}.weight"), [dout, din], Init::TruncNormal { std: LINEAR_STD }));
    if bias {
        specs.push(ParamSpec::new(format!("{name}.bias"), [dout], Init::Zeros));
    }
}

fn norm(specs: &mut Vec<ParamSpec>, name: &str, width: usize) {
    specs.push(ParamSpec::new(format!("{name}.weight"), [width], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.bias"), [width], Init::Zeros));
}

fn conv(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.weight"),
        [cout, cin, k, k, k],
        Init::Kaiming { fan_in: cin * k * k * k },
    ));
}

fn res_block(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize) {
    conv(specs, &format!("{name}.conv1"), cin, cout, 3);
    conv(specs, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        conv(specs, &format!("{name}.proj"), cin, cout, 1);
    }
}

fn up_block(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.upsample.weight"),
        [cin, cout, 2, 2, 2],
        Init::Kaiming { fan_in: cin * 8 },
    ));
    res_block(specs, &format!("{name}.block"), 2 * cout, cout);
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.stage{stage}.block{block}")
}

/// Every parameter in creation order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    s.push(ParamSpec::new(
        "encoder.patch_embed.weight",
        [c, cfg.in_channels, p, p, p],
        Init::TruncNormal { std: LINEAR_STD },
    ));
    s.push(ParamSpec::new("encoder.patch_embed.bias", [c], Init::Zeros));
    let table = (2 * cfg.window_size - 1).pow(3);
    for i in 0..NUM_STAGES {
        let w = cfg.stage_width(i);
        for j in 0..cfg.depths[i] {
            let b = block_prefix(i, j);
            norm(&mut s, &format!("{b}.norm1"), w);
            linear(&mut s, &format!("{b}.attn.qkv"), w, 3 * w, true);
            if cfg.use_relative_position_bias {
                s.push(ParamSpec::new(
                    format!("{b}.attn.relative_position_bias"),
                    [table, cfg.heads[i]],
                    Init::TruncNormal { std: LINEAR_STD },
                ));
            }
            linear(&mut s, &format!("{b}.attn.proj"), w, w, true);
            norm(&mut s, &format!("{b}.norm2"), w);
            linear(&mut s, &format!("{b}.mlp.fc1"), w, cfg.mlp_ratio * w, true);
            linear(&mut s, &format!("{b}.mlp.fc2"), cfg.mlp_ratio * w, w, true);
        }
        norm(&mut s, &format!("encoder.stage{i}.merge.norm"), 8 * w);
        linear(&mut s, &format!("encoder.stage{i}.merge.reduction"), 8 * w, 2 * w, false);
    }
    res_block(&mut s, "decoder.enc0", cfg.in_channels, c);
    res_block(&mut s, "decoder.enc1", c, c);
    res_block(&mut s, "decoder.enc2", 2 * c, 2 * c);
    res_block(&mut s, "decoder.enc3", 4 * c, 4 * c);
    res_block(&mut s, "decoder.bottleneck", 16 * c, 16 * c);
    up_block(&mut s, "decoder.up4", 16 * c, 8 * c);
    up_block(&mut s, "decoder.up3", 8 * c, 4 * c);
    up_block(&mut s, "decoder.up2", 4 * c, 2 * c);
    up_block(&mut s, "decoder.up1", 2 * c, c);
    up_block(&mut s, "decoder.up0", c, c);
    s.push(ParamSpec::new(
        "head.weight",
        [cfg.out_channels, c, 1, 1, 1],
        Init::Kaiming { fan_in: c },
    ));
    s.push(ParamSpec::new("head.bias", [cfg.out_channels], Init::Zeros));
    s
}

pub fn count_parameters(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Input extents rounded up to the model divisor.
pub fn padded_input(cfg: &ModelConfig, input: [usize; 3]) -> [usize; 3] {
    let k = cfg.divisor();
    input.map(|d| d.div_ceil(k) * k)
}

/// `(channels, [h, w, d])` of the input and the five encoder levels.
pub fn level_shapes(cfg: &ModelConfig, input: [usize; 3]) -> Vec<(usize, [usize; 3])> {
    let padded = padded_input(cfg, input);
    let mut out = vec![(cfg.in_channels, input)];
    let mut g = padded.map(|d| d / cfg.patch_size);
    out.push((cfg.embed_dim, g));
    for i in 0..NUM_STAGES {
        g = g.map(|d| d.div_ceil(2));
        out.push((2 * cfg.stage_width(i), g));
    }
    out
}

/// FLOPs of one forward pass (multiply-add = 2). Counted: convolutions and
/// transposed convolutions by kernel MACs, linear layers, the two attention
/// products, patch merging. Normalization, softmax and activations are not
/// counted.
pub fn count_flops(cfg: &ModelConfig, input: [usize; 3]) -> u64 {
    let vox = |g: [usize; 3]| (g[0] * g[1] * g[2]) as u64;
    let conv = |cin: usize, cout: usize, k: usize, out: [usize; 3]| 2 * (cin * cout * k * k * k) as u64 * vox(out);
    let res = |cin: usize, cout: usize, g: [usize; 3]| {
        conv(cin, cout, 3, g) + conv(cout, cout, 3, g) + if cin != cout { conv(cin, cout, 1, g) } else { 0 }
    };
    let padded = padded_input(cfg, input);
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    let mut g = padded.map(|d| d / p);
    let mut f = conv(cfg.in_channels, c, p, g);
    let mut grids = vec![padded, g];
    for i in 0..NUM_STAGES {
        let w = cfg.stage_width(i) as u64;
        let hidden = cfg.mlp_ratio as u64 * w;
        for j in 0..cfg.depths[i] {
            let wc = WindowConfig::new(g, cfg.window_size, j % 2 == 1).expect("valid window");
            let tokens = vox(wc.padded);
            let t = wc.tokens_per_window() as u64;
            f += 2 * tokens * w * 3 * w; // qkv
            f += 2 * 2 * wc.num_windows() as u64 * t * t * w; // QK^T and PV over all heads
            f += 2 * tokens * w * w; // proj
            f += 2 * 2 * vox(g) * w * hidden; // mlp
        }
        g = g.map(|d| d.div_ceil(2));
        f += 2 * vox(g) * 8 * w * 2 * w;
        grids.push(g);
    }
    f += res(cfg.in_channels, c, grids[0]);
    f += res(c, c, grids[1]);
    f += res(2 * c, 2 * c, grids[2]);
    f += res(4 * c, 4 * c, grids[3]);
    f += res(16 * c, 16 * c, grids[5]);
    let ups = [(16 * c, 8 * c, 4), (8 * c, 4 * c, 3), (4 * c, 2 * c, 2), (2 * c, c, 1), (c, c, 0)];
    for (cin, cout, level) in ups {
        let og = grids[level];
        f += 2 * (cin * cout * 8) as u64 * vox(grids[level + 1]);
        f += res(2 * cout, cout, og);
    }
    f + conv(c, cfg.out_channels, 1, grids[0])
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn names_unique() {
        let specs = param_specs(&ModelConfig::default());
        let names: HashSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn default_count_near_table() {
        let n = count_parameters(&ModelConfig::default()) as f64;
        assert!((n / 61.98e6 - 1.0).abs() < 0.01, "{n}");
    }

    #[test]
    fn doubling_width_grows_count() {
        let a = count_parameters(&ModelConfig::default());
        let cfg = ModelConfig { embed_dim: 96, heads: vec![3, 6, 12, 24], ..ModelConfig::default() };
        let b = count_parameters(&cfg);
        assert!(b as f64 / a as f64 > 3.5);
    }

    /// Hand summation for C=2, no transformer blocks, S=4, out=3, M=7.
    #[test]
    fn zero_depth_hand_count() {
        let cfg = ModelConfig {
            embed_dim: 2,
            depths: vec![0; 4],
            heads: vec![1; 4],
            ..ModelConfig::default()
        };
        let embed = 2 * 4 * 8 + 2;
        // merges: LN(16c) + 16c*... per stage with c = 2, 4, 8, 16
        let merges: usize = [2usize, 4, 8, 16].iter().map(|&c| 2 * 8 * c + 8 * c * 2 * c).sum();
        let enc0 = 4 * 2 * 27 + 2 * 2 * 27 + 4 * 2;
        let enc1 = 2 * (2 * 2 * 27);
        let enc2 = 2 * (4 * 4 * 27);
        let enc3 = 2 * (8 * 8 * 27);
        let bott = 2 * (32 * 32 * 27);
        let up = |cin: usize, cout: usize| cin * cout * 8 + 2 * cout * cout * 27 + cout * cout * 27 + 2 * cout * cout;
        let ups = up(32, 16) + up(16, 8) + up(8, 4) + up(4, 2) + up(2, 2);
        let head = 3 * 2 + 3;
        assert_eq!(count_parameters(&cfg), embed + merges + enc0 + enc1 + enc2 + enc3 + bott + ups + head);
    }

    #[test]
    fn level_shapes_default() {
        let l = level_shapes(&ModelConfig::default(), [128; 3]);
        let want = [(4, 128), (48, 64), (96, 32), (192, 16), (384, 8), (768, 4)];
        for ((c, g), (wc, wg)) in l.iter().zip(want) {
            assert_eq!((*c, *g), (wc, [wg; 3]));
        }
        assert_eq!(level_shapes(&ModelConfig::default(), [64; 3])[5], (768, [2; 3]));
    }

    #[test]
    fn flops_scale_with_volume() {
        let cfg = ModelConfig::default();
        let small = count_flops(&cfg, [64; 3]);
        let big = count_flops(&cfg, [128; 3]);
        assert!(big > 7 * small && big < 9 * small);
    }
}
