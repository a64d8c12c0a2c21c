//! Parameter, multiply-accumulate and receptive-field accounting.

use serde::Serialize;

use crate::ops::{Conv2dSpec, Padding};

use super::config::ModelConfig;

/// Closed-form count of learnable scalars.
pub fn count_params(c: &ModelConfig) -> usize {
    let d = c.hidden;
    let k_e = c.encoder().kernel;
    let encoder = c.in_channels() * d * k_e * k_e + d + 2 * d;
    let block = d * c.kernel_local * c.kernel_local
        + d
        + d * c.kernel_global * c.kernel_global
        + d
        + 2 * d
        + d * d
        + d
        + 2 * d;
    let decoder = c.shuffled_channels() * c.out_channels() + c.out_channels();
    encoder + c.depth * block + decoder
}

/// Multiply-accumulates of one forward pass at batch size 1.
pub fn count_flops(c: &ModelConfig) -> u64 {
    count_flops_batch(c, 1)
}

pub fn count_flops_batch(c: &ModelConfig, batch: usize) -> u64 {
    layer_table(c).iter().map(|l| l.macs).sum::<u64>() * batch as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    /// Multiply-accumulates at batch size 1.
    pub macs: u64,
    /// Output shape `[channels, height, width]` at batch size 1.
    pub output: [usize; 3],
}

fn conv_layer(name: String, kind: &'static str, spec: Conv2dSpec, input: (usize, usize)) -> LayerInfo {
    let oh = spec.output_extent(input.0).unwrap_or(0);
    let ow = spec.output_extent(input.1).unwrap_or(0);
    LayerInfo {
        name,
        kind,
        params: spec.param_count(),
        macs: spec.macs(oh, ow),
        output: [spec.out_channels, oh, ow],
    }
}

fn norm_layer(name: String, channels: usize, hw: (usize, usize)) -> LayerInfo {
    LayerInfo {
        name,
        kind: "batchnorm",
        params: 2 * channels,
        macs: 0,
        output: [channels, hw.0, hw.1],
    }
}

/// Every parameterized or reshaping stage in execution order.
pub fn layer_table(c: &ModelConfig) -> Vec<LayerInfo> {
    let d = c.hidden;
    let enc = c.encoder();
    let encoder = Conv2dSpec::new(c.in_channels(), d, enc.kernel)
        .with_stride(enc.stride)
        .with_padding(Padding::Explicit(enc.padding));
    let mut rows = vec![conv_layer("encoder.conv".into(), "conv", encoder, (c.height, c.width))];
    let hw = (rows[0].output[1], rows[0].output[2]);
    rows.push(norm_layer("encoder.norm".into(), d, hw));
    for i in 0..c.depth {
        let local = Conv2dSpec::depthwise(d, c.kernel_local, 1);
        let dilated = Conv2dSpec::depthwise(d, c.kernel_global, c.dilation);
        let pointwise = Conv2dSpec::new(d, d, 1);
        rows.push(conv_layer(format!("blocks.{i}.local"), "depthwise", local, hw));
        rows.push(conv_layer(format!("blocks.{i}.dilated"), "depthwise", dilated, hw));
        rows.push(norm_layer(format!("blocks.{i}.spatial_norm"), d, hw));
        rows.push(conv_layer(format!("blocks.{i}.pointwise"), "pointwise", pointwise, hw));
        rows.push(norm_layer(format!("blocks.{i}.channel_norm"), d, hw));
    }
    let shuffled = [c.shuffled_channels(), hw.0 * c.patch, hw.1 * c.patch];
    rows.push(LayerInfo {
        name: "decoder.shuffle".into(),
        kind: "pixel_shuffle",
        params: 0,
        macs: 0,
        output: shuffled,
    });
    let reassemble = Conv2dSpec::new(c.shuffled_channels(), c.out_channels(), 1);
    rows.push(conv_layer(
        "decoder.reassemble".into(),
        "conv",
        reassemble,
        (shuffled[1], shuffled[2]),
    ));
    rows
}

/// Receptive field after `blocks` mixer blocks, in patch units.
pub fn receptive_field_patches(c: &ModelConfig, blocks: usize) -> usize {
    1 + blocks * ((c.kernel_local - 1) + c.dilation * (c.kernel_global - 1))
}

/// Receptive field after `blocks` mixer blocks, in input pixels.
pub fn receptive_field_pixels(c: &ModelConfig, blocks: usize) -> usize {
    c.encoder().kernel + (receptive_field_patches(c, blocks) - 1) * c.patch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_config() -> ModelConfig {
        ModelConfig {
            t_in: 1,
            t_out: 1,
            channels: 1,
            height: 8,
            width: 8,
            hidden: 4,
            depth: 3,
            patch: 2,
            overlap: 0,
            kernel_local: 3,
            kernel_global: 3,
            dilation: 3,
        }
    }

    #[test]
    fn hand_summed_count() {
        // encoder 1·4·2·2 + 4, norm 8
        let encoder = 16 + 4 + 8;
        // two depthwise 3×3 (36 + 4 each), norm 8, pointwise 16 + 4, norm 8
        let block = 40 + 40 + 8 + 20 + 8;
        // d/p² = 1 → 1 output channel: 1 + 1
        let decoder = 2;
        assert_eq!(count_params(&hand_config()), encoder + 3 * block + decoder);
    }

    #[test]
    fn table_agrees_with_closed_form() {
        let c = hand_config();
        let total: usize = layer_table(&c).iter().map(|l| l.params).sum();
        assert_eq!(total, count_params(&c));
    }

    #[test]
    fn pointwise_macs() {
        let c = ModelConfig::default();
        let table = layer_table(&c);
        let pw = table.iter().find(|l| l.name == "blocks.0.pointwise").unwrap();
        assert_eq!(pw.macs, (1400 * 1400 * 1024) as u64);
    }

    #[test]
    fn spatial_scaling() {
        let c = hand_config();
        let big = ModelConfig {
            height: 16,
            width: 16,
            ..c
        };
        assert_eq!(count_flops(&big), 4 * count_flops(&c));
        assert_eq!(count_params(&big), count_params(&c));
        assert_eq!(count_flops_batch(&c, 3), 3 * count_flops(&c));
    }

    #[test]
    fn receptive_field_growth() {
        let c = ModelConfig::default();
        assert_eq!(receptive_field_patches(&c, 0), 1);
        assert_eq!(receptive_field_patches(&c, 2) - receptive_field_patches(&c, 1), 2 + 3 * 6);
        assert_eq!(receptive_field_pixels(&c, 0), 4);
    }

    #[test]
    fn shuffle_stage_has_no_params() {
        let t = layer_table(&ModelConfig::default());
        let s = t.iter().find(|l| l.kind == "pixel_shuffle").unwrap();
        assert_eq!(s.params, 0);
        assert_eq!(s.output, [350, 64, 64]);
    }
}
