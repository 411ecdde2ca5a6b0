//! Layer plans for the auditory and visual streams.
//!
//! Both streams follow the 18-layer residual design with halved widths: a
//! stem convolution plus max pooling, then four stages of residual blocks.
//! The auditory stream is the visual stream with every `k×k` window
//! replaced by a length-`k²` window and every `s×s` stride by `s²`.
//!
//! | stage        | visual k/s/p | auditory k/s/p | channels |
//! |--------------|--------------|----------------|----------|
//! | stem conv    | 7×7 / 2 / 3  | 49 / 4 / 24    | 32       |
//! | stem maxpool | 3×3 / 2 / 1  | 9 / 4 / 4      | none     |
//! | stage 1      | 3×3 / 1 / 1  | 9 / 1 / 4      | 32       |
//! | stage 2–4    | 3×3 / 2,1 / 1| 9 / 4,1 / 4    | 64, 128, 256 |

use crate::error::{Error, Result};
use crate::layers::{BlockSpec, ConvSpec, Window};
use crate::params::ParamSet;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Network scale. `Mini` divides every width by 8, keeps one block per
/// stage and trains on 1024-sample / 32×32 crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Mini,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stem: usize,
    pub stages: [usize; 4],
    pub blocks_per_stage: usize,
}

impl ChannelPlan {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Full => Self {
                stem: 32,
                stages: [32, 64, 128, 256],
                blocks_per_stage: 2,
            },
            Variant::Mini => Self {
                stem: 4,
                stages: [4, 8, 16, 32],
                blocks_per_stage: 1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamArch {
    pub modality: Modality,
    pub stem: ConvSpec,
    pub pool: Window,
    /// `(name, spec)`; names look like `stage2.block1`.
    pub blocks: Vec<(String, BlockSpec)>,
}

impl StreamArch {
    pub fn audio(plan: &ChannelPlan) -> Self {
        Self::build(
            Modality::Audio,
            plan,
            ConvSpec::d1(1, plan.stem, 49, 4, 24),
            Window::d1(9, 4, 4),
            |cin, cout, stride, proj| BlockSpec::d1(cin, cout, 9, if stride > 1 { 4 } else { 1 }, 4, proj),
        )
    }

    pub fn visual(plan: &ChannelPlan, in_channels: usize) -> Self {
        Self::build(
            Modality::Visual,
            plan,
            ConvSpec::d2(in_channels, plan.stem, 7, 2, 3),
            Window::square(3, 2, 1),
            |cin, cout, stride, proj| BlockSpec::d2(cin, cout, 3, stride, 1, proj),
        )
    }

    fn build(
        modality: Modality,
        plan: &ChannelPlan,
        stem: ConvSpec,
        pool: Window,
        block: impl Fn(usize, usize, usize, bool) -> Result<BlockSpec>,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = plan.stem;
        for (s, &cout) in plan.stages.iter().enumerate() {
            for b in 0..plan.blocks_per_stage {
                let downsample = s > 0 && b == 0;
                let stride = if downsample { 2 } else { 1 };
                let projection = downsample || cin != cout;
                let spec = block(cin, cout, stride, projection).expect("plan is consistent");
                blocks.push((format!("stage{}.block{}", s + 1, b + 1), spec));
                cin = cout;
            }
        }
        Self {
            modality,
            stem,
            pool,
            blocks,
        }
    }

    pub fn prefix(&self) -> &'static str {
        self.modality.prefix()
    }

    /// Main-path convolutions: the stem plus two per block.
    pub fn conv_layer_count(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|(_, b)| b.conv2.out_channels)
            .unwrap_or(self.stem.out_channels)
    }

    /// Channel count after the stem and after every block.
    pub fn channel_plan(&self) -> Vec<usize> {
        std::iter::once(self.stem.out_channels)
            .chain(self.blocks.iter().map(|(_, b)| b.conv2.out_channels))
            .collect()
    }

    /// Spatial extent entering global average pooling for a given input extent.
    pub fn pre_gap_extent(&self, input: [usize; 2]) -> Result<[usize; 2]> {
        let mut e = self.stem.window.output_extent(input)?;
        e = self.pool.output_extent(e)?;
        for (_, b) in &self.blocks {
            e = b.conv1.window.output_extent(e)?;
            e = b.conv2.window.output_extent(e)?;
        }
        Ok(e)
    }

    fn manifest(&self, out: &mut Vec<ManifestEntry>) {
        let p = self.prefix();
        out.push(ManifestEntry::he(format!("{p}.stem.conv.w"), self.stem.weight_shape(), self.stem.fan_in()));
        push_bn(out, &format!("{p}.stem.bn"), self.stem.out_channels);
        for (name, b) in &self.blocks {
            for (local, shape) in b.param_shapes() {
                let full = format!("{p}.{name}.{local}");
                let entry = if local.ends_with(".w") {
                    let fan_in = shape[1..].iter().product();
                    ManifestEntry::he(full, shape, fan_in)
                } else {
                    ManifestEntry::bn(full, shape)
                };
                out.push(entry);
            }
        }
    }
}

fn push_bn(out: &mut Vec<ManifestEntry>, prefix: &str, channels: usize) {
    for s in ["gamma", "beta", "running_mean", "running_var"] {
        out.push(ManifestEntry::bn(format!("{prefix}.{s}"), vec![channels]));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)).
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ManifestEntry {
    fn he(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            init: Init::He { fan_in },
        }
    }

    fn bn(name: String, shape: Vec<usize>) -> Self {
        let init = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Init::Ones
        } else {
            Init::Zeros
        };
        Self { name, shape, init }
    }
}

/// The complete audiovisual network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub variant: Variant,
    pub audio: StreamArch,
    pub visual: StreamArch,
    /// Width of the fusion layer output (5 traits, or 1 for a per-trait head).
    pub outputs: usize,
    /// Training crop lengths.
    pub audio_crop: usize,
    pub frame_crop: usize,
}

pub const TRAITS: usize = 5;

impl Architecture {
    pub fn new(variant: Variant, outputs: usize) -> Self {
        let plan = ChannelPlan::for_variant(variant);
        let (audio_crop, frame_crop) = match variant {
            Variant::Full => (50176, 224),
            Variant::Mini => (1024, 32),
        };
        Self {
            variant,
            audio: StreamArch::audio(&plan),
            visual: StreamArch::visual(&plan, 3),
            outputs,
            audio_crop,
            frame_crop,
        }
    }

    pub fn full() -> Self {
        Self::new(Variant::Full, TRAITS)
    }

    pub fn mini() -> Self {
        Self::new(Variant::Mini, TRAITS)
    }

    pub fn with_outputs(&self, outputs: usize) -> Self {
        Self {
            outputs,
            ..self.clone()
        }
    }

    pub fn fusion_inputs(&self) -> usize {
        self.audio.out_channels() + self.visual.out_channels()
    }

    /// Shortest audio the auditory stream accepts: its total stride.
    pub fn min_audio_len(&self) -> usize {
        let mut stride = self.audio.stem.window.stride[0] * self.audio.pool.stride[0];
        for (_, b) in &self.audio.blocks {
            stride *= b.conv1.window.stride[0];
        }
        stride
    }

    /// Every tensor of the network in canonical order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        self.audio.manifest(&mut out);
        self.visual.manifest(&mut out);
        let f = self.fusion_inputs();
        out.push(ManifestEntry::he("fusion.w".into(), vec![f, self.outputs], f));
        out.push(ManifestEntry {
            name: "fusion.b".into(),
            shape: vec![self.outputs],
            init: Init::Zeros,
        });
        out
    }

    /// Checks that `params` holds exactly the manifest, in order.
    pub fn validate<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let manifest = self.manifest();
        if manifest.len() != params.len() {
            return Err(Error::ManifestMismatch(format!(
                "expected {} tensors, found {}",
                manifest.len(),
                params.len()
            )));
        }
        for (entry, (name, t)) in manifest.iter().zip(params.iter()) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::ManifestMismatch(format!(
                    "expected {} {:?}, found {name} {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// The architecture whose manifest `params` matches, among the full and
    /// miniature networks with any head width.
    pub fn detect<T: Scalar>(params: &ParamSet<T>) -> Result<Self> {
        let outputs = params
            .get("fusion.b")
            .map(|b| b.len())
            .map_err(|_| Error::ManifestMismatch("no fusion.b tensor".into()))?;
        for variant in [Variant::Full, Variant::Mini] {
            let arch = Self::new(variant, outputs);
            if arch.validate(params).is_ok() {
                return Ok(arch);
            }
        }
        Err(Error::ManifestMismatch(
            "parameters match neither the full nor the miniature network".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_conv_layers_per_stream() {
        let a = Architecture::full();
        assert_eq!(a.audio.conv_layer_count(), 17);
        assert_eq!(a.visual.conv_layer_count(), 17);
        assert_eq!(a.audio.channel_plan(), vec![32, 32, 32, 64, 64, 128, 128, 256, 256]);
        assert_eq!(a.fusion_inputs(), 512);
        let kinds: Vec<bool> = a.visual.blocks.iter().map(|(_, b)| b.is_projection()).collect();
        assert_eq!(kinds, vec![false, false, true, false, true, false, true, false]);
    }

    #[test]
    fn mini_plan() {
        let a = Architecture::mini();
        assert_eq!(a.audio.conv_layer_count(), 9);
        assert_eq!(a.visual.channel_plan(), vec![4, 4, 8, 16, 32]);
        assert_eq!(a.fusion_inputs(), 64);
        assert_eq!(a.min_audio_len(), 1024);
        assert_eq!(a.audio.pre_gap_extent([1024, 1]).unwrap(), [1, 1]);
        assert_eq!(a.visual.pre_gap_extent([32, 32]).unwrap(), [1, 1]);
    }

    #[test]
    fn min_audio_is_total_stride() {
        assert_eq!(Architecture::full().min_audio_len(), 1024);
        let a = Architecture::full();
        assert_eq!(a.audio.pre_gap_extent([1024, 1]).unwrap(), [1, 1]);
    }
}
