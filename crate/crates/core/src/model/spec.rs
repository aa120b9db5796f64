use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::data::PatchGeometry;
use crate::error::{Error, Result};
use crate::layers::DenseBlockSpec;

/// Which network is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Two extractors, dense blocks, two scored stages.
    Proposed,
    /// Dense blocks replaced by plain chains with the same channel schedule.
    NonDense,
    /// One extractor over all four modalities, 4-class head only.
    NonHierarchical,
    /// Stage 2 removed; smaller input, same output extent.
    SingleScale,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Proposed,
        Variant::NonDense,
        Variant::NonHierarchical,
        Variant::SingleScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::NonDense => "non_dense",
            Variant::NonHierarchical => "non_hierarchical",
            Variant::SingleScale => "single_scale",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Declarative network architecture.
///
/// Widths (initial channels, growth rate) are free; the depth-related fields
/// fix the geometry. The input extent is derived so that the deepest scored
/// stage lands exactly on `output_extent`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub initial_channels: usize,
    pub growth_rate: usize,
    pub layers_per_stage: usize,
    pub kernel: usize,
    pub output_extent: usize,
    pub binary_classes: usize,
    pub full_classes: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::proposed()
    }
}

impl NetworkSpec {
    /// 24 initial kernels, two dense blocks of six 3^3 layers with growth 12,
    /// 38^3 input, 12^3 output.
    pub fn proposed() -> Self {
        NetworkSpec {
            variant: Variant::Proposed,
            initial_channels: 24,
            growth_rate: 12,
            layers_per_stage: 6,
            kernel: 3,
            output_extent: 12,
            binary_classes: 2,
            full_classes: 4,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Narrow network with the full depth (and hence the full 38^3 -> 12^3
    /// geometry and receptive fields). Used wherever only the topology matters.
    pub fn narrow(variant: Variant) -> Self {
        NetworkSpec {
            initial_channels: 4,
            growth_rate: 2,
            ..Self::proposed().with_variant(variant)
        }
    }

    pub fn stages(&self) -> usize {
        match self.variant {
            Variant::SingleScale => 1,
            _ => 2,
        }
    }

    /// Total valid-convolution shrinkage along each axis.
    pub fn shrinkage(&self) -> usize {
        (self.kernel - 1) * (1 + self.layers_per_stage * self.stages())
    }

    pub fn input_extent(&self) -> usize {
        self.output_extent + self.shrinkage()
    }

    /// Voxels between the input patch border and the output block.
    pub fn margin(&self) -> usize {
        self.shrinkage() / 2
    }

    /// Dense block of `stage` (1-based).
    pub fn patch_geometry(&self) -> PatchGeometry {
        PatchGeometry {
            input_extent: self.input_extent(),
            output_extent: self.output_extent,
        }
    }

    pub fn dense_block(&self, stage: usize) -> DenseBlockSpec {
        DenseBlockSpec {
            num_layers: self.layers_per_stage,
            growth_rate: self.growth_rate,
            kernel: self.kernel,
            input_channels: self.stage_channels(stage - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.initial_channels == 0 || self.output_extent == 0 || self.layers_per_stage == 0 {
            return Err(Error::invalid("channels, layers and output extent must be >= 1"));
        }
        if self.binary_classes != 2 || self.full_classes != 4 {
            return Err(Error::invalid("heads must have 2 and 4 classes"));
        }
        if self.variant == Variant::NonDense && self.growth_rate == 0 {
            return Err(Error::invalid("non-dense chains need a positive channel step"));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsed back by [`NetworkSpec::from_text`].
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\ninitial_channels = {}\ngrowth_rate = {}\nlayers_per_stage = {}\nkernel = {}\noutput_extent = {}\nbinary_classes = {}\nfull_classes = {}\n",
            self.variant,
            self.initial_channels,
            self.growth_rate,
            self.layers_per_stage,
            self.kernel,
            self.output_extent,
            self.binary_classes,
            self.full_classes
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        Self::from_key_values(&kv, "")
    }

    /// Reads `prefix`-ed keys, falling back to the proposed defaults.
    pub fn from_key_values(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::proposed();
        let key = |k: &str| format!("{prefix}{k}");
        let spec = NetworkSpec {
            variant: kv.get_or(&key("variant"), d.variant)?,
            initial_channels: kv.get_or(&key("initial_channels"), d.initial_channels)?,
            growth_rate: kv.get_or(&key("growth_rate"), d.growth_rate)?,
            layers_per_stage: kv.get_or(&key("layers_per_stage"), d.layers_per_stage)?,
            kernel: kv.get_or(&key("kernel"), d.kernel)?,
            output_extent: kv.get_or(&key("output_extent"), d.output_extent)?,
            binary_classes: kv.get_or(&key("binary_classes"), d.binary_classes)?,
            full_classes: kv.get_or(&key("full_classes"), d.full_classes)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// First 8 bytes of the SHA-256 of the canonical text, little-endian.
    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
