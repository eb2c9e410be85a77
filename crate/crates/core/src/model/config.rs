use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths of the two branches and the decoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout_rate: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in_a: 1024,
            d_in_v: 512,
            d_model: 512,
            d_hidden: 512,
            d_out: 64,
            dropout_rate: 0.1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_in_a", self.d_in_a),
            ("d_in_v", self.d_in_v),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        crate::nn::layers::check_dropout_rate(self.dropout_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEmbedding {
    ClipOnly,
    ClapOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    AudioOnly,
    VisualOnly,
    Both,
}

/// Which components of the composite loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub reg: bool,
    pub ce: bool,
    pub rec: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossTerms {
    pub const ALL: Self = Self {
        reg: true,
        ce: true,
        rec: true,
    };
    pub const REG_ONLY: Self = Self {
        reg: true,
        ce: false,
        rec: false,
    };
    pub const REG_CE: Self = Self {
        reg: true,
        ce: true,
        rec: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.reg || self.ce || self.rec)
    }

    pub fn to_bits(self) -> u8 {
        u8::from(self.reg) | (u8::from(self.ce) << 1) | (u8::from(self.rec) << 2)
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        if bits & !0b111 != 0 {
            return None;
        }
        Some(Self {
            reg: bits & 1 != 0,
            ce: bits & 2 != 0,
            rec: bits & 4 != 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub label_embedding: LabelEmbedding,
    pub modality: Modality,
    pub loss_terms: LossTerms,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            label_embedding: LabelEmbedding::Both,
            modality: Modality::Both,
            loss_terms: LossTerms::ALL,
        }
    }
}

impl AblationSwitches {
    /// The label-embedding rows (both modalities) followed by the modality
    /// rows (matching text embedding). `Both/Both` appears in each group.
    pub const TABLE_CONFIGS: [(LabelEmbedding, Modality); 6] = [
        (LabelEmbedding::ClipOnly, Modality::Both),
        (LabelEmbedding::ClapOnly, Modality::Both),
        (LabelEmbedding::Both, Modality::Both),
        (LabelEmbedding::ClapOnly, Modality::AudioOnly),
        (LabelEmbedding::ClipOnly, Modality::VisualOnly),
        (LabelEmbedding::Both, Modality::Both),
    ];

    pub fn validate(&self) -> Result<()> {
        if self.loss_terms.is_empty() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        match (self.modality, self.label_embedding) {
            (Modality::Both, _)
            | (Modality::AudioOnly, LabelEmbedding::ClapOnly)
            | (Modality::VisualOnly, LabelEmbedding::ClipOnly) => Ok(()),
            (m, l) => Err(Error::Config(format!(
                "modality {m:?} must be paired with its own text embedding, got {l:?}"
            ))),
        }
    }

    pub fn uses_visual(&self) -> bool {
        self.modality != Modality::AudioOnly
    }

    pub fn uses_audio(&self) -> bool {
        self.modality != Modality::VisualOnly
    }

    pub fn uses_clip(&self) -> bool {
        self.label_embedding != LabelEmbedding::ClapOnly
    }

    pub fn uses_clap(&self) -> bool {
        self.label_embedding != LabelEmbedding::ClipOnly
    }

    /// Input width of the audio-visual encoder.
    pub fn av_width(&self, dims: &ModelDims) -> usize {
        usize::from(self.uses_visual()) * dims.d_in_v + usize::from(self.uses_audio()) * dims.d_in_a
    }

    /// Input width of the text encoder. CLIP text lives in the visual feature
    /// space and CLAP text in the audio feature space.
    pub fn text_width(&self, dims: &ModelDims) -> usize {
        usize::from(self.uses_clip()) * dims.d_in_v + usize::from(self.uses_clap()) * dims.d_in_a
    }

    pub(crate) fn label_code(&self) -> u8 {
        match self.label_embedding {
            LabelEmbedding::ClipOnly => 0,
            LabelEmbedding::ClapOnly => 1,
            LabelEmbedding::Both => 2,
        }
    }

    pub(crate) fn modality_code(&self) -> u8 {
        match self.modality {
            Modality::AudioOnly => 0,
            Modality::VisualOnly => 1,
            Modality::Both => 2,
        }
    }

    pub(crate) fn from_codes(label: u8, modality: u8, loss: u8) -> Option<Self> {
        let label_embedding = match label {
            0 => LabelEmbedding::ClipOnly,
            1 => LabelEmbedding::ClapOnly,
            2 => LabelEmbedding::Both,
            _ => return None,
        };
        let modality = match modality {
            0 => Modality::AudioOnly,
            1 => Modality::VisualOnly,
            2 => Modality::Both,
            _ => return None,
        };
        Some(Self {
            label_embedding,
            modality,
            loss_terms: LossTerms::from_bits(loss)?,
        })
    }
}
