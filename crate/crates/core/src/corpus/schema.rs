use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{IqWaveform, ModScheme, RadarKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationType {
    /// Record holds whole pulses only.
    Pulse,
    /// Record is a slice of a continuous emission.
    Continuous,
    /// Record contains an interfering emitter.
    Interference,
}

impl SegmentationType {
    pub(crate) fn code(self) -> u32 {
        self as u32
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::Pulse),
            1 => Ok(Self::Continuous),
            2 => Ok(Self::Interference),
            c => Err(Error::Corpus(format!("unknown segmentation code {c}"))),
        }
    }
}

/// The 17 standardized record attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    IqData,
    DatasetName,
    SamplingRate,
    DeviceId,
    TransmissionId,
    InferClass,
    SnrDb,
    IsrDb,
    ModulationType,
    RadarWaveformType,
    PriUs,
    PulseTimeDelayUs,
    NumPulses,
    PulseWidthUs,
    BandWidthHz,
    Amplitude,
    RadarSegmentationType,
}

/// Optional attributes in presence-bitmap bit order.
pub const OPTIONAL_ATTRIBUTES: [Attribute; 14] = [
    Attribute::DeviceId,
    Attribute::TransmissionId,
    Attribute::InferClass,
    Attribute::SnrDb,
    Attribute::IsrDb,
    Attribute::ModulationType,
    Attribute::RadarWaveformType,
    Attribute::PriUs,
    Attribute::PulseTimeDelayUs,
    Attribute::NumPulses,
    Attribute::PulseWidthUs,
    Attribute::BandWidthHz,
    Attribute::Amplitude,
    Attribute::RadarSegmentationType,
];

impl Attribute {
    pub const ALL: [Attribute; 17] = [
        Attribute::IqData,
        Attribute::DatasetName,
        Attribute::SamplingRate,
        Attribute::DeviceId,
        Attribute::TransmissionId,
        Attribute::InferClass,
        Attribute::SnrDb,
        Attribute::IsrDb,
        Attribute::ModulationType,
        Attribute::RadarWaveformType,
        Attribute::PriUs,
        Attribute::PulseTimeDelayUs,
        Attribute::NumPulses,
        Attribute::PulseWidthUs,
        Attribute::BandWidthHz,
        Attribute::Amplitude,
        Attribute::RadarSegmentationType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::IqData => "iq_data",
            Attribute::DatasetName => "dataset_name",
            Attribute::SamplingRate => "sampling_rate",
            Attribute::DeviceId => "device_id",
            Attribute::TransmissionId => "transmission_id",
            Attribute::InferClass => "infer_class",
            Attribute::SnrDb => "snr_db",
            Attribute::IsrDb => "isr_db",
            Attribute::ModulationType => "modulation_type",
            Attribute::RadarWaveformType => "radar_waveform_type",
            Attribute::PriUs => "pri_us",
            Attribute::PulseTimeDelayUs => "pulse_time_delay_us",
            Attribute::NumPulses => "num_pulses",
            Attribute::PulseWidthUs => "pulse_width_us",
            Attribute::BandWidthHz => "band_width_hz",
            Attribute::Amplitude => "amplitude",
            Attribute::RadarSegmentationType => "radar_segmentation_type",
        }
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute {s:?}")))
    }
}

/// A scalar attribute value, used for grouping and filtering.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Real(v) => write!(f, "{v}"),
            AttrValue::Text(v) => f.write_str(v),
        }
    }
}

/// One IQ record with the full attribute schema. `sampling_rate` lives on
/// the waveform so the two can never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct IqRecord {
    pub waveform: IqWaveform<f32>,
    pub dataset_name: String,
    pub device_id: Option<i64>,
    pub transmission_id: Option<i64>,
    pub infer_class: Option<i64>,
    pub snr_db: Option<f64>,
    pub isr_db: Option<f64>,
    pub modulation_type: Option<ModScheme>,
    pub radar_waveform_type: Option<RadarKind>,
    pub pri_us: Option<f64>,
    pub pulse_time_delay_us: Option<f64>,
    pub num_pulses: Option<i64>,
    pub pulse_width_us: Option<f64>,
    pub band_width_hz: Option<f64>,
    pub amplitude: Option<f64>,
    pub radar_segmentation_type: Option<SegmentationType>,
}

impl IqRecord {
    pub fn new(waveform: IqWaveform<f32>, dataset_name: impl Into<String>) -> Self {
        Self {
            waveform,
            dataset_name: dataset_name.into(),
            device_id: None,
            transmission_id: None,
            infer_class: None,
            snr_db: None,
            isr_db: None,
            modulation_type: None,
            radar_waveform_type: None,
            pri_us: None,
            pulse_time_delay_us: None,
            num_pulses: None,
            pulse_width_us: None,
            band_width_hz: None,
            amplitude: None,
            radar_segmentation_type: None,
        }
    }

    pub fn sampling_rate(&self) -> f64 {
        self.waveform.sample_rate_hz()
    }

    pub fn len(&self) -> usize {
        self.waveform.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveform.is_empty()
    }

    pub fn attribute(&self, attr: Attribute) -> Option<AttrValue> {
        use AttrValue::*;
        match attr {
            Attribute::IqData => None,
            Attribute::DatasetName => Some(Text(self.dataset_name.clone())),
            Attribute::SamplingRate => Some(Real(self.sampling_rate())),
            Attribute::DeviceId => self.device_id.map(Int),
            Attribute::TransmissionId => self.transmission_id.map(Int),
            Attribute::InferClass => self.infer_class.map(Int),
            Attribute::SnrDb => self.snr_db.map(Real),
            Attribute::IsrDb => self.isr_db.map(Real),
            Attribute::ModulationType => self.modulation_type.map(|m| Text(m.name().into())),
            Attribute::RadarWaveformType => self.radar_waveform_type.map(|k| Text(k.name().into())),
            Attribute::PriUs => self.pri_us.map(Real),
            Attribute::PulseTimeDelayUs => self.pulse_time_delay_us.map(Real),
            Attribute::NumPulses => self.num_pulses.map(Int),
            Attribute::PulseWidthUs => self.pulse_width_us.map(Real),
            Attribute::BandWidthHz => self.band_width_hz.map(Real),
            Attribute::Amplitude => self.amplitude.map(Real),
            Attribute::RadarSegmentationType => self.radar_segmentation_type.map(|s| Int(i64::from(s.code()))),
        }
    }

    /// Bit `i` is set when `OPTIONAL_ATTRIBUTES[i]` is present.
    pub fn presence_bitmap(&self) -> u32 {
        OPTIONAL_ATTRIBUTES
            .iter()
            .enumerate()
            .filter(|(_, a)| self.attribute(**a).is_some())
            .fold(0, |m, (i, _)| m | (1 << i))
    }
}
