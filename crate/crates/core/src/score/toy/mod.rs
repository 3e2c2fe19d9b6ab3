//! Desk-scale stand-in for a pretrained backbone: a synthetic HDR scene
//! family, a small convolutional noise predictor, and its file format.

mod dataset;
mod net;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::score::{make_schedule, Condition, NoiseSchedule, ScheduleKind, ScoreModel, ValueDomain};
use crate::score::{LINEAR_BETA_END, LINEAR_BETA_START};

pub use dataset::{generate_toy_dataset, ToyExample, ToySceneSpec};
pub use net::ToyArch;
pub use train::{train_toy_denoiser, train_toy_denoiser_with, TrainOptions, TrainReport};

use net::ToyNet;

const MAGIC: &[u8; 8] = b"BFTOYv1\0";
pub const FORMAT_VERSION: u32 = 1;

/// HWC `f64` image to planar CHW `f32`.
pub(crate) fn image_to_planar(img: &Image) -> Vec<f32> {
    let (h, w, c) = img.shape();
    let mut out = vec![0f32; h * w * c];
    for (i, v) in img.data().iter().enumerate() {
        let ch = i % c;
        let p = i / c;
        out[ch * h * w + p] = *v as f32;
    }
    out
}

fn planar_to_image(p: &[f32], shape: Shape) -> Image {
    let (h, w, c) = shape;
    Image::from_fn(h, w, c, |y, x, ch| p[ch * h * w + y * w + x] as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dataset_size: usize,
    pub heldout_size: usize,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScheduleHeader {
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ToyArch,
    value_domain: ValueDomain,
    schedule: ScheduleHeader,
    training: Option<TrainingInfo>,
    #[serde(default)]
    scene: Option<ToySceneSpec>,
}

/// Trained toy noise predictor. Operates on `[-1, 1]` values.
#[derive(Debug, Clone)]
pub struct ToyModel {
    net: ToyNet,
    schedule: NoiseSchedule,
    training: Option<TrainingInfo>,
    scene: Option<ToySceneSpec>,
}

impl ToyModel {
    pub(crate) fn from_parts(net: ToyNet, schedule: NoiseSchedule, training: Option<TrainingInfo>) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            net,
            schedule,
            training,
            scene: None,
        })
    }

    /// Untrained network with freshly initialised weights.
    pub fn untrained(arch: ToyArch, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::from_parts(ToyNet::init(arch, &mut rng), schedule, None)
    }

    pub fn arch(&self) -> &ToyArch {
        &self.net.arch
    }

    pub fn training(&self) -> Option<&TrainingInfo> {
        self.training.as_ref()
    }

    pub fn scene(&self) -> Option<&ToySceneSpec> {
        self.scene.as_ref()
    }

    /// Records the scene family the model was trained on in the file header.
    pub fn set_scene(&mut self, scene: ToySceneSpec) {
        self.scene = Some(scene);
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.net.arch.clone(),
            value_domain: ValueDomain::SignedUnit,
            schedule: ScheduleHeader {
                kind: self.schedule.kind,
                steps: self.schedule.len(),
                beta_start: LINEAR_BETA_START,
                beta_end: LINEAR_BETA_END,
            },
            training: self.training.clone(),
            scene: self.scene.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(json.len() + 4 * self.net.params.len() + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.net.layout.tensors.len() as u32).to_le_bytes());
        for t in &self.net.layout.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &self.net.params[t.offset..t.offset + t.len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8).map_err(|_| bad("file too short"))? != MAGIC {
            return Err(bad("not a toy model file"));
        }
        let version = r.u32().map_err(|_| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = r.u32().map_err(|_| bad("truncated header"))? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen).map_err(|_| bad("truncated header"))?)
            .map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.value_domain != ValueDomain::SignedUnit {
            return Err(bad("toy models operate on [-1, 1]"));
        }
        if header.schedule.beta_start != LINEAR_BETA_START || header.schedule.beta_end != LINEAR_BETA_END {
            return Err(bad("schedule constants differ from this build"));
        }
        let layout = header.arch.layout();
        let count = r.u32().map_err(|_| bad("truncated tensor table"))? as usize;
        if count != layout.tensors.len() {
            return Err(bad("tensor count does not match architecture"));
        }
        let mut params = vec![0f32; layout.total];
        for t in &layout.tensors {
            let nlen = r.u32().map_err(|_| bad("truncated tensor"))? as usize;
            let name = r.take(nlen).map_err(|_| bad("truncated tensor"))?;
            if name != t.name.as_bytes() {
                return Err(bad(&format!("expected tensor {}", t.name)));
            }
            let ndim = r.u32().map_err(|_| bad("truncated tensor"))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32().map_err(|_| bad("truncated tensor"))? as usize);
            }
            if dims != t.shape {
                return Err(bad(&format!("tensor {} has shape {dims:?}", t.name)));
            }
            let raw = r.take(4 * t.len).map_err(|_| bad("truncated tensor data"))?;
            for (dst, chunk) in params[t.offset..t.offset + t.len].iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite weights"));
        }
        let schedule = make_schedule(header.schedule.steps, header.schedule.kind)?;
        let net = ToyNet::from_params(header.arch, params)?;
        let mut model = Self::from_parts(net, schedule, header.training)?;
        model.scene = header.scene;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().map_err(|_| ())?))
    }
}

impl ScoreModel for ToyModel {
    fn predict_eps(&self, x_t: &Image, _condition: Option<&Condition>, t: usize) -> Result<Image> {
        let a = &self.net.arch;
        let shape = (a.height, a.width, a.in_channels);
        if x_t.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: x_t.shape(),
            });
        }
        if t >= self.schedule.len() {
            return Err(Error::Contract(format!("timestep {t} outside schedule")));
        }
        let out = self.net.forward(&image_to_planar(x_t), t, self.schedule.len());
        Ok(planar_to_image(&out, shape))
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn value_domain(&self) -> ValueDomain {
        ValueDomain::SignedUnit
    }

    fn resolution(&self) -> Option<Shape> {
        let a = &self.net.arch;
        Some((a.height, a.width, a.in_channels))
    }

    fn describe(&self) -> String {
        let a = &self.net.arch;
        format!(
            "toy conv denoiser {}x{}x{}, {} hidden channels, {} parameters, {} {}-step schedule",
            a.height,
            a.width,
            a.in_channels,
            a.hidden,
            self.parameter_count(),
            self.schedule.kind,
            self.schedule.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModel {
        let arch = ToyArch {
            hidden: 6,
            dilations: vec![1, 2],
            ..ToyArch::new(8, 3)
        };
        ToyModel::untrained(arch, make_schedule(20, ScheduleKind::LinearBeta).unwrap(), 4).unwrap()
    }

    #[test]
    fn planar_round_trip() {
        let img = Image::from_fn(3, 4, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        assert_eq!(planar_to_image(&image_to_planar(&img), img.shape()), img);
    }

    #[test]
    fn serialisation_round_trip() {
        let m = small();
        let bytes = m.to_bytes();
        let back = ToyModel::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.net.params, m.net.params);
        assert_eq!(back.schedule, m.schedule);
        assert_eq!(back.to_bytes(), bytes);
        let x = Image::from_fn(8, 8, 3, |y, x, c| ((y + 2 * x + c) as f64 * 0.1).sin());
        assert_eq!(m.predict_eps(&x, None, 3).unwrap(), back.predict_eps(&x, None, 3).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = small().to_bytes();
        let p = Path::new("mem");
        assert!(ToyModel::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(ToyModel::from_bytes(b"nonsense", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ToyModel::from_bytes(&extra, p).is_err());
    }

    #[test]
    fn shape_is_checked() {
        assert!(small().predict_eps(&Image::zeros(4, 4, 3), None, 0).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let spec = ToySceneSpec {
            size: 8,
            ..Default::default()
        };
        let data = generate_toy_dataset(&spec, 24, 2).unwrap();
        let schedule = make_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let opts = TrainOptions {
            epochs: 15,
            hidden: 8,
            holdout: 4,
            batch_size: 8,
            ..Default::default()
        };
        let (m, rep) = train_toy_denoiser_with(&data, &schedule, &opts).unwrap();
        assert!(rep.final_heldout_loss < rep.initial_heldout_loss, "{rep:?}");
        let (m2, _) = train_toy_denoiser_with(&data, &schedule, &opts).unwrap();
        assert_eq!(m.to_bytes(), m2.to_bytes());
        assert!(train_toy_denoiser(&[], &schedule, 1, 0).is_err());
    }
}
