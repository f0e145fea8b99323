//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic "MSEG" | version u16
//! spec:      in_h u32 | in_w u32 | in_c u32 | stages u32 | (convs u32, width u32)*
//!            | decoders u32 | classes u32 | width_num u32 | width_den u32
//! meta:      iteration u64 | seed u64 | has_schedule u8
//!            [ lr f64 | best f64 | bad_windows u32 | window_sum f64 | window_len u32 ]
//! tensors:   count u32 | (name_len u16, name utf-8, len u32, f32 * len)*
//! optimizer: has_adam u8 [ t u64 | count u32 | (len u32, m f32 * len, v f32 * len)* ]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec, StageSpec, WidthMultiplier};
use crate::optim::{AdamState, ScheduleState};

pub const MAGIC: &[u8; 4] = b"MSEG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub iteration: u64,
    pub seed: u64,
    pub schedule: Option<ScheduleState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<AdamState>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            tensors: net
                .state_tensors()
                .into_iter()
                .map(|(name, data)| NamedTensor { name, data: data.to_vec() })
                .collect(),
            optimizer: None,
            meta: TrainingMeta::default(),
        }
    }

    /// Rebuild the network, checking every tensor's name and length.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::build(self.spec.clone(), 0)?;
        {
            let mut slots = net.state_tensors_mut();
            if slots.len() != self.tensors.len() {
                return Err(Error::SpecMismatch(format!(
                    "checkpoint holds {} tensors, network expects {}",
                    self.tensors.len(),
                    slots.len()
                )));
            }
            for ((name, slot), t) in slots.iter_mut().zip(&self.tensors) {
                if *name != t.name || slot.len() != t.data.len() {
                    return Err(Error::SpecMismatch(format!(
                        "tensor {:?} ({} values) does not match network slot {name:?} ({} values)",
                        t.name,
                        t.data.len(),
                        slot.len()
                    )));
                }
                slot.copy_from_slice(&t.data);
            }
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let put_u32 = |w: &mut Vec<u8>, v: usize| w.extend_from_slice(&(v as u32).to_le_bytes());
        let s = &self.spec;
        put_u32(&mut w, s.input_size.0);
        put_u32(&mut w, s.input_size.1);
        put_u32(&mut w, s.input_channels);
        put_u32(&mut w, s.encoder_stages.len());
        for st in &s.encoder_stages {
            put_u32(&mut w, st.convs);
            put_u32(&mut w, st.width);
        }
        put_u32(&mut w, s.decoder_count);
        put_u32(&mut w, s.classes_per_decoder);
        put_u32(&mut w, s.width_multiplier.num() as usize);
        put_u32(&mut w, s.width_multiplier.den() as usize);

        w.extend_from_slice(&self.meta.iteration.to_le_bytes());
        w.extend_from_slice(&self.meta.seed.to_le_bytes());
        match &self.meta.schedule {
            None => w.push(0),
            Some(st) => {
                w.push(1);
                w.extend_from_slice(&st.lr.to_le_bytes());
                w.extend_from_slice(&st.best.to_le_bytes());
                w.extend_from_slice(&st.bad_windows.to_le_bytes());
                w.extend_from_slice(&st.window_sum.to_le_bytes());
                w.extend_from_slice(&st.window_len.to_le_bytes());
            }
        }

        put_u32(&mut w, self.tensors.len());
        for t in &self.tensors {
            w.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            w.extend_from_slice(t.name.as_bytes());
            put_f32s(&mut w, &t.data);
        }

        match &self.optimizer {
            None => w.push(0),
            Some(adam) => {
                w.push(1);
                w.extend_from_slice(&adam.t.to_le_bytes());
                put_u32(&mut w, adam.m.len());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_u32(&mut w, m.len());
                    m.iter().chain(v).for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic tag, not a checkpoint"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let input_size = (r.u32()? as usize, r.u32()? as usize);
        let input_channels = r.u32()? as usize;
        let stages = r.u32()? as usize;
        if stages > 64 {
            return Err(r.error(format!("implausible stage count {stages}")));
        }
        let encoder_stages = (0..stages)
            .map(|_| {
                Ok(StageSpec {
                    convs: r.u32()? as usize,
                    width: r.u32()? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_count = r.u32()? as usize;
        let classes_per_decoder = r.u32()? as usize;
        let (num, den) = (r.u32()?, r.u32()?);
        let width_multiplier = WidthMultiplier::new(num, den).map_err(|e| r.error(e.to_string()))?;
        let spec = NetworkSpec {
            input_size,
            input_channels,
            encoder_stages,
            decoder_count,
            classes_per_decoder,
            width_multiplier,
        };

        let iteration = r.u64()?;
        let seed = r.u64()?;
        let schedule = match r.u8()? {
            0 => None,
            1 => Some(ScheduleState {
                lr: r.f64()?,
                best: r.f64()?,
                bad_windows: r.u32()?,
                window_sum: r.f64()?,
                window_len: r.u32()?,
            }),
            f => return Err(r.error(format!("bad schedule flag {f}"))),
        };

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.error("tensor name is not utf-8"))?;
            let data = r.f32s()?;
            tensors.push(NamedTensor { name, data });
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let n = r.u32()? as usize;
                let (mut m, mut v) = (Vec::with_capacity(n.min(4096)), Vec::with_capacity(n.min(4096)));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    m.push(r.f32_run(len)?);
                    v.push(r.f32_run(len)?);
                }
                Some(AdamState { t, m, v })
            }
            f => return Err(r.error(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            spec,
            tensors,
            optimizer,
            meta: TrainingMeta {
                iteration,
                seed,
                schedule,
            },
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_f32s(w: &mut Vec<u8>, data: &[f32]) {
    w.extend_from_slice(&(data.len() as u32).to_le_bytes());
    data.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32_run(&mut self, len: usize) -> Result<Vec<f32>> {
        let raw = self.take(len.checked_mul(4).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let len = self.u32()? as usize;
        self.f32_run(len)
    }
}

impl Network {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Checkpoint::from_network(self).save(path)
    }

    /// Load a network from the spec embedded in the file.
    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        Checkpoint::load(path)?.to_network()
    }

    /// Load a checkpoint, rejecting it unless its embedded spec equals `expected`.
    pub fn load_checkpoint_matching(path: &Path, expected: &NetworkSpec) -> Result<Network> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.spec != *expected {
            return Err(Error::SpecMismatch(describe_mismatch(&ckpt.spec, expected)));
        }
        ckpt.to_network()
    }
}

fn describe_mismatch(found: &NetworkSpec, expected: &NetworkSpec) -> String {
    let mut diffs = Vec::new();
    if found.input_size != expected.input_size {
        diffs.push(format!("input_size {:?} != {:?}", found.input_size, expected.input_size));
    }
    if found.input_channels != expected.input_channels {
        diffs.push(format!("input_channels {} != {}", found.input_channels, expected.input_channels));
    }
    if found.encoder_stages != expected.encoder_stages {
        diffs.push("encoder_stages differ".to_string());
    }
    if found.decoder_count != expected.decoder_count {
        diffs.push(format!("decoder_count {} != {}", found.decoder_count, expected.decoder_count));
    }
    if found.classes_per_decoder != expected.classes_per_decoder {
        diffs.push(format!(
            "classes_per_decoder {} != {}",
            found.classes_per_decoder, expected.classes_per_decoder
        ));
    }
    if found.width_multiplier != expected.width_multiplier {
        diffs.push(format!("width_multiplier {} != {}", found.width_multiplier, expected.width_multiplier));
    }
    diffs.join(", ")
}
