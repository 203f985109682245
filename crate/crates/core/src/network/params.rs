use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};
use crate::synth::derive_seed;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Training patch dims (x, y, z).
    pub patch: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            patch: [32, 32, 32],
        }
    }
}

impl NetworkConfig {
    pub const DEPTH: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::invalid(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.patch.iter().any(|&p| p == 0 || p % 8 != 0) {
            return Err(Error::invalid(format!(
                "patch dims {:?} must be positive multiples of 8",
                self.patch
            )));
        }
        Ok(())
    }

    /// Channels of the bottleneck and fused features.
    pub fn feature_channels(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Gaussian,
    Zero,
    One,
}

/// A named, shape-tagged tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvH {
    pub w: usize,
    pub b: usize,
    pub cout: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BnH {
    pub gamma: usize,
    pub beta: usize,
    pub rmean: usize,
    pub rvar: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockH {
    pub conv: ConvH,
    pub bn: BnH,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderH {
    pub blocks: [[BlockH; 2]; 3],
}

#[derive(Clone, Debug)]
pub(crate) struct FuseH {
    pub gate: ConvH,
    pub value_guide: ConvH,
    pub value_feat: ConvH,
    pub bn: BnH,
    pub blocks: [BlockH; 2],
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderH {
    pub ups: [ConvH; 3],
    pub blocks: [[BlockH; 2]; 3],
    pub head: ConvH,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub enc: [EncoderH; 3],
    pub fuse: [FuseH; 2],
    pub dec: [DecoderH; 2],
}

#[derive(Default)]
pub(crate) struct Registry {
    pub params: Vec<(String, Vec<usize>, Init)>,
    pub buffers: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.buffers.push((name, shape, init));
        self.buffers.len() - 1
    }

    fn conv3(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvH {
        ConvH {
            w: self.param(
                format!("{prefix}.weight"),
                vec![cout, cin, 3, 3, 3],
                Init::Gaussian,
            ),
            b: self.param(format!("{prefix}.bias"), vec![cout], Init::Zero),
            cout,
        }
    }

    fn upconv(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvH {
        ConvH {
            w: self.param(
                format!("{prefix}.weight"),
                vec![cin, cout, 2, 2, 2],
                Init::Gaussian,
            ),
            b: self.param(format!("{prefix}.bias"), vec![cout], Init::Zero),
            cout,
        }
    }

    fn conv1(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvH {
        ConvH {
            w: self.param(
                format!("{prefix}.weight"),
                vec![cout, cin, 1, 1, 1],
                Init::Gaussian,
            ),
            b: self.param(format!("{prefix}.bias"), vec![cout], Init::Zero),
            cout,
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnH {
        BnH {
            gamma: self.param(format!("{prefix}.gamma"), vec![c], Init::One),
            beta: self.param(format!("{prefix}.beta"), vec![c], Init::Zero),
            rmean: self.buffer(format!("{prefix}.running_mean"), vec![c], Init::Zero),
            rvar: self.buffer(format!("{prefix}.running_var"), vec![c], Init::One),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> BlockH {
        BlockH {
            conv: self.conv3(&format!("{prefix}.conv"), cin, cout),
            bn: self.bn(&format!("{prefix}.bn"), cout),
        }
    }

    fn double_block(&mut self, prefix: &str, cin: usize, cout: usize) -> [BlockH; 2] {
        [
            self.block(&format!("{prefix}.0"), cin, cout),
            self.block(&format!("{prefix}.1"), cout, cout),
        ]
    }
}

pub(crate) const BRANCHES: [&str; 2] = ["pos", "neg"];

impl Layout {
    pub(crate) fn build(config: &NetworkConfig) -> (Layout, Registry) {
        let c = config.base_channels;
        let widths = [c, 2 * c, 4 * c];
        let mut r = Registry::default();
        let enc = std::array::from_fn(|e| {
            let cin0 = if e == 0 { 3 } else { 1 };
            let mut cin = cin0;
            EncoderH {
                blocks: std::array::from_fn(|l| {
                    let b = r.double_block(&format!("enc{}.level{l}", e + 1), cin, widths[l]);
                    cin = widths[l];
                    b
                }),
            }
        });
        let f = 4 * c;
        let fuse = std::array::from_fn(|b| {
            let p = format!("fuse_{}", BRANCHES[b]);
            FuseH {
                gate: r.conv3(&format!("{p}.gate"), f, f),
                value_guide: r.conv3(&format!("{p}.value_guide"), f, f),
                value_feat: r.conv3(&format!("{p}.value_feat"), f, f),
                bn: r.bn(&format!("{p}.bn"), f),
                blocks: r.double_block(&format!("{p}.block"), f, f),
            }
        });
        let dec = std::array::from_fn(|b| {
            let p = format!("dec_{}", BRANCHES[b]);
            // level 0 works at 1/4 resolution, level 2 at full resolution
            let outs = [4 * c, 2 * c, c];
            let ins = [4 * c, 4 * c, 2 * c];
            let ups = std::array::from_fn(|l| r.upconv(&format!("{p}.up{l}"), ins[l], outs[l]));
            let blocks = std::array::from_fn(|l| {
                r.double_block(&format!("{p}.level{l}"), 2 * outs[l], outs[l])
            });
            DecoderH {
                ups,
                blocks,
                head: r.conv1(&format!("{p}.head"), c, 1),
            }
        });
        (Layout { enc, fuse, dec }, r)
    }
}

/// All learnable tensors and normalization running statistics.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    pub tensors: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
    pub(crate) layout: Layout,
}

impl<T: Real> PartialEq for NetworkParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors == other.tensors
            && self.buffers == other.buffers
    }
}

fn materialize<T: Real>(
    entries: &[(String, Vec<usize>, Init)],
    mut gaussian: impl FnMut(usize) -> Vec<f64>,
) -> Vec<NamedTensor<T>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, (name, shape, init))| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Gaussian => gaussian(i).into_iter().take(n).map(T::from_f64).collect(),
                Init::Zero => vec![T::ZERO; n],
                Init::One => vec![T::ONE; n],
            };
            NamedTensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
            }
        })
        .collect()
}

impl<T: Real> NetworkParams<T> {
    /// Weights ~ N(0, 0.01²), biases and shifts 0, scales 1.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = Layout::build(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let tensors = materialize(&reg.params, |i| {
            let n: usize = reg.params[i].1.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4e4554, i as u64]));
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        });
        let buffers = materialize(&reg.buffers, |_| Vec::new());
        Ok(NetworkParams {
            config: config.clone(),
            tensors,
            buffers,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors, checking the schema.
    pub fn from_tensors(
        config: &NetworkConfig,
        tensors: Vec<NamedTensor<T>>,
        buffers: Vec<NamedTensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = Layout::build(config);
        let check = |want: &[(String, Vec<usize>, Init)],
                     got: &[NamedTensor<T>],
                     what: &str|
         -> Result<()> {
            if want.len() != got.len() {
                return Err(Error::invalid(format!(
                    "{what}: expected {} tensors, found {}",
                    want.len(),
                    got.len()
                )));
            }
            for ((name, shape, _), t) in want.iter().zip(got) {
                if &t.name != name
                    || &t.shape != shape
                    || t.data.len() != shape.iter().product::<usize>()
                {
                    return Err(Error::invalid(format!(
                        "{what}: expected {name} {shape:?}, found {} {:?}",
                        t.name, t.shape
                    )));
                }
                if t.data.iter().any(|v| !v.to_f64().is_finite()) {
                    return Err(Error::invalid(format!(
                        "{what}: {name} has non-finite values"
                    )));
                }
            }
            Ok(())
        };
        check(&reg.params, &tensors, "parameters")?;
        check(&reg.buffers, &buffers, "buffers")?;
        Ok(NetworkParams {
            config: config.clone(),
            tensors,
            buffers,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors
            .iter()
            .chain(&self.buffers)
            .find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut NamedTensor<T>> {
        self.tensors
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|t| t.name == name)
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
                })
                .collect()
        };
        NetworkParams {
            config: self.config.clone(),
            tensors: conv(&self.tensors),
            buffers: conv(&self.buffers),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn p(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    pub(crate) fn buf(&self, i: usize) -> &[T] {
        &self.buffers[i].data
    }
}

/// Gradients aligned with [`NetworkParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| vec![T::ZERO; t.data.len()])
                .collect(),
        }
    }

    pub(crate) fn pair(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert!(a < b);
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn dot(&self, other: &Gradients<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .flatten()
            .all(|v| v.to_f64().is_finite())
    }
}
