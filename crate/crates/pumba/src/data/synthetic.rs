//! Planted-signal interface pairs.
//!
//! Every image channel is white noise. Each sample also receives one smooth
//! Gaussian blob in each of the two paired channels of the signal group
//! (for example both hydropathy channels). In natives the two blobs sit at
//! the same position; in decoys their positions are drawn independently, so
//! per-channel statistics match and only the cross-channel correspondence
//! separates the classes. Natives additionally have the signal group's
//! energy terms lowered. Blob amplitude and energy shift both scale with
//! the signal strength, so strength 0 makes the two classes identically
//! distributed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::{write_container, DatasetContainer};
use crate::error::{Error, Result};
use crate::eval::CapriCategory;
use crate::model::{BranchGroupSpec, InterfacePairSample, ENERGY_NAMES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub complexes: usize,
    pub decoys: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Planted signal strength in `[0, 1]`.
    pub signal: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Energy noise standard deviation.
    pub energy_noise: f64,
    pub seed: u64,
    /// Group whose channels and energies carry the signal.
    pub signal_group: String,
    /// Blob peak height at full strength.
    pub blob_amplitude: f64,
    /// Energy shift at full strength.
    pub energy_shift: f64,
    pub groups: BranchGroupSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            complexes: 20,
            decoys: 20,
            image_size: 32,
            channels: 13,
            signal: 0.8,
            noise: 1.0,
            energy_noise: 0.5,
            seed: 0,
            signal_group: "hydropathy".into(),
            blob_amplitude: 3.0,
            energy_shift: 4.0,
            groups: BranchGroupSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.groups.validate(self.channels, ENERGY_NAMES.len())?;
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::Config(format!("signal must lie in [0, 1], got {}", self.signal)));
        }
        if self.noise < 0.0 || self.energy_noise < 0.0 || self.image_size < 4 || self.complexes == 0 {
            return Err(Error::Config(
                "synthetic data needs non-negative noise, image_size >= 4 and at least one complex".into(),
            ));
        }
        let g = self.signal_group()?;
        if self.groups.groups[g].channels.len() < 2 {
            return Err(Error::Config(format!(
                "signal group `{}` needs two channels",
                self.signal_group
            )));
        }
        Ok(())
    }

    fn signal_group(&self) -> Result<usize> {
        self.groups
            .index_of(&self.signal_group)
            .ok_or_else(|| Error::Config(format!("unknown signal group `{}`", self.signal_group)))
    }
}

fn add_blob(image: &mut Tensor<f32>, channel: usize, cy: f64, cx: f64, amplitude: f64, width: f64) {
    let a = image.shape()[1];
    let plane = &mut image.data_mut()[channel * a * a..(channel + 1) * a * a];
    for y in 0..a {
        for x in 0..a {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            plane[y * a + x] += (amplitude * (-d2 / (2.0 * width * width)).exp()) as f32;
        }
    }
}

/// Samples in complex order, native first, then decoys.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<InterfacePairSample>> {
    spec.validate()?;
    let g = spec.signal_group()?;
    let group = &spec.groups.groups[g];
    let (ch_a, ch_b) = (group.channels[0], group.channels[1]);
    let a = spec.image_size;
    let width = a as f64 / 8.0;
    let lo = a as f64 / 8.0;
    let hi = a as f64 - 1.0 - lo;
    let amplitude = spec.signal * spec.blob_amplitude;
    let shift = spec.signal * spec.energy_shift;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.complexes * (spec.decoys + 1));
    for c in 0..spec.complexes {
        for m in 0..=spec.decoys {
            let native = m == 0;
            let noise = spec.noise;
            let mut image = Tensor::from_fn([spec.channels, a, a], |_| {
                (noise * rng.sample::<f64, _>(StandardNormal)) as f32
            });
            let mut energies: Vec<f32> = (0..ENERGY_NAMES.len())
                .map(|_| (spec.energy_noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            let mut pos = || (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let (ya, xa) = pos();
            let (yb, xb) = if native { (ya, xa) } else { pos() };
            add_blob(&mut image, ch_a, ya, xa, amplitude, width);
            add_blob(&mut image, ch_b, yb, xb, amplitude, width);
            if native {
                for &e in &group.energies {
                    energies[e] -= shift as f32;
                }
            }
            out.push(InterfacePairSample {
                complex_id: format!("c{c:03}"),
                model_id: if native { "native".into() } else { format!("d{:03}", m - 1) },
                native,
                capri: if native { CapriCategory::High } else { CapriCategory::Incorrect },
                image,
                energies,
            });
        }
    }
    Ok(out)
}

/// Generates `spec` into a new container at `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<DatasetContainer> {
    let samples = generate(spec)?;
    write_container(root, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(signal: f64) -> SyntheticSpec {
        SyntheticSpec {
            complexes: 2,
            decoys: 3,
            image_size: 8,
            signal,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts_and_ids() {
        let s = generate(&small(0.5)).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.iter().filter(|x| x.native).count(), 2);
        assert_eq!(s[0].model_id, "native");
        assert_eq!(s[1].model_id, "d000");
        assert_eq!(s[4].complex_id, "c001");
        assert_eq!(s[0].image.shape(), &[13, 8, 8]);
    }

    #[test]
    fn seed_determines_content() {
        assert_eq!(generate(&small(0.5)).unwrap(), generate(&small(0.5)).unwrap());
        let mut other = small(0.5);
        other.seed = 1;
        assert_ne!(generate(&small(0.5)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn native_energy_shift() {
        let mut spec = small(1.0);
        spec.noise = 0.0;
        spec.energy_noise = 0.0;
        let s = generate(&spec).unwrap();
        // desolvation belongs to the hydropathy group
        assert_eq!(s[0].energies[1], -4.0);
        assert_eq!(s[0].energies[0], 0.0);
        assert_eq!(s[1].energies[1], 0.0);
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(generate(&SyntheticSpec { signal: 1.5, ..small(0.0) }).is_err());
        assert!(generate(&SyntheticSpec {
            signal_group: "colour".into(),
            ..small(0.0)
        })
        .is_err());
    }
}
