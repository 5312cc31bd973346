//! Frozen toy speech-foundation-model encoder: a fixed random orthogonal
//! mixing applied per frame, at a preset frame rate.

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numkernel::store::ParamStore;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frame-rate presets mirroring the two encoder families: 50 frames per
/// second versus 6.25.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SfmPreset {
    WhisperLike,
    SeamlessLike,
}

impl SfmPreset {
    pub const ALL: [SfmPreset; 2] = [SfmPreset::WhisperLike, SfmPreset::SeamlessLike];

    pub fn frame_rate_hz(&self) -> f64 {
        match self {
            SfmPreset::WhisperLike => 50.0,
            SfmPreset::SeamlessLike => 6.25,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SfmPreset::WhisperLike => "whisper-like",
            SfmPreset::SeamlessLike => "seamless-like",
        }
    }
}

impl std::fmt::Display for SfmPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SfmPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "whisper-like" | "whisper" => Ok(SfmPreset::WhisperLike),
            "seamless-like" | "seamless" => Ok(SfmPreset::SeamlessLike),
            other => Err(Error::Config(format!("unknown SFM preset `{other}`"))),
        }
    }
}

/// Handle to a frozen toy encoder; the mixing matrix lives in the store.
#[derive(Debug, Clone)]
pub struct ToySFM {
    pub preset: SfmPreset,
    pub out_dim: usize,
    pub seed: u64,
    pub identity: bool,
    pub prefix: String,
}

impl ToySFM {
    pub fn frame_rate_hz(&self) -> f64 {
        self.preset.frame_rate_hz()
    }
}

/// Random orthogonal matrix by modified Gram-Schmidt over a seeded Gaussian
/// draw. Same seed, same matrix.
fn orthogonal_matrix(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m = Array2::from_shape_fn((dim, dim), |_| {
            rng.random_range(-1.0f64..1.0) + rng.random_range(-0.5..0.5)
        });
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let proj: f64 = (0..dim).map(|k| m[[i, k]] * m[[j, k]]).sum();
                for k in 0..dim {
                    let adj = proj * m[[j, k]];
                    m[[i, k]] -= adj;
                }
            }
            let norm: f64 = (0..dim).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..dim {
                m[[i, k]] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

const META_NAME: &str = "meta.sfm";

/// Registers the mixing matrix under `{prefix}.mixing` plus a frozen
/// `meta.sfm` entry for checkpoint reload, then freezes everything.
pub fn build_toy_sfm(
    preset: SfmPreset,
    out_dim: usize,
    seed: u64,
    identity: bool,
    store: &mut ParamStore,
    prefix: &str,
) -> Result<ToySFM> {
    if out_dim < 1 {
        return Err(Error::Config("out_dim must be >= 1".into()));
    }
    let mixing = if identity {
        Array2::eye(out_dim)
    } else {
        orthogonal_matrix(out_dim, seed)
    };
    store.register(&format!("{prefix}.mixing"), mixing)?;
    let preset_code = match preset {
        SfmPreset::WhisperLike => 0.0,
        SfmPreset::SeamlessLike => 1.0,
    };
    let meta = Array2::from_shape_vec(
        (1, 5),
        vec![
            preset_code,
            out_dim as f64,
            (seed >> 32) as f64,
            (seed & 0xffff_ffff) as f64,
            f64::from(identity),
        ],
    )
    .expect("shape");
    store.register(META_NAME, meta)?;
    store.freeze_prefix(META_NAME);
    store.freeze_prefix(prefix);
    Ok(ToySFM {
        preset,
        out_dim,
        seed,
        identity,
        prefix: prefix.to_string(),
    })
}

/// Rebuilds the handle from a checkpoint's `meta.sfm` entry; the mixing
/// matrix itself comes from the checkpoint. Freezes the prefix.
pub fn load_toy_sfm(store: &mut ParamStore, prefix: &str) -> Result<ToySFM> {
    let meta = store.values(META_NAME)?.clone();
    if meta.len() != 5 {
        return Err(Error::Data(format!(
            "meta.sfm has {} fields, expected 5",
            meta.len()
        )));
    }
    let preset = if meta[[0, 0]] == 0.0 {
        SfmPreset::WhisperLike
    } else {
        SfmPreset::SeamlessLike
    };
    let out_dim = meta[[0, 1]].round() as usize;
    let seed = ((meta[[0, 2]].round() as u64) << 32) | (meta[[0, 3]].round() as u64);
    let identity = meta[[0, 4]] != 0.0;
    let mixing = store.values(&format!("{prefix}.mixing"))?;
    if mixing.dim() != (out_dim, out_dim) {
        return Err(Error::Data(format!(
            "mixing shape {:?} does not match meta dim {out_dim}",
            mixing.dim()
        )));
    }
    store.freeze_prefix(META_NAME);
    store.freeze_prefix(prefix);
    Ok(ToySFM {
        preset,
        out_dim,
        seed,
        identity,
        prefix: prefix.to_string(),
    })
}

/// Applies the frozen mixing to every frame. Lengths are preserved and the
/// raw frame rate must match the preset.
pub fn sfm_encode(sfm: &ToySFM, store: &ParamStore, raw: &FeatureSequence) -> Result<FeatureSequence> {
    if raw.frame_rate_hz() != sfm.frame_rate_hz() {
        return Err(Error::Config(format!(
            "raw frame rate {} does not match {} preset rate {}",
            raw.frame_rate_hz(),
            sfm.preset,
            sfm.frame_rate_hz()
        )));
    }
    if raw.dim() != sfm.out_dim {
        return Err(Error::Shape(format!(
            "raw dim {} does not match encoder dim {}",
            raw.dim(),
            sfm.out_dim
        )));
    }
    let mixing = store.values(&format!("{}.mixing", sfm.prefix))?;
    let items: Vec<Array2<f64>> = (0..raw.batch_size())
        .map(|b| raw.item(b).dot(mixing))
        .collect();
    FeatureSequence::from_items(&items, sfm.frame_rate_hz())
}
