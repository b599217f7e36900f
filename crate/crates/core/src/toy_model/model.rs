use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use crate::error::{OstError, Result};
use crate::tensor_core::{read_tensor, write_tensor, Rng, Tensor};

/// Logit scale on top of the `1/√d` init, so the output distribution is
/// peaked enough for top-k losses to matter.
const HEAD_GAIN: f64 = 3.0;

/// One pre-norm decoder layer. Weights are output-major (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub norm_attn: Vec<f64>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm_ffn: Vec<f64>,
    pub wup: Tensor,
    pub wgate: Tensor,
    pub wdown: Tensor,
}

impl Layer {
    /// The seven linear layers with their names, in a fixed order.
    pub fn linears(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("wup", &self.wup),
            ("wgate", &self.wgate),
            ("wdown", &self.wdown),
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.wup,
            &mut self.wgate,
            &mut self.wdown,
        ]
    }
}

/// A small decoder-only transformer: embedding, `n_layers` pre-norm blocks
/// (attention with rotary embedding, SwiGLU feed-forward), final norm and
/// an untied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub embedding: Tensor,
    pub layers: Vec<Layer>,
    pub norm_final: Vec<f64>,
    pub head: Tensor,
    /// Online Hadamard on queries and keys after the rotary embedding.
    pub qk_hadamard: bool,
    /// Online Hadamard on the feed-forward hidden state before `wdown`.
    pub ffn_hadamard: bool,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, rng.normal_vec(rows * cols)).scale(std)
}

impl ToyModel {
    /// Gaussian weights with zero mean and variance `1/fan_in`. Norm weights
    /// are `1 + 0.1·N(0, 1)`. With outliers enabled the embedding columns in
    /// [`ToyConfig::outlier_channels`] are multiplied by the outlier gain.
    pub fn init(config: &ToyConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab);
        let mut streams = (0u64..).map(|i| rng.split(i));
        let mut next = || streams.next().expect("unbounded");
        let mut embedding = gaussian(&mut next(), v, d, 1.0);
        if config.outliers {
            let gain: Vec<f64> = (0..d)
                .map(|c| {
                    if config.outlier_channels().contains(&c) {
                        config.outlier_gain
                    } else {
                        1.0
                    }
                })
                .collect();
            embedding = embedding.scale_columns(&gain);
        }
        let norm = |r: &mut Rng| -> Vec<f64> { (0..d).map(|_| 1.0 + 0.1 * r.normal()).collect() };
        let sd = (d as f64).powf(-0.5);
        let sf = (f as f64).powf(-0.5);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                norm_attn: norm(&mut next()),
                wq: gaussian(&mut next(), d, d, sd),
                wk: gaussian(&mut next(), d, d, sd),
                wv: gaussian(&mut next(), d, d, sd),
                wo: gaussian(&mut next(), d, d, sd),
                norm_ffn: norm(&mut next()),
                wup: gaussian(&mut next(), f, d, sd),
                wgate: gaussian(&mut next(), f, d, sd),
                wdown: gaussian(&mut next(), d, f, sf),
            });
        }
        let mut r = next();
        let norm_final = (0..d).map(|_| 1.0 + 0.1 * r.normal()).collect();
        let head = gaussian(&mut next(), v, d, HEAD_GAIN * sd);
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            norm_final,
            head,
            qk_hadamard: false,
            ffn_hadamard: false,
        })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(OstError::validation("empty token sequence"));
        }
        if let Some((i, t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab)
        {
            return Err(OstError::validation(format!(
                "token {t} at position {i} is outside the vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// True when every norm weight is exactly one.
    pub fn is_folded(&self) -> bool {
        let ones = |g: &[f64]| g.iter().all(|&v| v == 1.0);
        ones(&self.norm_final)
            && self
                .layers
                .iter()
                .all(|l| ones(&l.norm_attn) && ones(&l.norm_ffn))
    }

    /// Absorb every norm weight into the input channels of the linear
    /// layers it feeds and reset the norm weights to one.
    pub fn fold_rmsnorm(&self) -> ToyModel {
        let mut m = self.clone();
        for l in &mut m.layers {
            let ga = std::mem::replace(&mut l.norm_attn, vec![1.0; self.config.d_model]);
            l.wq = l.wq.scale_columns(&ga);
            l.wk = l.wk.scale_columns(&ga);
            l.wv = l.wv.scale_columns(&ga);
            let gf = std::mem::replace(&mut l.norm_ffn, vec![1.0; self.config.d_model]);
            l.wup = l.wup.scale_columns(&gf);
            l.wgate = l.wgate.scale_columns(&gf);
        }
        let g = std::mem::replace(&mut m.norm_final, vec![1.0; self.config.d_model]);
        m.head = m.head.scale_columns(&g);
        m
    }

    /// Every stored tensor with its name and role, in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &'static str, Tensor)> {
        let mut out = vec![("embedding".to_string(), "embedding", self.embedding.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.norm_attn"),
                "norm",
                Tensor::vector(l.norm_attn.clone()),
            ));
            for (name, w) in l.linears() {
                out.push((format!("layer{i}.{name}"), "linear", w.clone()));
            }
            out.push((
                format!("layer{i}.norm_ffn"),
                "norm",
                Tensor::vector(l.norm_ffn.clone()),
            ));
        }
        out.push((
            "norm_final".to_string(),
            "norm",
            Tensor::vector(self.norm_final.clone()),
        ));
        out.push(("head".to_string(), "head", self.head.clone()));
        out
    }

    /// 64-bit FNV-1a over every parameter bit pattern. Used to check that
    /// optimization never touches the frozen weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, t) in self.named_tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| OstError::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, role, t) in self.named_tensors() {
            let file = format!("{name}.ostt");
            write_tensor(dir.join(&file), &t)?;
            entries.push(ManifestEntry {
                name,
                file,
                shape: t.shape().to_vec(),
                role: role.to_string(),
            });
        }
        let manifest = ModelManifest {
            kind: "toy_model".into(),
            config: self.config.clone(),
            qk_hadamard: self.qk_hadamard,
            ffn_hadamard: self.ffn_hadamard,
            tensors: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.kind != "toy_model" {
            return Err(OstError::validation(format!(
                "manifest kind {:?} is not a toy model",
                manifest.kind
            )));
        }
        let mut model = ToyModel::init(&manifest.config, &Rng::new(0))?;
        model.qk_hadamard = manifest.qk_hadamard;
        model.ffn_hadamard = manifest.ffn_hadamard;
        let expected = model.named_tensors();
        if manifest.tensors.len() != expected.len() {
            return Err(OstError::validation(format!(
                "manifest lists {} tensors, the config needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for (entry, (name, _, want)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name {
                return Err(OstError::validation(format!(
                    "manifest entry {} where {name} was expected",
                    entry.name
                )));
            }
            let t = read_tensor(dir.join(&entry.file))?;
            if t.shape() != want.shape() {
                return Err(OstError::validation(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            loaded.push(t);
        }
        let mut it = loaded.into_iter();
        let mut take = || it.next().expect("count checked");
        model.embedding = take();
        for l in &mut model.layers {
            l.norm_attn = take().into_data();
            for w in l.linears_mut() {
                *w = take();
            }
            l.norm_ffn = take().into_data();
        }
        model.norm_final = take().into_data();
        model.head = take();
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub role: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    kind: String,
    config: ToyConfig,
    qk_hadamard: bool,
    ffn_hadamard: bool,
    tensors: Vec<ManifestEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| OstError::validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| OstError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OstError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| OstError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ToyConfig::default();
        let a = ToyModel::init(&c, &Rng::new(5)).unwrap();
        let b = ToyModel::init(&c, &Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c2 = ToyModel::init(&c, &Rng::new(6)).unwrap();
        assert_ne!(a.fingerprint(), c2.fingerprint());
    }

    fn channel_peak_ratio(outliers: bool) -> f64 {
        let c = ToyConfig {
            outliers,
            ..ToyConfig::default()
        };
        let m = ToyModel::init(&c, &Rng::new(5)).unwrap();
        let tokens: Vec<usize> = (0..c.seq_len).map(|i| (i * 37 + 3) % c.vocab).collect();
        let x = &crate::toy_model::forward_quantized(&m, &tokens, None)
            .unwrap()
            .taps[0]
            .attn_in;
        let mut peak: Vec<f64> = (0..x.cols())
            .map(|j| (0..x.rows()).map(|i| x.at(i, j).abs()).fold(0.0, f64::max))
            .collect();
        let max = peak.iter().cloned().fold(0.0, f64::max);
        peak.sort_by(f64::total_cmp);
        max / peak[peak.len() / 2]
    }

    #[test]
    fn outlier_channels_dominate_activations() {
        assert!(channel_peak_ratio(true) > 10.0);
        assert!(channel_peak_ratio(false) < 5.0);
    }

    #[test]
    fn folding_resets_norms_and_is_idempotent() {
        let m = ToyModel::init(&ToyConfig::default(), &Rng::new(1)).unwrap();
        assert!(!m.is_folded());
        let f = m.fold_rmsnorm();
        assert!(f.is_folded());
        assert_eq!(f.fold_rmsnorm(), f);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::init(&ToyConfig::default(), &Rng::new(1)).unwrap();
        m.save_dir(dir.path()).unwrap();
        assert_eq!(ToyModel::load_dir(dir.path()).unwrap(), m);
        std::fs::remove_file(dir.path().join("layer1.wq.ostt")).unwrap();
        assert_eq!(ToyModel::load_dir(dir.path()).unwrap_err().exit_code(), 3);
    }
}
