//! TOML configuration.
//!
//! ```toml
//! [model]
//! example = "1a"            # 1a | 1b | 2a | 2b
//! speeds = [0.1, 0.5, 1.0]  # v_1..v_d
//! sigma2 = 0.5
//! delta = 0.16666666666666666
//! horizon = 36
//! # optional: trunc, base_speed, link = "identity" | "inverse", x0,
//! # bounds = [lo, hi], post_jump = [...], intensity = { kind = "linear", slope = 1.0 }
//!
//! [costs]
//! alpha = 4.0
//! beta = 1.0
//! gamma = 1.5               # or a d×d matrix
//!
//! [quantization]            # state grids; every key optional
//! [belief]                  # belief grids; every key optional
//! [bench]                   # sweeps; every key optional
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dp::BeliefConfig;
use crate::error::{Error, Result};
use crate::kernel::CostParams;
use crate::model::{FlowFamily, Intensity, Link, NoiseSpec, PdmpModel};
use crate::quantize::QuantConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub example: FlowFamily,
    pub speeds: Vec<f64>,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunc: Option<f64>,
    pub delta: f64,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_speed: Option<f64>,
    #[serde(default)]
    pub link: Link,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_jump: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<Intensity>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<PdmpModel> {
        self.build_with_noise(self.sigma2)
    }

    pub fn build_with_noise(&self, sigma2: f64) -> Result<PdmpModel> {
        let noise = NoiseSpec::new(sigma2, self.trunc)?;
        let mut m = PdmpModel::new(self.example, self.speeds.clone(), noise, self.delta, self.horizon)?.with_link(self.link);
        if let Some(v0) = self.base_speed {
            m = m.with_base_speed(v0);
        }
        if let Some(x0) = self.x0 {
            m = m.with_x0(x0);
        }
        if let Some((lo, hi)) = self.bounds {
            m = m.with_bounds_clip(lo, hi);
        }
        if let Some(p) = &self.post_jump {
            m = m.with_post_jump(p.clone());
        }
        if let Some(i) = &self.intensity {
            m = m.with_intensity(i.clone());
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Uniform(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: GammaSpec,
}

impl CostConfig {
    pub fn build(&self, model: &PdmpModel) -> Result<CostParams> {
        let d = model.num_post_modes();
        let params = match &self.gamma {
            GammaSpec::Uniform(g) => CostParams::uniform(self.alpha, self.beta, *g, d, model.delta, model.horizon)?,
            GammaSpec::Matrix(m) => {
                CostParams { alpha: self.alpha, beta: self.beta, gamma: m.clone(), delta: model.delta, horizon: model.horizon }
            }
        };
        params.validate()?;
        if params.num_post_modes() != d {
            return Err(Error::Config(format!("γ is {0}×{0} for a model with {d} post-jump modes", params.num_post_modes())));
        }
        Ok(params)
    }
}

/// A detector in a benchmark sweep, written `quantized:<N_k>`, `ma:<k>:<s>`,
/// `kf:<s>`, `kf:cal` or `never`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Quantized { belief_size: usize },
    MovingAverage { window: usize, threshold: f64 },
    KalmanFixed { threshold: f64 },
    KalmanCalibrated,
    Never,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Quantized { belief_size } => write!(f, "quantized:{belief_size}"),
            Method::MovingAverage { window, threshold } => write!(f, "ma:{window}:{threshold}"),
            Method::KalmanFixed { threshold } => write!(f, "kf:{threshold}"),
            Method::KalmanCalibrated => write!(f, "kf:cal"),
            Method::Never => write!(f, "never"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        let int = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(match parts.as_slice() {
            ["quantized", k] => Method::Quantized { belief_size: int(k)? },
            ["ma", k, t] => Method::MovingAverage { window: int(k)?, threshold: num(t)? },
            ["kf", "cal"] => Method::KalmanCalibrated,
            ["kf", t] => Method::KalmanFixed { threshold: num(t)? },
            ["never"] => Method::Never,
            _ => return Err(bad()),
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub runs: usize,
    pub seed: u64,
    /// Empty sweeps default to the `[model]` / `[costs]` value.
    pub sigma2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            runs: 1000,
            seed: 1,
            sigma2: vec![],
            alpha: vec![],
            beta: vec![],
            gamma: vec![],
            methods: vec![Method::MovingAverage { window: 3, threshold: 2.0 }, Method::KalmanCalibrated, Method::Quantized { belief_size: 50 }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub costs: CostConfig,
    #[serde(default)]
    pub quantization: QuantConfig,
    #[serde(default)]
    pub belief: BeliefConfig,
    #[serde(default)]
    pub bench: BenchSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.model.build()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self) -> Result<PdmpModel> {
        self.model.build()
    }

    pub fn costs(&self) -> Result<CostParams> {
        self.costs.build(&self.model()?)
    }

    /// Sets every seed in the file.
    pub fn reseed(&mut self, seed: u64) {
        self.quantization.seed = seed;
        self.belief.seed = seed;
        self.bench.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[model]
example = "1a"
speeds = [0.1, 0.5, 1.0]
sigma2 = 0.5
delta = 0.16666666666666666
horizon = 36

[costs]
alpha = 4.0
beta = 1.0
gamma = 1.5

[quantization]
size = 21
clvq_samples = 1000

[bench]
runs = 10
methods = ["ma:3:2", "kf:0.75", "kf:cal", "quantized:50", "never"]
"#;

    #[test]
    fn parses_example() {
        let c = Config::from_toml(EXAMPLE).unwrap();
        let m = c.model().unwrap();
        assert_eq!(m.family, FlowFamily::Exponential);
        assert_eq!(m.num_post_modes(), 3);
        assert_eq!(c.quantization.clvq_samples, 1000);
        assert_eq!(c.quantization.lloyd_iterations, QuantConfig::default().lloyd_iterations);
        assert_eq!(c.bench.methods.len(), 5);
        assert_eq!(c.bench.methods[1], Method::KalmanFixed { threshold: 0.75 });
        let costs = c.costs().unwrap();
        assert_eq!(costs.gamma[0][1], 1.5);
        assert_eq!(costs.gamma[1][1], 0.0);
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::from_toml(EXAMPLE).unwrap();
        let back = Config::from_toml(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_toml(&EXAMPLE.replace("example = \"1a\"", "example = \"3c\"")).is_err());
        assert!(Config::from_toml(&EXAMPLE.replace("horizon = 36", "horizon = 36\nbogus = 1")).is_err());
        assert!("ma:3".parse::<Method>().is_err());
        assert!("kf:x".parse::<Method>().is_err());
        let c = Config::from_toml(&EXAMPLE.replace("gamma = 1.5", "gamma = [[0.0, 1.0], [1.0, 0.0]]")).unwrap();
        assert!(c.costs().is_err());
    }

    #[test]
    fn method_strings_round_trip() {
        for s in ["quantized:75", "ma:5:2", "kf:0.9", "kf:cal", "never"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
    }
}
