//! Method tags and the parameter view shared by every estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mle")]
    Mle,
    #[serde(rename = "map")]
    Map,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "ls-trunc")]
    LsTrunc,
    #[serde(rename = "wls")]
    Wls,
    #[serde(rename = "wls-trunc")]
    WlsTrunc,
    #[serde(rename = "rician-direct")]
    RicianDirect,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mle,
        Method::Map,
        Method::Ls,
        Method::LsTrunc,
        Method::Wls,
        Method::WlsTrunc,
        Method::RicianDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Map => "map",
            Method::Ls => "ls",
            Method::LsTrunc => "ls-trunc",
            Method::Wls => "wls",
            Method::WlsTrunc => "wls-trunc",
            Method::RicianDirect => "rician-direct",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Anything that yields `(theta, S0^2, sigma^2)`.
pub trait ParameterEstimate {
    fn method(&self) -> Method;
    fn theta(&self) -> &TensorParams;
    fn s0_sq(&self) -> f64;
    fn sigma_sq(&self) -> f64;
}

/// Plain parameter triple, used when reading results back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub method: Method,
    pub theta: TensorParams,
    pub s0_sq: f64,
    pub sigma_sq: f64,
}

impl ParameterEstimate for Estimate {
    fn method(&self) -> Method {
        self.method
    }
    fn theta(&self) -> &TensorParams {
        &self.theta
    }
    fn s0_sq(&self) -> f64 {
        self.s0_sq
    }
    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }
}
