use std::fmt;

pub const CONFIG: u8 = 2;
pub const GENERATION: u8 = 3;
pub const SAMPLER: u8 = 4;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Generation(String),
    Sampler(String),
}

impl Failure {
    pub fn config(e: impl fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    pub fn generation(e: impl fmt::Display) -> Self {
        Failure::Generation(e.to_string())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => CONFIG,
            Failure::Generation(_) => GENERATION,
            Failure::Sampler(_) => SAMPLER,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Generation(m) => write!(f, "generation: {m}"),
            Failure::Sampler(m) => write!(f, "sampler: {m}"),
        }
    }
}
