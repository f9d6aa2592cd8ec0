//! Exit-code classification: 1 for invalid input, 2 for runtime failures.

use std::fmt;

use hmllm_core::aggregation::AggregationError;
use hmllm_core::fsvr::FsvrError;
use hmllm_core::harness::HarnessError;
use hmllm_core::hypergraph::HypergraphError;
use hmllm_core::io::TensorFileError;
use hmllm_core::salm::SalmError;
use hmllm_core::signal::SignalError;
use hmllm_core::synth::SynthError;

pub const VALIDATION: u8 = 1;
pub const RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(error: impl Into<anyhow::Error>) -> Failure {
        Failure { code: VALIDATION, error: error.into() }
    }

    pub fn context(self, msg: impl fmt::Display) -> Failure {
        Failure { code: self.code, error: self.error.context(msg.to_string()) }
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn io_code(e: &std::io::Error) -> u8 {
    match e.kind() {
        std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => VALIDATION,
        _ => RUNTIME,
    }
}

fn csv_code(e: &csv::Error) -> u8 {
    match e.kind() {
        csv::ErrorKind::Io(io) => io_code(io),
        _ => VALIDATION,
    }
}

fn tensor_code(e: &TensorFileError) -> u8 {
    match e {
        TensorFileError::Io(io) => io_code(io),
        TensorFileError::Json(j) => json_code(j),
        TensorFileError::Malformed(_) => VALIDATION,
    }
}

macro_rules! classify {
    ($ty:ty, |$e:ident| $code:expr) => {
        impl From<$ty> for Failure {
            fn from($e: $ty) -> Failure {
                let code = $code;
                Failure { code, error: $e.into() }
            }
        }
    };
}

classify!(std::io::Error, |e| io_code(&e));
classify!(serde_json::Error, |e| json_code(&e));
classify!(csv::Error, |e| csv_code(&e));
classify!(TensorFileError, |e| tensor_code(&e));
classify!(HypergraphError, |_e| VALIDATION);
classify!(SignalError, |e| signal_code(&e));
classify!(AggregationError, |e| aggregation_code(&e));
classify!(FsvrError, |e| fsvr_code(&e));
classify!(SalmError, |e| salm_code(&e));
classify!(SynthError, |e| match &e {
    SynthError::Io(io) => io_code(io),
    SynthError::Json(j) => json_code(j),
    SynthError::Signal(s) => signal_code(s),
    SynthError::Aggregation(a) => aggregation_code(a),
    SynthError::Fsvr(f) => fsvr_code(f),
    SynthError::InvalidSpec(_) => VALIDATION,
});
classify!(HarnessError, |e| match &e {
    HarnessError::Salm(s) => salm_code(s),
    HarnessError::Io(io) => io_code(io),
    HarnessError::Csv(c) => csv_code(c),
    _ => VALIDATION,
});

fn json_code(e: &serde_json::Error) -> u8 {
    if e.is_io() { RUNTIME } else { VALIDATION }
}

fn signal_code(e: &SignalError) -> u8 {
    match e {
        SignalError::Csv(c) => csv_code(c),
        _ => VALIDATION,
    }
}

fn aggregation_code(e: &AggregationError) -> u8 {
    match e {
        AggregationError::Io(io) => io_code(io),
        AggregationError::Csv(c) => csv_code(c),
        AggregationError::Json(j) => json_code(j),
        AggregationError::Signal(s) => signal_code(s),
        _ => VALIDATION,
    }
}

fn fsvr_code(e: &FsvrError) -> u8 {
    match e {
        FsvrError::Io(io) => io_code(io),
        FsvrError::Json(j) => json_code(j),
        _ => VALIDATION,
    }
}

fn salm_code(e: &SalmError) -> u8 {
    match e {
        SalmError::DivergenceDetected { .. } | SalmError::NonFinite => RUNTIME,
        SalmError::TensorFile(t) => tensor_code(t),
        _ => VALIDATION,
    }
}
