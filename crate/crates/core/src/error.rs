use alloc::boxed::Box;
use alloc::string::String;

use crate::trainer::BatchDump;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A parameter or configuration value is outside its valid domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A training loss became NaN or infinite; the offending batch is attached.
    #[error("non-finite {} at step {}", .0.quantity, .0.step)]
    NonFinite(Box<BatchDump>),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::Error::Contract(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err};
