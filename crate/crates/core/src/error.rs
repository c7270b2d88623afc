use thiserror::Error;

use crate::lattice::SpaceTimePoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice shape: {0}")]
    InvalidShape(String),
    #[error("alphabet size {0} is below 2")]
    InvalidAlphabet(u8),
    #[error("state {state} is outside the alphabet of size {alphabet}")]
    InvalidState { state: u8, alphabet: u8 },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("point {0} lies off the lattice")]
    OutOfDomain(SpaceTimePoint),
    #[error("time {t} outside the window [0, {t_max}]")]
    TimeOutOfRange { t: i64, t_max: i64 },
    #[error("point {0} lies outside the covering window")]
    OutsideWindow(SpaceTimePoint),
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),
    #[error("duplicate fault at {0}")]
    DuplicateFault(SpaceTimePoint),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("deviation at {0} has no excuse: the propagation inequality fails there")]
    NoExcuse(SpaceTimePoint),
    #[error("cause graph of the cluster at time {time} is disconnected: {components} components")]
    DisconnectedCauseGraph { time: i64, components: usize },
    #[error("enumeration refused: {0}")]
    TooLarge(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
