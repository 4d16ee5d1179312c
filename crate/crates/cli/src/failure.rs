use std::fmt;
use std::path::Path;

/// Error classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Config,
    Io,
    Contract,
}

impl Class {
    pub fn exit_code(self) -> i32 {
        match self {
            Class::Config => 2,
            Class::Io => 3,
            Class::Contract => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub message: String,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { class: Class::Config, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { class: Class::Io, message: message.into() }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Self { class: Class::Contract, message: message.into() }
    }

    /// A build artifact that a later step needs is absent.
    pub fn missing(path: &Path, step: &str) -> Self {
        Self::io(format!("missing {} (produce it with `unirel {step}` on the same --out directory)", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<unirel::Error> for Failure {
    fn from(e: unirel::Error) -> Self {
        use unirel::Error as E;
        let class = match &e {
            E::Io(_) | E::Json(_) | E::Csv(_) | E::Parse { .. } => Class::Io,
            _ => Class::Contract,
        };
        Self { class, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

/// Prefixes the error message while keeping its class.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| {
            let f: Failure = e.into();
            Failure { class: f.class, message: format!("{what}: {}", f.message) }
        })
    }
}
