use std::fmt;
use std::path::Path;

use fracbnn::model::ModelError;
use fracbnn::modelfile::ModelFileError;
use fracbnn::ppm::PpmError;
use fracbnn::tensorfile::TensorFileError;

pub const EXIT_IO: u8 = 1;
pub const EXIT_FORMAT: u8 = 2;
pub const EXIT_SHAPE: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }

    pub fn ppm(path: &Path, e: PpmError) -> Self {
        Self::new(EXIT_FORMAT, format!("{}: {e}", path.display()))
    }

    pub fn tensor(path: &Path, e: TensorFileError) -> Self {
        Self::new(EXIT_FORMAT, format!("{}: {e}", path.display()))
    }

    pub fn model_file(path: &Path, e: ModelFileError) -> Self {
        let code = match e {
            ModelFileError::Io(_) => EXIT_IO,
            ModelFileError::Shape { .. } | ModelFileError::TopologyMismatch { .. } => EXIT_SHAPE,
            _ => EXIT_FORMAT,
        };
        Self::new(code, format!("{}: {e}", path.display()))
    }

    pub fn model(e: ModelError) -> Self {
        let code = match e {
            ModelError::Encoding(_) => EXIT_FORMAT,
            _ => EXIT_SHAPE,
        };
        Self::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
