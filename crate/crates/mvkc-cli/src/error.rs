//! Error-to-exit-code mapping. The contract is stable: 0 success, 2 usage,
//! 3 degenerate input, 4 format error.

use mvkc::correspondence::CorrespondenceError;
use mvkc::descriptor::DescriptorError;
use mvkc::estimator::EstimatorError;
use mvkc::eval::EvalError;
use mvkc::formats::FormatError;
use mvkc::geometry::GeometryError;
use mvkc::heatmap::HeatmapError;
use mvkc::pipeline::PipelineError;
use mvkc::skeleton::SkeletonError;
use mvkc::synth::SynthError;
use mvkc::template::TemplateError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: EXIT_USAGE,
        }
    }

    pub fn degenerate(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: EXIT_DEGENERATE,
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: EXIT_FORMAT,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(format!("io error: {e}"))
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::DegeneratePose => CliError::degenerate(e.to_string()),
            GeometryError::Json(_) => CliError::format(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::Json(_) => CliError::format(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<SkeletonError> for CliError {
    fn from(e: SkeletonError) -> Self {
        match e {
            SkeletonError::Json(_) => CliError::format(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Geometry(GeometryError::DegeneratePose) => {
                CliError::degenerate(e.to_string())
            }
            SynthError::Geometry(inner) => inner.into(),
            SynthError::Skeleton(inner) => inner.into(),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(inner) => CliError::usage(format!("io error: {inner}")),
            _ => CliError::format(e.to_string()),
        }
    }
}

impl From<DescriptorError> for CliError {
    fn from(e: DescriptorError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<CorrespondenceError> for CliError {
    fn from(e: CorrespondenceError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Geometry(GeometryError::DegeneratePose) => {
                CliError::degenerate(e.to_string())
            }
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<HeatmapError> for CliError {
    fn from(e: HeatmapError) -> Self {
        CliError::usage(e.to_string())
    }
}
