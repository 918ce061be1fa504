//! Particle methods for conditional McKean-Vlasov SDEs with common noise, in
//! Itô and Stratonovich form, with the Lions-derivative drift correction
//! that links the two.

pub mod coeffs;
pub mod correction;
pub mod error;
pub mod lions;
pub mod measure;
pub mod noise;
pub mod numeric;
pub mod rng;
pub mod sim;
pub mod validate;

pub use coeffs::{Coefficients, Model};
pub use correction::{CorrectionOptions, CorrectionValue, CorrectionVariant};
pub use error::{Error, Result};
pub use measure::EmpiricalMeasure;
pub use noise::{NoiseBundle, TimeGrid};
pub use sim::{EnsemblePath, InitialLaw, SchemeId};

/// CSV writer with the crate's fixed dialect: comma, header row, LF endings.
pub(crate) fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}
