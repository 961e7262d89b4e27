//! Decimal text encoding for checkpoint numbers: 17 significant digits, which
//! reloads every `f64` (and therefore every `f32`) bit-exactly.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

pub fn encode<F: Scalar>(value: F) -> String {
    format!("{:.16e}", value.as_f64())
}

pub fn decode<F: Scalar>(text: &str) -> Result<F> {
    text.trim().parse::<f64>().map(F::of).map_err(|e| Error::invalid(format!("bad decimal {text:?}: {e}")))
}

pub fn encode_vec<F: Scalar>(values: &[F]) -> Vec<String> {
    values.iter().map(|&v| encode(v)).collect()
}

pub fn decode_vec<F: Scalar>(values: &[String]) -> Result<Vec<F>> {
    values.iter().map(|v| decode(v)).collect()
}

pub fn encode_rows<F: Scalar>(m: &Matrix<F>) -> Vec<Vec<String>> {
    (0..m.rows()).map(|r| encode_vec(m.row(r))).collect()
}

pub fn decode_rows<F: Scalar>(rows: &[Vec<String>], cols: usize) -> Result<Matrix<F>> {
    let decoded = rows.iter().map(|r| decode_vec(r)).collect::<Result<Vec<_>>>()?;
    if decoded.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("matrix rows must have {cols} entries")));
    }
    Matrix::from_vec(decoded.len(), cols, decoded.into_iter().flatten().collect())
}

pub fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format_version {found}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}
