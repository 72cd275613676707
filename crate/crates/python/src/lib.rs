use pyo3::prelude::*;

#[pymodule]
fn neurex_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
