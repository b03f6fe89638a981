use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(mlang::mlang)(py);
        let globals = PyDict::new(py);
        globals.set_item("mlang", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn metrics_from_python() {
    with_module(
        c"
b, r = mlang.text_overlap('i am so happy', 'i am so happy')
assert (b, r) == (100.0, 100.0)
d = mlang.frechet_distance([0.0, 1.0], [[1.0, 0.0], [0.0, 4.0]], [1.0, 1.0], [[4.0, 0.0], [0.0, 4.0]])
assert abs(d - 2.0) < 1e-10, d
",
    );
}

#[test]
fn errors_map_to_exit_code_classes() {
    with_module(
        c"
import tempfile, os
try:
    mlang.load_config(overrides=['no.such.key=1'])
    raise SystemExit('expected ConfigError')
except mlang.ConfigError:
    pass
with tempfile.TemporaryDirectory() as tmp:
    try:
        mlang.run('pretrain', overrides=['paths.root=' + os.path.join(tmp, 'ws')])
        raise SystemExit('expected MissingArtifactError')
    except mlang.MissingArtifactError as e:
        assert 'index.json' in str(e)
assert issubclass(mlang.DivergedTrainingError, mlang.MlangError)
cfg = mlang.load_config(seed=3, overrides=['preset=\"reduced\"'])
assert cfg['seed'] == 3
",
    );
}
