"""Smoke test for the `mlang` Python module.

Build the extension first:

    cargo build -p mlang-py --release --features extension-module

The script imports an installed `mlang` if there is one, otherwise it loads
the freshly built library from target/.
"""

import importlib.util
import json
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import mlang  # noqa: F401

        return sys.modules["mlang"]
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libmlang.so", "libmlang.dylib", "mlang.dll"):
            path = os.path.join(ROOT, "target", profile, name)
            if os.path.exists(path):
                spec = importlib.util.spec_from_file_location("mlang", path)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                sys.modules["mlang"] = module
                return module
    sys.exit("mlang extension not found; build it with "
             "`cargo build -p mlang-py --release --features extension-module`")


def expect_error(cls, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except cls as e:
        return e
    raise AssertionError(f"expected {cls.__name__}")


def main():
    mlang = load_module()
    print("mlang", mlang.__version__)

    bleu, rouge = mlang.text_overlap("i am so happy", "i am so happy")
    assert (bleu, rouge) == (100.0, 100.0), (bleu, rouge)
    _, rouge = mlang.text_overlap("very happy", "happy")
    assert abs(rouge - 200.0 / 3.0) < 1e-9, rouge

    d = mlang.frechet_distance([1.0], [[4.0]], [-2.0], [[0.25]])
    assert abs(d - (9.0 + 1.5 ** 2)) < 1e-10, d

    with tempfile.TemporaryDirectory() as tmp:
        root = os.path.join(tmp, "ws")
        cfg_path = os.path.join(tmp, "config.json")
        with open(cfg_path, "w") as f:
            json.dump({"preset": "reduced", "paths": {"root": root}}, f)

        cfg = mlang.load_config(cfg_path, seed=7, overrides=["corpus.n=4", "posttrain.epochs=3"])
        assert cfg["seed"] == 7 and cfg["corpus"]["n"] == 4 and cfg["posttrain"]["epochs"] == 3

        expect_error(mlang.ConfigError, mlang.load_config, cfg_path, overrides=["no.such.key=1"])
        err = expect_error(mlang.MissingArtifactError, mlang.run, "pretrain", cfg_path)
        assert "index.json" in str(err), err
        assert issubclass(mlang.MissingArtifactError, mlang.MlangError)

        spec = mlang.run("synth-data", cfg_path, overrides=["corpus.n=4"])
        assert spec["n"] == 4
        corpus = os.path.join(root, "data", "corpus")
        bc = mlang.beat_consistency(os.path.join(corpus, "clip_00000.wav"),
                                    os.path.join(corpus, "clip_00000.json"))
        assert abs(bc - 1.0) < 1e-6, bc

        out = os.path.join(tmp, "clip.csv")
        mlang.export(os.path.join(corpus, "clip_00000.json"), out, format="csv")
        with open(out) as f:
            header = f.readline().strip()
            rows = sum(1 for _ in f)
        assert header == "frame,marker,x,y,z" and rows > 0
        first = open(out).readlines()[1].split(",")
        assert all(math.isfinite(float(v)) for v in first[2:])

    print("smoke test passed")


if __name__ == "__main__":
    main()
