"""Smoke test for the aurelgraph_py extension.

Build first:
    cargo build -p aurelgraph-py --release --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib.util
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension():
    try:
        import aurelgraph_py

        return aurelgraph_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libaurelgraph_py.so")
        if os.path.exists(lib):
            staged = os.path.join(tempfile.mkdtemp(), "aurelgraph_py.so")
            shutil.copy(lib, staged)
            spec = importlib.util.spec_from_file_location("aurelgraph_py", staged)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("aurelgraph_py not found; build it with cargo first")


def main():
    ag = load_extension()

    w = ag.compute_weights([0.5, 0.25, 0.25])
    assert all(abs(a - b) <= 1e-12 for a, b in zip(w, [0.6, 1.2, 1.2])), w

    p, r, f = ag.f1_score([0.9, 0.7, 0.2], [1, 0, 0])
    assert (p, r) == (0.5, 1.0) and abs(f - 2 / 3) < 1e-12
    assert ag.f1_score([0.1, 0.2], [0, 0]) == (None, None, None)
    assert ag.auc_score([0.9, 0.4, 0.6], [1, 0, 1]) == 1.0
    assert ag.auc_score([0.3, 0.3], [1, 0]) == 0.5
    assert ag.auc_score([0.3, 0.3], [1, 1]) is None

    adj = ag.build_topology([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], 1)
    assert all(sum(row) == 1 and row[i] == 0 for i, row in enumerate(adj)), adj

    try:
        ag.compute_weights([0.0, 0.5])
        raise AssertionError("zero rate accepted")
    except ValueError:
        pass

    assert all(passed for _, _, passed in ag.gradcheck(seed=3))
    assert "lambda" in ag.default_config()

    with tempfile.TemporaryDirectory() as tmp:
        corpus = os.path.join(tmp, "corpus.bin")
        ckpt = os.path.join(tmp, "model.ckpt")
        rates = ag.generate_corpus(corpus, samples=64, seed=1)
        assert len(rates) == 6
        log = ag.train(corpus, ckpt, ["stage1_epochs=2", "stage2_epochs=1", "stage1_lr=0.01"])
        assert len(log) == 3 and all("loss" in json.loads(line) for line in log)

        model = ag.Model.load(ckpt)
        assert model.stage == 2 and model.n_aus == 6
        probs = model.predict([[[0.0] * 36 for _ in range(8)]])
        assert len(probs) == 1 and all(0.0 <= q <= 1.0 for q in probs[0])
        report = json.loads(model.evaluate(corpus, threshold=0.5))
        assert report["n_samples"] == 64

        try:
            ag.Model.load(os.path.join(tmp, "missing.ckpt"))
            raise AssertionError("missing checkpoint loaded")
        except OSError:
            pass

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
