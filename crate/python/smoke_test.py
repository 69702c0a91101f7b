"""Smoke test for the compiled bindings.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/autoformer_py-*.whl
    python python/smoke_test.py
"""

import json
import math
import os
import random
import tempfile

import autoformer_py as af


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    rng = random.Random(0)
    q = [rng.gauss(0, 1) for _ in range(31)]
    k = [rng.gauss(0, 1) for _ in range(31)]
    assert close(af.autocorr(q, k), af.autocorr(q, k, method="bruteforce"))

    rows = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(40)]
    seasonal, trend = af.series_decomp(rows, 5)
    for x, s, t in zip(rows, seasonal, trend):
        assert close([a + b for a, b in zip(s, t)], x, 1e-12)
    flat_s, _ = af.series_decomp([[2.5]] * 10, 3)
    assert all(v == [0.0] for v in flat_s)

    assert af.roll([1.0, 2.0, 3.0, 4.0], 1) == [2.0, 3.0, 4.0, 1.0]
    assert af.topk(2.0, 96) == 9

    series = [r[0] for r in af.synthetic(96, [12.0])]
    delays, weights = af.topk_delays(af.autocorr(series, series))
    assert [d for d in delays if d != 0][0] == 12
    assert math.isclose(sum(weights), 1.0)

    cfg = dict(input_len=16, pred_len=8, channels=2, d_model=8, n_heads=2,
               e_layers=1, d_layers=1, moving_avg_window=5, seed=1)
    model = af.Model(json.dumps(cfg))
    x = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(16)]
    marks_enc = [[t / 23 - 0.5] for t in range(16)]
    marks_dec = [[t / 23 - 0.5] for t in range(8, 24)]
    pred = model.forecast(x, marks_enc, marks_dec)
    assert len(pred) == 8 and len(pred[0]) == 2

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        model.save(path)
        assert af.Model.load(path).forecast(x, marks_enc, marks_dec) == pred

    for bad in (lambda: af.series_decomp(rows, 4),
                lambda: af.Model(json.dumps({**cfg, "n_heads": 3})),
                lambda: af.Model('{"typo": 1}')):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print("smoke test passed:", model)


if __name__ == "__main__":
    main()
