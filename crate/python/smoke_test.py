"""Smoke test for the pyheatprompt extension module.

Build and install first:
    maturin develop -m crates/python/Cargo.toml
"""

import json
import math
import random
import tempfile
from pathlib import Path

import pyheatprompt as hp


def check_geometry():
    x, y = hp.to_mercator(8.4, 49.0)
    lon, lat = hp.to_wgs84(x, y)
    assert abs(lon - 8.4) < 1e-9 and abs(lat - 49.0) < 1e-9

    square = [(0.0, 0.0), (100.0, 0.0), (100.0, 50.0), (0.0, 50.0)]
    hole = [(10.0, 10.0), (20.0, 10.0), (20.0, 20.0), (10.0, 20.0)]
    m = hp.polygon_metrics(square, [hole])
    assert abs(m["area_m2"] - 4900.0) < 1e-9, m
    cx, cy, side = hp.sampling_window(square)
    assert abs(side - 105.0) < 1e-9
    assert hp.floor_area(120.0, 9.5) == 360.0


def check_eval():
    assert hp.uplift_percent(0.4, 0.775) == 93.7
    assert hp.uplift_percent(0.0, 0.5) is None
    t = hp.paired_t_test([1.0, 2.0, 3.0, 4.0], [0.5, 1.0, 2.5, 2.0])
    assert t["n"] == 4 and t["t"] > 0 and 0 < t["p_two_sided"] < 1
    y = [float(i) for i in range(50)]
    strata = hp.quintile_strata(y)
    folds = hp.stratified_kfold(strata, 5, 3)
    assert sorted(set(folds)) == [0, 1, 2, 3, 4]
    assert hp.r_squared(y, y) == 1.0


def check_models():
    rng = random.Random(1)
    x = [[rng.uniform(-1, 1), rng.uniform(-1, 1)] for _ in range(60)]
    y = [3.0 * a - 2.0 * b + 0.5 for a, b in x]
    lin = hp.fit_linear(x, y)
    assert all(abs(w - e) < 1e-9 for w, e in zip(lin.weights, [3.0, -2.0]))
    assert abs(lin.bias - 0.5) < 1e-9
    ridge = hp.fit_ridge(x, y, 10.0)
    assert abs(ridge.weights[0]) < 3.0

    mlp = hp.mlp_train(x, y, seed=4, max_epochs=30, learning_rate=1e-3, hidden=(8, 8))
    assert mlp.layer_sizes == [2, 8, 8, 1]
    pred = mlp.predict(x)
    assert len(pred) == len(y) and all(math.isfinite(p) for p in pred)
    again = hp.MlpModel.from_checkpoint(mlp.to_checkpoint())
    assert again.predict(x) == pred


def check_semantics():
    v = hp.hashing_embed("dense perimeter blocks with flat roofs")
    assert len(v) == hp.EMBEDDING_DIM
    assert abs(math.sqrt(sum(a * a for a in v)) - 1.0) < 1e-12
    raw = json.dumps({"factors": [
        {"name": f"factor {i}", "description": "d", "confidence": 0.5} for i in range(5)
    ]})
    caption = hp.parse_caption(raw)
    assert len(caption["factors"]) == 5
    assert "factors" in hp.build_prompt()


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        config = hp.write_synthetic_project(Path(tmp) / "world", isolines=40, seed=3)
        assert hp.run_pipeline(config) == 0
        report = hp.load_cv_report(config)
        assert report["results"], report.keys()


if __name__ == "__main__":
    check_geometry()
    check_eval()
    check_models()
    check_semantics()
    check_pipeline()
    print("pyheatprompt smoke test passed")
