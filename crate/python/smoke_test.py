"""Smoke test for the deq_py extension module.

Build the module first, e.g.

    cargo build -p deq-py --release --features extension-module
    cp target/release/libdeq_py.so python/deq_py.so

then run `python3 python/smoke_test.py` from the repository root.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import deq_py  # noqa: E402


def main():
    ds = deq_py.Dataset.synthetic(8, 6, 0)
    assert (ds.n, ds.d) == (8, 6)
    for j in range(ds.n):
        norm = math.sqrt(sum(ds.x[i][j] ** 2 for i in range(ds.d)))
        assert abs(norm - math.sqrt(ds.d)) < 1e-9

    p = deq_py.DeqParams.init(40, 6, 0.08, 1)
    assert p.spectral_norm() < 1.0

    sol = deq_py.solve_equilibrium(p, ds)
    assert sol["residual"] <= 1e-10
    assert len(sol["z"]) == 40 and len(sol["z"][0]) == 8

    g = deq_py.gradients(p, ds)
    assert len(g["w"]) == 40 and len(g["u"][0]) == 6 and len(g["a"]) == 40

    k = deq_py.population_kernel(ds, 0.08)
    assert k["lambda_star"] > 0.0

    rep = deq_py.check_condition(p, ds)
    assert rep["eta_max"] > 0.0 and len(rep["margins"]) == 3

    before = deq_py.loss(p, ds)
    trained, records = deq_py.train_model(p, ds, 20, eta=0.005)
    after = deq_py.loss(trained, ds)
    assert len(records) == 21 and after < before
    assert all(r["w_spec_norm"] < 1.0 for r in records)

    try:
        deq_py.DeqParams.init(40, 6, 0.2, 1)
    except deq_py.DeqException as e:
        assert "sigma" in str(e).lower()
    else:
        raise AssertionError("sigma_w2 = 0.2 should be rejected")

    print(f"smoke test ok: loss {before:.4f} -> {after:.4f}, lambda* = {k['lambda_star']:.4f}")


if __name__ == "__main__":
    main()
