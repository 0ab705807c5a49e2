"""Quick end-to-end check of the Python bindings.

Build and install first, e.g. ``pip install --no-build-isolation ./crates/python``
or ``maturin develop -m crates/python/Cargo.toml``.
"""

import math
import os
import random
import tempfile

import uncertflow_py as uf


def check_mixture():
    m = uf.Mixture([0.5, -1.0], [0.3, -0.2], [0.0, 1.0], bounds=[(1.0, 1.0), (2.0, 4096.0)])
    w = m.weights()
    assert abs(sum(w) - 1.0) < 1e-12
    y = [1.5, 0.25]
    assert abs(m.nll(y) + math.log(m.density(y))) < 1e-9
    p1, p3 = m.confidence(1.0), m.confidence(3.0)
    assert 0.0 < p1 < p3 <= 1.0
    assert m.variance() > 0.0


def check_flow_io(tmp):
    rows = [[[0.5 * x, -0.25 * y] for x in range(7)] for y in range(5)]
    flow = uf.Flow.from_rows(rows)
    path = os.path.join(tmp, "f.flo")
    flow.write(path)
    back = uf.Flow.read(path)
    assert (back.width, back.height) == (7, 5)
    assert back.aepe(flow) < 1e-6
    assert back.pck(flow, 1.0) == 100.0


def check_homography():
    h = uf.Homography([[1.02, 0.01, 2.0], [-0.01, 0.98, -1.0], [1e-4, 0.0, 1.0]])
    src = [[0.0, 0.0], [30.0, 0.0], [0.0, 30.0], [30.0, 30.0], [12.0, 17.0]]
    dst = [h.apply(*p) for p in src]
    fit = uf.Homography.fit(src, dst)
    x, y = fit.apply(20.0, 5.0)
    ex, ey = h.apply(20.0, 5.0)
    assert math.hypot(x - ex, y - ey) < 1e-6
    assert fit.to_flow(16, 16).width == 16


def check_model(tmp):
    s = uf.synthetic_sample(3, 0, width=32, height=32)
    assert len(s.query) == 32 and len(s.query[0]) == 32
    model = uf.Model.init(32, 32, seed=1)
    path = os.path.join(tmp, "m.ckpt")
    model.save(path)
    model = uf.Model.load(path)
    assert model.num_params > 0
    flow, conf = model.predict(s.query, s.reference, mode="D")
    assert (flow.width, flow.height) == (32, 32)
    assert all(0.0 <= p <= 1.0 for row in conf for p in row)
    again, _ = model.predict(s.query, s.reference, mode="D")
    assert again.to_rows() == flow.to_rows()
    print("untrained AEPE on sample:", round(flow.aepe(s.flow), 3))


def check_ause():
    rng = random.Random(0)
    errors = [rng.random() for _ in range(500)]
    assert abs(uf.ause(errors, errors)) < 1e-12
    assert uf.ause(errors, [rng.random() for _ in errors]) > 0.0


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        check_mixture()
        check_flow_io(tmp)
        check_homography()
        check_model(tmp)
        check_ause()
    print("uncertflow_py", uf.__version__, "smoke test passed")
