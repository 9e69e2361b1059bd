"""Smoke test for the pyrevq extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o /tmp/wheels
    pip install /tmp/wheels/pyrevq-*.whl
"""

import math
import os
import tempfile

import pyrevq


def check_combinatorics():
    assert pyrevq.binomial(7, 3) == 35
    assert pyrevq.mask_bits(7, 3) == 6
    assert pyrevq.mask_bits(7, 7) == 0
    assert pyrevq.subset_rank([1, 2, 3], 7) == 0
    for rank in range(35):
        ids = pyrevq.subset_unrank(rank, 7, 3)
        assert pyrevq.subset_rank(ids, 7) == rank
    ceiled, exact = pyrevq.overhead_bps(7, 3, 1.0)
    assert ceiled == 6.0 and abs(exact - math.log2(35)) < 1e-12
    try:
        pyrevq.subset_rank([3, 1], 7)
    except ValueError:
        pass
    else:
        raise AssertionError("unsorted subset accepted")


def mse(a, b):
    n = sum(len(r) for r in a)
    return sum((x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb)) / n


def check_model():
    windows = pyrevq.synth_windows(modes=3, dim=4, frames_per_window=8, n_windows=60, seed=1)
    config = {
        "n_experts": "4",
        "shared_size": "16",
        "expert_size": "8",
        "steps": "30",
        "batch_windows": "8",
        "k_r": "vbr",
        "init_frames": "400",
    }
    model, history = pyrevq.train(windows, config)
    assert (model.n_experts, model.dim, model.shared_size, model.expert_size) == (4, 4, 16, 8)
    assert len(history) == 30 and all(math.isfinite(h) for h in history)

    w = windows[0]
    assert len(model.affinity(w)) == 4
    assert model.route(w, 2) == sorted(model.route(w, 2))
    errors = []
    for k in range(5):
        codes, recon = model.quantize(w, k)
        assert len(codes.selected) == k
        assert len(codes.shared_codes) == 8
        assert model.dequantize(codes) == recon
        errors.append(mse(w, recon))
    assert errors[4] <= errors[0]
    ids, oracle = model.oracle_select(w, 2)
    assert len(ids) == 2 and oracle <= mse(w, model.quantize(w, 2)[1]) + 1e-12

    copy = pyrevq.Model.from_bytes(model.to_bytes())
    assert copy.to_bytes() == model.to_bytes()
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.bin")
        model.save(path)
        assert pyrevq.Model.load(path).to_bytes() == model.to_bytes()

    samples = [0.5 * math.sin(2 * math.pi * 300 * i / 8000) for i in range(1001)]
    stream = model.encode(samples, 8000, k_r=2, frames_per_window=8)
    assert stream[:4] == b"RVQ1"
    out, sr = model.decode(stream)
    assert sr == 8000 and len(out) == 1001
    assert model.decode(stream) == (out, sr)
    try:
        model.decode(stream[:-1])
    except ValueError:
        pass
    else:
        raise AssertionError("truncated stream accepted")
    print(model, "batch mse", round(history[0], 4), "->", round(history[-1], 4))


if __name__ == "__main__":
    check_combinatorics()
    check_model()
    print("pyrevq smoke test passed")
