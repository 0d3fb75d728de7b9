import json
import os
import tempfile

import numpy as np
import pytest

import dybnn


def signs(a):
    return np.where(a > 0, 1, -1).astype(np.int64)


def test_binary_gemm_matches_integer_product():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, (7, 130)).astype(np.float32)
    b = rng.uniform(-1, 1, (5, 130)).astype(np.float32)
    got = dybnn.binary_gemm(a, b)
    assert got.dtype == np.int32
    np.testing.assert_array_equal(got, signs(a) @ signs(b).T)


def test_xnor_dot_counts_agreements():
    a = np.array([1, -1, 1, 1, -1], dtype=np.float32)
    b = np.array([1, 1, -1, 1, -1], dtype=np.float32)
    assert dybnn.xnor_popcount_dot(a, b) == 1
    with pytest.raises(ValueError):
        dybnn.xnor_popcount_dot(a, b[:4])


def test_binary_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (1, 2, 5, 5)).astype(np.float32)
    w = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32)
    y = dybnn.binary_conv2d(x, w, stride=1, padding=0)
    assert y.shape == (1, 3, 3, 3)
    sx, sw = signs(x), signs(w)
    for o in range(3):
        for i in range(3):
            for j in range(3):
                assert y[0, o, i, j] == np.sum(sx[0, :, i:i + 3, j:j + 3] * sw[o])


def test_cost_model():
    assert dybnn.dysign_overhead(256, 16) == 8448
    r = dybnn.count_ops("reactnet")
    assert r["bops"] == 4816896000
    assert r["ops"] == r["bops"] / 64 + r["flops"]
    assert "dybcnn_micro" in dybnn.preset_names()
    s = dybnn.count_ops("dybinarycct_2", binarizer="sign")
    d = dybnn.count_ops("dybinarycct_2", binarizer="dysign")
    assert d["flops"] > s["flops"] and d["bops"] == s["bops"]
    with pytest.raises(ValueError):
        dybnn.count_ops("no_such_preset")


def test_cli_cost_writes_json():
    with tempfile.TemporaryDirectory() as out:
        code, stdout, _ = dybnn.run_cli(["cost", "--preset", "binarycct_6", "--out", out])
        assert code == 0
        assert "OPs" in stdout
        with open(os.path.join(out, "cost.json")) as f:
            assert json.load(f)["totals"]["bops"] > 0
    code, _, err = dybnn.run_cli(["frobnicate"])
    assert code == 1 and err
