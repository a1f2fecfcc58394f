from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fkwatermelon import io
from fkwatermelon.rng import SWEEP_BLOCK, derive_seed, stream, sweep_uniforms
from fkwatermelon.stats import binomial_se, integrated_autocorr_time, non_increasing, weighted_fit


def test_streams_are_keyed():
    a = stream(1, 2).random(5)
    assert np.array_equal(a, stream(1, 2).random(5))
    assert not np.array_equal(a, stream(1, 3).random(5))
    assert derive_seed(4, 5) == derive_seed(4, 5) != derive_seed(5, 4)
    assert 0 <= derive_seed(1) < 2 ** 63


@given(st.integers(0, 3 * SWEEP_BLOCK), st.integers(1, 50))
def test_sweep_uniforms_do_not_depend_on_window(first, count):
    whole = sweep_uniforms(3, 0, 0, first + count, 4)
    assert np.array_equal(sweep_uniforms(3, 0, first, count, 4), whole[first:])


def test_atomic_json_and_jsonl_round_trip(tmp_path):
    man = io.make_manifest("x", {"a": np.int64(3), "b": [np.float64(0.5)]}, 9)
    p = io.write_jsonl(tmp_path / "r.jsonl", [{"v": 1}, {"v": 2}], man)
    m, rows = io.read_jsonl(p)
    assert m["params"] == {"a": 3, "b": [0.5]} and rows == [{"v": 1}, {"v": 2}]
    assert not list(tmp_path.glob("*.tmp"))
    io.write_csv(tmp_path / "r.csv", [{"n": 1, "x": 0.5}], manifest=man)
    m2, rows2 = io.read_csv(tmp_path / "r.csv")
    assert m2 == m and rows2 == [{"n": "1", "x": "0.5"}]


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n-list = 4,6  # comment\np = 0.3\nflag = true\nname = simple\n")
    assert io.read_config(p) == {"n_list": [4, 6], "p": 0.3, "flag": True, "name": "simple"}
    p.write_text("oops\n")
    with pytest.raises(ValueError):
        io.read_config(p)


def test_weighted_fit_recovers_line():
    x = np.arange(10.0)
    fit = weighted_fit(np.column_stack([np.ones_like(x), x]), 2 + 3 * x, np.ones_like(x))
    assert fit.coef == pytest.approx([2, 3]) and fit.chi2 == pytest.approx(0, abs=1e-18)
    assert fit.dof == 8 and not fit.ill_conditioned


def test_small_stat_helpers():
    assert binomial_se(0, 100) == pytest.approx(0.01)
    assert binomial_se(50, 100) == pytest.approx(0.05)
    assert non_increasing([3, 3, 1]) and not non_increasing([1, 2])
    rng = np.random.default_rng(0)
    assert integrated_autocorr_time(rng.standard_normal(20_000)) < 1.3
    ar = np.zeros(20_000)
    e = rng.standard_normal(20_000)
    for i in range(1, ar.size):
        ar[i] = 0.9 * ar[i - 1] + e[i]
    assert integrated_autocorr_time(ar) == pytest.approx((1 + 0.9) / (1 - 0.9), rel=0.25)
    assert math.isfinite(integrated_autocorr_time(np.ones(10)))
