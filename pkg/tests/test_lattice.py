import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import zeta as sp_zeta

from qmc_control.experiments import fit_rate
from qmc_control.field import build_model
from qmc_control.lattice import (
    GeneratingVector,
    bernoulli2,
    cbc_construct,
    choose_lambda,
    lattice_points,
    load_generating_vector,
    pod_weights,
    random_shifts,
    save_generating_vector,
    wce_squared,
    weights_for_model,
    zeta,
)


def brute_wce(gv, w):
    """Sum over all non-empty subsets of the dimensions."""
    n = gv.n
    i = np.arange(n)
    B = np.array([bernoulli2(((i * g) % n) / n) for g in gv.gen])
    total = 0.0
    for k in range(1, gv.s + 1):
        for u in itertools.combinations(range(gv.s), k):
            total += w.weight([j + 1 for j in u]) * np.mean(np.prod(B[list(u)], axis=0))
    return total


class TestChooseLambda:
    def test_small_p(self):
        assert choose_lambda(0.5, 0.05) == pytest.approx(1 / 1.9, rel=1e-15)

    def test_large_p(self):
        assert choose_lambda(0.75, 0.05) == pytest.approx(0.6, rel=1e-15)

    def test_boundary_uses_first_branch(self):
        assert choose_lambda(2 / 3, 0.05) == pytest.approx(1 / 1.9, rel=1e-15)

    @settings(max_examples=50)
    @given(st.floats(0.01, 0.99), st.floats(0.001, 0.49))
    def test_range(self, p, delta):
        lam = choose_lambda(p, delta)
        assert 0.5 < lam <= 1.0

    @pytest.mark.parametrize("p,delta", [(0.0, 0.05), (1.0, 0.05), (0.5, 0.0), (0.5, 0.5)])
    def test_rejects(self, p, delta):
        with pytest.raises(ValueError):
            choose_lambda(p, delta)


class TestZeta:
    @pytest.mark.parametrize("x", [1.05, 1.2, 1.9, 2.0, 3.5, 4.0, 10.0])
    def test_against_scipy(self, x):
        assert zeta(x) == pytest.approx(sp_zeta(x), rel=1e-13)

    def test_closed_forms(self):
        assert zeta(2.0) == pytest.approx(math.pi ** 2 / 6, rel=1e-14)
        assert zeta(4.0) == pytest.approx(math.pi ** 4 / 90, rel=1e-14)
        assert zeta(1.2) == pytest.approx(5.59158, abs=1e-5)

    def test_rejects(self):
        with pytest.raises(ValueError):
            zeta(1.0)


class TestWeights:
    def test_empty_set(self):
        w = pod_weights([0.3, 0.2], lam=0.7)
        assert w.weight([]) == 1.0

    @pytest.mark.parametrize("lam", [0.55, 0.7, 1.0])
    def test_singleton(self, lam):
        b = [0.3, 0.2]
        w = pod_weights(b, lam=lam)
        rho = 2 * sp_zeta(2 * lam) / (2 * math.pi ** 2) ** lam
        for j, bj in enumerate(b, start=1):
            assert w.weight([j]) == pytest.approx((2 * bj / math.sqrt(rho)) ** (2 / (1 + lam)), rel=1e-12)

    def test_lambda_one(self):
        w = pod_weights([0.3], lam=1.0)
        assert w.weight([1]) == pytest.approx(2 * math.sqrt(6) * 0.3, rel=1e-12)

    def test_pair_structure(self):
        lam = 0.8
        w = pod_weights([0.3, 0.2, 0.1], lam=lam)
        rho = w.rho
        expo = 2 / (1 + lam)
        expect = (6 * 0.3 * 0.1 / rho) ** expo
        assert w.weight([1, 3]) == pytest.approx(expect, rel=1e-12)

    def test_from_model(self):
        model = build_model(2.0, 5)
        w = weights_for_model(model)
        assert w.lam == pytest.approx(1 / 1.9)
        assert w.p == 0.5
        assert np.allclose(w.b, model.b)

    def test_rejects(self):
        with pytest.raises(ValueError):
            pod_weights([0.1, -0.1], lam=0.7)
        with pytest.raises(ValueError):
            pod_weights([0.1], lam=0.5)
        with pytest.raises(ValueError):
            pod_weights([0.1], lam=0.7, s=2)


@pytest.fixture(scope="module")
def w8():
    return weights_for_model(build_model(2.0, 8))


class TestWce:
    def test_single_point(self, w8):
        gv = GeneratingVector(1, (1, 1, 1))
        expect = sum(w8.weight(u) * 6.0 ** -len(u)
                     for k in (1, 2, 3) for u in itertools.combinations((1, 2, 3), k))
        assert wce_squared(gv, w8) == pytest.approx(expect, rel=1e-13)

    @pytest.mark.parametrize("n", [2, 4, 8, 16, 32])
    def test_against_subset_sum(self, w8, n):
        rng = np.random.default_rng(n)
        for s in (1, 2, 3, 5):
            gen = tuple(int(g) for g in rng.choice(np.arange(1, n, 2), s))
            gv = GeneratingVector(n, gen)
            assert wce_squared(gv, w8) == pytest.approx(brute_wce(gv, w8), rel=1e-12)

    def test_non_negative_and_monotone_in_prefix(self, w8):
        gv = cbc_construct(64, 8, w8)
        vals = [wce_squared(gv.truncated(s), w8) for s in range(1, 9)]
        assert all(v >= 0 for v in vals)
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_too_few_weights(self, w8):
        with pytest.raises(ValueError):
            wce_squared(GeneratingVector(8, (1,) * 9), w8)


class TestCbc:
    def test_first_component(self, w8):
        for n in (2, 4, 16, 256):
            assert cbc_construct(n, 1, w8).gen == (1,)

    @pytest.mark.parametrize("method", ["fast", "naive"])
    def test_exhaustive_second_component(self, w8, method):
        gv = cbc_construct(8, 2, w8, method=method)
        errs = {g: brute_wce(GeneratingVector(8, (1, g)), w8) for g in (1, 3, 5, 7)}
        best = min(errs.values())
        winners = [g for g, e in errs.items() if e <= best * (1 + 1e-10)]
        assert gv.gen == (1, min(winners))

    def test_greedy_minimality(self, w8):
        gv = cbc_construct(32, 4, w8)
        for s in range(2, 5):
            chosen = wce_squared(gv.truncated(s), w8)
            for g in range(1, 32, 2):
                trial = GeneratingVector(32, gv.gen[: s - 1] + (g,))
                assert chosen <= wce_squared(trial, w8) * (1 + 1e-10)

    def test_fast_equals_naive_larger(self):
        w = weights_for_model(build_model(1.5, 12))
        for m in (10, 11):
            assert cbc_construct(2 ** m, 12, w).gen == cbc_construct(2 ** m, 12, w, method="naive").gen

    def test_metadata_and_validity(self, w8):
        gv = cbc_construct(128, 8, w8)
        assert gv.n == 128 and gv.s == 8
        assert all(g % 2 == 1 and 1 <= g < 128 for g in gv.gen)
        assert gv.lam == w8.lam and gv.p == w8.p

    def test_wce_rate(self):
        w = weights_for_model(build_model(2.0, 10))
        ns = [2 ** m for m in range(4, 13)]
        errs = [math.sqrt(wce_squared(cbc_construct(n, 10, w), w)) for n in ns]
        # e ~ n^-(1 - delta) with delta = 0.05; the squared error then decays at twice the rate
        assert fit_rate(ns, errs) <= -0.95
        assert fit_rate(ns, [e * e for e in errs]) <= -1.9

    def test_deterministic(self, w8):
        assert cbc_construct(256, 8, w8) == cbc_construct(256, 8, w8)

    @pytest.mark.parametrize("n,s", [(1, 2), (12, 2), (8, 0), (8, 9)])
    def test_rejects(self, w8, n, s):
        with pytest.raises(ValueError):
            cbc_construct(n, s, w8)


class TestPoints:
    def test_unshifted_example(self):
        gv = GeneratingVector(4, (1, 3))
        y = lattice_points(gv)
        assert y.shape == (4, 2)
        assert np.array_equal(y[1], [0.0, 0.0])
        assert np.array_equal(y[3], [-0.5, -0.5])

    @pytest.mark.parametrize("n", [2, 16, 1024])
    def test_unshifted_mean(self, n):
        gv = GeneratingVector(n, (1, 3 % n if n > 2 else 1))
        assert np.allclose(lattice_points(gv).mean(axis=0), -0.5 / n, atol=1e-15)

    @settings(max_examples=30)
    @given(st.integers(1, 8), st.lists(st.floats(0, 1, exclude_max=True), min_size=3, max_size=3))
    def test_range_and_lattice_structure(self, m, shift):
        n = 2 ** m
        gv = GeneratingVector(n, (1, 1, 1 if n < 4 else 3))
        y = lattice_points(gv, shift)
        assert np.all(y >= -0.5) and np.all(y < 0.5)
        # each coordinate visits every shifted residue exactly once
        for j in range(3):
            base = np.sort(np.mod(y[:, j] + 0.5 - shift[j], 1.0) * n)
            assert np.allclose(np.round(base), base, atol=1e-6)
            assert len(set(np.round(base).astype(int) % n)) == n

    def test_shift_length(self):
        with pytest.raises(ValueError):
            lattice_points(GeneratingVector(4, (1, 3)), [0.1])


class TestShifts:
    def test_deterministic(self):
        a = random_shifts(5, 3, seed=7).shifts
        b = random_shifts(5, 3, seed=7).shifts
        assert np.array_equal(a, b)
        assert not np.array_equal(a, random_shifts(5, 3, seed=8).shifts)

    def test_range_and_mean(self):
        sh = random_shifts(10_000, 4, seed=1)
        assert sh.R == 10_000
        assert np.all(sh.shifts >= 0) and np.all(sh.shifts < 1)
        assert np.allclose(sh.shifts.mean(axis=0), 0.5, atol=0.02)

    def test_shape_and_read_only(self):
        sh = random_shifts(3, 2, 5)
        assert sh.shifts.shape == (3, 2) and sh.seed == 5
        with pytest.raises(ValueError):
            sh.shifts[0, 0] = 0.5

    def test_rejects(self):
        with pytest.raises(ValueError):
            random_shifts(0, 2, 1)


class TestGeneratingVectorIO:
    def test_round_trip(self, tmp_path, w8):
        gv = cbc_construct(64, 8, w8)
        path = tmp_path / "gen.txt"
        save_generating_vector(gv, path)
        back = load_generating_vector(path)
        assert back == gv
        assert back.digest() == gv.digest()

    def test_text_layout(self):
        gv = GeneratingVector(8, (1, 3), lam=0.6, p=0.5, theta=2.0)
        assert gv.to_text().splitlines() == ["n=8", "s=2", "lambda=0.6", "p=0.5", "theta=2.0", "1", "3"]

    def test_digest_changes_with_content(self):
        a = GeneratingVector(8, (1, 3))
        b = GeneratingVector(8, (1, 5))
        assert a.digest() != b.digest()
        assert len(a.digest()) == 64

    @pytest.mark.parametrize("text", ["s=1\n1\n", "n=8\ns=2\n1\n", "n=6\ns=1\n1\n", "n=8\ns=1\n2\n"])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            GeneratingVector.from_text(text)
