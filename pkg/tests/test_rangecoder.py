import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnetpc import rangecoder as rc


def reference_quantize(p):
    """Straight-line pure-Python version of the quantization rule."""
    total = 1 << 16
    s = math.fsum(p)
    scaled = [v * total / s for v in p]
    mass = [math.floor(v) for v in scaled]
    deficit = total - sum(mass)
    order = sorted(range(len(p)), key=lambda i: (-(scaled[i] - mass[i]), i))
    for i in order[:deficit]:
        mass[i] += 1
    zeros = [i for i, m in enumerate(mass) if m == 0]
    for i in zeros:
        mass[i] = 1
    for _ in zeros:
        j = max(range(len(mass)), key=lambda i: (mass[i], -i))
        mass[j] -= 1
    cum = [0]
    for m in mass:
        cum.append(cum[-1] + m)
    return cum


class TestQuantize:
    def test_halves(self):
        assert rc.quantize_pmf([0.5, 0.5]).tolist() == [0, 32768, 65536]

    def test_zero_mass_raised(self):
        assert rc.quantize_pmf([1.0, 0.0]).tolist() == [0, 65535, 65536]

    def test_random_256(self, rng):
        cum = rc.quantize_pmf(rng.dirichlet(np.full(256, 0.1)))
        mass = np.diff(cum)
        assert cum[-1] == 65536 and mass.min() >= 1

    def test_matches_reference(self, rng):
        for _ in range(300):
            k = int(rng.integers(2, 64))
            p = rng.dirichlet(np.full(k, rng.choice([0.01, 0.3, 3.0])))
            assert rc.quantize_pmf(p).tolist() == reference_quantize(p.tolist())

    def test_batch_equals_rows(self, rng):
        probs = rng.dirichlet(np.full(40, 0.2), size=50)
        batch = rc.quantize_rows(probs)
        for row, cum in zip(probs, batch):
            assert np.array_equal(rc.quantize_rows(row[None])[0], cum)

    def test_power_of_two_scale_invariance(self, rng):
        p = rng.random(30)
        assert np.array_equal(rc.quantize_pmf(p), rc.quantize_pmf(p * 8.0))

    @pytest.mark.parametrize("bad", [[1.0], [0.0, 0.0], [0.5, -0.1], [np.nan, 1.0]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            rc.quantize_pmf(bad)

    def test_uniform(self):
        assert np.diff(rc.uniform_cdf(256)).tolist() == [256] * 256
        assert np.diff(rc.uniform_cdf(3)).tolist() == [21846, 21845, 21845]


class TestCoder:
    def test_fair_bits(self):
        cdf = rc.quantize_pmf([0.5, 0.5])
        syms = np.random.default_rng(0).integers(0, 2, 1024).tolist()
        data = rc.encode(syms, [cdf] * 1024)
        assert 128 <= len(data) <= 144
        assert rc.decode(data, 1024, lambda i, _: cdf) == syms

    def test_empty(self):
        data = rc.encode([], [])
        assert len(data) <= 16
        assert rc.decode(data, 0, lambda i, _: None) == []

    def test_adaptive_provider(self, rng):
        # the provider sees the decoded prefix, as a context model would
        syms = rng.integers(0, 3, 500).tolist()

        def cdf_for(prefix):
            counts = np.bincount(prefix[-8:], minlength=3) + 1.0
            return rc.quantize_pmf(counts / counts.sum())

        data = rc.encode(syms, [cdf_for(syms[:i]) for i in range(len(syms))])
        assert rc.decode(data, len(syms), lambda i, out: cdf_for(out)) == syms

    def test_near_certain_symbols(self):
        cdf = rc.quantize_pmf([1.0, 0.0])
        syms = [0] * 5000 + [1] + [0] * 10
        data = rc.encode(syms, [cdf] * len(syms))
        assert rc.decode(data, len(syms), lambda i, _: cdf) == syms
        assert 8 * len(data) <= sum(rc.symbol_bits(cdf, s) for s in syms) + 128

    def test_many_random(self, rng):
        from cnetpc.selftest import check_coder
        assert check_coder(1000, seed=3) == 0

    @given(st.lists(st.integers(0, 9), max_size=200), st.integers(0, 2 ** 32 - 1))
    def test_roundtrip_and_bound(self, syms, seed):
        r = np.random.default_rng(seed)
        cdfs = rc.quantize_rows(r.dirichlet(np.full(10, 0.3), size=max(len(syms), 1)))[: len(syms)]
        data = rc.encode(syms, cdfs)
        assert rc.decode(data, len(syms), lambda i, _: cdfs[i]) == syms
        assert 8 * len(data) <= sum(rc.symbol_bits(c, s) for c, s in zip(cdfs, syms)) + 128

    def test_zero_mass_symbol_rejected(self):
        with pytest.raises(ValueError):
            rc.encode([1], [np.array([0, 65536, 65536])])

    def test_truncated_payload(self):
        cdf = rc.quantize_pmf([0.5, 0.5])
        data = rc.encode([1, 0] * 100, [cdf] * 200)
        with pytest.raises(rc.CoderError):
            rc.decode(data[:-3], 200, lambda i, _: cdf)

    def test_trailing_bytes(self):
        cdf = rc.quantize_pmf([0.5, 0.5])
        data = rc.encode([1, 0, 1], [cdf] * 3)
        with pytest.raises(rc.CoderError):
            rc.decode(data + b"\x00", 3, lambda i, _: cdf)
