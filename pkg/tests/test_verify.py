"""Exact binomial verification math, checked against independent oracles.

The oracles here deliberately avoid math.comb so they share nothing with the
implementation: a Pascal-triangle built by addition, and for small n a literal
enumeration of all 2^n extractor outcomes by popcount.
"""

from fractions import Fraction

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmark.verify import (
    bernoulli_diagnostics,
    bit_accuracy,
    bits_to_hex,
    detect,
    fpr,
    hex_to_bits,
    threshold_for_fpr,
)


def pascal_row(n: int) -> list[int]:
    row = [1]
    for _ in range(n):
        row = [1] + [row[i] + row[i + 1] for i in range(len(row) - 1)] + [1]
    return row


def fpr_pascal(n: int, k: int) -> Fraction:
    row = pascal_row(n)
    return Fraction(sum(row[k + 1 :]), 2**n)


def fpr_enumerate(n: int, k: int) -> Fraction:
    # literal null model: every bit pattern equally likely, count patterns
    # whose match count (popcount against the all-ones key) exceeds k
    hits = sum(1 for v in range(2**n) if bin(v).count("1") > k)
    return Fraction(hits, 2**n)


class TestFpr:
    def test_trivial_endpoints(self):
        assert fpr(1, 0) == Fraction(1, 2)
        assert fpr(1, 1) == 0
        assert fpr(8, 8) == 0
        assert fpr(4, 0) == Fraction(15, 16)

    def test_exact_fraction_type(self):
        out = fpr(48, 30)
        assert isinstance(out, Fraction)
        assert out.denominator & (out.denominator - 1) == 0  # power of two

    def test_against_pascal_oracle_all_n_up_to_20(self):
        for n in range(1, 21):
            for k in range(n + 1):
                assert fpr(n, k) == fpr_pascal(n, k), (n, k)

    def test_against_enumeration_oracle(self):
        for n in (1, 2, 5, 8, 12):
            for k in range(n + 1):
                assert fpr(n, k) == fpr_enumerate(n, k), (n, k)

    def test_scipy_cross_check(self):
        # regularized incomplete beta I_{1/2}(k+1, n-k) equals the tail; this
        # is a numerical cross-check only, the Fraction path is authoritative
        scipy_special = pytest.importorskip("scipy.special")
        for n in (16, 48, 64):
            for k in range(n):
                num = float(scipy_special.betainc(k + 1, n - k, 0.5))
                assert abs(float(fpr(n, k)) - num) < 1e-12, (n, k)

    def test_monotone_decreasing_in_k(self):
        for n in (5, 16, 48):
            vals = [fpr(n, k) for k in range(n + 1)]
            assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            fpr(0, 0)
        with pytest.raises(ValueError):
            fpr(8, -1)
        with pytest.raises(ValueError):
            fpr(8, 9)

    @given(st.integers(min_value=1, max_value=64), st.data())
    @settings(max_examples=50, deadline=None)
    def test_tail_sum_identity(self, n, data):
        # FPR(k-1) - FPR(k) = C(n,k)/2^n
        k = data.draw(st.integers(min_value=1, max_value=n))
        diff = fpr(n, k - 1) - fpr(n, k)
        assert diff == Fraction(pascal_row(n)[k], 2**n)


def threshold_oracle(n: int, target: float) -> int:
    # ascending scan using the pascal oracle only
    for k in range(n + 1):
        if fpr_pascal(n, k) <= target:
            return k
    raise AssertionError


class TestThreshold:
    def test_closed_endpoints(self):
        assert threshold_for_fpr(16, 1.0).k_star == 0
        assert threshold_for_fpr(16, 0.0).k_star == 16

    def test_minimality_invariant(self):
        for n in (16, 32, 48):
            for target in (0.5, 1e-2, 1e-4, 1e-6):
                th = threshold_for_fpr(n, target)
                assert fpr(n, th.k_star) <= target
                if th.k_star > 0:
                    assert fpr(n, th.k_star - 1) > target

    def test_n48_default_operating_point(self):
        th = threshold_for_fpr(48, 1e-6)
        assert th.k_star == threshold_oracle(48, 1e-6)
        assert float(th.achieved_fpr) <= 1e-6
        assert th.to_dict()["achieved_fpr_exact"].count("/") == 1

    def test_n16_at_1e6_requires_all_bits(self):
        # FPR(15) = 1/65536 is still above 1e-6, so the rule M > k* can
        # never fire at n=16: this is why pipeline configs use n=48
        th = threshold_for_fpr(16, 1e-6)
        assert th.k_star == 16
        assert fpr(16, 15) == Fraction(1, 65536)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            threshold_for_fpr(16, -0.1)
        with pytest.raises(ValueError):
            threshold_for_fpr(16, 1.5)

    @given(
        st.integers(min_value=1, max_value=40),
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    )
    @settings(max_examples=80, deadline=None)
    def test_matches_oracle_everywhere(self, n, target):
        assert threshold_for_fpr(n, target).k_star == threshold_oracle(n, target)


class TestBits:
    def test_hex_round_trip(self):
        msg = "a3f09c12bd04"
        bits = hex_to_bits(msg, 48)
        assert bits.shape == (48,)
        assert bits_to_hex(bits) == msg

    def test_prefix_and_case(self):
        assert torch.equal(hex_to_bits("0xAB", 8), hex_to_bits("ab", 8))

    def test_msb_first(self):
        assert hex_to_bits("8", 4).tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_length_checked(self):
        with pytest.raises(ValueError):
            hex_to_bits("abc", 16)
        with pytest.raises(ValueError):
            hex_to_bits("zz", 8)

    def test_excess_bits_rejected(self):
        # n=6 uses 2 hex digits but only values < 64
        with pytest.raises(ValueError):
            hex_to_bits("ff", 6)
        assert hex_to_bits("3f", 6).tolist() == [1.0] * 6


class TestBitAccuracy:
    def test_identical_and_complement(self):
        m = hex_to_bits("c4d2", 16)
        assert bit_accuracy(m, m) == 1.0
        assert bit_accuracy(1.0 - m, m) == 0.0

    def test_three_flips_of_sixteen(self):
        m = torch.zeros(16)
        e = m.clone()
        e[[2, 7, 11]] = 1.0
        assert bit_accuracy(e, m) == 13 / 16

    def test_soft_inputs_rounded(self):
        m = torch.tensor([1.0, 0.0, 1.0, 1.0])
        soft = torch.tensor([0.9, 0.2, 0.51, 0.49])
        assert bit_accuracy(soft, m) == 3 / 4

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bit_accuracy(torch.zeros(8), torch.zeros(16))


class TestDetect:
    def test_verdict_is_strict_inequality(self):
        n = 8
        th = threshold_for_fpr(n, 0.5)  # small k*, easy to straddle
        msg = torch.ones(n)
        k = th.k_star
        exactly_k = torch.cat([torch.ones(k), torch.zeros(n - k)])[None, :]
        above = torch.cat([torch.ones(k + 1), torch.zeros(n - k - 1)])[None, :]
        rep = detect(torch.cat([exactly_k, above]), msg, th)
        assert rep.detected == [False, True]
        assert rep.match_counts == [k, k + 1]
        assert rep.tpr == 0.5

    def test_empty_set_rejected(self):
        th = threshold_for_fpr(8, 0.5)
        with pytest.raises(ValueError):
            detect(torch.zeros(0, 8), torch.ones(8), th)

    def test_length_mismatch_rejected(self):
        th = threshold_for_fpr(8, 0.5)
        with pytest.raises(ValueError):
            detect(torch.zeros(3, 16), torch.ones(16), th)

    def test_report_fields_consistent(self):
        g = torch.Generator().manual_seed(7)
        n = 48
        th = threshold_for_fpr(n, 1e-6)
        msg = hex_to_bits("deadbeefcafe", n)
        soft = torch.rand(20, n, generator=g)
        rep = detect(soft, msg, th)
        assert rep.num_images == 20
        assert len(rep.match_counts) == 20
        assert rep.tpr == sum(rep.detected) / 20
        expected_mean = sum(rep.match_counts) / (20 * n)
        assert abs(rep.mean_bit_accuracy - expected_mean) < 1e-12
        d = rep.to_dict()
        assert d["k_star"] == th.k_star

    def test_deterministic(self):
        g = torch.Generator().manual_seed(3)
        soft = torch.rand(10, 16, generator=g)
        th = threshold_for_fpr(16, 1e-2)
        msg = hex_to_bits("b00c", 16)
        r1 = detect(soft, msg, th)
        r2 = detect(soft, msg, th)
        assert r1.to_dict() == r2.to_dict()


class TestBernoulliDiagnostics:
    def test_fair_coin_passes(self):
        g = torch.Generator().manual_seed(11)
        soft = torch.rand(4000, 16, generator=g)
        diag = bernoulli_diagnostics(soft)
        assert diag["passed"]
        assert all(0.4 <= m <= 0.6 for m in diag["per_bit_means"])

    def test_constant_extractor_flagged(self):
        soft = torch.full((100, 16), 0.9)
        diag = bernoulli_diagnostics(soft)
        assert not diag["means_in_bounds"]
        assert not diag["passed"]

    def test_correlated_bits_flagged(self):
        g = torch.Generator().manual_seed(5)
        col = (torch.rand(500, 1, generator=g) > 0.5).float()
        soft = col.repeat(1, 16)  # all bits identical per image
        diag = bernoulli_diagnostics(soft)
        assert diag["max_abs_offdiag_corr"] > 0.9
        assert not diag["corr_in_bounds"]

    def test_too_few_images(self):
        with pytest.raises(ValueError):
            bernoulli_diagnostics(torch.rand(1, 16))
