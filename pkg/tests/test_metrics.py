"""Metric correctness: closed forms, independent sliding-window SSIM oracle,
the frozen VIF golden value, monotonicity, and degenerate handling."""

import numpy as np
import pytest

from dualrec import metrics as me
from dualrec.errors import DimensionError, ParameterError
from vif_reference import golden_pair, vif_reference

GOLDEN_VIF = 0.429818022319  # produced by tests/vif_reference.py, frozen

SEEDS = list(range(20))


def _phantom():
    _, ref = golden_pair()
    return ref


def ssim_oracle(x, ref, data_range):
    """Independent implementation: explicit loops over valid windows."""
    r = np.arange(11, dtype=np.float64) - 5.0
    k = np.exp(-(r * r) / (2.0 * 1.5 * 1.5))
    k /= k.sum()
    w2 = np.outer(k, k)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            wx = x[i:i + 11, j:j + 11]
            wr = ref[i:i + 11, j:j + 11]
            mux = float((w2 * wx).sum())
            mur = float((w2 * wr).sum())
            varx = float((w2 * wx * wx).sum()) - mux * mux
            varr = float((w2 * wr * wr).sum()) - mur * mur
            cov = float((w2 * wx * wr).sum()) - mux * mur
            num = (2 * mux * mur + c1) * (2 * cov + c2)
            den = (mux * mux + mur * mur + c1) * (varx + varr + c2)
            vals.append(num / den)
    return float(np.mean(vals))


class TestPsnr:
    def test_closed_form_twenty_db(self):
        ref = np.zeros((16, 16))
        ref[0, 0] = 1.0  # makes max(ref)=1 so default range is 1
        x = ref + 0.1
        x[0, 0] = ref[0, 0] + 0.1
        # MSE = 0.01 exactly, data_range=1 -> 20 dB
        assert abs(me.psnr(x, ref, data_range=1.0) - 20.0) < 1e-12

    def test_identical_pair_capped(self):
        img = _phantom()
        assert me.psnr(img, img) == me.PSNR_CAP_DB

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        ref = rng.random((32, 32))
        x = ref + 0.05 * rng.standard_normal((32, 32))
        a = me.psnr(x, ref)
        b = me.psnr(2.0 * x, 2.0 * ref)
        assert abs(a - b) < 1e-9

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_noise_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        ref = _phantom()
        noise = rng.standard_normal(ref.shape)
        vals = [me.psnr(ref + lvl * noise, ref, data_range=1.0)
                for lvl in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_rejects_zero_range(self):
        with pytest.raises(ParameterError):
            me.psnr(np.ones((8, 8)), np.zeros((8, 8)))

    def test_rejects_dim_mismatch(self):
        with pytest.raises(DimensionError):
            me.psnr(np.zeros((8, 8)), np.zeros((8, 9)))


class TestSsim:
    def test_identical_pair_exactly_one(self):
        img = _phantom()
        assert me.ssim(img, img) == 1.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_sliding_window_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ref = rng.random((24, 24))
        x = np.clip(ref + 0.1 * rng.standard_normal((24, 24)), 0, 1)
        got = me.ssim(x, ref, data_range=1.0)
        want = ssim_oracle(x, ref, 1.0)
        assert abs(got - want) < 1e-8

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = rng.random((32, 32))
        b = rng.random((32, 32))
        assert abs(me.ssim(a, b, 1.0) - me.ssim(b, a, 1.0)) < 1e-12

    def test_inverted_image_scores_low(self):
        ref = _phantom()
        assert me.ssim(1.0 - ref, ref, data_range=1.0) < 0.5

    @pytest.mark.parametrize("seed", SEEDS[:5])
    def test_noise_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        ref = _phantom()
        noise = rng.standard_normal(ref.shape)
        vals = [me.ssim(ref + lvl * noise, ref, data_range=1.0)
                for lvl in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_window_larger_than_image_rejected(self):
        with pytest.raises(ParameterError):
            me.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestVif:
    def test_identical_pair_is_one(self):
        img = _phantom()
        val, degenerate = me.vif(img, img)
        assert val == 1.0 and not degenerate

    def test_golden_value_matches_independent_reference(self):
        dist, ref = golden_pair()
        val, degenerate = me.vif(dist, ref)
        assert not degenerate
        assert abs(val - GOLDEN_VIF) < 1e-6
        # and the reference itself still reproduces the frozen number
        assert abs(vif_reference(dist, ref) - GOLDEN_VIF) < 1e-9

    def test_noise_monotonicity_probe(self):
        rng = np.random.default_rng(1)
        ref = _phantom()
        noise = rng.standard_normal(ref.shape)
        v25, _ = me.vif(ref + (25.0 / 255.0) * noise, ref)
        v50, _ = me.vif(ref + (50.0 / 255.0) * noise, ref)
        assert v25 < 1.0
        assert v25 > v50

    @pytest.mark.parametrize("seed", SEEDS[:8])
    def test_one_iff_identical(self, seed):
        rng = np.random.default_rng(seed)
        ref = _phantom()
        x = ref + 0.02 * rng.standard_normal(ref.shape)
        val, _ = me.vif(x, ref)
        assert val != 1.0
        same, _ = me.vif(ref.copy(), ref)
        assert same == 1.0

    def test_degenerate_reference_flagged(self):
        flat = np.zeros((32, 32))
        val, degenerate = me.vif(flat + 0.3, flat)
        assert degenerate and val == 0.0
        val, degenerate = me.vif(flat.copy(), flat)
        assert degenerate and val == 1.0

    def test_small_image_rejected(self):
        with pytest.raises(ParameterError):
            me.vif(np.zeros((16, 16)), np.ones((16, 16)))

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        ref = _phantom()
        val, _ = me.vif(rng.random(ref.shape), ref)
        assert val >= 0.0


class TestReport:
    def test_compare_sets_flags(self):
        img = _phantom()
        rec = me.compare(img, img, slice_id="s0")
        assert rec.psnr_capped and rec.psnr_db == me.PSNR_CAP_DB
        assert rec.ssim == 1.0 and rec.vif == 1.0 and not rec.vif_degenerate

    def test_aggregates(self):
        rng = np.random.default_rng(4)
        ref = _phantom()
        rep = me.MetricReport()
        for i in range(4):
            x = ref + 0.03 * rng.standard_normal(ref.shape)
            rep.add(me.compare(x, ref, slice_id=f"s{i}"))
        summ = rep.summary()
        assert summ["n"] == 4
        per = [r.psnr_db for r in rep.records]
        assert abs(summ["psnr_db_mean"] - np.mean(per)) < 1e-12
        assert abs(summ["psnr_db_std"] - np.std(per)) < 1e-12
        assert not summ["any_psnr_capped"]

    def test_empty_summary_rejected(self):
        with pytest.raises(ParameterError):
            me.MetricReport().summary()
