from __future__ import annotations

import itertools

import numpy as np
import pytest

from mgrulab.cells import (
    BNConfig,
    CellBNMode,
    GateBNMode,
    gate_combine,
    gate_combine_backward,
    init_mgru_params,
    init_mgruip_params,
    mgru_backward,
    mgru_step,
    mgruip_backward,
    mgruip_ctx_step,
    mgruip_step,
    named_params,
    set_bn_mode,
    zero_grads,
)
from mgrulab.numerics import ShapeError
from mgrulab.training import grad_check_cell

GATE_MODES = (GateBNMode.NONE, GateBNMode.ITOH, GateBNMode.BOTH)
CELL_MODES = (CellBNMode.ITOH, CellBNMode.BOTH)
ALL_CONFIGS = [BNConfig(gate=g, cell=c) for g, c in itertools.product(GATE_MODES, CELL_MODES)]


def make_mgru(cfg, d_in=3, n=5, seed=0):
    rng = np.random.default_rng(seed)
    params = init_mgru_params(d_in, n, cfg, rng)
    x = rng.normal(size=(4, d_in))
    h_prev = rng.normal(size=(4, n))
    return params, x, h_prev


def make_mgruip(cfg, d_in=3, n=5, p=3, seed=0):
    rng = np.random.default_rng(seed)
    params = init_mgruip_params(d_in, n, p, cfg, rng)
    x = rng.normal(size=(4, d_in))
    h_prev = rng.normal(size=(4, n))
    return params, x, h_prev


class TestGateCombine:
    def test_all_ones_keeps_previous_state(self):
        rng = np.random.default_rng(0)
        h_prev = rng.normal(size=(4, 5))
        cand = rng.normal(size=(4, 5))
        assert np.array_equal(gate_combine(np.ones((4, 5)), h_prev, cand), h_prev)

    def test_all_zeros_takes_candidate(self):
        rng = np.random.default_rng(1)
        h_prev = rng.normal(size=(4, 5))
        cand = rng.normal(size=(4, 5))
        assert np.array_equal(gate_combine(np.zeros((4, 5)), h_prev, cand), cand)

    def test_backward_identity_path_when_gate_saturated(self):
        rng = np.random.default_rng(2)
        upstream = rng.normal(size=(4, 5))
        h_prev = rng.normal(size=(4, 5))
        cand = rng.normal(size=(4, 5))
        _, dh_prev, dcand = gate_combine_backward(upstream, np.ones((4, 5)), h_prev, cand)
        assert np.array_equal(dh_prev, upstream)
        assert np.array_equal(dcand, np.zeros((4, 5)))


class TestStepEndpoints:
    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgru_gate_override_one(self, cfg):
        params, x, h_prev = make_mgru(cfg)
        h, _ = mgru_step(x, h_prev, params, cfg, gate_override=np.ones(1))
        assert np.array_equal(h, h_prev)

    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgru_gate_override_zero_gives_candidate(self, cfg):
        params, x, h_prev = make_mgru(cfg)
        h, cache = mgru_step(x, h_prev, params, cfg, gate_override=np.zeros(1))
        assert np.array_equal(h, cache.cand)

    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgruip_gate_override_one(self, cfg):
        params, x, h_prev = make_mgruip(cfg)
        h, _ = mgruip_step(x, h_prev, params, cfg, gate_override=np.ones(1))
        assert np.array_equal(h, h_prev)

    def test_override_backward_passes_upstream_through(self):
        cfg = BNConfig()
        params, x, h_prev = make_mgru(cfg)
        rng = np.random.default_rng(3)
        upstream = rng.normal(size=h_prev.shape)
        _, cache = mgru_step(x, h_prev, params, cfg, gate_override=np.ones(1))
        _, dh_prev, grads = mgru_backward(upstream, cache, params, cfg)
        assert np.array_equal(dh_prev, upstream)
        for name in ("W_z", "U_z"):
            assert np.array_equal(grads[name], np.zeros_like(grads[name]))


class TestStepStructure:
    def test_mgruip_state_only_enters_via_gate_when_w_v2_zero(self):
        cfg = BNConfig(gate=GateBNMode.NONE, cell=CellBNMode.BOTH)
        params, x, h_prev = make_mgruip(cfg)
        params.W_v2[:] = 0.0
        h1, cache1 = mgruip_step(x, h_prev, params, cfg)
        other = np.random.default_rng(9).normal(size=h_prev.shape)
        h2, cache2 = mgruip_step(x, other, params, cfg)
        # the projection sees only x, so gate and candidate agree across states
        assert np.array_equal(cache1.v, cache2.v)
        assert np.array_equal(cache1.cand, cache2.cand)
        assert np.array_equal(cache1.z, cache2.z)
        # states differ only through the z * h_prev term
        assert np.allclose(h1 - h2, cache1.z * (h_prev - other), atol=1e-12)

    def test_ctx_step_is_projected_step_on_raw_input(self):
        cfg = BNConfig()
        params, x, h_prev = make_mgruip(cfg)
        h_ip, _ = mgruip_step(x, h_prev, params, cfg)
        set_bn_mode(params, "train")
        # re-init running stats mutated by the first call, then compare
        rng = np.random.default_rng(0)
        params2 = init_mgruip_params(3, 5, 3, cfg, rng)
        h_ctx, _ = mgruip_ctx_step(x, h_prev, params2, cfg)
        assert np.array_equal(h_ip, h_ctx)

    def test_shape_errors(self):
        cfg = BNConfig()
        params, x, h_prev = make_mgru(cfg)
        with pytest.raises(ShapeError):
            mgru_step(x[:, :2], h_prev, params, cfg)
        with pytest.raises(ShapeError):
            mgru_step(x, h_prev[:, :3], params, cfg)
        params_ip, x_ip, h_ip = make_mgruip(cfg)
        with pytest.raises(ShapeError):
            mgruip_ctx_step(np.zeros((4, 7)), h_ip, params_ip, cfg)

    def test_bottleneck_invariant_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            init_mgruip_params(3, 5, 8, BNConfig(), rng)

    def test_zero_upstream_gives_zero_grads(self):
        for cfg in ALL_CONFIGS:
            params, x, h_prev = make_mgru(cfg)
            _, cache = mgru_step(x, h_prev, params, cfg)
            dx, dh_prev, grads = mgru_backward(np.zeros_like(h_prev), cache, params, cfg)
            assert not dx.any() and not dh_prev.any()
            assert not any(g.any() for g in grads.values())

    def test_grads_cover_every_named_param(self):
        for cfg in ALL_CONFIGS:
            params, x, h_prev = make_mgruip(cfg)
            _, cache = mgruip_step(x, h_prev, params, cfg)
            _, _, grads = mgruip_backward(np.ones_like(h_prev), cache, params, cfg)
            assert set(grads) == set(named_params(params))
            assert set(zero_grads(params)) == set(named_params(params))


class TestGateSaturation:
    def test_fresh_both_bn_pins_gate_near_half_mgru(self):
        cfg = BNConfig(gate=GateBNMode.BOTH, cell=CellBNMode.BOTH)
        rng = np.random.default_rng(10)
        params = init_mgru_params(6, 8, cfg, rng)
        x = rng.normal(size=(64, 6))
        h_prev = rng.normal(size=(64, 8))
        _, cache = mgru_step(x, h_prev, params, cfg)
        per_cell = cache.z.mean(axis=0)
        assert np.all(per_cell >= 0.4) and np.all(per_cell <= 0.6)

    def test_fresh_both_bn_pins_gate_near_half_mgruip(self):
        cfg = BNConfig(gate=GateBNMode.BOTH, cell=CellBNMode.BOTH)
        rng = np.random.default_rng(11)
        params = init_mgruip_params(6, 8, 4, cfg, rng)
        x = rng.normal(size=(64, 6))
        h_prev = rng.normal(size=(64, 8))
        _, cache = mgruip_step(x, h_prev, params, cfg)
        per_cell = cache.z.mean(axis=0)
        assert np.all(per_cell >= 0.4) and np.all(per_cell <= 0.6)

    def test_no_bn_zero_weights_gate_exactly_half(self):
        cfg = BNConfig(gate=GateBNMode.NONE, cell=CellBNMode.BOTH)
        params, x, h_prev = make_mgru(cfg)
        params.W_z[:] = 0.0
        params.U_z[:] = 0.0
        params.b_z[:] = 0.0
        _, cache = mgru_step(x, h_prev, params, cfg)
        assert np.all(cache.z == 0.5)


class TestGradients:
    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgru_finite_differences(self, cfg):
        report = grad_check_cell("mgru", cfg, seed=20)
        assert report.passed, str(report)

    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgruip_finite_differences(self, cfg):
        report = grad_check_cell("mgruip", cfg, seed=21)
        assert report.passed, str(report)

    @pytest.mark.parametrize("cfg", ALL_CONFIGS, ids=str)
    def test_mgruip_ctx_finite_differences(self, cfg):
        report = grad_check_cell("mgruip-ctx", cfg, seed=22)
        assert report.passed, str(report)
