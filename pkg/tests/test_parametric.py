"""Exactness and tiling of the piecewise-linear decomposition."""

import numpy as np
import pytest

from siad.errors import NumericalDiagnosticError
from siad.model import ArchitectureSpec, init_weights, reconstruct, zero_weights
from siad.parametric import (AffineLine, _maxpool2_affine, _relu_affine,
                             parametric_infer, scan_linear_pieces)


class TestReluAffine:
    def test_single_neuron_breakpoint(self):
        """Pre-activation 1 + 2z on [-5, 5]: off below -0.5, linear above."""
        def eval_fn(z_probe):
            off, slope, crossing = _relu_affine(np.array([1.0]), np.array([2.0]),
                                                z_probe)
            return off, slope, crossing

        pieces = scan_linear_pieces(eval_fn, (-5.0, 5.0))
        assert len(pieces) == 2
        lo_piece, hi_piece = pieces
        assert lo_piece[0] == -5.0
        assert lo_piece[1] == pytest.approx(-0.5, abs=1e-9)
        np.testing.assert_allclose(lo_piece[2], [0.0])
        np.testing.assert_allclose(lo_piece[3], [0.0])
        assert hi_piece[1] == 5.0
        np.testing.assert_allclose(hi_piece[2], [1.0])
        np.testing.assert_allclose(hi_piece[3], [2.0])

    def test_inactive_unit_with_negative_slope_never_crosses(self):
        _, _, crossing = _relu_affine(np.array([-1.0]), np.array([-2.0]), 0.0)
        assert crossing == np.inf

    def test_zero_preactivation_gate_follows_slope(self):
        off, slope, _ = _relu_affine(np.array([0.0, 0.0]), np.array([1.0, -1.0]), 0.0)
        np.testing.assert_array_equal(slope, [1.0, 0.0])


class TestMaxpoolAffine:
    def test_overtake_crossing(self):
        # channel with 4 competitors: constant 1 vs line z; they meet at z=1
        off = np.array([[[1.0, 0.0], [-5.0, -5.0]]])
        slope = np.array([[[0.0, 1.0], [0.0, 0.0]]])
        out_off, out_slope, crossing = _maxpool2_affine(off, slope, 0.0)
        assert out_off[0, 0, 0] == 1.0 and out_slope[0, 0, 0] == 0.0
        assert crossing == pytest.approx(1.0)

    def test_tie_at_probe_prefers_larger_slope(self):
        off = np.array([[[1.0, 1.0], [-5.0, -5.0]]])
        slope = np.array([[[-1.0, 2.0], [0.0, 0.0]]])
        out_off, out_slope, _ = _maxpool2_affine(off, slope, 0.0)
        assert out_slope[0, 0, 0] == 2.0


class TestParametricInfer:
    def test_zero_weights_single_piece(self):
        arch = ArchitectureSpec(side=4, channels=(2,), latent_dim=2)
        w = zero_weights(arch)
        line = AffineLine(np.ones(16), np.full(16, 0.5), (-4.0, 4.0))
        pieces = parametric_infer(line, np.zeros(2), w)
        assert len(pieces) == 1
        assert (pieces[0].lo, pieces[0].hi) == (-4.0, 4.0)
        np.testing.assert_array_equal(pieces[0].recon_offset, np.zeros(16))
        np.testing.assert_array_equal(pieces[0].recon_slope, np.zeros(16))

    def test_always_positive_preactivations_single_linear_piece(self):
        """Zero conv weights with large positive biases freeze every gate on,
        so the whole window is one piece matching the direct forward."""
        arch = ArchitectureSpec(side=4, channels=(2,), latent_dim=2)
        w = zero_weights(arch)
        for name in ("enc0_b", "dec_dense_b"):
            w.params[name] = np.full_like(w.params[name], 3.0)
        cond = np.array([0.1, 0.2])
        line = AffineLine(np.zeros(16), np.ones(16), (-2.0, 2.0))
        pieces = parametric_infer(line, cond, w)
        assert len(pieces) == 1
        direct = reconstruct(line.at(0.7).reshape(1, 4, 4), cond, w).reshape(-1)
        np.testing.assert_allclose(pieces[0].at(0.7), direct, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_agrees_with_direct_inference_on_grid(self, seed):
        """Random two-block net on 4x4: pieces vs direct forward at 1000 z."""
        arch = ArchitectureSpec(side=4, channels=(3, 4), latent_dim=2)
        w = init_weights(arch, seed)
        rng = np.random.default_rng(seed)
        cond = rng.normal(size=2)
        line = AffineLine(rng.normal(size=16), rng.normal(size=16), (-3.0, 3.0))
        pieces = parametric_infer(line, cond, w)

        zs = np.linspace(-3.0, 3.0, 1000)
        idx = 0
        worst = 0.0
        for z in zs:
            while pieces[idx].hi < z and idx + 1 < len(pieces):
                idx += 1
            direct = reconstruct(line.at(z).reshape(1, 4, 4), cond, w).reshape(-1)
            worst = max(worst, float(np.max(np.abs(direct - pieces[idx].at(z)))))
        assert worst < 1e-9

    @pytest.mark.parametrize("seed", [3, 4])
    def test_tiling_invariants(self, seed):
        arch = ArchitectureSpec(side=4, channels=(3,), latent_dim=2)
        w = init_weights(arch, seed)
        rng = np.random.default_rng(seed)
        line = AffineLine(rng.normal(size=16), rng.normal(size=16), (-3.0, 3.0))
        pieces = parametric_infer(line, rng.normal(size=2), w)
        assert pieces[0].lo == -3.0
        assert pieces[-1].hi == 3.0
        for left, right in zip(pieces[:-1], pieces[1:]):
            assert left.hi == right.lo  # shared endpoints: no gaps, no overlaps
            assert left.lo < left.hi

    def test_piece_cap_raises_diagnostic(self):
        arch = ArchitectureSpec(side=4, channels=(3,), latent_dim=2)
        w = init_weights(arch, 5)
        rng = np.random.default_rng(5)
        line = AffineLine(rng.normal(size=16), rng.normal(size=16), (-3.0, 3.0))
        assert len(parametric_infer(line, np.zeros(2), w)) > 1
        with pytest.raises(NumericalDiagnosticError):
            parametric_infer(line, np.zeros(2), w, max_pieces=1)

    def test_matches_reconstruct_at_observed_point(self):
        """The piece containing a specific z reproduces x(z)'s reconstruction."""
        arch = ArchitectureSpec(side=8, channels=(3, 5), latent_dim=3)
        w = init_weights(arch, 21)
        rng = np.random.default_rng(21)
        cond = rng.normal(size=2)
        x = rng.normal(size=64)
        direction = rng.normal(size=64)
        line = AffineLine(x - direction, direction, (0.0, 2.0))
        pieces = parametric_infer(line, cond, w)
        target = [p for p in pieces if p.lo <= 1.0 <= p.hi][0]
        direct = reconstruct(x.reshape(1, 8, 8), cond, w).reshape(-1)
        np.testing.assert_allclose(target.at(1.0), direct, atol=1e-9)
