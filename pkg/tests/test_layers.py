"""Tests for GRU cell, bidirectional GRU, dense, and dropout layers."""

import numpy as np
import pytest

import oracles
from gatedfusion import layers as L
from gatedfusion import tensor as T
from gatedfusion.errors import ContractError, DimensionError
from gatedfusion.tensor import Tensor


def zero_cell(in_size, h):
    rng = np.random.default_rng(0)
    cell = L.GruCellParams.init(in_size, h, rng)
    for _, t in cell.named():
        t.data[...] = 0.0
    return cell


class TestGruCellStep:
    def test_zero_params_halve_state(self):
        cell = zero_cell(3, 4)
        v = np.array([1.0, -2.0, 4.0, 0.5])
        h = L.gru_cell_step(cell, Tensor(np.zeros(3)), Tensor(v))
        np.testing.assert_array_equal(h.data, 0.5 * v)

    def test_zero_params_zero_state(self):
        cell = zero_cell(3, 4)
        h = L.gru_cell_step(cell, Tensor([9.0, -3.0, 2.0]), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(h.data, np.zeros(4))

    def test_matches_reference_step(self):
        rng = np.random.default_rng(42)
        cell = L.GruCellParams.init(5, 3, rng)
        x, h_prev = rng.normal(size=5), rng.normal(size=3)
        out = L.gru_cell_step(cell, Tensor(x), Tensor(h_prev))
        ref = oracles.gru_step_ref(
            {name: t.data for name, t in cell.named()}, x, h_prev
        )
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        cell = zero_cell(3, 4)
        with pytest.raises(DimensionError):
            L.gru_cell_step(cell, Tensor(np.zeros(4)), Tensor(np.zeros(4)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        cell = L.GruCellParams.init(3, 2, rng)
        x = Tensor(rng.normal(size=3), requires_grad=True)
        h_prev = Tensor(rng.normal(size=2), requires_grad=True)
        weights = rng.normal(size=2)
        leaves = list(cell.named()) + [("x", x), ("h_prev", h_prev)]

        with T.Tape():
            out = L.gru_cell_step(cell, x, h_prev)
            T.backward(T.sum_all(out * Tensor(weights)))

        for name, leaf in leaves:
            def f(arrs, leaf=leaf):
                keep = leaf.data
                leaf.data = arrs[0]
                try:
                    h = L.gru_cell_step(cell, x, h_prev)
                    return float((h.data * weights).sum())
                finally:
                    leaf.data = keep

            fd = oracles.fd_gradient(f, [leaf.data], 0)
            assert oracles.rel_err(leaf.grad, fd) < 1e-5, name


class TestBiGruForward:
    def test_single_step_matches_cells(self):
        rng = np.random.default_rng(1)
        p = L.BiGruParams.init(4, 3, rng)
        x = rng.normal(size=(1, 4))
        out = L.bigru_forward(p, Tensor(x), np.array([True]))
        zero = Tensor(np.zeros(3))
        f = L.gru_cell_step(p.forward_cell, Tensor(x[0]), zero)
        b = L.gru_cell_step(p.backward_cell, Tensor(x[0]), zero)
        np.testing.assert_array_equal(out.data, np.concatenate([f.data, b.data])[None, :])

    def test_output_width_is_twice_hidden(self):
        rng = np.random.default_rng(2)
        for h in (1, 3, 5):
            p = L.BiGruParams.init(2, h, rng)
            out = L.bigru_forward(p, Tensor(rng.normal(size=(4, 2))), np.ones(4, bool))
            assert out.shape == (4, 2 * h)

    def test_reversal_swaps_directions(self):
        rng = np.random.default_rng(3)
        h = 3
        p = L.BiGruParams.init(2, h, rng)
        swapped = L.BiGruParams(p.backward_cell, p.forward_cell)
        seq = rng.normal(size=(5, 2))
        mask = np.ones(5, bool)
        y1 = L.bigru_forward(p, Tensor(seq), mask).data
        y2 = L.bigru_forward(swapped, Tensor(seq[::-1].copy()), mask).data
        np.testing.assert_array_equal(
            y2[::-1], np.concatenate([y1[:, h:], y1[:, :h]], axis=1)
        )

    def test_padding_does_not_disturb_real_rows(self):
        rng = np.random.default_rng(4)
        p = L.BiGruParams.init(3, 2, rng)
        real = rng.normal(size=(5, 3))
        garbage = rng.normal(size=(4, 3)) * 100.0
        padded = np.concatenate([real, garbage])
        mask = np.array([True] * 5 + [False] * 4)
        y_padded = L.bigru_forward(p, Tensor(padded), mask).data
        y_plain = L.bigru_forward(p, Tensor(real), np.ones(5, bool)).data
        np.testing.assert_array_equal(y_padded[:5], y_plain)
        np.testing.assert_array_equal(y_padded[5:], np.zeros((4, 4)))

    def test_empty_sequence_rejected(self):
        p = L.BiGruParams.init(2, 2, np.random.default_rng(0))
        with pytest.raises(ContractError):
            L.bigru_forward(p, Tensor(np.zeros(2)), np.array([True, True]))

    def test_gradient_through_recurrence(self):
        rng = np.random.default_rng(5)
        p = L.BiGruParams.init(2, 2, rng)
        seq = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        mask = np.ones(3, bool)
        weights = rng.normal(size=(3, 4))

        with T.Tape():
            out = L.bigru_forward(p, seq, mask)
            T.backward(T.sum_all(out * Tensor(weights)))

        checked = [("seq", seq), ("fwd.U_h", p.forward_cell.U_h), ("bwd.W_z", p.backward_cell.W_z)]
        for name, leaf in checked:
            def f(arrs, leaf=leaf):
                keep = leaf.data
                leaf.data = arrs[0]
                try:
                    y = L.bigru_forward(p, seq, mask)
                    return float((y.data * weights).sum())
                finally:
                    leaf.data = keep

            fd = oracles.fd_gradient(f, [leaf.data], 0)
            assert oracles.rel_err(leaf.grad, fd) < 1e-5, name


class TestDenseForward:
    def test_identity_weights(self):
        p = L.DenseParams(Tensor(np.eye(3), requires_grad=True), Tensor(np.zeros(3), requires_grad=True))
        x = np.random.default_rng(6).normal(size=(4, 3))
        out = L.dense_forward(p, Tensor(x), activation="none")
        np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-15)

    def test_bias_only_with_relu(self):
        b = np.array([1.5, -2.0])
        p = L.DenseParams(Tensor(np.zeros((2, 3))), Tensor(b))
        out = L.dense_forward(p, Tensor(np.ones((4, 3))), activation="relu")
        np.testing.assert_array_equal(out.data, np.tile([1.5, 0.0], (4, 1)))

    def test_unknown_activation(self):
        p = L.DenseParams.init(2, 2, np.random.default_rng(0))
        with pytest.raises(ContractError):
            L.dense_forward(p, Tensor(np.zeros((1, 2))), activation="gelu")

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        p = L.DenseParams.init(4, 3, rng)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        weights = rng.normal(size=(5, 3))

        with T.Tape():
            out = L.dense_forward(p, x, activation="relu")
            T.backward(T.sum_all(out * Tensor(weights)))

        for name, leaf in [("W", p.W), ("b", p.b), ("x", x)]:
            def f(arrs, leaf=leaf):
                keep = leaf.data
                leaf.data = arrs[0]
                try:
                    y = L.dense_forward(p, x, activation="relu")
                    return float((y.data * weights).sum())
                finally:
                    leaf.data = keep

            fd = oracles.fd_gradient(f, [leaf.data], 0)
            assert oracles.rel_err(leaf.grad, fd) < 1e-5, name


class TestDropout:
    def test_rate_zero_identity_in_both_modes(self):
        x = Tensor(np.random.default_rng(9).normal(size=(3, 3)))
        for mode in ("train", "eval"):
            out = L.dropout_forward(x, 0.0, mode, np.random.default_rng(0))
            np.testing.assert_array_equal(out.data, x.data)

    def test_eval_mode_is_bit_exact_identity(self):
        x = Tensor(np.random.default_rng(10).normal(size=(5, 7)))
        out = L.dropout_forward(x, 0.9, "eval", np.random.default_rng(0))
        assert out.data is x.data

    def test_train_mode_statistics(self):
        rate = 0.4
        n = 100_000
        x = Tensor(np.ones(n))
        out = L.dropout_forward(x, rate, "train", np.random.default_rng(11)).data
        zero_fraction = float((out == 0.0).mean())
        assert abs(zero_fraction - rate) < 0.01
        survivors = out[out != 0.0]
        assert abs(survivors.mean() - 1.0 / (1.0 - rate)) < 0.02 / (1.0 - rate)
        assert abs(out.mean() - 1.0) < 0.02

    def test_deterministic_given_seed(self):
        x = Tensor(np.ones((20, 20)))
        a = L.dropout_forward(x, 0.5, "train", np.random.default_rng(3)).data
        b = L.dropout_forward(x, 0.5, "train", np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)

    def test_invalid_rate(self):
        x = Tensor(np.zeros(3))
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ContractError):
                L.dropout_forward(x, bad, "train", np.random.default_rng(0))

    def test_gradient_carries_the_mask(self):
        x = Tensor(np.ones(50), requires_grad=True)
        with T.Tape():
            out = L.dropout_forward(x, 0.5, "train", np.random.default_rng(12))
            T.backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad, np.where(out.data != 0.0, 2.0, 0.0))


class TestInitialization:
    def test_glorot_bounds_and_zero_biases(self):
        rng = np.random.default_rng(13)
        cell = L.GruCellParams.init(7, 4, rng)
        limit_w = np.sqrt(6.0 / (7 + 4))
        limit_u = np.sqrt(6.0 / (4 + 4))
        for name, t in cell.named():
            if name.startswith("W"):
                assert np.abs(t.data).max() <= limit_w
            elif name.startswith("U"):
                assert np.abs(t.data).max() <= limit_u
            else:
                assert not t.data.any()
            assert t.requires_grad

    def test_same_seed_same_params(self):
        a = L.BiGruParams.init(3, 2, np.random.default_rng(99))
        b = L.BiGruParams.init(3, 2, np.random.default_rng(99))
        for (na, ta), (nb, tb) in zip(a.named(), b.named()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_named_order_is_stable(self):
        p = L.BiGruParams.init(2, 2, np.random.default_rng(0))
        names = [n for n, _ in p.named()]
        assert names[0] == "fwd.W_z"
        assert names[9] == "bwd.W_z"
        assert len(names) == 18
