import numpy as np
import pytest

from cnetpc.sparsenn import (
    Adam,
    Linear,
    Param,
    ParamFileError,
    ResidualBlock,
    SparseConv,
    brute_force_kernel_map,
    build_kernel_map,
    dump_params,
    elu,
    elu_backward,
    grad_check,
    grid_coords,
    grid_kernel_map,
    kernel_offsets,
    kept_offsets,
    load_params,
    lr_schedule,
    mask_offsets,
    softmax_ce,
    softmax_ce_backward,
    sparse_conv,
    sparse_into_grid_map,
    sparse_to_dense,
    sparse_to_dense_backward,
)
from cnetpc.selftest import check_dense_equivalence, dense_reference_conv, random_block_coords


def kmap_pairs(km):
    return [set(zip(*(a.tolist() for a in km.pairs(j)))) for j in range(km.nbr.shape[1])]


class TestKernelMap:
    def test_single_point(self):
        km = build_kernel_map([[1, 1, 1]], [[1, 1, 1]], 3)
        pairs = kmap_pairs(km)
        assert pairs[13] == {(0, 0)}
        assert all(not p for j, p in enumerate(pairs) if j != 13)

    def test_two_neighbours(self):
        # input row for output o at offset delta sits at coord(o) + delta
        km = build_kernel_map([[0, 0, 0], [0, 0, 1]], [[0, 0, 0], [0, 0, 1]], 3)
        offs = kernel_offsets(3).tolist()
        plus, minus = offs.index([0, 0, 1]), offs.index([0, 0, -1])
        pairs = kmap_pairs(km)
        assert pairs[plus] == {(1, 0)}
        assert pairs[minus] == {(0, 1)}
        assert pairs[13] == {(0, 0), (1, 1)}

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_brute_force(self, rng, k):
        cin = np.unique(rng.integers(0, 8, (200, 3)), axis=0)
        cout = np.unique(rng.integers(0, 8, (60, 3)), axis=0)
        assert kmap_pairs(build_kernel_map(cin, cout, k)) == brute_force_kernel_map(cin, cout, k)

    def test_batches_do_not_mix(self):
        c = np.array([[0, 0, 0, 0], [1, 0, 0, 1]])
        km = build_kernel_map(c, c, 3)
        assert sum(len(p) for p in kmap_pairs(km)) == 2

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            build_kernel_map([[0, 0, 0], [0, 0, 0]], [[0, 0, 0]], 3)

    def test_grid_map_specialization(self, rng):
        d = 5
        grid = grid_coords(d)[:, 1:]
        coords = random_block_coords(rng, d, 30)
        rows = coords[:, 0] * d * d + coords[:, 1] * d + coords[:, 2]
        fast = sparse_into_grid_map(grid_kernel_map(d, 3), rows)
        assert kmap_pairs(fast) == kmap_pairs(build_kernel_map(coords, grid, 3))


class TestMasks:
    def test_offsets_raster_order(self):
        offs = kernel_offsets(3)
        assert offs[0].tolist() == [-1, -1, -1] and offs[13].tolist() == [0, 0, 0]
        assert offs[14].tolist() == [0, 0, 1] and offs[26].tolist() == [1, 1, 1]

    def test_type_a_and_b(self):
        assert mask_offsets(3, "A") == set(range(13, 27))
        assert mask_offsets(3, "B") == set(range(14, 27))
        assert mask_offsets(1, "B") == set() and mask_offsets(1, "A") == {0}
        assert mask_offsets(5, "A") == set(range(62, 125))
        assert mask_offsets(3, None) == set()
        assert kept_offsets(3, "A").tolist() == list(range(13))

    def test_masked_weights_zero(self, rng):
        conv = SparseConv(2, 3, 3, "A", rng)
        assert not conv.weight.value[13:].any()
        assert conv.weight.value[:13].any()


class TestSparseConv:
    def test_identity_kernel(self, rng):
        coords = random_block_coords(rng, 6, 25)
        conv = SparseConv(4, 4, 1)
        conv.weight.value[0] = np.eye(4)
        x = rng.standard_normal((len(coords), 4))
        np.testing.assert_array_equal(sparse_conv(x, coords, conv), x)

    def test_dense_oracle_direct(self, rng):
        d = 4
        coords = random_block_coords(rng, d, 20)
        conv = SparseConv(2, 3, 3, "B", rng)
        x = rng.standard_normal((len(coords), 2))
        grid = np.zeros((d, d, d, 2))
        grid[tuple(coords.T)] = x
        ref = dense_reference_conv(grid, conv.weight.value, conv.bias.value, mask_offsets(3, "B"))
        np.testing.assert_allclose(sparse_conv(x, coords, conv), ref[tuple(coords.T)], atol=1e-12, rtol=0)

    def test_dense_equivalence_100_cases(self):
        assert check_dense_equivalence(100, seed=7) < 1e-12

    def test_type_a_output_ignores_current_and_later_inputs(self, rng):
        d = 6
        coords = random_block_coords(rng, d, 60)
        conv = SparseConv(2, 3, 3, "A", rng)
        x = rng.standard_normal((len(coords), 2))
        base = sparse_conv(x, coords, conv)
        for j in range(len(coords)):
            x2 = x.copy()
            x2[j:] += rng.standard_normal((len(coords) - j, 2))
            assert np.array_equal(sparse_conv(x2, coords, conv)[: j + 1], base[: j + 1])

    def test_unmasked_conv_is_not_causal(self, rng):
        coords = np.array([[0, 0, 0], [0, 0, 1]])
        conv = SparseConv(1, 1, 3, None, rng)
        x = np.array([[1.0], [2.0]])
        y1 = sparse_conv(x, coords, conv)
        y2 = sparse_conv(np.array([[1.0], [5.0]]), coords, conv)
        assert y1[0, 0] != y2[0, 0]

    def test_channel_mismatch(self, rng):
        conv = SparseConv(2, 2, 3)
        with pytest.raises(ValueError):
            sparse_conv(np.zeros((1, 3)), [[0, 0, 0]], conv)


class TestDense:
    def test_empty(self):
        assert not sparse_to_dense(np.zeros((0, 2)), np.zeros(0, int), 8).any()

    def test_single_point(self):
        out = sparse_to_dense(np.array([[7.0]]), np.array([4]), 8)
        assert np.count_nonzero(out) == 1 and out[4, 0] == 7.0

    def test_roundtrip(self, rng):
        rows = rng.choice(64, 20, replace=False)
        x = rng.standard_normal((20, 3))
        dense = sparse_to_dense(x, rows, 64)
        np.testing.assert_array_equal(sparse_to_dense_backward(dense, rows), x)
        np.testing.assert_array_equal(sparse_to_dense(dense[rows], rows, 64), dense)


class TestActivationsAndLoss:
    def test_elu(self):
        y, _ = elu(np.array([0.0, -np.inf, 2.0, -1e3]))
        assert y.tolist() == [0.0, -1.0, 2.0, -1.0]

    def test_uniform_ce_is_eight_bits(self):
        loss, probs, _ = softmax_ce(np.zeros((5, 256)), np.array([0, 3, 255, 17, 128]))
        assert loss == pytest.approx(8.0, abs=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_target_outside_alphabet(self):
        with pytest.raises(IndexError):
            softmax_ce(np.zeros((1, 4)), np.array([4]))

    def test_residual_zero_weights_is_identity(self, rng):
        coords = random_block_coords(rng, 5, 30)
        res = ResidualBlock(3, "B")  # no rng: all parameters zero
        kmaps = {1: build_kernel_map(coords, coords, 1), 3: build_kernel_map(coords, coords, 3)}
        x = rng.standard_normal((len(coords), 3))
        np.testing.assert_array_equal(res.forward(x, kmaps)[0], x)


class TestGradients:
    @pytest.mark.parametrize("mask,k", [(None, 3), ("A", 3), ("B", 3), ("B", 1), ("A", 5)])
    def test_sparse_conv(self, rng, mask, k):
        coords = random_block_coords(rng, 5, 20)
        conv = SparseConv(2, 3, k, mask, rng)
        km = build_kernel_map(coords, coords, k)
        err = grad_check(lambda x: conv.forward(x, km), conv.backward, conv.params(),
                         rng.standard_normal((len(coords), 2)))
        assert err < 1e-5

    def test_residual_block(self, rng):
        coords = random_block_coords(rng, 4, 20)
        res = ResidualBlock(3, "B", rng)
        kmaps = {1: build_kernel_map(coords, coords, 1), 3: build_kernel_map(coords, coords, 3)}
        assert grad_check(lambda x: res.forward(x, kmaps), res.backward, res.params(),
                          rng.standard_normal((len(coords), 3))) < 1e-5

    def test_softmax_ce(self, rng):
        t = rng.integers(0, 6, 10)

        def fwd(z):
            loss, _, cache = softmax_ce(z, t)
            return loss, cache

        err = grad_check(fwd, lambda g, cache: softmax_ce_backward(cache, g), [], rng.standard_normal((10, 6)))
        assert err < 1e-6

    def test_linear_and_elu(self, rng):
        lin = Linear(3, 4, rng)
        assert grad_check(lin.forward, lin.backward, lin.params(), rng.standard_normal((7, 3))) < 1e-5
        x = rng.standard_normal((9, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        assert grad_check(elu, elu_backward, [], x) < 1e-5

    def test_detects_wrong_gradient(self, rng):
        lin = Linear(3, 2, rng)
        err = grad_check(lin.forward, lambda dy, x: 2 * lin.backward(dy, x), lin.params(),
                         rng.standard_normal((4, 3)))
        assert err > 0.1


class TestOptim:
    def test_schedule(self):
        assert lr_schedule(0) == 15e-5
        assert lr_schedule(1) == 15e-5
        assert lr_schedule(2) == pytest.approx(15e-5 * 0.95, rel=1e-15)
        assert lr_schedule(4) == pytest.approx(15e-5 * 0.9025, rel=1e-15)

    def test_zero_gradient_no_move(self):
        p = Param(np.array([1.5, -2.0]))
        Adam([p]).step(0.1)
        assert p.value.tolist() == [1.5, -2.0]

    def test_single_step_oracle(self):
        # m_hat = v_hat = 1 after one step with g = 1, so the step is lr / (1 + eps)
        p = Param(np.array([0.0]))
        opt = Adam([p])
        p.grad[:] = 1.0
        opt.step(1e-3)
        assert p.value[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_masked_entries_stay_zero(self, rng):
        conv = SparseConv(2, 2, 3, "A", rng)
        opt = Adam(conv.params())
        conv.weight.grad[:] = 1.0
        opt.step(0.1)
        assert not conv.weight.value[13:].any()


class TestSerialize:
    def test_roundtrip(self, rng):
        named = [("a", rng.standard_normal((2, 3))), ("b", rng.standard_normal(4)), ("c", np.zeros((0, 2)))]
        cfg, back = load_params(dump_params({"d": 8}, named))
        assert cfg == {"d": 8}
        for (n1, a1), (n2, a2) in zip(named, back):
            assert n1 == n2 and np.array_equal(a1, a2) and a1.shape == a2.shape

    def test_tamper_detected(self):
        blob = bytearray(dump_params({}, [("w", np.ones(3))]))
        blob[-12] ^= 1
        with pytest.raises(ParamFileError):
            load_params(bytes(blob))
