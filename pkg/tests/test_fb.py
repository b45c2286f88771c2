import math

import numpy as np
import pytest

from chaincrf.fb import (
    checkpoint_block_size,
    checkpoint_fb_gradient,
    fb_gradient,
    fb_marginals,
    forward_messages,
    generic_backward,
    generic_forward,
    initial_vector,
    log_kernels,
    log_partition,
    sequence_log_partition,
    viterbi,
    viterbi_decode,
)
from chaincrf.instruments import Instruments
from chaincrf.model import FIXED_START, FREE_START, CrfModel, ModelError
from chaincrf.semiring import LOG_SUM_PRODUCT, MAX_PLUS, SUM_PRODUCT, SemiringError
from chaincrf.training import brute_force_gradient

from instances import (
    START_MODES,
    default_model,
    default_sequence,
    enumerate_paths,
    log_rel_err,
    max_rel_err,
    random_instance,
    result_rel_err,
)

ONES = [[1.0, 1.0], [1.0, 1.0]]


def log_messages(model, x, mode=None):
    mode = mode or model.start_mode
    kernels = log_kernels(model, x)
    init = initial_vector(LOG_SUM_PRODUCT, model.num_labels, mode, model.alphabet.start_label)
    alphas = generic_forward(kernels, LOG_SUM_PRODUCT, init=init)
    betas = generic_backward(kernels, LOG_SUM_PRODUCT)
    return kernels, alphas, betas


class TestGenericForward:
    def test_all_ones_sum_product(self):
        alphas = generic_forward([ONES] * 3, SUM_PRODUCT)
        # 2^4 paths over y_0 .. y_3
        assert alphas[3].values == (8.0, 8.0)
        assert log_partition(alphas[3], SUM_PRODUCT) == 16.0
        assert [a.position for a in alphas] == [0, 1, 2, 3]

    def test_single_step(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(3, 3)).tolist()
        alphas = generic_forward([u], LOG_SUM_PRODUCT)
        for y in range(3):
            assert alphas[1].values[y] == LOG_SUM_PRODUCT.sum(u[yp][y] for yp in range(3))

    def test_max_plus_matches_exhaustive(self):
        rng = np.random.default_rng(2)
        model = default_model(rng, 2, 3, start_mode=FREE_START)
        x = default_sequence(rng, 3, 5)
        alphas = generic_forward(log_kernels(model, x), MAX_PLUS)
        best = max(s for _, s in enumerate_paths(model, x))
        assert log_partition(alphas[-1], MAX_PLUS) == pytest.approx(best, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(SemiringError):
            generic_forward([ONES, [[1.0]]], SUM_PRODUCT)
        with pytest.raises(SemiringError):
            generic_forward([[[1.0, 1.0]]], SUM_PRODUCT)
        with pytest.raises(SemiringError):
            generic_forward([ONES], SUM_PRODUCT, init=[1.0, 1.0, 1.0])

    def test_needs_a_kernel(self):
        with pytest.raises(SemiringError):
            generic_forward([], SUM_PRODUCT)

    @pytest.mark.parametrize("seed", range(10))
    def test_log_domain_is_log_of_plain(self, seed):
        rng = np.random.default_rng(seed)
        n, t = int(rng.integers(1, 5)), int(rng.integers(1, 10))
        psis = [rng.uniform(-5, 5, (n, n)) for _ in range(t)]
        log_alphas = generic_forward(psis, LOG_SUM_PRODUCT)
        plain_alphas = generic_forward([np.exp(p) for p in psis], SUM_PRODUCT)
        for la, pa in zip(log_alphas, plain_alphas):
            np.testing.assert_allclose(la.values, np.log(pa.values), rtol=1e-9, atol=1e-12)


class TestGenericBackward:
    def test_terminal_is_identity(self):
        betas = generic_backward([ONES] * 3, LOG_SUM_PRODUCT)
        assert betas[-1].values == (0.0, 0.0)
        assert betas[-1].position == 3

    def test_all_ones_sum_product(self):
        betas = generic_backward([ONES] * 3, SUM_PRODUCT)
        assert betas[0].values == (8.0, 8.0)

    def test_totals_agree_with_forward(self):
        rng = np.random.default_rng(3)
        model = default_model(rng, 3, 3, start_mode=FREE_START)
        x = default_sequence(rng, 3, 4)
        _, alphas, betas = log_messages(model, x)
        forward_total = log_partition(alphas[-1])
        backward_total = LOG_SUM_PRODUCT.sum(a + b for a, b in zip(alphas[0].values, betas[0].values))
        brute = float(np.logaddexp.reduce([s for _, s in enumerate_paths(model, x)]))
        assert forward_total == pytest.approx(brute, rel=1e-12)
        assert backward_total == pytest.approx(brute, rel=1e-12)


class TestMarginals:
    def test_zero_weights_uniform(self):
        model = CrfModel.create(["A", "B"], ("transition",))
        kernels, alphas, betas = log_messages(model, ["a", "b"])
        log_z = log_partition(alphas[-1])
        assert log_z == pytest.approx(math.log(4))
        # position 1 leaves the start label only; position 2 reaches every cell
        v1 = fb_marginals(alphas, betas, kernels, 1).cells
        assert np.all(np.isneginf(v1[1]))
        np.testing.assert_allclose(np.exp(v1[0] - log_z), [0.5, 0.5])
        v2 = fb_marginals(alphas, betas, kernels, 2).cells
        np.testing.assert_allclose(np.exp(v2 - log_z), np.full((2, 2), 0.25))

    @pytest.mark.parametrize("mode", START_MODES)
    def test_matches_enumeration(self, mode):
        rng = np.random.default_rng(4)
        model = default_model(rng, 2, 3, start_mode=mode)
        x = default_sequence(rng, 3, 4)
        kernels, alphas, betas = log_messages(model, x)
        log_z = log_partition(alphas[-1])
        paths = enumerate_paths(model, x)
        scores = np.array([s for _, s in paths])
        probs = np.exp(scores - np.logaddexp.reduce(scores))
        for k in range(1, 5):
            want = np.zeros((2, 2))
            for (path, _), p in zip(paths, probs):
                want[path[k - 1], path[k]] += p
            got = np.exp(fb_marginals(alphas, betas, kernels, k).cells - log_z)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("seed", range(8))
    def test_normalised_at_every_position(self, seed):
        rng = np.random.default_rng(seed)
        model, x = random_instance(rng)
        kernels, alphas, betas = log_messages(model, x)
        log_z = log_partition(alphas[-1])
        for k in range(1, len(kernels) + 1):
            v = fb_marginals(alphas, betas, kernels, k).cells
            assert np.exp(v - log_z).sum() == pytest.approx(1.0, abs=1e-10)
            assert LOG_SUM_PRODUCT.sum(v.ravel()) == pytest.approx(log_z, abs=1e-9)

    def test_position_out_of_range(self):
        kernels = [ONES] * 2
        alphas = generic_forward(kernels, SUM_PRODUCT)
        betas = generic_backward(kernels, SUM_PRODUCT)
        for k in (0, 3):
            with pytest.raises(SemiringError):
                fb_marginals(alphas, betas, kernels, k, SUM_PRODUCT)


class TestLogPartition:
    def test_uniform_fixed(self):
        model = CrfModel.create(["A", "B"], ("transition", "emission"), ["a"])
        assert sequence_log_partition(model, ["a"] * 3) == pytest.approx(3 * math.log(2))
        assert fb_gradient(model, ["a"] * 3).log_partition == pytest.approx(math.log(8))

    def test_uniform_free(self):
        model = CrfModel.create(["A", "B"], ("transition",), start_mode=FREE_START)
        assert sequence_log_partition(model, ["a"] * 3) == pytest.approx(math.log(16))

    def test_random_matches_enumeration(self):
        rng = np.random.default_rng(5)
        model = default_model(rng, 3, 4)
        x = default_sequence(rng, 4, 5)
        brute = float(np.logaddexp.reduce([s for _, s in enumerate_paths(model, x)]))
        assert sequence_log_partition(model, x) == pytest.approx(brute, rel=1e-10)
        assert log_partition(log_messages(model, x)[1][-1]) == pytest.approx(brute, rel=1e-10)


class TestFbGradient:
    def test_uniform_transition_counts(self):
        model = CrfModel.create(["A", "B"], ("transition",))
        res = fb_gradient(model, ["a", "b", "c"])
        assert res.log_partition == pytest.approx(math.log(8))
        # y_0 is the start label, so only transitions out of A are possible at i = 1
        np.testing.assert_allclose(res.expected_counts, [1.0, 1.0, 0.5, 0.5])

    def test_uniform_transition_counts_free(self):
        model = CrfModel.create(["A", "B"], ("transition",), start_mode=FREE_START)
        res = fb_gradient(model, ["a", "b", "c"])
        np.testing.assert_allclose(res.expected_counts, [0.75] * 4)

    @pytest.mark.parametrize("seed", range(6))
    def test_transition_counts_sum_to_length(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        t = int(rng.integers(1, 30))
        model = default_model(rng, n, 5, start_mode=START_MODES[seed % 2])
        res = fb_gradient(model, default_sequence(rng, 5, t))
        assert res.expected_counts[: n * n].sum() == pytest.approx(t, rel=1e-12)
        assert np.all(res.expected_counts >= 0)
        assert np.all(res.expected_counts <= t * (1 + 1e-12))

    @pytest.mark.parametrize("mode", START_MODES)
    def test_matches_brute_force(self, mode):
        rng = np.random.default_rng(6)
        model = default_model(rng, 2, 2, start_mode=mode)
        assert model.num_features == 8
        x = default_sequence(rng, 2, 6)
        got = fb_gradient(model, x)
        want = brute_force_gradient(model, x)
        assert result_rel_err(got, want) < 1e-9

    def test_counts_are_exp_of_log_gradient(self):
        rng = np.random.default_rng(7)
        model, x = random_instance(rng)
        res = fb_gradient(model, x)
        np.testing.assert_array_equal(res.expected_counts,
                                      np.exp(res.log_gradient - res.log_partition))

    def test_unknown_strategy(self):
        model = CrfModel.create(["A"], ("transition",))
        with pytest.raises(ValueError):
            fb_gradient(model, ["a"], "bogus")

    def test_empty_sequence(self):
        model = CrfModel.create(["A"], ("transition",))
        with pytest.raises(ModelError):
            fb_gradient(model, [])

    def test_bad_start_mode(self):
        model = CrfModel.create(["A"], ("transition",))
        with pytest.raises(ModelError):
            fb_gradient(model, ["a"], start_mode="sideways")

    def test_stable_at_large_scores(self):
        rng = np.random.default_rng(8)
        model = default_model(rng, 3, 4)
        x = default_sequence(rng, 4, 40, oov=0.0)
        big = model.with_weights(model.weights * (1000.0 / 3 / 40))
        res = fb_gradient(big, x)
        assert abs(res.log_partition) > 100
        assert math.isfinite(res.log_partition)
        assert np.all(np.isfinite(res.expected_counts))

    def test_forward_messages_match_generic(self):
        rng = np.random.default_rng(9)
        model, x = random_instance(rng)
        _, alphas, _ = log_messages(model, x)
        fwd = forward_messages(model, x)
        for k, a in enumerate(alphas):
            np.testing.assert_allclose(fwd[k], a.values, rtol=1e-12, atol=1e-12)


class TestStrategies:
    @pytest.mark.parametrize("seed", range(12))
    def test_bitwise_equal(self, seed):
        rng = np.random.default_rng(seed)
        model, x = random_instance(rng, length=int(rng.integers(1, 60)))
        full = fb_gradient(model, x, "full")
        for strategy in ("recompute", "checkpoint"):
            other = fb_gradient(model, x, strategy)
            assert other.log_partition == full.log_partition
            np.testing.assert_array_equal(other.log_gradient, full.log_gradient)
        assert result_rel_err(checkpoint_fb_gradient(model, x), full) <= 1e-12

    def test_single_position(self):
        rng = np.random.default_rng(13)
        model, x = random_instance(rng, length=1)
        full = fb_gradient(model, x)
        chk = checkpoint_fb_gradient(model, x)
        assert chk.log_partition == full.log_partition
        np.testing.assert_array_equal(chk.expected_counts, full.expected_counts)

    def test_block_size(self):
        assert [checkpoint_block_size(t) for t in (1, 2, 4, 5, 16, 17)] == [1, 2, 2, 3, 4, 5]


class TestMemoryAccounting:
    def _run(self, strategy, t, n=2):
        rng = np.random.default_rng(t)
        model = default_model(rng, n, 3)
        inst = Instruments()
        fb_gradient(model, default_sequence(rng, 3, t), strategy, instruments=inst)
        assert inst.cells.live == 0
        return inst

    def test_full_storage(self):
        inst = self._run("full", 10)
        peak = inst.cells.peak_arrays
        assert peak["psi"] == 10
        assert peak["alpha"] == 11
        assert peak["beta"] == 10  # beta_0 is never read by the termination loop

    def test_recompute_keeps_one_matrix(self):
        inst = self._run("recompute", 10)
        assert inst.cells.peak_arrays["psi"] == 1
        assert inst.cells.peak_arrays["alpha"] == 11

    def test_checkpoint_sixteen(self):
        inst = self._run("checkpoint", 16)
        assert inst.cells.peak_arrays["psi"] == 1
        assert inst.cells.peak_arrays["alpha"] <= 4 + 4

    @pytest.mark.parametrize("t", [9, 50, 101])
    def test_checkpoint_bound(self, t):
        inst = self._run("checkpoint", t)
        assert inst.cells.peak_arrays["alpha"] <= 2 * math.ceil(math.sqrt(t)) + 2

    def test_full_grows_linearly(self):
        small = self._run("full", 100).cells.peak
        large = self._run("full", 200).cells.peak
        n = 2
        per_position = n * n + 2 * n
        assert large - small == 100 * per_position

    def test_reads_stream_twice(self):
        for strategy in ("full", "recompute"):
            assert self._run(strategy, 12).stream_reads == 24


class TestViterbi:
    def test_zero_weights_first_label(self):
        model = CrfModel.create(["A", "B", "C"], ("transition", "emission"), ["a"])
        path, score = viterbi(model, ["a", "b", "a", "a"])
        assert path == [0, 0, 0, 0]
        assert score == 0.0

    def test_dominant_transition(self):
        model = CrfModel.create(["A", "B"], ("transition",))
        w = np.zeros(4)
        w[model.feature_index["T\tB\tB"]] = 5.0
        w[model.feature_index["T\tA\tB"]] = 0.1
        assert viterbi_decode(model.with_weights(w), ["x"] * 5) == [1] * 5

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_exhaustive_max(self, seed):
        rng = np.random.default_rng(seed)
        model, x = random_instance(rng, length=int(rng.integers(1, 7)))
        path, score = viterbi(model, x)
        paths = enumerate_paths(model, x)
        best = max(s for _, s in paths)
        assert score == pytest.approx(best, abs=1e-12)
        assert len(path) == len(x)
        achieved = max(s for p, s in paths if list(p[1:]) == path)
        assert achieved == pytest.approx(score, abs=1e-12)


def test_log_rel_err_floor():
    assert log_rel_err(1e-14, 2e-14) < 1e-13
    assert max_rel_err([0.0, 2.0], [0.0, 2.0]) == 0.0
