"""Operator net: forward, hand-derived gradients, gradient check, checkpoints."""
import dataclasses
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from settlefusion.errors import CorruptCheckpointError, NumericError
from settlefusion.causal import NormStats
from settlefusion.numkit import RngStream
from settlefusion.opnet import (Checkpoint, Linear, NetConfig, NetParams,
                                checkpoint_bytes, checkpoint_from_bytes,
                                forward, forward_batch, grad_check,
                                init_params, load_checkpoint, loss_and_grads,
                                save_checkpoint, zero_params)

from oracles import naive_forward


def make_params(config: NetConfig, seed: int) -> NetParams:
    return init_params(config, RngStream(seed))


def random_inputs(config: NetConfig, n: int, seed: int):
    rng = RngStream(seed)
    return (rng.uniform(0.0, 1.0, (n, config.branch_input_dim)),
            rng.uniform(0.0, 1.0, (n, config.trunk_input_dim)))


def default_norm() -> NormStats:
    return NormStats(120.0, 220.0, 100.0, 200.0, 0.0, 104.0, -40.0, 40.0, 10.0)


class TestNetConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            NetConfig(branch_input_dim=0, trunk_input_dim=2, width=4, depth=2)
        with pytest.raises(ValueError):
            NetConfig(branch_input_dim=4, trunk_input_dim=2, width=0, depth=2)
        with pytest.raises(ValueError):
            NetConfig(branch_input_dim=4, trunk_input_dim=2, width=4, depth=0)

    def test_depth_one_needs_matching_dims(self):
        NetConfig(branch_input_dim=3, trunk_input_dim=3, width=3, depth=1)
        with pytest.raises(ValueError):
            NetConfig(branch_input_dim=4, trunk_input_dim=3, width=3, depth=1)


class TestForward:
    def test_all_zero_params_give_zero(self):
        config = NetConfig(branch_input_dim=5, trunk_input_dim=2, width=4,
                           depth=3)
        params = zero_params(config)
        assert forward(params, np.zeros(5), np.zeros(2)) == 0.0
        assert forward(params, np.ones(5), np.ones(2)) == 0.0

    def test_width_one_depth_one_hand_trace(self):
        config = NetConfig(branch_input_dim=1, trunk_input_dim=1, width=1,
                           depth=1)
        params = zero_params(config)
        ones = NetParams(
            branch_encoder=Linear(np.ones((1, 1)), np.zeros(1)),
            trunk_encoder=Linear(np.ones((1, 1)), np.zeros(1)),
            branch_layers=[Linear(np.ones((1, 1)), np.zeros(1))],
            trunk_layers=[Linear(np.ones((1, 1)), np.zeros(1))])
        assert forward(ones, np.array([0.0]), np.array([0.0])) == 0.0
        # u=1, y=0: branch tower reaches tanh(tanh(1)), trunk stays zero
        assert forward(ones, np.array([1.0]), np.array([0.0])) == 0.0
        # u=1, y=1: both towers reach tanh(tanh(1)); product of the two
        expected = math.tanh(math.tanh(1.0)) ** 2
        got = forward(ones, np.array([1.0]), np.array([1.0]))
        assert got == pytest.approx(expected, abs=1e-15)
        assert got == pytest.approx(naive_forward(ones, [1.0], [1.0]),
                                    abs=1e-15)

    def test_matches_naive_oracle_random(self):
        rng = RngStream(99)
        for trial in range(50):
            depth = int(rng.uniform(1.0, 4.99, (1,))[0])
            width = int(rng.uniform(1, 9, (1,))[0])
            b_dim = width if depth == 1 else int(rng.uniform(1, 9, (1,))[0])
            t_dim = width if depth == 1 else int(rng.uniform(1, 5, (1,))[0])
            config = NetConfig(branch_input_dim=b_dim, trunk_input_dim=t_dim,
                               width=width, depth=depth)
            params = make_params(config, 1000 + trial)
            u = rng.uniform(-1.0, 1.0, (config.branch_input_dim,))
            y = rng.uniform(-1.0, 1.0, (config.trunk_input_dim,))
            fast = forward(params, u, y)
            slow = naive_forward(params, u, y)
            assert abs(fast - slow) < 1e-12

    def test_dimension_mismatch_rejected(self):
        config = NetConfig(branch_input_dim=5, trunk_input_dim=2, width=4,
                           depth=2)
        params = make_params(config, 0)
        with pytest.raises(ValueError):
            forward(params, np.zeros(4), np.zeros(2))
        with pytest.raises(ValueError):
            forward(params, np.zeros(5), np.zeros(3))

    def test_nonfinite_params_raise(self):
        config = NetConfig(branch_input_dim=3, trunk_input_dim=2, width=4,
                           depth=2)
        params = make_params(config, 0)
        params.branch_encoder.weight[0, 0] = np.inf
        with pytest.raises(NumericError):
            forward(params, np.ones(3), np.ones(2))


class TestForwardBatch:
    CONFIG = NetConfig(branch_input_dim=6, trunk_input_dim=3, width=8, depth=3)

    def test_batch_of_one_equals_forward(self):
        params = make_params(self.CONFIG, 4)
        u, y = random_inputs(self.CONFIG, 1, 5)
        assert forward_batch(params, u, y)[0] == forward(params, u[0], y[0])

    def test_permutation_bitwise(self):
        params = make_params(self.CONFIG, 6)
        u, y = random_inputs(self.CONFIG, 400, 7)
        out = forward_batch(params, u, y)
        perm = RngStream(8).permutation(400)
        assert np.array_equal(forward_batch(params, u[perm], y[perm]),
                              out[perm])

    def test_thousand_rows_match_loop_bitwise(self):
        params = make_params(self.CONFIG, 9)
        u, y = random_inputs(self.CONFIG, 1000, 10)
        batched = forward_batch(params, u, y)
        looped = np.array([forward(params, u[i], y[i]) for i in range(1000)])
        assert np.array_equal(batched, looped)

    def test_row_count_mismatch_rejected(self):
        params = make_params(self.CONFIG, 11)
        u, y = random_inputs(self.CONFIG, 4, 12)
        with pytest.raises(ValueError):
            forward_batch(params, u, y[:3])


class TestLossAndGrads:
    CONFIG = NetConfig(branch_input_dim=6, trunk_input_dim=3, width=8, depth=3)

    def test_exact_targets_zero_loss_zero_grads(self):
        params = make_params(self.CONFIG, 13)
        u, y = random_inputs(self.CONFIG, 10, 14)
        targets = forward_batch(params, u, y)
        loss, grads = loss_and_grads(params, u, y, targets)
        assert loss == 0.0
        for arr in grads.flat():
            assert np.all(arr == 0.0)

    def test_duplicated_batch_invariant(self):
        params = make_params(self.CONFIG, 15)
        u, y = random_inputs(self.CONFIG, 12, 16)
        targets = RngStream(17).uniform(-1.0, 1.0, (12,))
        loss1, grads1 = loss_and_grads(params, u, y, targets)
        loss2, grads2 = loss_and_grads(params, np.vstack([u, u]),
                                       np.vstack([y, y]),
                                       np.concatenate([targets, targets]))
        assert loss2 == pytest.approx(loss1, rel=1e-12)
        for a, b in zip(grads1.flat(), grads2.flat()):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_empty_batch_rejected(self):
        params = make_params(self.CONFIG, 18)
        with pytest.raises(ValueError):
            loss_and_grads(params, np.zeros((0, 6)), np.zeros((0, 3)),
                           np.zeros(0))

    def test_gradients_match_finite_differences(self):
        params = make_params(self.CONFIG, 19)
        u, y = random_inputs(self.CONFIG, 16, 20)
        targets = RngStream(21).uniform(-1.0, 1.0, (16,))
        result = grad_check(params, u, y, targets)
        assert result.within(rel_tol=1e-6, abs_tol=1e-8), (
            f"max rel {result.max_rel_error} at {result.max_rel_location}, "
            f"max abs {result.max_abs_error} at {result.max_abs_location}")

    def test_gradients_match_finite_differences_depth1(self):
        config = NetConfig(branch_input_dim=4, trunk_input_dim=4, width=4,
                           depth=1)
        params = make_params(config, 22)
        u, y = random_inputs(config, 8, 23)
        targets = RngStream(24).uniform(-1.0, 1.0, (8,))
        assert grad_check(params, u, y, targets).within()

    def test_gradients_match_finite_differences_depth2(self):
        config = NetConfig(branch_input_dim=5, trunk_input_dim=2, width=6,
                           depth=2)
        params = make_params(config, 25)
        u, y = random_inputs(config, 8, 26)
        targets = RngStream(27).uniform(-1.0, 1.0, (8,))
        assert grad_check(params, u, y, targets).within()


class TestCheckpoint:
    def make_checkpoint(self, seed: int = 0) -> Checkpoint:
        config = NetConfig(branch_input_dim=6, trunk_input_dim=3, width=5,
                           depth=2)
        return Checkpoint(config=config, params=make_params(config, seed),
                          norm=default_norm())

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "net.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.config == ckpt.config
        assert loaded.norm == ckpt.norm
        for a, b in zip(loaded.params.flat(), ckpt.params.flat()):
            assert np.array_equal(a, b)
        # serialization is canonical: same bytes both times
        assert checkpoint_bytes(loaded) == checkpoint_bytes(ckpt)

    @given(width=st.integers(1, 6), depth=st.integers(1, 3),
           seed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_property_round_trip(self, width, depth, seed):
        b_dim = width if depth == 1 else 4
        t_dim = width if depth == 1 else 2
        config = NetConfig(branch_input_dim=b_dim, trunk_input_dim=t_dim,
                           width=width, depth=depth)
        ckpt = Checkpoint(config=config, params=make_params(config, seed),
                          norm=default_norm())
        back = checkpoint_from_bytes(checkpoint_bytes(ckpt))
        assert back.config == config
        for a, b in zip(back.params.flat(), ckpt.params.flat()):
            assert np.array_equal(a, b)

    def test_bad_magic_rejected(self):
        blob = bytearray(checkpoint_bytes(self.make_checkpoint()))
        blob[0] ^= 0xFF
        with pytest.raises(CorruptCheckpointError):
            checkpoint_from_bytes(bytes(blob))

    def test_truncation_rejected(self):
        blob = checkpoint_bytes(self.make_checkpoint())
        for cut in (len(blob) - 1, len(blob) // 2, 5):
            with pytest.raises(CorruptCheckpointError):
                checkpoint_from_bytes(blob[:cut])

    def test_trailing_bytes_rejected(self):
        blob = checkpoint_bytes(self.make_checkpoint())
        with pytest.raises(CorruptCheckpointError):
            checkpoint_from_bytes(blob + b"\x00")

    def test_expected_config_enforced(self):
        ckpt = self.make_checkpoint()
        blob = checkpoint_bytes(ckpt)
        other = NetConfig(branch_input_dim=6, trunk_input_dim=3, width=5,
                          depth=3)
        with pytest.raises(CorruptCheckpointError):
            checkpoint_from_bytes(blob, expect=other)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
