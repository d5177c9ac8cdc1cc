import numpy as np
import pytest

from butdlearn.network import (
    BuildError,
    Conv,
    Dense,
    benchmark_specs,
    build_paired,
    extract_mask,
)
from butdlearn.ops import ShapeError


def small_dense_net(seed=0, n_tasks=2, **kw):
    return build_paired([Dense(5), Dense(4)], input_shape=(6,), n_classes=3,
                        n_tasks=n_tasks, seed=seed, **kw)


def small_conv_net(seed=0, n_tasks=2, **kw):
    return build_paired([Conv(3, 3, stride=2), Dense(4)], input_shape=(2, 7, 7),
                        n_classes=3, n_tasks=n_tasks, seed=seed, **kw)


class TestBuild:
    def test_same_seed_bit_identical(self):
        a, b = small_conv_net(seed=7), small_conv_net(seed=7)
        for k, v in a.parameters().items():
            np.testing.assert_array_equal(v, b.parameters()[k])

    def test_different_seed_differs(self):
        a, b = small_dense_net(seed=0), small_dense_net(seed=1)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_benchmark_architecture_shapes(self):
        net = build_paired(benchmark_specs(), input_shape=(1, 36, 36),
                           n_classes=10, n_tasks=2, seed=0)
        assert net.shapes == [(1, 36, 36), (64, 32, 32), (64, 15, 15),
                              (64, 11, 11), (64, 5, 5), (50,)]
        assert net.weights[4].shape == (50, 64 * 5 * 5)  # 1600-unit flatten
        assert net.w_out.shape == (10, 50)
        assert net.w_task.shape == (50, 2)

    def test_zero_layers_rejected(self):
        with pytest.raises(BuildError):
            build_paired([], input_shape=(4,), n_classes=2)

    def test_declared_size_mismatch_names_pair(self):
        with pytest.raises(BuildError, match="layer 1"):
            build_paired([Dense(5), Dense(4, in_features=9)], input_shape=(6,),
                         n_classes=2)

    def test_conv_after_flat_rejected(self):
        with pytest.raises(BuildError):
            build_paired([Dense(5), Conv(2, 3)], input_shape=(9,), n_classes=2)

    def test_conv_too_small_rejected(self):
        with pytest.raises(BuildError):
            build_paired([Conv(2, 5), Dense(3)], input_shape=(1, 4, 4), n_classes=2)

    def test_must_end_flat(self):
        with pytest.raises(BuildError):
            build_paired([Conv(2, 3)], input_shape=(1, 8, 8), n_classes=2)

    def test_counter_levels_same_size(self):
        net = small_conv_net()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2,) + net.input_shape)
        _, bu = net.bu_forward(x, mode="relu")
        _, td = net.td_pass(rng.normal(size=(2, 3)), head="output", mode="linear")
        for l in range(net.n_levels + 1):
            assert bu.activations[l].shape == td.activations[l].shape


class TestWeightTying:
    def test_tied_storage_is_shared_object(self):
        net = small_dense_net()
        for i in range(net.n_levels):
            assert net.td_weight(i) is net.weights[i]

    def test_untied_copy_equal_not_shared(self):
        net = small_dense_net(tied=False, td_init="copy")
        for i in range(net.n_levels):
            assert net.td_weight(i) is not net.weights[i]
            np.testing.assert_array_equal(net.td_weight(i), net.weights[i])

    def test_untied_random_differs(self):
        net = small_dense_net(tied=False, td_init="random")
        assert not np.array_equal(net.td_weight(0), net.weights[0])

    def test_task_head_excluded_from_trainables(self):
        net = small_dense_net()
        assert "task_head.weight" in net.parameters()
        assert "task_head.weight" not in net.trainable_parameters()


class TestBuForward:
    def test_linear_mode_affine_chain(self):
        net = build_paired([Dense(2)], input_shape=(2,), n_classes=2, seed=0)
        net.weights[0][:] = np.array([[1.0, 2.0], [3.0, 4.0]])
        net.bu_biases[0][:] = np.array([0.5, -0.5])
        net.w_out[:] = np.eye(2)
        net.b_out[:] = 0.0
        y, state = net.bu_forward(np.array([[1.0, 1.0]]), mode="linear")
        np.testing.assert_allclose(state.activations[1], [[3.5, 6.5]])
        np.testing.assert_allclose(y, [[3.5, 6.5]])

    def test_relu_galu_with_open_gates_is_relu(self):
        net = small_conv_net()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3,) + net.input_shape)
        _, td = net.td_pass(rng.normal(size=(3, 2)), head="task", mode="relu")
        open_gates = td
        for l in range(1, net.n_levels + 1):
            open_gates.activations[l] = np.ones_like(td.activations[l])
        y_gated, _ = net.bu_forward(x, mode="relu_galu", gates=open_gates)
        y_relu, _ = net.bu_forward(x, mode="relu")
        np.testing.assert_array_equal(y_gated, y_relu)

    def test_gated_mode_requires_gates(self):
        net = small_dense_net()
        with pytest.raises(ValueError, match="gate"):
            net.bu_forward(np.zeros((1, 6)), mode="relu_galu")

    def test_gates_direction_checked(self):
        net = small_dense_net()
        _, bu = net.bu_forward(np.zeros((1, 6)), mode="relu")
        with pytest.raises(ValueError, match="td"):
            net.bu_forward(np.zeros((1, 6)), mode="relu_galu", gates=bu)

    def test_input_shape_checked(self):
        net = small_dense_net()
        with pytest.raises(ShapeError, match="batch-first"):
            net.bu_forward(np.zeros((1, 7)), mode="relu")

    def test_masks_recorded(self):
        net = small_dense_net(n_tasks=None)
        x = np.random.default_rng(2).normal(size=(2, 6))
        _, state = net.bu_forward(x, mode="relu")
        for l in range(1, net.n_levels + 1):
            np.testing.assert_array_equal(state.masks[l],
                                          state.activations[l] > 0)


class TestTdPass:
    def test_blocked_bias_invariant_to_td_bias_values(self):
        net = small_conv_net()
        rng = np.random.default_rng(3)
        err = rng.normal(size=(2, 3))
        x = rng.normal(size=(2,) + net.input_shape)
        _, bu = net.bu_forward(x, mode="relu")
        ref, _ = net.td_pass(err, head="output", mode="galu", bias_mode="blocked",
                             gates=bu)
        for b in net.td_biases:
            if b is not None:
                b[:] = rng.normal(size=b.shape) * 100
        again, _ = net.td_pass(err, head="output", mode="galu", bias_mode="blocked",
                               gates=bu)
        np.testing.assert_array_equal(ref, again)

    def test_standard_bias_depends_on_td_bias(self):
        net = small_dense_net()
        t = np.eye(2)[:1]
        x0, _ = net.td_pass(t, head="task", mode="relu")
        net.td_biases[0][:] = 5.0
        net.td_biases[1][:] = 5.0
        x1, _ = net.td_pass(t, head="task", mode="relu")
        assert not np.array_equal(x0, x1)

    def test_task_heads_give_distinct_top_sign_patterns(self):
        hits = 0
        for seed in range(20):
            net = build_paired([Dense(16)], input_shape=(4,), n_classes=3,
                               n_tasks=2, seed=seed)
            _, s0 = net.td_pass(np.eye(2)[:1], head="task", mode="relu")
            _, s1 = net.td_pass(np.eye(2)[1:], head="task", mode="relu")
            if not np.array_equal(s0.activations[1] > 0, s1.activations[1] > 0):
                hits += 1
        assert hits == 20

    def test_task_head_missing_raises(self):
        net = small_dense_net(n_tasks=None)
        with pytest.raises(ValueError, match="task head"):
            net.td_pass(np.zeros((1, 2)), head="task", mode="relu")

    def test_bad_head_raises(self):
        net = small_dense_net()
        with pytest.raises(ValueError, match="head"):
            net.td_pass(np.zeros((1, 3)), head="both", mode="relu")

    def test_head_input_size_checked(self):
        net = small_dense_net()
        with pytest.raises(ShapeError):
            net.td_pass(np.zeros((1, 5)), head="output", mode="linear")

    def test_td_output_levels_match_bu(self):
        net = small_conv_net()
        x_bar, state = net.td_pass(np.ones((1, 2)), head="task", mode="relu")
        assert x_bar.shape == (1,) + net.input_shape
        assert state.activations[0] is x_bar


class TestActivationAlgebra:
    def test_relu_galu_composition_commutes(self):
        # relu(galu(x, g)) == galu(relu(x), g) == x * 1{x>0} * 1{g>0}
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.normal(size=23)
            g = rng.normal(size=23)
            relu_then_galu = np.where(g > 0, np.maximum(x, 0.0), 0.0)
            galu_then_relu = np.maximum(np.where(g > 0, x, 0.0), 0.0)
            direct = x * (x > 0) * (g > 0)
            np.testing.assert_array_equal(relu_then_galu, galu_then_relu)
            np.testing.assert_array_equal(relu_then_galu, direct)


class TestExtractMask:
    def test_strictly_positive_only(self):
        net = build_paired([Dense(3)], input_shape=(2,), n_classes=2, n_tasks=2,
                           seed=0)
        _, state = net.td_pass(np.eye(2)[:1], head="task", mode="linear")
        state.activations[1] = np.array([[0.5, 0.0, -1.0]])
        masks = extract_mask(state)
        np.testing.assert_array_equal(masks[1], [[True, False, False]])

    def test_all_negative_top_propagates_all_false(self):
        net = small_dense_net()
        _, state = net.td_pass(np.eye(2)[:1], head="task", mode="relu")
        # force the top level to zero: relu of negatives downstream stays zero
        top = -np.abs(np.random.default_rng(5).normal(size=(1, net.n_tasks)))
        net.w_task[:] = np.abs(net.w_task)  # positive weights, negative input
        _, state = net.td_pass(top, head="task", mode="relu")
        masks = extract_mask(state)
        for l in range(1, net.n_levels + 1):
            assert not masks[l].any()

    def test_requires_task_state(self):
        net = small_dense_net()
        _, bu = net.bu_forward(np.zeros((1, 6)), mode="relu")
        with pytest.raises(ValueError):
            extract_mask(bu)
        _, err_state = net.td_pass(np.zeros((1, 3)), head="output", mode="linear")
        with pytest.raises(ValueError):
            extract_mask(err_state)
