import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planting.model import (
    ArchitectureSpec,
    ChannelConfig,
    build_network,
    count_params,
    forward,
    param_count,
    plant_channels,
    planting_delta,
)

CIFAR = ArchitectureSpec.cifar()
CIFAR100 = ArchitectureSpec.cifar(100)
STL = ArchitectureSpec.stl()


def brute_force_count(net):
    return sum(p.value.size for p in net.params.values())


def small_spec():
    return ArchitectureSpec.cifar(num_classes=3, input_hw=(8, 8))


class TestArchitecture:
    def test_fc1_inputs(self):
        assert CIFAR.final_spatial == (4, 4)
        assert STL.final_spatial == (6, 6)

    def test_conv1_shape(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        assert net.params["conv1.weight"].shape == (8, 3, 3, 3)
        assert net.params["fc1.weight"].shape == (128, 8 * 16)
        assert net.params["fc2.weight"].shape == (10, 128)

    def test_bad_channels(self):
        with pytest.raises(ValueError):
            ChannelConfig((8, 8, 8, 8))
        with pytest.raises(ValueError):
            ChannelConfig((8, 0, 8, 8, 8))

    def test_indivisible_input(self):
        with pytest.raises(ValueError):
            ArchitectureSpec.cifar(input_hw=(12, 12))


class TestParamCount:
    @pytest.mark.parametrize(
        "spec,width,expected",
        [
            (CIFAR, 8, 20_362),
            (CIFAR, 16, 43_914),
            (CIFAR, 32, 104_842),
            (CIFAR, 64, 281_994),
            (CIFAR, 128, 857_482),
            (CIFAR100, 8, 31_972),
            (CIFAR100, 16, 55_524),
            (STL, 8, 40_842),
            (STL, 64, 445_834),
            (STL, 128, 1_185_162),
        ],
    )
    def test_uniform_widths(self, spec, width, expected):
        # expected values: layer-wise sums written out by hand, e.g.
        # CIFAR/8: 224 + 4*584 + (128*128+128) + 1290 = 20,362
        net = build_network(spec, ChannelConfig.uniform(width), 0)
        assert param_count(net) == expected == brute_force_count(net)

    def test_reported_planted_configs(self):
        a = count_params(CIFAR, ChannelConfig((12, 20, 16, 16, 12)))
        b = count_params(CIFAR, ChannelConfig((12, 16, 16, 16, 16)))
        assert (a, b) == (35_466, 43_226)
        assert round((a + 2 * b) / 3) == 40_639

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 12), min_size=5, max_size=5), st.sampled_from(["cifar", "stl"]))
    def test_closed_form_matches_element_count(self, widths, variant):
        spec = ArchitectureSpec.cifar() if variant == "cifar" else ArchitectureSpec.stl()
        net = build_network(spec, ChannelConfig(widths), 1)
        assert param_count(net) == brute_force_count(net)


class TestForward:
    GOLDEN = [
        [3.6276062322876883, 0.4381567907075846, 0.00026720217427356197, 1.74869549198364, 0.19532951330820258,
         -1.2444793853692946, 1.5684868389239306, 2.3834591994362393, -3.1373540424385093, -2.567980331181947],
        [3.23198895589766, 0.20821690985969898, 2.4193345800491937, 2.8980976012812616, -0.21930382439614737,
         -1.3212471696555936, 2.111966186125972, 3.2894536171588658, -2.5572871338631566, -2.0902683259479877],
    ]

    def test_shape(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        assert forward(net, np.zeros((2, 3, 32, 32))).shape == (2, 10)

    def test_zero_input_gives_fc2_bias(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        out = forward(net, np.zeros((1, 3, 32, 32))).value
        assert np.all(np.isfinite(out))
        assert np.array_equal(out[0], net.params["fc2.bias"].value)

    def test_golden(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        x = np.random.default_rng(123).normal(size=(2, 3, 32, 32))
        np.testing.assert_allclose(forward(net, x).value, self.GOLDEN, rtol=0, atol=1e-10)

    def test_dim_mismatch(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        with pytest.raises(ValueError):
            forward(net, np.zeros((1, 3, 16, 16)))

    def test_deterministic_build(self):
        a = build_network(STL, ChannelConfig.uniform(8), 42)
        b = build_network(STL, ChannelConfig.uniform(8), 42)
        assert a.same_as(b)
        assert not a.same_as(build_network(STL, ChannelConfig.uniform(8), 43))

    def test_fresh_network_has_nothing_frozen(self):
        assert build_network(CIFAR, ChannelConfig.uniform(4), 0).n_frozen() == 0


def trainable_by_shape_diff(old, new):
    """Oracle: an entry is new (trainable) iff its index lies outside the old tensor's shape."""
    out = {}
    for name, p in new.params.items():
        old_shape = old.params[name].shape
        idx = np.indices(p.shape)
        outside = np.zeros(p.shape, dtype=bool)
        for axis, size in enumerate(old_shape):
            outside |= idx[axis] >= size
        out[name] = outside
    return out


def trainable_by_slice_rule(old_channels, group, n, spec):
    """Oracle: enumerate the slices named by the planting rule directly."""
    new_ch = [c + (n if i + 1 in group else 0) for i, c in enumerate(old_channels)]
    ins = [3, *new_ch[:-1]]
    old_ins = [3, *old_channels[:-1]]
    out = {}
    for l in range(1, 6):
        w = np.zeros((new_ch[l - 1], ins[l - 1], 3, 3), dtype=bool)
        b = np.zeros(new_ch[l - 1], dtype=bool)
        if l in group:
            w[old_channels[l - 1]:] = True
            b[old_channels[l - 1]:] = True
        if l - 1 in group:
            w[:, old_ins[l - 1]:] = True
        out[f"conv{l}.weight"], out[f"conv{l}.bias"] = w, b
    area = spec.final_area
    fc1 = np.zeros((spec.fc_hidden, new_ch[-1] * area), dtype=bool)
    if 5 in group:
        fc1[:, old_channels[-1] * area:] = True
    out["fc1.weight"] = fc1
    out["fc1.bias"] = np.zeros(spec.fc_hidden, dtype=bool)
    out["fc2.weight"] = np.zeros((spec.num_classes, spec.fc_hidden), dtype=bool)
    out["fc2.bias"] = np.zeros(spec.num_classes, dtype=bool)
    return out


class TestPlant:
    def test_single_layer_shapes(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        planted = plant_channels(net, [3], 4, 1)
        assert planted.channels.conv_channels == (8, 8, 12, 8, 8)
        assert planted.params["conv3.weight"].shape == (12, 8, 3, 3)
        assert planted.params["conv4.weight"].shape == (8, 12, 3, 3)

    @pytest.mark.parametrize("group", [[1], [3], [5], [2, 3], [1, 2, 3, 4, 5]])
    def test_function_preserved(self, group):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        x = np.random.default_rng(9).normal(size=(3, 3, 32, 32))
        planted = plant_channels(net, group, 4, 2)
        assert np.array_equal(forward(net, x).value, forward(planted, x).value)

    def test_two_layer_trainable_set(self):
        net = build_network(CIFAR, ChannelConfig.uniform(8), 0)
        planted = plant_channels(net, [2, 3], 4, 3)
        by_rule = trainable_by_slice_rule([8] * 5, {2, 3}, 4, CIFAR)
        by_shape = trainable_by_shape_diff(net, planted)
        for name in planted.params:
            trainable = ~planted.frozen[name]
            assert np.array_equal(trainable, by_rule[name]), name
            assert np.array_equal(trainable, by_shape[name]), name
            old = net.params[name].value
            region = tuple(slice(0, s) for s in old.shape)
            assert np.array_equal(planted.params[name].value[region], old)

    def test_conv5_grows_fc1_by_spatial_area(self):
        net = build_network(STL, ChannelConfig.uniform(4), 0)
        planted = plant_channels(net, [5], 2, 0)
        assert planted.params["fc1.weight"].shape == (128, 6 * 36)
        assert not planted.params["fc1.weight"].value[:, 4 * 36:].any()
        assert (~planted.frozen["fc1.weight"]).sum() == 128 * 2 * 36

    def test_input_is_not_mutated(self):
        net = build_network(CIFAR, ChannelConfig.uniform(4), 0)
        snapshot = net.copy()
        plant_channels(net, [1, 2], 2, 0)
        assert net.same_as(snapshot)

    def test_rejects_bad_groups(self):
        net = build_network(CIFAR, ChannelConfig.uniform(4), 0)
        with pytest.raises(ValueError, match="fc widths are fixed"):
            plant_channels(net, [6], 4, 0)
        with pytest.raises(ValueError):
            plant_channels(net, [], 4, 0)
        with pytest.raises(ValueError):
            plant_channels(net, [1], 0, 0)

    def test_random_init_breaks_preservation(self):
        net = build_network(CIFAR, ChannelConfig.uniform(4), 0)
        x = np.random.default_rng(1).normal(size=(2, 3, 32, 32))
        planted = plant_channels(net, [2], 2, 0, init="random")
        assert not np.array_equal(forward(net, x).value, forward(planted, x).value)

    def test_param_delta_closed_form(self):
        net = build_network(CIFAR, ChannelConfig((8, 12, 8, 16, 8)), 0)
        for group in ([1], [4], [5], [2, 3]):
            planted = plant_channels(net, group, 4, 0)
            assert param_count(planted) - param_count(net) == planting_delta(CIFAR, net.channels, group, 4)

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(st.integers(1, 5), min_size=5, max_size=5),
        st.sets(st.integers(1, 5), min_size=1),
        st.integers(1, 3),
        st.integers(0, 1000),
    )
    def test_invariants_on_random_networks(self, widths, group, n, seed):
        spec = small_spec()
        net = build_network(spec, ChannelConfig(widths), seed)
        # a previously planted network, so earlier trainable slices must get frozen too
        net = plant_channels(net, [1 + seed % 5], 1, seed)
        x = np.random.default_rng(seed).normal(size=(2, *spec.input_shape))
        planted = plant_channels(net, group, n, seed + 1)
        assert np.array_equal(forward(net, x).value, forward(planted, x).value)
        shape_diff = trainable_by_shape_diff(net, planted)
        for name, p in planted.params.items():
            assert all(a >= b for a, b in zip(p.shape, net.params[name].shape))
            assert np.array_equal(~planted.frozen[name], shape_diff[name])
        assert planted.n_frozen() == param_count(net)
        assert planted.n_frozen() + planted.n_trainable() == param_count(planted)
