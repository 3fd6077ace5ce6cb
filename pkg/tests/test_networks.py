import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from engage_mil.bags import Bag, SyntheticSpec, synth_generate
from engage_mil.errors import ParseError, TrainingDivergedError
from engage_mil.networks import (
    DenseLayer,
    InstanceIntensities,
    LstmLayer,
    MilNet,
    SeqNet,
    TrainConfig,
    backward,
    build_mil_net,
    build_seq_net,
    forward_mil,
    forward_seq,
    load_net,
    localize,
    mean_pool,
    mil_loss,
    predict_score,
    save_net,
    topk_pool,
    train,
)

from oracles import finite_difference_gradients, max_relative_gradient_error


def _random_bag(rng, m, dim, label=1):
    return Bag(
        video_id="v0",
        subject_id="s0",
        instances=rng.normal(size=(m, dim)),
        label=label,
    )


# ---------------------------------------------------------------------------
# pooling


def test_topk_pool_hand_examples():
    r = np.array([3.0, 2.0, 1.0] + [0.0] * 7)
    assert topk_pool(r, 2) == 2.5
    assert topk_pool(np.full(6, 1.25), 3) == 1.25
    with pytest.raises(ValueError):
        topk_pool(r, 0)
    with pytest.raises(ValueError):
        topk_pool(r, 11)


def test_topk_pool_matches_full_sort_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r = rng.normal(size=100)
        expected = float(np.sort(r)[::-1][:10].mean())
        assert topk_pool(r, 10) == expected


def test_topk_pool_with_k_equal_m_is_mean_pool():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r = rng.normal(size=17)
        assert topk_pool(r, 17) == mean_pool(r)


def test_topk_pool_tie_handling_prefers_lower_index():
    # equal values: either choice yields identical numbers, but selection
    # order must be stable so gradients route deterministically
    r = np.array([1.0, 2.0, 2.0, 0.0])
    assert topk_pool(r, 2) == 2.0


@settings(max_examples=60)
@given(
    arrays(np.float64, st.integers(2, 20), elements=st.floats(-5, 5)),
    st.data(),
)
def test_topk_pool_is_monotone(r, data):
    k = data.draw(st.integers(1, len(r)))
    idx = data.draw(st.integers(0, len(r) - 1))
    bump = data.draw(st.floats(0, 5))
    raised = r.copy()
    raised[idx] += bump
    assert topk_pool(raised, k) >= topk_pool(r, k) - 1e-12


def test_mean_pool_examples():
    assert mean_pool(np.array([0.0, 3.0])) == 1.5
    assert mean_pool(np.full(9, 2.0)) == 2.0
    with pytest.raises(ValueError):
        mean_pool(np.array([]))


def test_mil_loss_examples():
    assert mil_loss(2.0, 2.0) == 0.0
    assert mil_loss(1.0, 3.0) == 4.0


# ---------------------------------------------------------------------------
# dense MIL forward


def test_forward_mil_identical_instances_share_the_score():
    net = build_mil_net(5, hidden=(8, 6), pooling="topk", k=3, seed=0)
    row = np.random.default_rng(2).normal(size=5)
    bag = np.tile(row, (12, 1))
    score, intensities = forward_mil(net, bag)
    assert np.allclose(intensities.values, intensities.values[0])
    assert score == pytest.approx(intensities.values[0], abs=1e-12)
    net_mean = build_mil_net(5, hidden=(8, 6), pooling="mean", seed=0)
    score_mean, _ = forward_mil(net_mean, bag)
    assert score_mean == pytest.approx(intensities.values[0], abs=1e-12)


def test_forward_mil_zero_weights_score_is_the_ranking_bias():
    net = build_mil_net(4, hidden=(6,), pooling="mean", seed=0)
    for layer in net.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    net.layers[-1].bias[:] = -0.75
    score, intensities = forward_mil(net, np.random.default_rng(3).normal(size=(7, 4)))
    assert np.all(intensities.values == -0.75)
    assert score == -0.75


def test_forward_mil_matches_per_instance_recomputation():
    rng = np.random.default_rng(4)
    net = build_mil_net(6, hidden=(10, 5), pooling="topk", k=4, seed=11)
    bag = rng.normal(size=(9, 6))
    score, intensities = forward_mil(net, bag)
    manual = []
    for row in bag:
        h = row
        for layer in net.layers:
            z = layer.weights @ h + layer.bias
            if layer.activation == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
        manual.append(h[0])
    manual = np.array(manual)
    assert np.allclose(intensities.values, manual, atol=1e-12)
    assert score == pytest.approx(np.sort(manual)[::-1][:4].mean(), abs=1e-12)


def test_forward_mil_is_permutation_invariant():
    rng = np.random.default_rng(5)
    net = build_mil_net(3, hidden=(7,), pooling="topk", k=2, seed=1)
    bag = rng.normal(size=(8, 3))
    shuffled = bag[rng.permutation(8)]
    assert forward_mil(net, bag)[0] == pytest.approx(
        forward_mil(net, shuffled)[0], abs=1e-12
    )
    net_mean = build_mil_net(3, hidden=(7,), pooling="mean", seed=1)
    assert forward_mil(net_mean, bag)[0] == pytest.approx(
        forward_mil(net_mean, shuffled)[0], abs=1e-12
    )


def test_forward_mil_rejects_wrong_dimension():
    net = build_mil_net(4, hidden=(5,), seed=0)
    with pytest.raises(ValueError):
        forward_mil(net, np.zeros((6, 3)))


def test_forward_passes_are_pure():
    rng = np.random.default_rng(6)
    net = build_mil_net(4, hidden=(6, 5), pooling="topk", k=2, seed=3)
    bag = rng.normal(size=(6, 4))
    first = forward_mil(net, bag)
    second = forward_mil(net, bag)
    assert first[0] == second[0]
    assert np.array_equal(first[1].values, second[1].values)

    seq = build_seq_net(3, m=5, hidden=4, dense=(6, 5), seed=2)
    sbag = rng.normal(size=(5, 3))
    assert forward_seq(seq, sbag)[0] == forward_seq(seq, sbag)[0]


# ---------------------------------------------------------------------------
# sequence network forward


def test_forward_seq_zero_net_scores_from_final_biases():
    net = build_seq_net(4, m=6, hidden=3, dense=(5, 4), seed=0)
    for p in net.parameters():
        p[:] = 0.0
    final_bias = np.array([0.3, -0.2, 0.1, 0.0, 0.5, -0.4])
    net.dense[-1].bias[:] = final_bias
    score, hs = forward_seq(net, np.random.default_rng(7).normal(size=(6, 4)))
    expected = float((1.0 / (1.0 + np.exp(-final_bias))).mean())
    assert score == pytest.approx(expected, abs=1e-12)
    assert np.all(hs == 0.0)


def test_forward_seq_is_order_sensitive_somewhere():
    found = False
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = build_seq_net(3, m=5, hidden=4, dense=(6, 5), seed=seed)
        bag = rng.normal(size=(5, 3)) * 2.0
        swapped = bag.copy()
        swapped[[0, 4]] = swapped[[4, 0]]
        if abs(forward_seq(net, bag)[0] - forward_seq(net, swapped)[0]) > 1e-6:
            found = True
            break
    assert found


def test_forward_seq_score_within_unit_interval():
    rng = np.random.default_rng(8)
    net = build_seq_net(5, m=7, hidden=6, dense=(8, 6), seed=4)
    for _ in range(5):
        score, hs = forward_seq(net, rng.normal(size=(7, 5)) * 3.0)
        assert 0.0 < score < 1.0
        assert hs.shape == (7, 6)


def test_forward_seq_rejects_wrong_sizes():
    net = build_seq_net(4, m=5, hidden=3, seed=0)
    with pytest.raises(ValueError):
        forward_seq(net, np.zeros((4, 4)))  # wrong segment count
    with pytest.raises(ValueError):
        forward_seq(net, np.zeros((5, 3)))  # wrong feature dim


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("pooling,k", [("topk", 3), ("mean", 1)])
def test_mil_gradients_match_finite_differences(seed, pooling, k):
    rng = np.random.default_rng(100 + seed)
    net = build_mil_net(5, hidden=(7, 4), pooling=pooling, k=k, seed=seed)
    bag = _random_bag(rng, m=8, dim=5, label=2)
    label = 2.0
    analytic = backward(net, bag, label)
    numeric = finite_difference_gradients(
        lambda: mil_loss(forward_mil(net, bag)[0], label), net.parameters()
    )
    assert max_relative_gradient_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_seq_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    net = build_seq_net(4, m=5, hidden=4, dense=(6, 5), seed=seed)
    bag = _random_bag(rng, m=5, dim=4, label=3)
    label = 1.0  # scaled-space target; backward never rescales
    analytic = backward(net, bag, label)
    numeric = finite_difference_gradients(
        lambda: (forward_seq(net, bag)[0] - label) ** 2, net.parameters()
    )
    assert max_relative_gradient_error(analytic, numeric) < 1e-4


def test_zero_loss_gives_exactly_zero_gradients():
    net = build_mil_net(3, hidden=(4,), pooling="mean", seed=0)
    for layer in net.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    net.layers[-1].bias[:] = 2.0  # score == 2 for every bag
    bag = np.random.default_rng(9).normal(size=(5, 3))
    grads = backward(net, bag, 2.0)
    assert all(np.all(g == 0.0) for g in grads)


def test_topk_gradient_reaches_only_the_selected_instances():
    # identity first stage + one-hot instances makes the ranking-layer
    # weight gradient read out per-instance routing directly
    m = 6
    first = DenseLayer(weights=np.eye(m), bias=np.zeros(m), activation="linear")
    rank_w = np.arange(1.0, m + 1.0)[None, :]  # r_j = j + 1, all distinct
    rank = DenseLayer(weights=rank_w.copy(), bias=np.zeros(1), activation="linear")
    net = MilNet(layers=[first, rank], pooling="topk", k=2)
    bag = np.eye(m)
    grads = backward(net, bag, 0.0)
    d_rank_w = grads[2][0]
    assert np.all(d_rank_w[:-2] == 0.0)  # instances outside the top 2
    assert np.all(d_rank_w[-2:] != 0.0)


# ---------------------------------------------------------------------------
# training


def _tiny_dataset(seed=0, videos=24, subjects=6, m=8, dim=5, rho=0.5, noise=0.0):
    spec = SyntheticSpec(
        subjects=subjects,
        videos=videos,
        m=m,
        dim=dim,
        class_distribution=(0.25, 0.25, 0.25, 0.25),
        rho=rho,
        noise_scale=noise,
        seed=seed,
    )
    dataset, planted = synth_generate(spec)
    return dataset, planted


def test_train_zero_epochs_keeps_initial_parameters():
    dataset, _ = _tiny_dataset()
    net = build_mil_net(5, hidden=(8, 6), pooling="mean", seed=7)
    before = [p.copy() for p in net.parameters()]
    trained, trace = train(net, dataset, TrainConfig(epochs=0))
    assert trace == []
    for old, new in zip(before, trained.parameters()):
        assert np.array_equal(old, new)


def test_train_same_seed_is_bitwise_deterministic():
    dataset, _ = _tiny_dataset(seed=3)
    net = build_mil_net(5, hidden=(8, 6), pooling="topk", k=4, seed=1)
    config = TrainConfig(epochs=5, batch_size=7, seed=9)
    first, trace_a = train(net, dataset, config)
    second, trace_b = train(net, dataset, config)
    assert trace_a == trace_b
    for a, b in zip(first.parameters(), second.parameters()):
        assert np.array_equal(a, b)


def test_train_first_epoch_loss_is_the_mean_of_initial_bag_losses():
    dataset, _ = _tiny_dataset(seed=5)
    net = build_mil_net(5, hidden=(8, 6), pooling="mean", seed=2)
    _, trace = train(net, dataset, TrainConfig(epochs=1, batch_size=len(dataset)))
    per_bag = [mil_loss(forward_mil(net, bag)[0], bag.label) for bag in dataset.bags]
    assert trace[0] == pytest.approx(math.fsum(per_bag) / len(per_bag), rel=1e-12)


def test_train_learns_noiseless_planted_data():
    dataset, _ = _tiny_dataset(seed=11, videos=40, subjects=8, m=10, dim=6, noise=0.0)
    net = build_mil_net(6, hidden=(32, 16), pooling="mean", seed=0)
    trained, trace = train(
        net, dataset, TrainConfig(step_size=0.01, epochs=200, batch_size=8, seed=0)
    )
    assert trace[-1] < 0.05
    assert trace[-1] < trace[0]


def test_train_divergence_raises_with_partial_trace():
    dataset, _ = _tiny_dataset(seed=2)
    net = build_mil_net(5, hidden=(8, 6), pooling="mean", seed=0)
    config = TrainConfig(
        step_size=1e20, epochs=50, batch_size=4, clip_norm=float("inf")
    )
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError) as err:
            train(net, dataset, config)
    assert isinstance(err.value.trace, list)


def test_train_scale_labels_override_is_stamped_on_the_copy():
    dataset, _ = _tiny_dataset(seed=4)
    net = build_seq_net(5, m=8, hidden=4, dense=(6, 5), seed=0)
    trained, _ = train(net, dataset, TrainConfig(epochs=1, scale_labels=True))
    assert trained.label_scaling is True
    assert net.label_scaling is True  # builder default, original untouched
    trained2, _ = train(net, dataset, TrainConfig(epochs=1, scale_labels=False))
    assert trained2.label_scaling is False
    assert net.label_scaling is True


def test_predict_score_rescales_when_label_scaling_is_active():
    net = build_seq_net(3, m=4, hidden=3, dense=(5, 4), seed=1, label_scaling=True)
    bag = np.random.default_rng(10).normal(size=(4, 3))
    raw, _ = forward_seq(net, bag)
    assert predict_score(net, bag) == pytest.approx(3.0 * raw, abs=1e-12)
    net_mil = build_mil_net(3, hidden=(4,), k=3, seed=1, label_scaling=False)
    mil_bag = np.random.default_rng(11).normal(size=(6, 3))
    assert predict_score(net_mil, mil_bag) == forward_mil(net_mil, mil_bag)[0]


# ---------------------------------------------------------------------------
# localization


def test_localize_milnet_returns_the_ranking_outputs():
    rng = np.random.default_rng(12)
    net = build_mil_net(4, hidden=(6, 5), pooling="topk", k=3, seed=5)
    bag = rng.normal(size=(9, 4))
    _, intensities = forward_mil(net, bag)
    located = localize(net, bag)
    assert np.array_equal(located.values, intensities.values)
    assert len(located) == 9

    scaled = build_mil_net(4, hidden=(6, 5), pooling="topk", k=3, seed=5, label_scaling=True)
    assert np.allclose(localize(scaled, bag).values, 3.0 * intensities.values)


def test_localize_seqnet_matches_manual_zeroed_attribution():
    rng = np.random.default_rng(13)
    net = build_seq_net(3, m=5, hidden=4, dense=(6, 5), seed=3, label_scaling=False)
    bag = rng.normal(size=(5, 3))
    _, hs = forward_seq(net, bag)
    located = localize(net, bag)
    assert len(located) == 5
    for j in range(5):
        flat = np.zeros(5 * 4)
        flat[j * 4 : (j + 1) * 4] = hs[j]
        h = flat
        for layer in net.dense:
            h = 1.0 / (1.0 + np.exp(-(layer.weights @ h + layer.bias)))
        assert located.values[j] == pytest.approx(float(h.mean()), abs=1e-12)


def test_localize_seqnet_rescales_with_label_scaling():
    rng = np.random.default_rng(14)
    net = build_seq_net(3, m=4, hidden=3, dense=(5, 4), seed=6, label_scaling=True)
    bag = rng.normal(size=(4, 3))
    plain = build_seq_net(3, m=4, hidden=3, dense=(5, 4), seed=6, label_scaling=False)
    assert np.allclose(localize(net, bag).values, 3.0 * localize(plain, bag).values)


def test_instance_intensities_sorted_view():
    intensities = InstanceIntensities(values=np.array([1.0, 3.0, 2.0]))
    assert np.array_equal(intensities.sorted_view(), [3.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        InstanceIntensities(values=np.array([np.nan]))


# ---------------------------------------------------------------------------
# persistence and validation


def test_mil_net_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    net = build_mil_net(5, hidden=(8, 6), pooling="topk", k=4, seed=8, label_scaling=True)
    save_net(net, tmp_path / "net.emnn", meta={"feature_kind": "synthetic"})
    loaded, meta = load_net(tmp_path / "net.emnn")
    assert meta == {"feature_kind": "synthetic"}
    assert isinstance(loaded, MilNet)
    assert (loaded.pooling, loaded.k, loaded.label_scaling) == ("topk", 4, True)
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    bag = rng.normal(size=(7, 5))
    assert forward_mil(loaded, bag)[0] == forward_mil(net, bag)[0]


def test_seq_net_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    net = build_seq_net(4, m=6, hidden=5, dense=(7, 6), seed=9)
    save_net(net, tmp_path / "net.emnn")
    loaded, meta = load_net(tmp_path / "net.emnn")
    assert isinstance(loaded, SeqNet)
    assert meta == {}
    bag = rng.normal(size=(6, 4))
    assert forward_seq(loaded, bag)[0] == forward_seq(net, bag)[0]


def test_load_net_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.emnn"
    bad.write_bytes(b"XXXX" + bytes(30))
    with pytest.raises(ParseError):
        load_net(bad)
    short = tmp_path / "short.emnn"
    net = build_mil_net(3, hidden=(4,), seed=0)
    save_net(net, short)
    short.write_bytes(short.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_net(short)


def test_net_construction_validation():
    with pytest.raises(ValueError, match="ranking"):
        MilNet(layers=[DenseLayer(np.zeros((2, 3)), np.zeros(2), "relu")])
    with pytest.raises(ValueError, match="chain"):
        MilNet(
            layers=[
                DenseLayer(np.zeros((4, 3)), np.zeros(4), "relu"),
                DenseLayer(np.zeros((1, 5)), np.zeros(1), "linear"),
            ]
        )
    with pytest.raises(ValueError, match="pooling"):
        build_mil_net(3, pooling="max")
    with pytest.raises(ValueError, match="three"):
        SeqNet(
            lstm=build_seq_net(3, m=4, hidden=3).lstm,
            dense=[DenseLayer(np.zeros((4, 12)), np.zeros(4), "sigmoid")],
            m=4,
        )
    with pytest.raises(ValueError, match="activation"):
        DenseLayer(np.zeros((2, 2)), np.zeros(2), "tanh")
    with pytest.raises(ValueError, match="shapes"):
        LstmLayer(
            w_input=np.zeros((3, 7)),
            b_input=np.zeros(3),
            w_forget=np.zeros((3, 7)),
            b_forget=np.zeros(3),
            w_output=np.zeros((4, 7)),
            b_output=np.zeros(4),
            w_candidate=np.zeros((3, 7)),
            b_candidate=np.zeros(3),
        )


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(step_size=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)
