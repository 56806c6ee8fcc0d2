"""Structure search: L1 pressure, global-rank masks, convergence freezing."""

import numpy as np
import pytest

from prunepool.data import synthetic_dataset
from prunepool.errors import NonFiniteError, SpecError
from prunepool.graph import ArchSpec, ChannelMask, LayerSpec, SharedWeightStore
from prunepool.search import (
    PrunedNetworkPool,
    SearchConfig,
    extract_mask,
    mask_similarity,
    run_search,
    sparsity_penalty,
)


def spec_2x2():
    """Two prunable convs of width 2; four globally rankable channels."""
    layers = []
    for _ in range(2):
        layers += [LayerSpec("conv2d", out_channels=2, kernel=3, padding=1,
                             prunable=True),
                   LayerSpec("batchnorm"), LayerSpec("relu")]
    layers += [LayerSpec("globalavgpool"), LayerSpec("linear")]
    return ArchSpec(name="2x2", num_classes=4, in_channels=3, layers=layers)


def store_with_gammas(spec, gammas):
    """Build a store and overwrite BN scale factors layer by layer."""
    store = SharedWeightStore.build(spec, seed=0)
    for conv_i, values in zip(spec.prunable_indices(), gammas):
        bn_i = spec.bn_for_conv(conv_i)
        store.params[f"layer{bn_i:02d}.gamma"][:] = values
    return store


def search_spec():
    layers = []
    for out, stride in ((6, 1), (8, 2)):
        layers += [LayerSpec("conv2d", out_channels=out, kernel=3,
                             stride=stride, padding=1, prunable=True),
                   LayerSpec("batchnorm"), LayerSpec("relu")]
    layers += [LayerSpec("globalavgpool"), LayerSpec("linear")]
    return ArchSpec(name="srch", num_classes=4, in_channels=3, layers=layers)


def small_data():
    train, _ = synthetic_dataset(5, n_per_class=12, classes=4,
                                 base_resolution=16, max_shift=2)
    return train


# ------------------------------------------------------------- L1 penalty


def test_l1_penalty_hand_values():
    spec = spec_2x2()
    # one 3-channel layer is easier to read; rebuild with widths (3, 2)
    layers = [LayerSpec("conv2d", out_channels=3, kernel=3, padding=1,
                        prunable=True),
              LayerSpec("batchnorm"), LayerSpec("relu"),
              LayerSpec("globalavgpool"), LayerSpec("linear")]
    spec = ArchSpec(name="l1", num_classes=4, in_channels=3, layers=layers)
    store = store_with_gammas(spec, [np.array([1.0, -2.0, 0.0])])
    value, grads = sparsity_penalty(store, spec, lam=0.1)
    assert value == pytest.approx(0.3, rel=1e-12)
    np.testing.assert_allclose(grads["layer01.gamma"], [0.1, -0.1, 0.0])


def test_l1_penalty_zero_lambda():
    spec = spec_2x2()
    store = SharedWeightStore.build(spec, seed=0)
    value, grads = sparsity_penalty(store, spec, lam=0.0)
    assert value == 0.0
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_l1_penalty_sign_flip_invariant():
    spec = spec_2x2()
    a = store_with_gammas(spec, [np.array([0.3, -0.7]), np.array([1.1, -0.2])])
    b = store_with_gammas(spec, [np.array([-0.3, 0.7]), np.array([-1.1, 0.2])])
    va, _ = sparsity_penalty(a, spec, lam=0.5)
    vb, _ = sparsity_penalty(b, spec, lam=0.5)
    assert va == pytest.approx(vb, rel=1e-12)


# ----------------------------------------------------------- mask extraction


def test_extract_mask_zero_rate_keeps_everything():
    spec = spec_2x2()
    store = SharedWeightStore.build(spec, seed=0)
    mask = extract_mask(spec, store, 0.0)
    for i in spec.prunable_indices():
        np.testing.assert_array_equal(mask.keep[i], True)
    assert mask.protections == []


def test_extract_mask_global_rank_hand_case():
    # |gamma| = (0.9, 0.1 | 0.8, 0.2), rho=0.5: the two smallest fall
    spec = spec_2x2()
    store = store_with_gammas(spec, [np.array([0.9, 0.1]), np.array([0.8, 0.2])])
    mask = extract_mask(spec, store, 0.5)
    l0, l1 = spec.prunable_indices()
    np.testing.assert_array_equal(mask.keep[l0], [True, False])
    np.testing.assert_array_equal(mask.keep[l1], [True, False])
    assert mask.protections == []
    assert mask.realized_rate(spec) == pytest.approx(0.5)


def test_extract_mask_protection_redirects_prune():
    # |gamma| = (0.1, 0.2 | 0.9, 0.8): after (L0,c0) falls, (L0,c1) is
    # protected, so the cut moves to (L1,c1)
    spec = spec_2x2()
    store = store_with_gammas(spec, [np.array([0.1, 0.2]), np.array([0.9, 0.8])])
    mask = extract_mask(spec, store, 0.5)
    l0, l1 = spec.prunable_indices()
    np.testing.assert_array_equal(mask.keep[l0], [False, True])
    np.testing.assert_array_equal(mask.keep[l1], [True, False])
    assert mask.protections == [(l0, 1)]


def test_extract_mask_ties_break_by_layer_then_channel():
    spec = spec_2x2()
    store = store_with_gammas(spec, [np.array([0.5, 0.5]), np.array([0.5, 0.5])])
    mask = extract_mask(spec, store, 0.5)
    l0, l1 = spec.prunable_indices()
    # (L0,c0) falls first, (L0,c1) is then protected, so (L1,c0) falls
    np.testing.assert_array_equal(mask.keep[l0], [False, True])
    np.testing.assert_array_equal(mask.keep[l1], [False, True])


def test_extract_mask_never_empties_a_layer():
    spec = spec_2x2()
    store = store_with_gammas(spec, [np.array([0.1, 0.2]), np.array([0.3, 0.4])])
    mask = extract_mask(spec, store, 0.99)
    for i in spec.prunable_indices():
        assert mask.keep[i].sum() == 1
    assert len(mask.protections) > 0


def test_extract_mask_nests_across_rates():
    """One gamma snapshot, increasing rates: kept sets shrink monotonically."""
    spec = search_spec()
    rng = np.random.default_rng(30)
    store = SharedWeightStore.build(spec, seed=0)
    for conv_i in spec.prunable_indices():
        bn_i = spec.bn_for_conv(conv_i)
        g = store.params[f"layer{bn_i:02d}.gamma"]
        g[:] = rng.uniform(0.05, 1.0, size=g.shape)
    prev = extract_mask(spec, store, 0.0)
    for rho in (0.2, 0.4, 0.6, 0.8):
        cur = extract_mask(spec, store, rho)
        for i in spec.prunable_indices():
            assert np.all(prev.keep[i] >= cur.keep[i]), f"rho={rho} layer {i}"
        prev = cur


def test_realized_count_is_floor_of_rate():
    spec = search_spec()  # 14 prunable channels
    rng = np.random.default_rng(31)
    store = SharedWeightStore.build(spec, seed=0)
    for conv_i in spec.prunable_indices():
        bn_i = spec.bn_for_conv(conv_i)
        g = store.params[f"layer{bn_i:02d}.gamma"]
        g[:] = rng.uniform(0.05, 1.0, size=g.shape)
    for rho in (0.25, 0.5, 0.75):
        mask = extract_mask(spec, store, rho)
        pruned = sum(int((~mask.keep[i]).sum()) for i in spec.prunable_indices())
        assert pruned == int(np.floor(rho * 14))


# ------------------------------------------------------------- similarity


def _mask_from_bits(spec, bits_by_layer):
    keep = {i: np.asarray(b, dtype=bool)
            for i, b in zip(spec.prunable_indices(), bits_by_layer)}
    return ChannelMask(keep=keep, pruning_rate=0.0, structure_id="x")


def test_similarity_hand_values():
    spec = spec_2x2()
    a = _mask_from_bits(spec, [[1, 1], [0, 0]])
    b = _mask_from_bits(spec, [[1, 0], [1, 0]])
    assert mask_similarity(spec, a, b, "cosine") == pytest.approx(0.5)
    assert mask_similarity(spec, a, b, "eq3_literal") == pytest.approx(0.25)
    assert mask_similarity(spec, a, b, "dice") == pytest.approx(0.5)


def test_similarity_identical_masks():
    spec = spec_2x2()
    a = _mask_from_bits(spec, [[1, 0], [1, 1]])
    assert mask_similarity(spec, a, a, "cosine") == pytest.approx(1.0)
    assert mask_similarity(spec, a, a, "dice") == pytest.approx(1.0)
    # the literal reading of the printed formula caps at 0.5
    assert mask_similarity(spec, a, a, "eq3_literal") == pytest.approx(0.5)


def test_similarity_disjoint_supports():
    spec = spec_2x2()
    a = _mask_from_bits(spec, [[1, 0], [1, 0]])
    b = _mask_from_bits(spec, [[0, 1], [0, 1]])
    for metric in ("cosine", "eq3_literal", "dice"):
        assert mask_similarity(spec, a, b, metric) == 0.0


def test_similarity_symmetric():
    spec = spec_2x2()
    rng = np.random.default_rng(32)
    a = _mask_from_bits(spec, rng.integers(0, 2, size=(2, 2)))
    b = _mask_from_bits(spec, rng.integers(0, 2, size=(2, 2)))
    for metric in ("cosine", "eq3_literal", "dice"):
        assert mask_similarity(spec, a, b, metric) == mask_similarity(
            spec, b, a, metric)


def test_similarity_all_zero_mask_warns():
    spec = spec_2x2()
    a = _mask_from_bits(spec, [[0, 0], [0, 0]])
    b = _mask_from_bits(spec, [[1, 1], [1, 1]])
    with pytest.warns(UserWarning):
        assert mask_similarity(spec, a, b, "cosine") == 0.0


# --------------------------------------------------------------- run_search


def test_search_config_validation():
    with pytest.raises(SpecError):
        SearchConfig(pruning_rates=())
    with pytest.raises(SpecError):
        SearchConfig(pruning_rates=(0.5, 0.3))
    with pytest.raises(SpecError):
        SearchConfig(pruning_rates=(0.3, 1.0))
    with pytest.raises(SpecError):
        SearchConfig(metric="jaccard")
    with pytest.raises(SpecError):
        SearchConfig(s_consec=0)


def test_tau_zero_freezes_at_first_comparison():
    config = SearchConfig(pruning_rates=(0.3, 0.6), n_epochs=6, tau=0.0,
                          s_consec=1, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=0)
    pool, _, trace = run_search(search_spec(), config, small_data())
    for entry in pool.entries:
        assert entry.freeze_epoch == 2
    assert all(v == 2 for v in trace.freeze_epochs.values())


def test_consecutive_window_delays_freeze():
    config = SearchConfig(pruning_rates=(0.3,), n_epochs=6, tau=0.0,
                          s_consec=2, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=0)
    pool, _, _ = run_search(search_spec(), config, small_data())
    assert pool.entries[0].freeze_epoch == 3  # needs two comparisons


def test_search_is_deterministic():
    config = SearchConfig(pruning_rates=(0.3, 0.6), n_epochs=5, tau=0.5,
                          s_consec=1, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=1)
    pool_a, _, trace_a = run_search(search_spec(), config, small_data())
    pool_b, _, trace_b = run_search(search_spec(), config, small_data())
    assert pool_a.to_json_dict() == pool_b.to_json_dict()
    assert trace_a.similarity == trace_b.similarity


def test_frozen_mask_comes_from_detection_epoch():
    """Freezing is monotone: the stored mask matches the history at freeze."""
    config = SearchConfig(pruning_rates=(0.4,), n_epochs=8, tau=0.0,
                          s_consec=1, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=2)
    pool, _, trace = run_search(search_spec(), config, small_data())
    entry = pool.entries[0]
    history = trace.mask_history[entry.structure_id]
    at_freeze = history[entry.freeze_epoch - 1]  # epoch indices are 1-based
    for i, bits in entry.mask.keep.items():
        assert np.array_equal(bits, at_freeze.keep[i])


def test_unfrozen_rates_freeze_at_final_epoch_with_warning():
    config = SearchConfig(pruning_rates=(0.5,), n_epochs=2, tau=1.0,
                          s_consec=2, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=0)
    with pytest.warns(UserWarning):
        pool, _, _ = run_search(search_spec(), config, small_data())
    assert pool.entries[0].freeze_epoch == 2


def test_pool_json_round_trip_bit_exact(tmp_path):
    config = SearchConfig(pruning_rates=(0.3, 0.6), n_epochs=4, tau=0.0,
                          s_consec=1, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=3)
    pool, _, _ = run_search(search_spec(), config, small_data(),
                            verify_resolutions=(16, 12))
    path = tmp_path / "pool.json"
    pool.save(str(path))
    loaded = PrunedNetworkPool.load(str(path))
    assert loaded.to_json_dict() == pool.to_json_dict()
    again = tmp_path / "pool2.json"
    loaded.save(str(again))
    assert path.read_bytes() == again.read_bytes()
    for entry in loaded.entries:
        assert set(entry.verified_flops) == {"16", "12"}


def test_similarity_csv_layout():
    config = SearchConfig(pruning_rates=(0.3, 0.6), n_epochs=4, tau=0.0,
                          s_consec=1, lam=1e-3, lr=0.05, batch_size=16,
                          resolution=16, seed=0)
    _, _, trace = run_search(search_spec(), config, small_data())
    lines = trace.similarity_csv().strip().split("\n")
    assert lines[0] == "epoch,rho0.30,rho0.60"
    first = lines[1].split(",")
    assert first[0] == "2"  # similarity starts at the second epoch
    assert 0.0 <= float(first[1]) <= 1.0


def test_search_divergence_reports_context():
    config = SearchConfig(pruning_rates=(0.3,), n_epochs=3, tau=0.0,
                          s_consec=1, lam=1e-3, lr=1e38, batch_size=16,
                          resolution=16, seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError, match="diverged"):
            run_search(search_spec(), config, small_data())
