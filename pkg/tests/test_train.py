"""Sandwich sampling, the distillation chain, calibration, and joint training."""

import numpy as np
import pytest

from prunepool import ops
from prunepool.data import Dataset, synthetic_dataset
from prunepool.errors import CalibrationMissing, SpecError
from prunepool.graph import ArchSpec, ChannelMask, LayerSpec, SharedWeightStore, subnetwork_view
from prunepool.optim import SGD, cosine_lr
from prunepool.search import PNPEntry, PrunedNetworkPool
from prunepool.train import (
    IterationPlan,
    TRAIN_CSV_HEADER,
    TrainConfig,
    calibrate_bn,
    calibrate_pool,
    evaluate,
    evaluate_pool,
    resolve_bn_mode,
    sample_iteration_plan,
    train_joint,
    training_step,
)


def train_spec(padding=1):
    layers = []
    for out, stride in ((8, 1), (10, 2)):
        layers += [LayerSpec("conv2d", out_channels=out, kernel=3,
                             stride=stride, padding=padding, prunable=True),
                   LayerSpec("batchnorm"), LayerSpec("relu")]
    layers += [LayerSpec("globalavgpool"), LayerSpec("linear")]
    return ArchSpec(name="trn", num_classes=4, in_channels=3, layers=layers)


def make_pool(spec, rates):
    entries = [
        PNPEntry(structure_id=f"rho{r:.2f}",
                 mask=ChannelMask.uniform(spec, r, structure_id=f"rho{r:.2f}"),
                 freeze_epoch=2)
        for r in rates
    ]
    return PrunedNetworkPool(arch=spec, entries=entries, metric="cosine",
                             tau=0.9, s_consec=2)


def small_data(classes=4, n_per_class=12, resolution=16, seed=9):
    train, test = synthetic_dataset(seed, n_per_class=n_per_class,
                                    classes=classes,
                                    base_resolution=resolution, max_shift=2)
    return train, test


# ------------------------------------------------------------ iteration plan


def test_plan_four_structures_full_sandwich():
    spec = train_spec()
    pool = make_pool(spec, (0.2, 0.4, 0.6, 0.8))
    config = TrainConfig(resolutions=(16, 12, 8), n_middle=2)
    rng = np.random.default_rng(0)
    plan = sample_iteration_plan(pool, config, rng)
    assert len(plan.picks) == 4
    assert plan.picks[0] == ("rho0.20", 16)  # teacher at max resolution
    assert plan.picks[-1][0] == "rho0.80"
    mids = plan.structures()[1:3]
    assert mids == sorted(mids)
    assert set(mids) <= {"rho0.40", "rho0.60"}
    for _, res in plan.picks:
        assert res in (16, 12, 8)


def test_plan_degenerate_pool_sizes():
    spec = train_spec()
    config = TrainConfig(resolutions=(16, 12), n_middle=2)
    rng = np.random.default_rng(1)

    plan1 = sample_iteration_plan(make_pool(spec, (0.5,)), config, rng)
    assert plan1.picks == [("rho0.50", 16)]

    plan2 = sample_iteration_plan(make_pool(spec, (0.2, 0.8)), config, rng)
    assert plan2.structures() == ["rho0.20", "rho0.80"]

    plan3 = sample_iteration_plan(make_pool(spec, (0.2, 0.5, 0.8)), config, rng)
    assert plan3.structures()[0] == "rho0.20"
    assert plan3.structures()[1] == "rho0.50"  # only one interior candidate
    assert plan3.structures()[-1] == "rho0.80"


def test_plan_middles_drawn_without_replacement():
    spec = train_spec()
    pool = make_pool(spec, (0.1, 0.3, 0.5, 0.7, 0.9))
    config = TrainConfig(resolutions=(16,), n_middle=2)
    rng = np.random.default_rng(2)
    for _ in range(300):
        plan = sample_iteration_plan(pool, config, rng)
        mids = plan.structures()[1:-1]
        assert len(mids) == len(set(mids)) == 2


def test_plan_resolution_draws_are_uniform():
    spec = train_spec()
    pool = make_pool(spec, (0.2, 0.4, 0.6, 0.8))
    config = TrainConfig(resolutions=(16, 12, 8), n_middle=2)
    rng = np.random.default_rng(3)
    counts = {16: 0, 12: 0, 8: 0}
    draws = 0
    for _ in range(2000):
        plan = sample_iteration_plan(pool, config, rng)
        for _, res in plan.picks[1:]:
            counts[res] += 1
            draws += 1
    for res, c in counts.items():
        assert abs(c / draws - 1 / 3) < 0.03, f"resolution {res} skewed: {c}"


def test_plan_middle_choice_is_uniform():
    spec = train_spec()
    pool = make_pool(spec, (0.1, 0.3, 0.5, 0.7, 0.9))
    config = TrainConfig(resolutions=(16,), n_middle=2)
    rng = np.random.default_rng(4)
    pair_counts = {}
    for _ in range(3000):
        plan = sample_iteration_plan(pool, config, rng)
        pair = tuple(plan.structures()[1:-1])
        pair_counts[pair] = pair_counts.get(pair, 0) + 1
    assert len(pair_counts) == 3  # C(3,2) interior pairs
    for pair, c in pair_counts.items():
        assert abs(c / 3000 - 1 / 3) < 0.04, f"pair {pair} skewed: {c}"


# ---------------------------------------------------------------- chain step


def _chain_fixture(rates=(0.2, 0.4, 0.6, 0.8), seed=5, res=(16, 12, 12, 8)):
    spec = train_spec()
    pool = make_pool(spec, rates)
    store = SharedWeightStore.build(spec, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, size=8)
    plan = IterationPlan(picks=[(e.structure_id, r)
                                for e, r in zip(pool.entries, res)])
    return spec, pool, store, x, y, plan


def _view_probs(store, pool, sid, x, res):
    view = subnetwork_view(store, pool.entry(sid).mask)
    from prunepool.data import resize_batch
    xr = resize_batch(x, res).astype(store.dtype, copy=False)
    return ops.softmax(view.forward(xr, mode="train"))


def test_chain_references_previous_pick():
    """ta_chain: teacher gets CE, pick k gets KL against pick k-1's probs."""
    spec, pool, store, x, y, plan = _chain_fixture()
    opt = SGD(lr=0.0)
    terms = training_step(store, pool, plan, x, y, opt, distill_mode="ta_chain")

    probs = [_view_probs(store, pool, sid, x, res) for sid, res in plan.picks]
    from prunepool.data import resize_batch
    view = subnetwork_view(store, pool.entry(plan.picks[0][0]).mask)
    xr = resize_batch(x, plan.picks[0][1]).astype(store.dtype, copy=False)
    ce_expect, _ = ops.cross_entropy_loss(view.forward(xr, mode="train"), y)

    assert terms[0].ce == pytest.approx(ce_expect, rel=1e-6)
    assert terms[0].kl == 0.0
    for j in range(1, 4):
        kl_expect, _ = ops.kl_distill_loss(probs[j], probs[j - 1])
        assert terms[j].ce == 0.0
        assert terms[j].kl == pytest.approx(kl_expect, rel=1e-6)


def test_plain_teacher_references_teacher_for_all_picks():
    spec, pool, store, x, y, plan = _chain_fixture(seed=6)
    opt = SGD(lr=0.0)
    terms = training_step(store, pool, plan, x, y, opt,
                          distill_mode="plain_teacher")
    probs = [_view_probs(store, pool, sid, x, res) for sid, res in plan.picks]
    for j in range(1, 4):
        kl_expect, _ = ops.kl_distill_loss(probs[j], probs[0])
        assert terms[j].kl == pytest.approx(kl_expect, rel=1e-6)


def test_none_mode_trains_every_pick_on_labels():
    spec, pool, store, x, y, plan = _chain_fixture(seed=7)
    opt = SGD(lr=0.0)
    terms = training_step(store, pool, plan, x, y, opt, distill_mode="none")
    from prunepool.data import resize_batch
    for j, (sid, res) in enumerate(plan.picks):
        view = subnetwork_view(store, pool.entry(sid).mask)
        xr = resize_batch(x, res).astype(store.dtype, copy=False)
        ce_expect, _ = ops.cross_entropy_loss(view.forward(xr, mode="train"), y)
        assert terms[j].kl == 0.0
        assert terms[j].ce == pytest.approx(ce_expect, rel=1e-6)


def test_loss_total_additivity_is_exact():
    spec, pool, store, x, y, plan = _chain_fixture(seed=8)
    opt = SGD(lr=0.0)
    terms = training_step(store, pool, plan, x, y, opt)
    for t in terms:
        assert t.total == t.ce + t.kl  # bitwise, not approximately
    total = sum(t.total for t in terms)
    assert total == terms[0].total + terms[1].total + terms[2].total + terms[3].total


def test_chain_rejects_decreasing_rates():
    spec, pool, store, x, y, _ = _chain_fixture()
    bad = IterationPlan(picks=[("rho0.80", 16), ("rho0.20", 16)])
    with pytest.raises(SpecError, match="ordered"):
        training_step(store, pool, bad, x, y, SGD(lr=0.0))


def test_teacher_gradient_untouched_by_chain_losses():
    """Only the teacher's CE reaches channels no later pick keeps.

    momentum=1 with lr=0 turns the optimizer into a gradient recorder:
    velocities hold the accumulated grads and weights never move.
    """
    spec = train_spec()
    pool = make_pool(spec, (0.2, 0.8))
    store = SharedWeightStore.build(spec, seed=10)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(8, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, size=8)
    plan = IterationPlan(picks=[("rho0.20", 16), ("rho0.80", 12)])

    rec = SGD(lr=0.0, momentum=1.0)
    training_step(store, pool, plan, x, y, rec, distill_mode="ta_chain")

    # teacher CE grads computed independently
    view = subnetwork_view(store, pool.entry("rho0.20").mask)
    logits, steps = view.forward(x, mode="train", need_cache=True)
    _, dlogits = ops.cross_entropy_loss(logits, y)
    g_teacher: dict = {}
    view.backward(dlogits, steps, g_teacher)

    first = spec.prunable_indices()[0]
    t_keep = pool.entry("rho0.20").mask.keep[first]
    s_keep = pool.entry("rho0.80").mask.keep[first]
    exclusive = np.where(t_keep & ~s_keep)[0]
    assert exclusive.size > 0
    np.testing.assert_allclose(
        rec.velocities[f"layer{first:02d}.weight"][exclusive],
        g_teacher[f"layer{first:02d}.weight"][exclusive], rtol=1e-6)


def test_perturbing_student_exclusive_channels_keeps_teacher_logits():
    spec = train_spec()
    first = spec.prunable_indices()[0]
    width = spec.layers[first].out_channels
    t_keep = np.zeros(width, dtype=bool)
    s_keep = np.zeros(width, dtype=bool)
    t_keep[: width - 1] = True          # teacher skips the last channel
    s_keep[0] = s_keep[width - 1] = True  # student keeps it exclusively
    teacher = ChannelMask.full(spec, "t")
    teacher.keep[first] = t_keep
    student = ChannelMask.full(spec, "s")
    student.keep[first] = s_keep

    store = SharedWeightStore.build(spec, seed=11)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3, 16, 16)).astype(np.float32)
    before = subnetwork_view(store, teacher).forward(x, mode="train")
    store.params[f"layer{first:02d}.weight"][width - 1] += 17.0
    after = subnetwork_view(store, teacher).forward(x, mode="train")
    assert before.tobytes() == after.tobytes()


def test_kl_fuzz_nonnegative_and_zero_iff_identical():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(6), size=2)
        q = rng.dirichlet(np.ones(6), size=2)
        loss, _ = ops.kl_distill_loss(p, q)
        assert loss >= 0.0
        same, _ = ops.kl_distill_loss(p, p.copy())
        assert same == pytest.approx(0.0, abs=1e-12)


# --------------------------------------------------------------- calibration


def constant_dataset(value=0.3, n=8, classes=4, resolution=12):
    return Dataset(images=np.full((n, 3, resolution, resolution), value,
                                  dtype=np.float32),
                   labels=(np.arange(n) % classes).astype(np.int64),
                   split="train", classes=classes,
                   mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


def test_calibration_constant_input_exact_moments():
    """Constant unpadded inputs: every BN sees a constant channel, so the
    accumulated variance sits exactly on the epsilon floor."""
    spec = train_spec(padding=0)
    store = SharedWeightStore.build(spec, seed=13)
    data = constant_dataset()
    mask = ChannelMask.full(spec)
    stats = calibrate_bn(store, spec, mask, 12, data, batch_size=4, n_batches=2)

    first_conv = spec.conv_indices()[0]
    bn1 = spec.bn_for_conv(first_conv)
    w = store.params[f"layer{first_conv:02d}.weight"]
    expect_mean = 0.3 * w.sum(axis=(1, 2, 3))  # conv bias is zero at init
    np.testing.assert_allclose(stats.means[bn1], expect_mean, rtol=1e-5)
    for i in stats.variances:
        np.testing.assert_allclose(stats.variances[i], ops.BN_EPS, rtol=1e-6)
    assert stats.counts[bn1] == 2


def test_calibration_is_deterministic():
    spec = train_spec()
    train, _ = small_data()
    mask = ChannelMask.uniform(spec, 0.5, "rho0.50")

    def run():
        store = SharedWeightStore.build(spec, seed=14)
        return calibrate_bn(store, spec, mask, 12, train, batch_size=8,
                            n_batches=3)

    a, b = run(), run()
    for i in a.means:
        assert a.means[i].tobytes() == b.means[i].tobytes()
        assert a.variances[i].tobytes() == b.variances[i].tobytes()


def test_calibration_requires_a_batch():
    spec = train_spec()
    store = SharedWeightStore.build(spec, seed=0)
    train, _ = small_data()
    with pytest.raises(SpecError):
        calibrate_bn(store, spec, ChannelMask.full(spec), 12, train, n_batches=0)


def test_eval_stats_preference_order():
    spec = train_spec()
    store = SharedWeightStore.build(spec, seed=15)
    train, test = small_data()
    mask = ChannelMask.uniform(spec, 0.5, "rho0.50")

    # base stats (never trained, but usable without require_calibrated)
    r = evaluate(store, spec, mask, 12, test)
    assert r.stats_source == "base"

    store.create_bn_branch("rho0.50")
    r = evaluate(store, spec, mask, 12, test)
    assert r.stats_source == "branch"

    calibrate_bn(store, spec, mask, 12, train)
    r = evaluate(store, spec, mask, 12, test)
    assert r.stats_source == "calibrated"

    explicit = store.branch_stats["rho0.50"]
    r = evaluate(store, spec, mask, 12, test, stats=explicit)
    assert r.stats_source == "explicit"


def test_shared_mode_eval_before_calibration_raises():
    spec = train_spec()
    store = SharedWeightStore.build(spec, seed=16)
    train, test = small_data()
    pool = make_pool(spec, (0.3, 0.7))
    with pytest.raises(CalibrationMissing):
        evaluate_pool(store, spec, pool, test, resolutions=(12,),
                      require_calibrated=True)
    calibrate_pool(store, spec, pool, train, resolutions=(12,))
    results = evaluate_pool(store, spec, pool, test, resolutions=(12,),
                            require_calibrated=True)
    assert all(r.stats_source == "calibrated" for r in results)


def test_eval_accuracy_counts_argmax_matches():
    spec = train_spec()
    store = SharedWeightStore.build(spec, seed=17)
    _, test = small_data()
    mask = ChannelMask.full(spec)
    view = subnetwork_view(store, mask, bn_branch=None)
    view.forward(test.images[:8].astype(store.dtype), mode="train")  # seed stats
    r = evaluate(store, spec, mask, test.resolution, test, stats=store.stats)
    logits = view.forward(test.images.astype(store.dtype), mode="eval",
                          stats=store.stats)
    manual = float((logits.argmax(axis=1) == test.labels).mean())
    assert r.accuracy == pytest.approx(manual)
    assert r.n == len(test)


# ----------------------------------------------------------------- schedules


def test_cosine_lr_endpoints_and_monotonicity():
    base, total = 0.5, 20
    assert cosine_lr(base, 1, total) == pytest.approx(base)
    expect_last = 0.5 * base * (1 + np.cos(np.pi * (total - 1) / total))
    assert cosine_lr(base, total, total) == pytest.approx(expect_last)
    values = [cosine_lr(base, e, total) for e in range(1, total + 1)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] > 0.0


def test_resolve_bn_mode_auto_threshold():
    assert resolve_bn_mode("auto", 8) == "per_structure"
    assert resolve_bn_mode("auto", 9) == "shared"
    assert resolve_bn_mode("shared", 2) == "shared"
    assert resolve_bn_mode("per_structure", 20) == "per_structure"


def test_train_config_validation():
    with pytest.raises(SpecError):
        TrainConfig(distill_mode="mutual")
    with pytest.raises(SpecError):
        TrainConfig(bn_mode="frozen")
    with pytest.raises(SpecError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(SpecError):
        TrainConfig(resolutions=(32, 32))
    with pytest.raises(SpecError):
        TrainConfig(resolutions=())
    with pytest.raises(SpecError):
        TrainConfig(n_middle=-1)
    with pytest.raises(SpecError):
        TrainConfig(augment_crop_pad=-1)
    config = TrainConfig(resolutions=(20, 28, 32))
    assert config.resolutions == (32, 28, 20)  # stored descending


# ---------------------------------------------------------------- train_joint


def _joint_config(**kw):
    defaults = dict(n_epochs=2, batch_size=16, lr=0.05, momentum=0.5,
                    weight_decay=1e-3, resolutions=(16, 12), n_middle=2,
                    bn_mode="auto", calibration_batches=2, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_train_joint_csv_layout_and_determinism():
    spec = train_spec()
    train, _ = small_data()
    config = _joint_config()

    def run():
        store = SharedWeightStore.build(spec, seed=18)
        pool = make_pool(spec, (0.3, 0.7))
        return train_joint(spec, pool, store, config, train)

    result = run()
    assert result.csv_rows[0] == TRAIN_CSV_HEADER
    assert result.bn_mode == "per_structure"
    n_batches = int(np.ceil(len(train) / config.batch_size))
    assert result.iterations == config.n_epochs * n_batches
    assert len(result.csv_rows) == 1 + result.iterations

    row = result.csv_rows[1].split(",")
    assert row[0] == "1" and row[1] == "0"
    assert row[2] == "rho0.30|rho0.70"
    assert all(r in ("16", "12") for r in row[3].split("|"))
    assert row[4] != "" and row[7] != ""  # loss_T and loss_S
    assert row[5] == "" and row[6] == ""  # no TA picks with two structures
    assert row[8] == f"{cosine_lr(config.lr, 1, config.n_epochs):.8f}"

    again = run()
    assert again.csv_text() == result.csv_text()


def test_train_joint_creates_bn_branches_per_structure():
    spec = train_spec()
    train, _ = small_data()
    store = SharedWeightStore.build(spec, seed=19)
    pool = make_pool(spec, (0.3, 0.7))
    train_joint(spec, pool, store, _joint_config(n_epochs=1), train)
    assert store.has_bn_branch("rho0.30")
    assert store.has_bn_branch("rho0.70")


def test_train_joint_rejects_stale_flops():
    spec = train_spec()
    train, _ = small_data()
    store = SharedWeightStore.build(spec, seed=20)
    pool = make_pool(spec, (0.3, 0.7))
    pool.entries[0].verified_flops = {"16": 12345}
    with pytest.raises(SpecError, match="flops"):
        train_joint(spec, pool, store, _joint_config(), train)


def test_train_joint_rejects_oversized_resolutions():
    spec = train_spec()
    train, _ = small_data(resolution=16)
    store = SharedWeightStore.build(spec, seed=21)
    pool = make_pool(spec, (0.3, 0.7))
    with pytest.raises(SpecError, match="resolution"):
        train_joint(spec, pool, store, _joint_config(resolutions=(32, 16)), train)


def test_train_joint_four_pick_rows_fill_all_columns():
    spec = train_spec()
    train, _ = small_data()
    store = SharedWeightStore.build(spec, seed=22)
    pool = make_pool(spec, (0.2, 0.4, 0.6, 0.8))
    result = train_joint(spec, pool, store, _joint_config(n_epochs=1), train)
    row = result.csv_rows[1].split(",")
    assert all(row[c] != "" for c in (4, 5, 6, 7))
    sids = row[2].split("|")
    assert sids[0] == "rho0.20" and sids[-1] == "rho0.80"
    rates = [float(s[3:]) for s in sids]
    assert rates == sorted(rates)
