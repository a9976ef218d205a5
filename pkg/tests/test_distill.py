import numpy as np
import pytest
import torch
from conftest import small_spec
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dicnet.data import ConfigError, DatasetError, get_split
from dicnet.distill import (
    ChannelStats,
    ChannelStatsAccumulator,
    TrainConfig,
    discrepancy,
    discrepancy_maps,
    distill_student,
    distillation_loss,
    estimate_channel_stats,
    evaluate_miou,
    train_teacher,
)
from dicnet.model import BackboneConfig, Branch, RoleError, build_branch, copy_as_student, params_digest

TINY = dict(family="tiny", feature_channels=16, width_mult=0.5)


@pytest.fixture(scope="module")
def data():
    spec = small_spec()
    return spec, get_split(spec, "train"), get_split(spec, "val")


@pytest.fixture(scope="module")
def teacher(data):
    spec, train, val = data
    t, _ = train_teacher(train, spec, BackboneConfig(**TINY, seed=1), TrainConfig(batch_size=8, epochs=2, seed=1), val)
    return t


def test_discrepancy_cases(rng):
    ft = rng.normal(size=(4, 4, 8))
    assert np.all(discrepancy(ft, ft) == 0)
    assert np.allclose(discrepancy(ft + 1, ft), 1, atol=1e-12)
    fs = rng.normal(size=(4, 4, 8))
    assert np.allclose(discrepancy(ft, fs) + fs, ft, atol=1e-12)
    with pytest.raises(ValueError):
        discrepancy(ft, fs[:, :, :4])


def test_loss_cases():
    assert distillation_loss(np.zeros((2, 3, 3, 4))) == 0.0
    assert distillation_loss(np.ones((5, 7))) == 1.0
    assert distillation_loss(np.array([1.0, -1.0, 2.0, 0.0]).reshape(1, 2, 2, 1)) == 1.5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_teacher_smoke(data):
    spec, train, _ = data
    t, log = train_teacher(train[:8], spec, BackboneConfig(**TINY), TrainConfig(batch_size=4, epochs=1))
    assert len(log.records) == 1 and np.isfinite(log.records[0].loss)
    assert t.epoch == 1


def test_teacher_rejects_anomaly_pixels(data):
    spec, train, _ = data
    bad = get_split(spec, "test")[:2]
    with pytest.raises(DatasetError):
        train_teacher(bad, spec, BackboneConfig(**TINY), TrainConfig(epochs=1))


def test_teacher_rerun_identical(data):
    spec, train, _ = data
    cfg = TrainConfig(batch_size=4, epochs=2, seed=3, hflip=True)
    a = train_teacher(train[:8], spec, BackboneConfig(**TINY), cfg)
    b = train_teacher(train[:8], spec, BackboneConfig(**TINY), cfg)
    assert a[1].losses == b[1].losses
    assert params_digest(a[0]) == params_digest(b[0])


def test_sgd_schedule_runs(data):
    spec, train, _ = data
    cfg = TrainConfig(batch_size=4, epochs=2, optimizer="sgd-momentum", learning_rate=1e-2,
                      weight_decay=1e-4, lr_schedule={"epoch": 2, "factor": 0.1})
    _, log = train_teacher(train[:8], spec, BackboneConfig(**TINY), cfg)
    assert all(np.isfinite(log.losses))


def test_distill_keeps_teacher_frozen(teacher, data):
    _, train, val = data
    before = params_digest(teacher)
    student, log = distill_student(teacher, train, BackboneConfig(**TINY, seed=2),
                                   TrainConfig(batch_size=8, epochs=2, seed=2, snapshot_epochs=[0, 2]), val)
    assert params_digest(teacher) == before
    assert [r.epoch for r in log.records] == [0, 1, 2]
    assert log.records[0].loss > 0
    assert [s.epoch for s in log.snapshots] == [0, 2]
    assert student.head is None


def test_distill_rerun_identical(teacher, data):
    _, train, _ = data
    cfg = TrainConfig(batch_size=8, epochs=2, seed=4)
    a = distill_student(teacher, train, BackboneConfig(**TINY, seed=2), cfg)
    b = distill_student(teacher, train, BackboneConfig(**TINY, seed=2), cfg)
    assert a[1].losses == b[1].losses


def test_distill_contract_errors(teacher, data):
    spec, train, _ = data
    with pytest.raises(ConfigError):
        distill_student(teacher, train, BackboneConfig(family="tiny", feature_channels=8), TrainConfig(epochs=1))
    student = build_branch(BackboneConfig(**TINY), "student")
    with pytest.raises(RoleError):
        distill_student(student, train, BackboneConfig(**TINY), TrainConfig(epochs=1))
    with pytest.raises(DatasetError):
        distill_student(teacher, get_split(spec, "test"), BackboneConfig(**TINY), TrainConfig(epochs=1),
                        anomaly_id=spec.anomaly_id)


def test_fixed_point_small(teacher, data):
    _, train, _ = data
    _, log = distill_student(teacher, train, teacher.config, TrainConfig(batch_size=8, epochs=3),
                             student=copy_as_student(teacher))
    assert log.losses == [0.0] * 4


def test_stats_of_identical_pair_are_zero(teacher, data):
    _, train, _ = data
    st_ = estimate_channel_stats(teacher, copy_as_student(teacher), train)
    assert np.all(st_.mu == 0) and np.all(st_.sigma == 0)
    assert st_.pixel_count == len(train) * 4 * 4


def test_constant_discrepancy_stats():
    d = np.broadcast_to(np.arange(5.0), (1, 4, 4, 5))
    st_ = ChannelStatsAccumulator().update(d).finalize()
    assert np.array_equal(st_.mu, np.arange(5.0))
    assert np.all(st_.sigma == 0)


def test_streaming_matches_bruteforce(teacher, data):
    _, train, _ = data
    student = Branch(BackboneConfig(**TINY, seed=9), "student").eval()
    st_ = estimate_channel_stats(teacher, student, train)
    flat = np.concatenate([d.reshape(-1, d.shape[-1]) for d in discrepancy_maps(teacher, student, train)])
    assert np.abs(st_.mu - flat.astype(np.float64).mean(0)).max() < 1e-6
    assert np.abs(st_.sigma - flat.astype(np.float64).std(0)).max() < 1e-6


def test_stats_order_independent(teacher, data):
    _, train, _ = data
    student = Branch(BackboneConfig(**TINY, seed=9), "student").eval()
    a = estimate_channel_stats(teacher, student, train)
    b = estimate_channel_stats(teacher, student, train[::-1])
    assert np.abs(a.mu - b.mu).max() < 1e-6 and np.abs(a.sigma - b.sigma).max() < 1e-6


def test_empty_split_rejected(teacher):
    with pytest.raises(DatasetError):
        estimate_channel_stats(teacher, copy_as_student(teacher), [])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-1e3, 1e3)),
       st.integers(0, 40))
def test_accumulator_merge(d, cut):
    cut = min(cut, len(d))
    whole = ChannelStatsAccumulator().update(d).finalize()
    merged = ChannelStatsAccumulator().update(d[:cut]).merge(ChannelStatsAccumulator().update(d[cut:])).finalize()
    assert np.allclose(merged.mu, d.mean(0), atol=1e-9)
    assert np.allclose(merged.sigma, d.std(0), atol=1e-6)
    assert np.allclose(whole.mu, merged.mu, atol=1e-9)


def test_channel_stats_json(tmp_path):
    st_ = ChannelStats(np.array([0.5, -1.0]), np.array([1.0, 2.0]), 10)
    st_.save(tmp_path / "s.json")
    back = ChannelStats.load(tmp_path / "s.json")
    assert np.array_equal(back.mu, st_.mu) and back.pixel_count == 10
    with pytest.raises(ValueError):
        ChannelStats(np.zeros(2), np.array([-1.0, 0.0]), 1)


def test_trained_teacher_beats_untrained(toy):
    val = toy.split("val")
    untrained = Branch(toy.cfg.teacher_model, "teacher", toy.cfg.dataset.num_known_classes).eval()
    trained = evaluate_miou(toy.teacher, val, 255)
    assert trained > evaluate_miou(untrained, val, 255)
    assert trained > 0.6


def test_toy_loss_drops(toy):
    losses = toy.student_log.losses
    assert losses[-1] < 0.1 * losses[0]


def test_loss_backprop_only_reaches_student(teacher, data):
    from dicnet.distill import _stack, discrepancy_t, distillation_loss_t

    _, train, _ = data
    student = Branch(BackboneConfig(**TINY, seed=5), "student")
    x, _ = _stack(train[:2])
    distillation_loss_t(discrepancy_t(teacher, student, x)).backward()
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None and torch.any(p.grad != 0) for p in student.parameters())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5, 6, 6), elements=st.floats(-100, 100)),
       arrays(np.float64, (2, 5, 6, 6), elements=st.floats(-100, 100)))
def test_discrepancy_has_zero_spatial_mean(ft, fs):
    # both sides are centred per image and channel, so their difference is too;
    # any mu estimated from such maps is zero up to round-off
    from dicnet.model import channel_normalize_t

    d = channel_normalize_t(torch.from_numpy(ft)) - channel_normalize_t(torch.from_numpy(fs))
    assert d.mean(dim=(2, 3)).abs().max().item() < 1e-6


def test_lr_step_schedule():
    from dicnet.distill import FULL_SCALE_BDD_STUDENT, _optimizer, _set_lr

    opt = _optimizer([torch.zeros(1, requires_grad=True)], FULL_SCALE_BDD_STUDENT)
    lrs = []
    for epoch in (1, 64, 65, 160):
        _set_lr(opt, FULL_SCALE_BDD_STUDENT, epoch)
        lrs.append(opt.param_groups[0]["lr"])
    assert lrs == pytest.approx([1e-4, 1e-4, 1e-5, 1e-5])
