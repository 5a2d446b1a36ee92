import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastconv.blocks import BlockKind, make_block
from fastconv.data import SyntheticSpec, make_split
from fastconv.network import build_network, tiny_config
from fastconv.training import (
    Dataset,
    LrSchedule,
    SgdState,
    evaluate,
    gradcheck,
    lr_at,
    sgd_step,
    softmax_xent,
    train,
    write_record,
)

S = LrSchedule()


def test_lr_examples():
    assert abs(lr_at(S, 0.0) - 2e-3) <= 1e-12
    assert abs(lr_at(S, math.nextafter(5.0, 0.0)) - 4e-5) <= 1e-12
    assert abs(lr_at(S, 5.0) - 1e-3) <= 1e-12
    assert abs(lr_at(S, 10.0) - 5e-4) <= 1e-12
    assert abs(lr_at(S, 2.5) - 1.02e-3) <= 1e-9


@pytest.mark.parametrize("cycle", range(6))
def test_restart_peaks(cycle):
    assert lr_at(S, 5.0 * cycle) == pytest.approx(2e-3 / 2**cycle, abs=1e-15)


def test_peak_clamped_at_floor():
    assert lr_at(S, 5.0 * 9) == pytest.approx(4e-5, abs=1e-15)


@given(st.floats(0, 60, allow_nan=False))
def test_lr_bounds(epoch):
    lr = lr_at(S, epoch)
    cycle = int(epoch // 5)
    assert S.lr_min - 1e-18 <= lr <= S.cycle_max(cycle) + 1e-18


@given(st.integers(0, 8), st.floats(0.0, 0.999))
def test_lr_continuous_within_cycle(cycle, frac):
    e = 5.0 * cycle + 5.0 * frac
    h = 1e-7
    assert abs(lr_at(S, e + h) - lr_at(S, e)) < 1e-9


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(S, -0.1)


def test_sgd_examples():
    w = {"a": np.array([1.0, -2.0])}
    state = SgdState()
    sgd_step(w, {"a": np.zeros(2)}, state, 0.1)
    assert w["a"].tolist() == [1.0, -2.0]

    w = {"a": np.array([1.0, -2.0])}
    state = SgdState()
    g = np.array([0.5, 0.25])
    sgd_step(w, {"a": g}, state, 0.1)
    assert np.allclose(w["a"], [1.0 - 0.05, -2.0 - 0.025], rtol=0, atol=1e-15)

    w = {"a": np.zeros(2)}
    state = SgdState()
    for _ in range(2):
        sgd_step(w, {"a": g}, state, 0.1)
    assert np.allclose(w["a"], -0.1 * g * 2.9, rtol=0, atol=1e-15)
    assert np.allclose(state.velocity["a"], 1.9 * g)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, SgdState(), 0.1)


@pytest.mark.parametrize("c", [2, 4, 101])
def test_softmax_uniform(c):
    loss, grad = softmax_xent(np.zeros(c), 1)
    assert loss == pytest.approx(math.log(c), rel=1e-12)
    assert abs(grad.sum()) <= 1e-7


def test_softmax_monotone_in_true_logit():
    losses = [softmax_xent(np.array([z, 0.0, 0.0]), 0)[0] for z in (0, 1, 5, 20, 100)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-30


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.data())
def test_softmax_grads_sum_to_zero(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, grad = softmax_xent(np.array([logits, logits[::-1]]), np.array([label, 0]))
    assert loss >= 0
    assert np.all(np.abs(grad.sum(axis=1)) <= 1e-7)


def test_softmax_label_range():
    with pytest.raises(ValueError):
        softmax_xent(np.zeros(3), 3)


def small_data(seed=0, per_class=4):
    return make_split(SyntheticSpec(frames=4, height=16, width=16), per_class, 2, seed)


def small_net(seed=0):
    return build_network(tiny_config("fast", input_shape=(1, 3, 4, 16, 16)), seed)


def test_lr_zero_leaves_weights_and_loss():
    data = small_data()
    net = small_net()
    before = {k: v.copy() for k, v in net.params().items()}
    initial, _ = evaluate(net, data.train_x, data.train_y)
    rec = train(net, data, 1, LrSchedule(0.0, 0.0), seed=1)
    assert all(np.array_equal(before[k], v) for k, v in net.params().items())
    assert rec.epochs[0].train_loss == pytest.approx(initial, rel=1e-6)


def test_train_deterministic_and_worker_independent(tmp_path):
    data = small_data()
    records = []
    for workers in (1, 4, 4):
        records.append(train(small_net(), data, 2, LrSchedule(2e-2), seed=3, workers=workers))
    assert records[0].to_csv() == records[1].to_csv() == records[2].to_csv()
    assert records[0].to_json() == records[1].to_json()
    write_record(records[0], tmp_path)
    assert (tmp_path / "train.csv").read_text() == records[0].to_csv()
    rows = json.loads((tmp_path / "train.json").read_text())["epochs"]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert "seconds" in (tmp_path / "timing.csv").read_text().splitlines()[0]


def test_recorded_lr_matches_schedule():
    sched = LrSchedule(2e-2)
    rec = train(small_net(), small_data(), 3, sched, seed=0)
    assert [e.lr for e in rec.epochs] == [lr_at(sched, e) for e in range(3)]
    assert [e.epoch for e in rec.epochs] == [0, 1, 2]


def test_empty_split_rejected():
    x = np.zeros((0, 3, 4, 16, 16), np.float32)
    with pytest.raises(ValueError):
        Dataset(x, np.zeros(0, int), x, np.zeros(0, int))


def test_gradcheck_sentinel_and_zero_input_bias():
    block = make_block(BlockKind.FAST, 2, 2, seed=1)
    x = np.random.default_rng(1).standard_normal((1, 2, 5, 7, 7))
    assert gradcheck(block, x, 1e-3).passed
    bad = gradcheck(block, x, 1e-3, corrupt=1.01)
    assert not bad.passed and bad.max_rel_err > 1e-3

    conv = make_block(BlockKind.CONV3D, 2, 2, seed=1)
    conv.convs["conv"].weights.bias[...] = [0.3, -0.7]
    rep = gradcheck(conv, np.zeros((1, 2, 3, 4, 4)), 1e-3, max_entries=None)
    bias = next(t for t in rep.tensors if t.name == "conv.b")
    assert bias.passed and bias.max_rel_err <= 1e-9
    assert json.dumps(rep.to_dict())
