import threading

import numpy as np
import pytest

from unreal.optim import OptimConfig, OptimError, SharedParamStore, clip_by_global_norm


def store(params, **kw):
    return SharedParamStore({k: np.array(v, dtype=float) for k, v in params.items()}, OptimConfig(**kw))


def test_single_step_example():
    s = store({"p": [1.0]}, learning_rate=0.1, decay=0.9, epsilon=0.0, clip_norm=0.0)
    s.apply_gradients({"p": np.array([3.0])})
    assert s.accum["p"][0] == pytest.approx(0.9, abs=1e-12)
    assert s.params["p"][0] == pytest.approx(1 - 0.1 * 3 / np.sqrt(0.9), abs=1e-12)
    assert s.params["p"][0] == pytest.approx(0.68377, abs=1e-5)


def test_zero_gradient_decays_accumulator():
    s = store({"p": [1.0, -2.0]}, decay=0.9)
    s.accum["p"][:] = [4.0, 1.0]
    s.apply_gradients({"p": np.zeros(2)})
    np.testing.assert_array_equal(s.params["p"], [1.0, -2.0])
    np.testing.assert_allclose(s.accum["p"], [3.6, 0.9], rtol=0, atol=1e-15)


def test_global_norm_clip_halves():
    grads = {"a": np.full(4, 20.0), "b": np.full(12, 20.0)}  # norm 80
    clipped, norm = clip_by_global_norm(grads, 40.0)
    assert norm == pytest.approx(80.0)
    for k in grads:
        np.testing.assert_allclose(clipped[k], grads[k] / 2)
    same, _ = clip_by_global_norm({"a": np.ones(2)}, 40.0)
    np.testing.assert_array_equal(same["a"], np.ones(2))


def test_update_matches_formula(rng):
    p0 = rng.standard_normal((3, 4))
    s = store({"w": p0}, learning_rate=0.01, decay=0.95, epsilon=0.1, clip_norm=5.0)
    g_acc = np.zeros_like(p0)
    p = p0.copy()
    for _ in range(5):
        g = rng.standard_normal((3, 4)) * 3
        s.apply_gradients({"w": g})
        norm = np.linalg.norm(g)
        if norm > 5.0:
            g = g * (5.0 / norm)
        g_acc = 0.95 * g_acc + 0.05 * g * g
        p = p - 0.01 * g / np.sqrt(g_acc + 0.1)
    np.testing.assert_allclose(s.params["w"], p, rtol=0, atol=1e-12)
    assert (s.accum["w"] >= 0).all()


def test_non_finite_gradient_skipped():
    s = store({"p": [1.0]})
    assert not s.apply_gradients({"p": np.array([np.nan])})
    assert s.skipped == 1 and s.updates == 0
    assert s.params["p"][0] == 1.0


def test_shape_errors():
    s = store({"p": [1.0, 2.0]})
    with pytest.raises(OptimError):
        s.apply_gradients({"p": np.zeros(3)})
    with pytest.raises(OptimError):
        s.apply_gradients({})


def test_config_validation():
    with pytest.raises(OptimError):
        OptimConfig(decay=1.0)
    with pytest.raises(OptimError):
        OptimConfig(learning_rate=0.0)


def test_snapshot_is_a_copy():
    s = store({"p": [1.0, 2.0]})
    snap = s.snapshot()
    s.params["p"][0] = 9.0
    assert snap["p"].data[0] == 1.0
    a, b = s.snapshot(), s.snapshot()
    assert a["p"].data.tobytes() == b["p"].data.tobytes()
    assert a["p"].requires_grad


def test_concurrent_updates_and_snapshots():
    # uniform gradients keep every tensor constant-valued; a torn read would mix values
    s = store({"a": np.zeros(5000), "b": np.zeros(3000)}, learning_rate=0.01, clip_norm=0.0)
    torn = []
    stop = threading.Event()

    def writer(sign):
        for _ in range(200):
            s.apply_gradients({"a": np.full(5000, sign), "b": np.full(3000, -sign)})

    def reader():
        while not stop.is_set():
            snap = s.snapshot()
            for k, t in snap.items():
                if np.ptp(t.data) != 0.0:
                    torn.append(k)

    readers = [threading.Thread(target=reader) for _ in range(2)]
    writers = [threading.Thread(target=writer, args=(sign,)) for sign in (1.0, 2.0, -1.0)]
    for t in readers + writers:
        t.start()
    for t in writers:
        t.join()
    stop.set()
    for t in readers:
        t.join()
    assert torn == []
    assert s.updates == 600
    assert (s.accum["a"] >= 0).all()


def test_snapshot_consistent_across_tensors():
    # identical gradients keep a and b identical; a snapshot between their updates would not be
    s = store({"a": np.zeros(20000), "b": np.zeros(20000)}, learning_rate=0.01, clip_norm=0.0)
    mismatched = []
    stop = threading.Event()

    def writer(sign):
        for _ in range(200):
            g = np.full(20000, sign)
            s.apply_gradients({"a": g, "b": g})

    def reader():
        while not stop.is_set():
            snap = s.snapshot()
            if snap["a"].data[0] != snap["b"].data[0]:
                mismatched.append(1)

    threads = [threading.Thread(target=reader) for _ in range(2)]
    writers = [threading.Thread(target=writer, args=(sign,)) for sign in (1.0, -0.5)]
    for t in threads + writers:
        t.start()
    for t in writers:
        t.join()
    stop.set()
    for t in threads:
        t.join()
    assert not mismatched
    assert s.updates == 400


def test_state_dict_round_trip(rng):
    s = store({"w": rng.standard_normal(3)})
    s.apply_gradients({"w": rng.standard_normal(3)})
    t = store({"w": np.zeros(3)})
    t.load_state_dict(s.state_dict())
    np.testing.assert_array_equal(t.params["w"], s.params["w"])
    np.testing.assert_array_equal(t.accum["w"], s.accum["w"])
    assert t.updates == 1
