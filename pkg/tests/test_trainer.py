import numpy as np
import pytest

from unreal import checkpoint
from unreal.config import parse_config
from unreal.metrics import read_metrics
from unreal.net import init_params
from unreal.replay import ReplayBuffer
from unreal.trainer import ResumeMismatch, Trainer, TrainingError, compute_gradients, sample_action, train

from cases import TINY, random_batch, random_sequence


def config(**kw):
    raw = {"total_steps": 300, "level": {"category": "fruit-static"}, "eval_interval": 100, "eval_episodes": 1,
           "replay": {"capacity": 200, "warmup": 50}}
    for key, value in kw.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return parse_config(raw)


def test_sample_action_distribution():
    rng = np.random.default_rng(0)
    logits = np.log(np.array([0.1, 0.6, 0.3]))
    counts = np.bincount([sample_action(logits, rng) for _ in range(20_000)], minlength=3) / 20_000
    np.testing.assert_allclose(counts, [0.1, 0.6, 0.3], atol=0.015)


def test_row_schedule(tmp_path):
    result = train(config(total_steps=250), out_dir=tmp_path)
    steps = [r["global_step"] for r in read_metrics(tmp_path / "metrics.csv")]
    assert steps == [0, 100, 200]
    assert len(steps) == 250 // 100 + 1
    assert result.global_step == 250
    assert (tmp_path / "checkpoints" / "final.bin").exists()
    assert len((tmp_path / "timing.csv").read_text().splitlines()) == 3


def test_deterministic_metrics(tmp_path):
    cfg = config(total_steps=400)
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_cold_buffer_means_a3c_only(tmp_path):
    rows = train(config(total_steps=200, replay={"warmup": 10_000}), out_dir=tmp_path).rows
    assert all(r["loss_vr"] is None and r["loss_pc"] is None and r["loss_rp"] is None for r in rows)
    assert rows[-1]["loss_a3c"] is not None


def test_warm_buffer_uses_aux_losses(tmp_path):
    rows = train(config(total_steps=300, replay={"warmup": 40}), out_dir=tmp_path).rows
    last = rows[-1]
    assert last["loss_vr"] is not None and last["loss_pc"] is not None and last["loss_rp"] is not None


def test_aux_flags_off_equals_a3c():
    off = config(total_steps=200, aux={"use_rp": False, "use_vr": False, "use_pc": False}, replay={"warmup": 0})
    a3c = config(total_steps=200, aux={"use_rp": False, "use_vr": False, "use_pc": False}, replay={"warmup": 10**6})
    a = Trainer(off).train().store.params
    b = Trainer(a3c).train().store.params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_step_accounting_multiworker(tmp_path):
    result = train(config(total_steps=300, num_workers=3), out_dir=tmp_path)
    assert result.global_step == 300
    steps = [r["global_step"] for r in result.rows]
    assert steps == sorted(steps) == [0, 100, 200, 300]
    assert len(result.rows[-1]["worker_returns"].split(";")) == 3


def test_evaluation_isolated():
    trainer = Trainer(config())
    before = {k: v.copy() for k, v in trainer.store.params.items()}
    r1 = trainer.evaluate(episodes=2)
    r2 = trainer.evaluate(episodes=2)
    assert r1 == r2
    assert r1[1] is not None  # fruit-static reports the planner's optimum
    assert all(before[k].tobytes() == trainer.store.params[k].tobytes() for k in before)


def test_resume_continues_after_checkpoint(tmp_path):
    train(config(total_steps=200), out_dir=tmp_path)
    ckpt = tmp_path / "checkpoints" / "final.bin"
    _, meta = checkpoint.load(ckpt)
    assert meta["global_step"] == 200
    resumed = Trainer(config(total_steps=400), out_dir=tmp_path, resume=ckpt)
    assert resumed.store.updates > 0
    result = resumed.train()
    new_steps = [r["global_step"] for r in result.rows]
    assert new_steps[0] > 200 and new_steps[-1] == 400
    all_steps = [r["global_step"] for r in read_metrics(tmp_path / "metrics.csv")]
    assert all_steps == [0, 100, 200, 300, 400]


def test_resume_preset_mismatch(tmp_path):
    train(config(total_steps=50), out_dir=tmp_path)
    with pytest.raises(ResumeMismatch):
        Trainer(config(preset="tiny", level={"render_size": 20, "view_radius": 2, "n_actions": 3}),
                resume=tmp_path / "checkpoints" / "final.bin")


def test_periodic_checkpoints(tmp_path):
    train(config(total_steps=200, checkpoint_interval=100), out_dir=tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["ckpt_000000100.bin", "ckpt_000000200.bin", "final.bin"]


def test_stop_at_normalized(tmp_path):
    # a threshold below any achievable score stops at the first row with a score
    result = train(config(total_steps=1000, stop_at_normalized=-100.0), out_dir=tmp_path)
    assert result.global_step < 1000


def test_stop_at_return(tmp_path):
    result = train(config(total_steps=1000, stop_at_return=-100.0), out_dir=tmp_path)
    # the first row with a training return (an episode has finished) triggers the stop
    assert result.rows[-1]["train_return"] is not None
    assert result.global_step == result.rows[-1]["global_step"] < 1000


def test_worker_failure_surfaces(monkeypatch):
    trainer = Trainer(config(total_steps=100))

    def boom(*args, **kwargs):
        raise FloatingPointError("diverged")

    monkeypatch.setattr("unreal.trainer.compute_gradients", boom)
    with pytest.raises(TrainingError, match="worker 0"):
        trainer.train()


def test_compute_gradients_covers_params():
    cfg = config(replay={"warmup": 0})
    rng = np.random.default_rng(0)
    params = init_params(TINY, seed=0)
    buf = ReplayBuffer(100)
    batch = random_batch(rng)
    for i, s in enumerate(random_sequence(rng, 60)):
        s.reward = float(i % 5 == 0)
        buf.append(s)
    cfg.loss.unroll = 5
    grads, values = compute_gradients(params, TINY, batch, buf, rng, cfg)
    assert set(values) == {"a3c", "vr", "pc", "rp", "total"}
    assert set(grads) == set(params)
