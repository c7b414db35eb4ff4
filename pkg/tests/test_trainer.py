"""Training schedule tests: config, step wiring, resume, smoke descent."""

import os

import numpy as np
import pytest

from ambiflow import data, ndcore as nd, trainer
from ambiflow.errors import ConfigError
from ambiflow.losses import LossWeights


@pytest.fixture(scope="module")
def arrays():
    cfg = data.GenConfig(n_samples=24, occlusion_rate=0.3, seed=40)
    return data.prepare_arrays(data.generate_dataset(cfg))


def _tc(**kw):
    base = dict(epochs=1, batch_size=12, lr=3e-4, n_hyp=4, seed=13,
                weights=LossWeights(k=2))
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        _tc(epochs=0)
    with pytest.raises(ConfigError):
        _tc(batch_size=1)
    with pytest.raises(ConfigError):
        _tc(lr=0.0)
    with pytest.raises(ConfigError):
        _tc(n_hyp=1)
    with pytest.raises(ConfigError):
        _tc(n_hyp=3, weights=LossWeights(k=5))


def test_lr_schedule():
    tc = _tc(lr=1e-4, lr_halve_after=10)
    assert tc.lr_at(0) == 1e-4
    assert tc.lr_at(9) == 1e-4
    assert tc.lr_at(10) == 5e-5
    assert tc.lr_at(14) == 5e-5


def test_first_step_l_det_equals_l2d(arrays):
    """Zero-initialized couplings make the flow a permutation, for which the
    detector cycle error and the 2D reconstruction error coincide exactly."""
    tc = _tc()
    model, disc = trainer.build_models(J=arrays["J"])
    of = nd.Adam(model.parameters(), lr=tc.lr)
    od = nd.Adam(disc.parameters(), lr=tc.lr)
    batch = {k: arrays[k][:12] for k in ("x", "y", "cond", "cov_fit")}
    r = trainer.train_step(model, disc, of, od, batch, tc, 0, 0)
    assert r.l_det == pytest.approx(r.l2d, rel=1e-12)
    for f in ("l2d", "l_gen", "l_mmd", "l_det", "l_mb", "l_hm", "total",
              "disc_loss", "gp", "z_rms"):
        assert np.isfinite(getattr(r, f))


def test_step_is_deterministic(arrays):
    tc = _tc()
    batch = {k: arrays[k][:12] for k in ("x", "y", "cond", "cov_fit")}
    outs = []
    for _ in range(2):
        model, disc = trainer.build_models(J=arrays["J"])
        of = nd.Adam(model.parameters(), lr=tc.lr)
        od = nd.Adam(disc.parameters(), lr=tc.lr)
        r = trainer.train_step(model, disc, of, od, batch, tc, 0, 0)
        outs.append((r.total, model.parameters()[0].data.copy()))
    assert outs[0][0] == outs[1][0]
    assert np.array_equal(outs[0][1], outs[1][1])


def test_train_runs_and_logs(arrays, tmp_path):
    tc = _tc(epochs=2, checkpoint_every=1)
    lines = []
    model, disc, history = trainer.train(arrays, tc, out_dir=str(tmp_path),
                                         log=lines.append)
    assert len(history) == 2 * 2    # 24 samples / batch 12 / 2 epochs
    assert len(lines) == 2
    assert os.path.exists(os.path.join(tmp_path, "checkpoint_ep0002.afck"))
    csv_path = os.path.join(tmp_path, "history.csv")
    trainer.write_history_csv(csv_path, history)
    rows = open(csv_path).read().splitlines()
    assert rows[0].split(",") == list(trainer.HISTORY_FIELDS)
    assert len(rows) == 5


def test_resume_is_bit_exact(arrays, tmp_path):
    tc = _tc(epochs=2, checkpoint_every=1)
    m1, d1, h1 = trainer.train(arrays, tc, out_dir=str(tmp_path))
    ck = os.path.join(tmp_path, "checkpoint_ep0001.afck")
    m2, d2, h2 = trainer.train(arrays, tc, resume=ck)
    assert all(np.array_equal(a.data, b.data)
               for a, b in zip(m1.parameters(), m2.parameters()))
    assert all(np.array_equal(a.data, b.data)
               for a, b in zip(d1.parameters(), d2.parameters()))
    assert [r.total for r in h1[2:]] == [r.total for r in h2]


def test_resume_rejects_other_seed(arrays, tmp_path):
    tc = _tc(epochs=1, checkpoint_every=1)
    trainer.train(arrays, tc, out_dir=str(tmp_path))
    ck = os.path.join(tmp_path, "checkpoint_ep0001.afck")
    with pytest.raises(ConfigError):
        trainer.train(arrays, _tc(seed=99), resume=ck)


def test_history_csv_deterministic(arrays, tmp_path):
    tc = _tc()
    _, _, history = trainer.train(arrays, tc)
    p1 = os.path.join(tmp_path, "a.csv")
    p2 = os.path.join(tmp_path, "b.csv")
    trainer.write_history_csv(p1, history)
    trainer.write_history_csv(p2, history)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_overfit_smoke_descends():
    cfg = data.GenConfig(n_samples=8, occlusion_rate=0.3, seed=3)
    arrays8 = data.prepare_arrays(data.generate_dataset(cfg))
    out = trainer.overfit_smoke(arrays8, steps=120, lr=1e-3, n_hyp=4, k=2)
    assert out["total_final"] < 0.45 * out["total_first"]
    assert np.isfinite(out["z0_mpjpe_mm"])
