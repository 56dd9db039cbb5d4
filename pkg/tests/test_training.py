import json
import math

import numpy as np
import pytest

from spherelab import data as datamod
from spherelab.hyperp import TransferAnchor
from spherelab.model import AttnConfig, ConfigError, ModelConfig, MoEConfig, TransformerNext
from spherelab.optim import Kind, muonh_step
from spherelab.training import (
    DataConfig,
    DeskLanguageModel,
    RunConfig,
    Trainer,
    dump_config,
    load_config,
    read_log,
    sweep,
    train,
)


def tiny(tmp_path, **kw):
    base = dict(model=ModelConfig(depth=2, vocab=64, context=16), tokens=20 * 128, batch_tokens=128,
                anchor=TransferAnchor(eta0=0.02, d0=2, T0=20 * 128, B0=128), log_every=5,
                data=DataConfig(kind="copy", n_tokens=8192), out_dir=str(tmp_path / "run"))
    base.update(kw)
    return RunConfig(**base)


def test_config_round_trip(tmp_path):
    cfg = tiny(tmp_path, model=ModelConfig(depth=4, moe=MoEConfig(4, 4, aux_weight=0.01),
                                           attn=AttnConfig(rope=False), scheme="muppp"),
               optimizers={"unembedding": "adamw"}, weight_decay=0.1, seed=7)
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert dump_config(load_config(p)) == dump_config(cfg)


def test_config_errors(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("bogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        tiny(tmp_path, batch_tokens=100).validate()
    with pytest.raises(ConfigError):
        tiny(tmp_path, data=DataConfig(kind="bytes", path=str(tmp_path / "missing.bin"))).validate()
    with pytest.raises(ConfigError):
        Trainer(tiny(tmp_path, optimizers={"embedding_vector": "muonh"}))


def test_token_files(tmp_path):
    b = tmp_path / "t.bin"
    b.write_bytes(bytes(range(40)))
    assert np.array_equal(datamod.load_tokens(b), np.arange(40))
    i = tmp_path / "t.txt"
    i.write_text("1 2 3\n4 5\n")
    assert np.array_equal(datamod.load_tokens(i, "ints"), [1, 2, 3, 4, 5])
    s = datamod.split_stream(np.arange(1000))
    assert len(s.val) == 20 and s.val[0] == 980


def test_runs_are_bit_identical(tmp_path):
    a = train(tiny(tmp_path), log_path=tmp_path / "a.jsonl")
    b = train(tiny(tmp_path), log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a.val_loss == b.val_loss
    c = train(tiny(tmp_path, seed=1), log_path=tmp_path / "c.jsonl")
    assert c.final_loss != a.final_loss


def test_log_records(tmp_path):
    res = train(tiny(tmp_path), log_path=tmp_path / "log.jsonl")
    recs = read_log(tmp_path / "log.jsonl")
    steps = [r["step"] for r in recs]
    assert steps == sorted(set(steps)) and steps[0] == 0 and steps[-1] == 19
    for r in recs:
        assert {"tokens", "lr", "loss", "sphere_dev", "stability"} <= set(r)
        assert "wall_ms" not in r
    assert recs[0]["lr"] == pytest.approx(0.02)
    assert res.status == "ok" and math.isfinite(res.val_loss)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    cfg = RunConfig(log_every=1, out_dir=str(d))  # copy task, depth 2, MuonH/HyperP, 200 steps
    assert cfg.steps == 200 and cfg.model.scheme == "hyperp"
    return train(cfg)


@pytest.mark.slow
def test_smoke_loss_decreases(smoke):
    losses = np.array([r["loss"] for r in smoke.records])
    windows = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)
    assert losses[-1] < losses[0] - 1.0


@pytest.mark.slow
def test_smoke_sphere_preserved(smoke):
    assert max(r["sphere_dev"] for r in smoke.records) < 1e-10


@pytest.mark.slow
def test_cycle_task_overfits():
    X = datamod.cycle_stream(8192, seed=0, vocab=64, period=16)
    m = DeskLanguageModel(vocab=64, context=32, lr=0.05, steps=200, batch_seqs=8).fit(X)
    assert -m.score(X[:2048]) < 0.1
    pred = m.predict(X[:33])
    assert np.array_equal(pred[0], X[1:33])


def test_nan_loss_aborts(tmp_path, monkeypatch):
    orig = TransformerNext.loss_and_grads
    calls = {"n": 0}

    def poisoned(self, params, tokens):
        calls["n"] += 1
        out = orig(self, params, tokens)
        return (math.nan,) + out[1:] if calls["n"] == 4 else out

    monkeypatch.setattr(TransformerNext, "loss_and_grads", poisoned)
    res = train(tiny(tmp_path))
    assert res.status == "diverged" and res.failed_step == 3
    assert read_log(res.log_path)[-1]["status"] == "diverged"


def test_sweep_structure(tmp_path):
    grid = [0.005, 0.01, 0.02, 0.04, 0.08]
    res = sweep(tiny(tmp_path), grid, tmp_path / "sw")
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lr,loss,status" and len(lines) == 6
    fit = json.loads((tmp_path / "sw" / "fit.json").read_text())
    assert fit["argmin_lr"] in grid and len(fit["points"]) == 5
    assert res["failed"] == []
    with pytest.raises(ConfigError):
        sweep(tiny(tmp_path), [0.01, 0.02])


def test_weight_decay_under_sphere_is_inert(tmp_path):
    """Decayed and undecayed MuonH trainings land within the seed-noise band."""

    def run(lam, seed):
        cfg = tiny(tmp_path, tokens=50 * 128, anchor=TransferAnchor(eta0=0.02, d0=2, T0=50 * 128, B0=128),
                   seed=seed)
        tr = Trainer(cfg)
        for name, st in tr.opt.params.items():
            if st.kind is Kind.MUONH:
                def step(w, g, lr, wd, st=st):
                    return muonh_step(w - lr * lam * w, g, lr, st)
                tr.opt.params[name] = st
                tr.opt.step = _dispatch(tr.opt, step)
        split = datamod.split_stream(datamod.copy_stream(8192, seed=seed, vocab=64))
        from spherelab.optim import lr_schedule

        for i in range(cfg.steps):
            loss, _, _ = tr.step(datamod.sample_batch(split.train, cfg.batch_seqs, 16, tr.rng),
                                 lr_schedule(i, cfg.steps, cfg.base_lr))
        return tr.evaluate(split.val)

    base = [run(0.0, s) for s in range(3)]
    band = max(base) - min(base)
    decayed = run(0.1, 0)
    assert abs(decayed - base[0]) <= 3 * band


def _dispatch(opt, sphere_step):
    orig = type(opt).step

    def step(name, w, grad, lr, wd):
        if opt.params[name].kind is Kind.MUONH:
            return sphere_step(w, grad, lr, wd, opt.params[name])
        return orig(opt, name, w, grad, lr, wd)
    return step
