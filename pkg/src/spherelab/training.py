"""Run configuration, the training loop, LR sweeps and a scikit-learn style wrapper."""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import data as datamod
from .hyperp import Scheme, TransferAnchor, multipliers
from .model import AttnConfig, ConfigError, ModelConfig, MoEConfig, TransformerNext
from .optim import Kind, OptimizerState, lr_schedule
from .scalefit import FitError, SweepPoint, fit_quadratic_loglr
from .stability import StabilityReport

REFERENCE_PARAM = "layers.0.attn.wq"


@dataclass
class DataConfig:
    kind: str = "copy"  # copy | cycle | bytes | ints
    path: str | None = None
    n_tokens: int = 65536
    alphabet: int = 8
    segment: int = 4
    period: int = 16

    def validate(self):
        if self.kind not in ("copy", "cycle", "bytes", "ints"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind in ("bytes", "ints"):
            if not self.path or not os.path.exists(self.path):
                raise ConfigError(f"data file {self.path!r} does not exist")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    anchor: TransferAnchor = field(default_factory=lambda: TransferAnchor(eta0=0.08, d0=2, T0=204800, B0=1024))
    lr: float | None = None  # base LR; None means anchor.eta0
    weight_decay: float = 0.0  # base decay, scaled per parameter by the scheme
    optimizers: dict = field(default_factory=dict)  # group name -> optimizer kind override
    tokens: int = 204800
    batch_tokens: int = 1024
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    log_every: int = 10
    record_wall_time: bool = False
    val_windows: int = 16

    @property
    def base_lr(self) -> float:
        return self.anchor.eta0 if self.lr is None else self.lr

    @property
    def batch_seqs(self) -> int:
        return self.batch_tokens // self.model.context

    @property
    def steps(self) -> int:
        return self.tokens // self.batch_tokens

    def validate(self, check_data: bool = True) -> None:
        self.model.validate()
        if check_data:
            self.data.validate()
        if self.batch_tokens % self.model.context:
            raise ConfigError("batch_tokens must be a multiple of the context length")
        if self.steps < 1:
            raise ConfigError("tokens must cover at least one batch")
        if self.base_lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        for group, kind in self.optimizers.items():
            Kind(kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            if "model" in d:
                m = dict(d["model"])
                if m.get("moe") is not None:
                    m["moe"] = MoEConfig(**m["moe"])
                if "attn" in m:
                    m["attn"] = AttnConfig(**m["attn"])
                d["model"] = ModelConfig(**m)
            if "anchor" in d:
                d["anchor"] = TransferAnchor(**d["anchor"])
            if "data" in d:
                d["data"] = DataConfig(**d["data"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return RunConfig.from_dict(raw or {})


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def token_stream(cfg: RunConfig) -> np.ndarray:
    dc, V = cfg.data, cfg.model.vocab
    if dc.kind == "copy":
        t = datamod.copy_stream(dc.n_tokens, cfg.seed, V, dc.alphabet, dc.segment)
    elif dc.kind == "cycle":
        t = datamod.cycle_stream(dc.n_tokens, cfg.seed, V, dc.period)
    else:
        t = datamod.load_tokens(dc.path, dc.kind)
    if t.size and (t.max() >= V or t.min() < 0):
        raise ConfigError(f"data holds token ids outside [0, {V})")
    return t


@dataclass
class TrainResult:
    status: str  # ok | diverged
    final_loss: float
    val_loss: float
    steps: int
    log_path: str
    records: list
    failed_step: int | None = None


class Trainer:
    """Owns parameters and optimizer state for one run."""

    def __init__(self, cfg: RunConfig):
        cfg.validate(check_data=False)
        self.cfg = cfg
        self.model = TransformerNext(cfg.model)
        self.params = self.model.init_params(cfg.seed)
        kinds = {s.name: Kind(cfg.optimizers[s.group.value]) for s in self.model.specs
                 if s.group.value in cfg.optimizers}
        for name, kind in kinds.items():
            spec = next(s for s in self.model.specs if s.name == name)
            if kind.on_sphere and not spec.is_matrix:
                raise ConfigError(f"{kind.value} needs a matrix parameter, {name} is a vector")
        self.opt = OptimizerState.create(self.model.specs, self.params, cfg.model.scheme, kinds)
        m = cfg.model
        self.lr_mult, self.wd_mult = {}, {}
        for s in self.model.specs:
            mult = multipliers(m.scheme, s.group, w=m.width, d=m.depth, d_in=s.fan_in, d_out=s.fan_out,
                               T=cfg.tokens, anchor=cfg.anchor, depth_mup=m.depth_mup)
            self.lr_mult[s.name] = mult.lr_mult
            self.wd_mult[s.name] = mult.weight_decay
        self.rng = np.random.default_rng(cfg.seed + 1)

    def step(self, tokens, lr_peak_scale: float):
        loss, lm, grads, acts = self.model.loss_and_grads(self.params, tokens)
        if not math.isfinite(loss):
            return loss, lm, acts
        for name, w in self.params.items():
            lr = lr_peak_scale * self.lr_mult[name]
            wd = self.cfg.weight_decay * self.wd_mult[name]
            self.params[name] = self.opt.step(name, w, grads[name], lr, wd)
        return loss, lm, acts

    def evaluate(self, stream) -> float:
        win = datamod.eval_windows(stream, self.cfg.model.context, self.cfg.val_windows)
        return self.model.loss(self.params, win)[0]


def train(cfg: RunConfig, log_path=None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps; write a JSON-lines log.

    Each record holds the step, tokens seen, the scheduled LR of the reference
    parameter, the batch loss, the stability report and the largest relative
    deviation of any sphere parameter from its radius.
    """
    cfg.validate()
    tr = Trainer(cfg)
    split = datamod.split_stream(token_stream(cfg))
    total = cfg.steps
    peak = cfg.base_lr
    out = Path(log_path) if log_path else Path(cfg.out_dir) / "log.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    records = []
    loss = math.nan
    with open(out, "w") as fh:
        for i in range(total):
            t0 = time.perf_counter()
            batch = datamod.sample_batch(split.train, cfg.batch_seqs, cfg.model.context, tr.rng)
            sched = lr_schedule(i, total, peak)
            loss, lm, acts = tr.step(batch, sched)
            if not math.isfinite(loss):
                rec = {"step": i, "tokens": (i + 1) * cfg.batch_tokens, "status": "diverged", "loss": str(loss)}
                fh.write(json.dumps(rec) + "\n")
                records.append(rec)
                return TrainResult("diverged", math.nan, math.nan, i, str(out), records, failed_step=i)
            if i % cfg.log_every == 0 or i == total - 1:
                rec = {
                    "step": i,
                    "tokens": (i + 1) * cfg.batch_tokens,
                    "lr": sched * tr.lr_mult.get(REFERENCE_PARAM, 1.0),
                    "loss": loss,
                    "lm_loss": lm,
                    "sphere_dev": tr.opt.sphere_deviation(tr.params),
                    "stability": StabilityReport.from_activations(i, acts).to_dict(),
                }
                if cfg.record_wall_time:
                    rec["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
                fh.write(json.dumps(rec) + "\n")
                records.append(rec)
    val = tr.evaluate(split.val)
    if not math.isfinite(val):
        return TrainResult("diverged", math.nan, math.nan, total, str(out), records, failed_step=total)
    return TrainResult("ok", float(loss), float(val), total, str(out), records)


def _sweep_one(args):
    cfg, lr, log = args
    try:
        res = train(replace(cfg, lr=lr), log_path=log)
        return lr, res.status, res.val_loss
    except FloatingPointError:
        return lr, "diverged", math.nan


def sweep(template: RunConfig, grid, out_dir=None, workers: int = 1) -> dict:
    """One run per learning rate; writes ``sweep.csv`` and ``fit.json``."""
    grid = [float(g) for g in grid]
    if len(grid) < 3:
        raise ConfigError("a sweep needs at least 3 learning rates")
    out = Path(out_dir or template.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(template, lr, str(out / f"lr_{lr:.6g}.jsonl")) for lr in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    lines = ["lr,loss,status"] + [f"{lr!r},{loss!r},{status}" for lr, status, loss in rows]
    _atomic_write(out / "sweep.csv", "\n".join(lines) + "\n")
    good = [SweepPoint(lr, loss) for lr, status, loss in rows if status == "ok"]
    failed = [lr for lr, status, _ in rows if status != "ok"]
    result = {"points": [{"lr": lr, "loss": loss, "status": st} for lr, st, loss in rows], "failed": failed}
    try:
        result["fit"] = fit_quadratic_loglr(good).to_dict()
    except FitError as exc:
        result["fit"] = None
        result["fit_error"] = str(exc)
    ok_rows = [(lr, loss) for lr, st, loss in rows if st == "ok"]
    result["argmin_lr"] = min(ok_rows, key=lambda r: r[1])[0] if ok_rows else None
    _atomic_write(out / "fit.json", json.dumps(result, indent=2, default=float) + "\n")
    return result


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class DeskLanguageModel(BaseEstimator):
    """Train a desk-scale model on a token stream with ``fit``; ``score`` is minus the mean loss."""

    def __init__(self, depth: int = 2, aspect_ratio: int = 16, scheme: str = "hyperp", vocab: int = 256,
                 context: int = 32, lr: float = 0.02, steps: int = 100, batch_seqs: int = 8,
                 weight_decay: float = 0.0, moe: dict | None = None, seed: int = 0, log_path: str | None = None):
        self.depth = depth
        self.aspect_ratio = aspect_ratio
        self.scheme = scheme
        self.vocab = vocab
        self.context = context
        self.lr = lr
        self.steps = steps
        self.batch_seqs = batch_seqs
        self.weight_decay = weight_decay
        self.moe = moe
        self.seed = seed
        self.log_path = log_path

    def _run_config(self) -> RunConfig:
        model = ModelConfig(depth=self.depth, aspect_ratio=self.aspect_ratio, vocab=self.vocab,
                            context=self.context, scheme=Scheme.parse(self.scheme).value,
                            moe=MoEConfig(**self.moe) if self.moe else None)
        bt = self.batch_seqs * self.context
        return RunConfig(model=model, lr=self.lr, weight_decay=self.weight_decay, tokens=self.steps * bt,
                         batch_tokens=bt, seed=self.seed,
                         anchor=TransferAnchor(eta0=self.lr, d0=self.depth, T0=self.steps * bt, B0=bt))

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.int64).ravel()
        if X.size < self.context + 2:
            raise ValueError("token stream is shorter than one training window")
        if X.min() < 0 or X.max() >= self.vocab:
            raise ValueError("token ids must lie in [0, vocab)")
        cfg = self._run_config()
        tr = Trainer(cfg)
        res = _fit_loop(tr, cfg, datamod.split_stream(X), self.log_path)
        self.trainer_ = tr
        self.history_ = res.records
        self.status_ = res.status
        return self

    def _windows(self, X):
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            return datamod.eval_windows(X, self.context, max_windows=10**6)
        return X

    def score(self, X, y=None) -> float:
        return -self.trainer_.model.loss(self.trainer_.params, self._windows(X))[0]

    def predict(self, X) -> np.ndarray:
        """Greedy next-token prediction after each position of each window."""
        win = self._windows(X)
        lg = self.trainer_.model.lm_graph(win.shape[0], win.shape[1] - 1)
        tokens = win[:, :-1]
        trace = ad.evaluate(lg.graph, {**self.trainer_.params, "tokens": tokens.ravel(),
                                       "targets": win[:, 1:].ravel()})
        logits = trace.value(lg.head_logits).reshape(tokens.shape + (self.vocab,))
        return np.argmax(logits, axis=-1)


def _fit_loop(tr: Trainer, cfg: RunConfig, split, log=None) -> TrainResult:
    records = []
    for i in range(cfg.steps):
        batch = datamod.sample_batch(split.train, cfg.batch_seqs, cfg.model.context, tr.rng)
        loss, _, _ = tr.step(batch, lr_schedule(i, cfg.steps, cfg.base_lr))
        records.append({"step": i, "loss": loss})
        if not math.isfinite(loss):
            break
    if log:
        _atomic_write(Path(log), "".join(json.dumps(r) + "\n" for r in records))
    status = "ok" if math.isfinite(loss) else "diverged"
    return TrainResult(status, float(loss), math.nan, len(records), str(log), records,
                       failed_step=None if status == "ok" else len(records) - 1)
