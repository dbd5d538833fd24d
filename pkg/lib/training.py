"""Optimization loop.

Batch streams and JOIST masking seeds are pure functions of ``(seed, step)``,
so a run resumed from ``last.ckpt`` reproduces the records an uninterrupted
run would have written.

``metrics.jsonl`` holds one JSON object per line:

* ``{"kind": "header"}`` - start timestamp and config echo (one per invocation).
* ``{"kind": "step"}`` - component losses, smoothed loss, gradient norm, lr.
* ``{"kind": "eval"}`` - WER per test set and ILM perplexity on held-out text.
* ``{"kind": "summary"}`` - wall-clock totals and the profiler table.

Step and eval records carry no timestamps.
"""

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import uprofiler
from decoding import FusionConfig, decode_utterances, score_sets
from losses import (
    Mode,
    ObjectiveSpec,
    ObjectiveValue,
    TextSource,
    composite_objective,
    ilm_loss,
    ilm_perplexity,
)
from models import ModelParams
from numerics import NonFiniteError, scale
from optim import Adam
from ringbuffer import RingBuffer
from uprofiler import profile

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1

time_s = time.perf_counter
wall_clock = time.time


class TrainConfigError(ValueError):
    """Inconsistent training configuration."""


class TrainingHalted(RuntimeError):
    def __init__(self, message, diagnostics):
        """Training cannot continue.

        Parameters
        ----------
        message: str
        diagnostics: dict
            ``step``, ``parameters`` (offending names) and ``components`` (loss values).
        """
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Losses are divided by the paired batch size (text batch size for ILMA)
    before the update; ``learning_rate`` is tuned for that scaling.
    """

    objective: ObjectiveSpec
    paired_batch_size: int = 16
    unpaired_batch_size: int = 128
    joist_batch_size: int = 16
    steps: int = 1000
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 5.0
    warmup_steps: int = 0
    alternate_updates: bool = False
    eval_every: int = 200
    eval_utterances: int = 40
    eval_beam: int = 1
    log_every: int = 10
    smoothing_window: int = 20
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.objective, dict):
            object.__setattr__(self, "objective", ObjectiveSpec(**self.objective))
        self.objective.validate()
        if min(self.paired_batch_size, self.unpaired_batch_size, self.joist_batch_size) < 1:
            raise TrainConfigError("batch sizes must be >= 1")
        if self.steps < 0 or self.warmup_steps < 0:
            raise TrainConfigError("steps and warmup_steps must be >= 0")
        if self.objective.uses_text and self.unpaired_batch_size < self.paired_batch_size:
            raise TrainConfigError(
                f"unpaired_batch_size={self.unpaired_batch_size} must be >= paired_batch_size={self.paired_batch_size}"
            )
        if self.joist_batch_size > self.unpaired_batch_size:
            raise TrainConfigError("joist_batch_size cannot exceed unpaired_batch_size")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise TrainConfigError("learning_rate must be >= 0 and grad_clip > 0")
        if min(self.eval_every, self.eval_utterances, self.eval_beam, self.log_every, self.smoothing_window) < 1:
            raise TrainConfigError("eval/log cadence, eval sizes and smoothing window must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["objective"]["mode"] = self.objective.mode.value
        d["objective"]["ilm_text_source"] = self.objective.ilm_text_source.value
        d["objective"]["upsample"]["repeat_policy"] = self.objective.upsample.repeat_policy.value
        return d


###########
# Batches #
###########
class BatchStream:
    def __init__(self, items, batch_size, seed, name):
        """Cycle ``items`` in per-epoch shuffled order.

        ``batch(step)`` depends only on ``(seed, name, step)``.
        """
        if not len(items):
            raise TrainConfigError(f"{name} stream is empty")
        self.items = items
        self.batch_size = batch_size
        self.seed = seed
        self.stream_id = zlib.crc32(name.encode())
        self._perms = {}

    def _permutation(self, epoch):
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.stream_id, epoch]).permutation(len(self.items))
            self._perms = {epoch: perm}
        return perm

    def batch(self, step):
        n = len(self.items)
        out = []
        for g in range(step * self.batch_size, (step + 1) * self.batch_size):
            epoch, i = divmod(g, n)
            out.append(self.items[self._permutation(epoch)[i]])
        return out


def _needs_paired(mode):
    return mode is not Mode.ILMA


def mix_batches(paired, unpaired, cfg, start_step=0):
    """Yield ``(step, paired_batch, text_batch)`` from ``start_step`` to ``cfg.steps``.

    Modes without unpaired text get ``text_batch=None`` and never touch
    ``unpaired``; ILMA gets ``paired_batch=None``.

    Raises
    ------
    TrainConfigError
        A stream the mode needs is empty or missing.
    """
    mode = cfg.objective.mode
    paired_stream = BatchStream(paired or [], cfg.paired_batch_size, cfg.seed, "paired") if _needs_paired(mode) else None
    text_stream = None
    if cfg.objective.uses_text:
        text_stream = BatchStream(unpaired or [], cfg.unpaired_batch_size, cfg.seed, "unpaired")

    for step in range(start_step, cfg.steps):
        yield (
            step,
            paired_stream.batch(step) if paired_stream else None,
            text_stream.batch(step) if text_stream else None,
        )


############
# Stepping #
############
def learning_rate_at(cfg, step):
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def trainable_parameters(params, mode):
    if mode is Mode.ILMA:
        return params.ilm_parameters()
    return [p for p in params if p.trainable]


def upsample_seed(cfg, step):
    return int(np.random.default_rng([cfg.seed, zlib.crc32(b"mask"), step]).integers(2**31))


@profile(name="objective")
def _objective(params, paired_batch, text_batch, cfg, frozen, step):
    spec = cfg.objective
    alternate = cfg.alternate_updates and spec.beta > 0 and spec.mode is not Mode.ILMA
    if alternate and step % 2 == 1:
        if spec.ilm_text_source is TextSource.PAIRED_TRANSCRIPTS:
            text = [u.transcript for u in paired_batch]
        else:
            text = text_batch
        ilm = scale(ilm_loss(text, params), 1.0 / len(paired_batch))
        loss = scale(ilm, spec.beta)
        return ObjectiveValue(loss, {"ilm": ilm.item(), "total": loss.item()})
    if alternate:
        spec = replace(spec, beta=0.0)
    return composite_objective(
        spec,
        paired_batch,
        text_batch,
        params,
        frozen=frozen,
        check=not alternate,
        joist_batch_size=cfg.joist_batch_size,
        upsample_seed=upsample_seed(cfg, step),
    )


@profile(name="backward")
def _backward(value):
    value.backward()


def train_step(params, batches, cfg, optimizer, frozen=None, step=0):
    """One optimizer update on the composite objective.

    Parameters
    ----------
    params: ModelParams
        Updated in place.
    batches: tuple
        ``(paired_batch, text_batch)``.
    cfg: TrainConfig
    optimizer: optim.Adam
    frozen: Optional[ModelParams]
        ILMA snapshot.
    step: int

    Returns
    -------
    tuple
        ``(params, optimizer, metrics)``.

    Raises
    ------
    TrainingHalted
        Non-finite loss or gradient; parameters are left untouched.
    """
    paired_batch, text_batch = batches
    mode = cfg.objective.mode
    if mode is Mode.ILMA and frozen is None:
        raise TrainConfigError("ILMA requires a frozen snapshot")

    params.zero_grad()
    try:
        value = _objective(params, paired_batch, text_batch, cfg, frozen, step)
    except NonFiniteError as e:
        bad = [p.name for p in params if not np.all(np.isfinite(p.values))]
        raise TrainingHalted(f"non-finite value at step {step}: {e}", {"step": step, "parameters": bad, "components": {}})
    if not all(np.isfinite(v) for v in value.components.values()):
        raise TrainingHalted(
            f"non-finite loss at step {step}",
            {"step": step, "parameters": [], "components": dict(value.components)},
        )
    _backward(value)

    parameters = trainable_parameters(params, mode)
    lr = learning_rate_at(cfg, step)
    try:
        norm = optimizer.update(parameters, lr)
    except NonFiniteError as e:
        bad = [p.name for p in parameters if not np.all(np.isfinite(p.grad))]
        raise TrainingHalted(str(e), {"step": step, "parameters": bad, "components": dict(value.components)})

    metrics = {"step": step, "lr": lr, "grad_norm": norm, **{f"loss_{k}": v for k, v in value.components.items()}}
    return params, optimizer, metrics


##############
# MetricsLog #
##############
class MetricsLog:
    def __init__(self, path=None):
        """Line-delimited JSON metrics, kept in memory and optionally appended to ``path``."""
        self.path = Path(path) if path is not None else None
        self.records = []

    def _write(self, record):
        record = {"schema": METRICS_SCHEMA, **record}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def header(self, config, **extra):
        return self._write({"kind": "header", "started": wall_clock(), "config": config, **extra})

    def step(self, metrics):
        return self._write({"kind": "step", **metrics})

    def eval(self, metrics):
        return self._write({"kind": "eval", **metrics})

    def summary(self, **extra):
        return self._write({"kind": "summary", **extra})

    def of_kind(self, kind):
        return [r for r in self.records if r["kind"] == kind]

    def comparable(self):
        """Step and eval records, the deterministic part of the log."""
        return [r for r in self.records if r["kind"] in ("step", "eval")]

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path) as f:
            out.records = [json.loads(line) for line in f if line.strip()]
        return out


##############
# Evaluation #
##############
def evaluate(params, bundle, cfg):
    """WER per test set (first ``eval_utterances`` of each) and held-out ILM perplexity."""
    fusion = FusionConfig(0.0, 0.0, cfg.eval_beam)
    test_sets = {name: utts[: cfg.eval_utterances] for name, utts in bundle.test_sets().items()}
    results = decode_utterances(params, [u for utts in test_sets.values() for u in utts], fusion)
    scores = score_sets(results, test_sets)
    out = {f"wer_{name}": r.rate for name, r in scores.items()}
    rare = [r for name, r in scores.items() if name != "vs"]
    errors = sum(r.errors for r in rare)
    out["wer_rare"] = errors / max(1, sum(r.ref_len for r in rare))
    if bundle.heldout_text:
        out["ilm_ppl"] = ilm_perplexity(bundle.heldout_text, params)
    return out


###############
# Checkpoints #
###############
def save_checkpoint(path, params, optimizer, step, smoother, frozen=None, best=None):
    extra = optimizer.to_arrays()
    extra["smoothing"] = smoother.to_array()
    if frozen is not None:
        extra.update(frozen.to_arrays(prefix="frozen/"))
    params.save(path, extra_arrays=extra, meta={"step": step, "best": best})


def load_checkpoint(path):
    """Returns ``(params, arrays, meta)``; ``arrays`` holds optimizer/frozen entries."""
    return ModelParams.load(path)


def run_training(cfg, bundle, params, out_dir=None, resume=False, evaluator=evaluate):
    """Train ``params`` on ``bundle`` for ``cfg.steps`` steps.

    Parameters
    ----------
    cfg: TrainConfig
    bundle: corpus.SplitBundle
    params: ModelParams
        Initial weights; for ILMA the ILMT-trained seed model (also the frozen snapshot).
    out_dir: Optional[Path]
        Receives ``metrics.jsonl``, ``last.ckpt`` and ``best.ckpt``.
    resume: bool
        Continue from ``out_dir/last.ckpt``.
    evaluator: callable
        ``evaluator(params, bundle, cfg) -> dict`` with a ``wer_rare`` entry.

    Returns
    -------
    tuple
        ``(params, MetricsLog)``.
    """
    mode = cfg.objective.mode
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if not resume:
            (out_dir / "metrics.jsonl").unlink(missing_ok=True)
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir is not None else None)

    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, grad_clip=cfg.grad_clip)
    smoother = RingBuffer(cfg.smoothing_window)
    frozen = params.copy() if mode is Mode.ILMA else None
    start, best = 0, None

    if resume:
        if out_dir is None or not (out_dir / "last.ckpt").exists():
            raise TrainConfigError("resume requested but no last.ckpt found")
        params, arrays, meta = load_checkpoint(out_dir / "last.ckpt")
        optimizer.load_arrays(arrays)
        smoother = RingBuffer.from_array(cfg.smoothing_window, arrays["smoothing"])
        if mode is Mode.ILMA:
            frozen = ModelParams.from_arrays(params.config, arrays, prefix="frozen/")
        start, best = meta["step"], meta["best"]
        log.info("Resuming %s training at step %d", mode.value, start)

    if cfg.steps == 0:
        return params, metrics

    metrics.header({"train": cfg.to_dict(), "model": params.config.to_dict()}, resumed_from=start)
    t_start = time_s()
    completed = start
    for step, paired_batch, text_batch in mix_batches(bundle.paired_train, bundle.unpaired_text, cfg, start):
        params, optimizer, m = train_step(params, (paired_batch, text_batch), cfg, optimizer, frozen, step)
        smoother.append(m["loss_total"])
        m["loss_smoothed"] = smoother.mean()
        metrics.step(m)
        completed = step + 1
        if step % cfg.log_every == 0:
            log.info("%s step %d: loss %.4f (smoothed %.4f)", mode.value, step, m["loss_total"], m["loss_smoothed"])

        if completed % cfg.eval_every == 0 or completed == cfg.steps:
            scores = evaluator(params, bundle, cfg)
            metrics.eval({"step": completed, **scores})
            log.info("%s eval at %d: %s", mode.value, completed, scores)
            if out_dir is not None:
                if best is None or scores["wer_rare"] < best:
                    best = scores["wer_rare"]
                    save_checkpoint(out_dir / "best.ckpt", params, optimizer, completed, smoother, frozen, best)
                save_checkpoint(out_dir / "last.ckpt", params, optimizer, completed, smoother, frozen, best)

    metrics.summary(
        steps=completed - start,
        wall_clock_s=time_s() - t_start,
        profile=uprofiler.results(),
    )
    return params, metrics
