"""Optimiser, schedule, three-stage training and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import VideoSample, batch_iter, stack_batch
from .errors import ConfigError, FormatError, NumericError, VersionError
from .model import MMT, ModelConfig, init_params
from .objectives import (
    LossBreakdown,
    WeakLabels,
    capc_loss,
    classification_loss,
    sample_cross_indices,
    total_loss,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"AVVPCKPT"
CKPT_VERSION = 1


# -- optimiser -------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict[str, np.ndarray], state: OptimState) -> OptimState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` maps names to :class:`Tensor` or plain arrays. Nothing is
    modified if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; Adam step aborted")
        shape = params[name].shape
        if g.shape != shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {shape} for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, tn.Tensor) else p
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    lr0: float = 3e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    batch_size: int = 64
    mu: float = 0.5
    N: int = 1
    tau: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.mu < 0 or self.N < 0:
            raise ConfigError("mu and N must be non-negative")
        if self.batch_size < 1 or self.decay_every < 1 or self.lr0 <= 0:
            raise ConfigError("batch_size, decay_every and lr0 must be positive")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every)


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    optim: OptimState
    rng_state: dict
    stage: int
    epoch: int
    train_cfg: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    version: int = CKPT_VERSION

    def model(self) -> MMT:
        params = {k: tn.parameter(v) for k, v in self.params.items()}
        return MMT(self.model_cfg, params)


def _pack_str(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def save_checkpoint(cp: Checkpoint, path) -> Path:
    path = Path(path)
    meta = {
        "model_cfg": cp.model_cfg.to_dict(),
        "stage": cp.stage,
        "epoch": cp.epoch,
        "train_cfg": cp.train_cfg,
        "history": cp.history,
        "optim": {k: getattr(cp.optim, k) for k in ("step", "lr", "beta1", "beta2", "eps")},
    }
    tensors = [(f"param/{k}", v) for k, v in cp.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in cp.optim.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in cp.optim.v.items()]
    out = [CKPT_MAGIC, struct.pack("<I", cp.version), _pack_str(json.dumps(meta).encode())]
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        out.append(_pack_str(name.encode()))
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    out.append(_pack_str(json.dumps(cp.rng_state).encode()))
    path.write_bytes(b"".join(out))
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at offset {len(self.raw)} (needed {n} bytes at {self.pos})")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    try:
        meta = json.loads(r.blob())
        tensors = {}
        for _ in range(r.u32()):
            name = r.blob().decode()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        rng_state = json.loads(r.blob())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint near offset {r.pos}: {exc}") from None
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    pick = lambda prefix: {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    optim = OptimState(pick("adam.m/"), pick("adam.v/"), **meta["optim"])
    return Checkpoint(
        ModelConfig(**meta["model_cfg"]),
        pick("param/"),
        optim,
        rng_state,
        meta["stage"],
        meta["epoch"],
        meta["train_cfg"],
        meta["history"],
        version,
    )


# -- training ----------------------------------------------------------------------


def _label_table(samples, labels) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if labels is None:
        return {s.id: (s.Y, s.Y) for s in samples}
    return labels


def format_log_line(rec: dict) -> str:
    keys = ("l_cls_a", "l_cls_v", "l_cls_video", "l_cls_total", "l_ccr", "l_total")
    body = " ".join(f"{k}={rec[k]:.17g}" for k in keys)
    return f"stage={rec['stage']} epoch={rec['epoch']} lr={rec['lr']:.6g} {body}"


def batch_loss(model: MMT, batch, labels, mu: float, N: int, rng) -> tuple[tn.Tensor, LossBreakdown]:
    """Build the training objective for one minibatch on the tape."""
    audio, visual, Y = stack_batch(batch)
    Ya = np.stack([labels[s.id][0] for s in batch]).astype(np.float64)
    Yv = np.stack([labels[s.id][1] for s in batch]).astype(np.float64)
    preds = model.forward(audio, visual)
    lb = classification_loss(preds, WeakLabels(Y, Ya, Yv))
    lb.mu, lb.N = mu, N
    if mu > 0 and N > 0:
        idx = sample_cross_indices(len(batch), N, rng)
        rand = [model.forward(audio[idx[:, k]], visual).Ptilde_v for k in range(N)]
        lb.l_ccr = capc_loss(preds.Ptilde_v, rand)
    loss = total_loss(lb, mu)
    lb.l_total = loss
    return loss, lb


def train_stage(
    samples: list[VideoSample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    stage: int,
    labels=None,
    mu: float = 0.0,
    N: int = 0,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
    on_epoch=None,
) -> Checkpoint:
    """Train a freshly initialised model (or resume one) for one stage.

    ``labels`` maps video id to ``(Y_a, Y_v)``; ``None`` means both equal the
    union label. CAPC is active when ``mu > 0`` and ``N > 0``.
    """
    cfg.validate()
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    labels = _label_table(samples, labels)
    if resume is not None:
        model = resume.model()
        optim = resume.optim
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start, history = resume.epoch + 1, list(resume.history)
    else:
        model = MMT(model_cfg, init_params(model_cfg, cfg.seed))
        optim = OptimState(lr=cfg.lr0)
        rng = np.random.default_rng([cfg.seed, stage])
        start, history = 0, []
    if mu > 0 and N > 0 and min(cfg.batch_size, len(samples)) <= N:
        sample_cross_indices(min(cfg.batch_size, len(samples)), N, rng)  # raises
    last = cfg.epochs - 1 if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs - 1)
    epoch = start - 1
    for epoch in range(start, last + 1):
        optim.lr = lr_at(epoch, cfg)
        sums: dict[str, float] = {}
        seen = 0
        for bi, batch in enumerate(batch_iter(samples, cfg.batch_size, cfg.seed, epoch)):
            use_capc = len(batch) > N
            loss, lb = batch_loss(model, batch, labels, mu if use_capc else 0.0, N, rng)
            if not np.isfinite(loss.item()):
                raise NumericError(f"stage {stage} epoch {epoch} batch {bi}: non-finite loss")
            tn.backward(loss)
            grads = {k: p.grad for k, p in model.params.items()}
            try:
                adam_step(model.params, grads, optim)
            except NumericError as exc:
                raise NumericError(f"stage {stage} epoch {epoch} batch {bi}: {exc}") from None
            for k, val in lb.values().items():
                sums[k] = sums.get(k, 0.0) + val * len(batch)
            seen += len(batch)
        rec = {"stage": stage, "epoch": epoch, "lr": optim.lr, **{k: v / seen for k, v in sums.items()}}
        history.append(rec)
        log.info(format_log_line(rec))
        if on_epoch is not None:
            on_epoch(rec)
    return Checkpoint(
        model.cfg,
        {k: p.data.copy() for k, p in model.params.items()},
        optim,
        rng.bit_generator.state,
        stage,
        epoch,
        asdict(cfg),
        history,
    )


def train_stage1(samples, model_cfg: ModelConfig, cfg: TrainConfig, **kw) -> Checkpoint:
    """Classification loss only, with ``Y_a = Y_v = Y``."""
    return train_stage(samples, model_cfg, cfg, stage=1, labels=None, mu=0.0, N=0, **kw)


def compute_pseudo_labels(checkpoint_or_model, samples, tau: float = 0.5, batch_size: int = 256):
    """Split each video's union label into per-modality labels.

    A positive class stays positive in a modality whose video-level
    confidence reaches ``tau``. If neither does, it goes to the more
    confident modality (both on a tie), so ``Y_a | Y_v == Y`` always holds.
    """
    model = checkpoint_or_model.model() if isinstance(checkpoint_or_model, Checkpoint) else checkpoint_or_model
    out = {}
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        audio, visual, _ = stack_batch(batch)
        pr = model.forward(audio, visual).numpy()
        for s, pa, pv in zip(batch, pr["Ptilde_a"], pr["Ptilde_v"]):
            out[s.id] = pseudo_label_rule(s.Y, pa, pv, tau)
    return out


def pseudo_label_rule(Y, pt_a, pt_v, tau: float):
    Y = np.asarray(Y).astype(bool)
    ya = Y & (pt_a >= tau)
    yv = Y & (pt_v >= tau)
    neither = Y & ~ya & ~yv
    ya |= neither & (pt_a >= pt_v)
    yv |= neither & (pt_v >= pt_a)
    return ya.astype(np.uint8), yv.astype(np.uint8)


def check_union(samples, labels) -> None:
    for s in samples:
        ya, yv = labels[s.id]
        if not np.array_equal(np.maximum(ya, yv), np.asarray(s.Y)):
            raise ValueError(f"pseudo labels for {s.id} violate Y_a | Y_v == Y")


def train_stage3(samples, pseudo_labels, model_cfg: ModelConfig, cfg: TrainConfig, **kw) -> Checkpoint:
    """Fresh model trained on pseudo labels with the consistency term."""
    check_union(samples, pseudo_labels)
    return train_stage(samples, model_cfg, cfg, stage=3, labels=pseudo_labels, mu=cfg.mu, N=cfg.N, **kw)


@dataclass
class PipelineResult:
    stage1: Checkpoint | None
    pseudo_labels: dict | None
    stage3: Checkpoint | None

    @property
    def final(self) -> Checkpoint:
        return self.stage3 if self.stage3 is not None else self.stage1


def run_pipeline(samples, model_cfg: ModelConfig, cfg: TrainConfig, stages=(1, 2, 3)) -> PipelineResult:
    """Run stage 1, then pseudo labelling and stage 3 as requested.

    Later stages depend on earlier ones, so asking for stage 3 alone still
    trains stage 1 first.
    """
    stages = set(stages)
    if not stages or not stages <= {1, 2, 3}:
        raise ValueError(f"stages must be a non-empty subset of {{1, 2, 3}}, got {sorted(stages)}")
    cp1 = train_stage1(samples, model_cfg, cfg)
    pseudo = compute_pseudo_labels(cp1, samples, cfg.tau) if stages & {2, 3} else None
    cp3 = train_stage3(samples, pseudo, model_cfg, cfg) if 3 in stages else None
    return PipelineResult(cp1, pseudo, cp3)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
