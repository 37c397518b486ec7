"""Self-checks shared by ``avvp verify`` and the test suite.

Each check returns a :class:`CheckResult`; none of them raise on a failed
comparison, so a caller can run the whole battery and report every failure.
"""

from __future__ import annotations

import tempfile
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import (
    SynthConfig,
    generate_synthetic,
    read_dataset,
    read_feature_file,
    read_gt_file,
    write_dataset,
    write_feature_file,
    write_gt_file,
)
from .metrics import match_events, match_events_bruteforce
from .model import MMT, ModelConfig
from .train import TrainConfig, batch_loss, format_log_line, load_checkpoint, save_checkpoint, train_stage1

TINY_MODEL = ModelConfig(T=4, C=3, d=8, d_a=5, d_v=5)

PRIMITIVES = (
    "add", "sub", "mul", "div", "scale", "broadcast_add", "sigmoid", "tanh", "relu", "exp",
    "log", "square", "matmul", "transpose", "reshape", "getitem", "stack", "sum", "mean",
    "softmax", "layer_norm", "mean_pool", "clip",
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} ({self.seconds:.1f}s) {self.detail}".rstrip()


def stable_seed(name: str) -> int:
    return zlib.crc32(name.encode())


def primitive_case(op: str, rng: np.random.Generator):
    """A scalar function exercising one primitive, and the tensors it reads."""
    P = tn.parameter
    shape = tuple(int(s) for s in rng.integers(1, 4, size=2))
    a = P(rng.normal(size=shape))
    b = P(rng.normal(size=shape))
    weights: dict[tuple, np.ndarray] = {}

    def proj(t):
        # fixed random projection so the loss is not a plain sum
        if t.shape not in weights:
            weights[t.shape] = rng.normal(size=t.shape)
        return (t * weights[t.shape]).sum()

    if op == "add":
        return lambda: proj(a + b), {"a": a, "b": b}
    if op == "sub":
        return lambda: proj(a - b), {"a": a, "b": b}
    if op == "mul":
        return lambda: proj(a * b), {"a": a, "b": b}
    if op == "div":
        c = P(rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1, 1], size=shape))
        return lambda: proj(a / c), {"a": a, "c": c}
    if op == "scale":
        return lambda: proj(a * 1.7), {"a": a}
    if op == "broadcast_add":
        row = P(rng.normal(size=(1, shape[1])))
        return lambda: proj(a + row), {"a": a, "row": row}
    if op == "sigmoid":
        return lambda: proj(tn.sigmoid(a)), {"a": a}
    if op == "tanh":
        return lambda: proj(tn.tanh(a)), {"a": a}
    if op == "relu":
        a.data[np.abs(a.data) < 1e-3] = 0.5  # stay off the kink
        return lambda: proj(tn.relu(a)), {"a": a}
    if op == "exp":
        return lambda: proj(tn.exp(a)), {"a": a}
    if op == "log":
        pos = P(rng.uniform(0.5, 3.0, size=shape))
        return lambda: proj(tn.log(pos)), {"pos": pos}
    if op == "square":
        return lambda: proj(tn.square(a)), {"a": a}
    if op == "matmul":
        m = P(rng.normal(size=(2, shape[0], shape[1])))
        k = P(rng.normal(size=(shape[1], 3)))
        return lambda: proj(m @ k), {"m": m, "k": k}
    if op == "transpose":
        return lambda: proj(tn.transpose(a)), {"a": a}
    if op == "reshape":
        return lambda: proj(a.reshape(-1)), {"a": a}
    if op == "getitem":
        return lambda: proj(a[0]), {"a": a}
    if op == "stack":
        return lambda: proj(tn.stack([a, b], axis=1)), {"a": a, "b": b}
    if op == "sum":
        return lambda: proj(a.sum(axis=0)), {"a": a}
    if op == "mean":
        return lambda: proj(a.mean(axis=-1, keepdims=True)), {"a": a}
    if op == "softmax":
        axis = int(rng.integers(0, 2))
        return lambda: proj(tn.softmax(a, axis=axis)), {"a": a}
    if op == "layer_norm":
        x, g, be = P(rng.normal(size=(3, 4))), P(rng.normal(size=4)), P(rng.normal(size=4))
        return lambda: proj(tn.layer_norm(x, g, be)), {"x": x, "g": g, "be": be}
    if op == "mean_pool":
        x = P(rng.normal(size=(5, 3)))
        n = int(rng.integers(1, 6))
        return lambda: proj(tn.mean_pool_segments(x, n)), {"x": x}
    if op == "clip":
        a.data[np.abs(np.abs(a.data) - 0.5) < 1e-3] = 0.0
        return lambda: proj(tn.clip(a, -0.5, 0.5)), {"a": a}
    raise KeyError(f"unknown primitive {op!r}")


def check_primitive(op: str, cases: int = 100, h: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(stable_seed(op))
    worst = 0.0
    for i in range(cases):
        f, params = primitive_case(op, rng)
        rep = tn.grad_check(f, params, h=h, tol=tol)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            return CheckResult(f"grad[{op}]", False, f"case {i}: rel err {rep.max_rel_error:.3g} at {rep.worst}", time.perf_counter() - t0)
    return CheckResult(f"grad[{op}]", True, f"{cases} cases, max rel err {worst:.2e}", time.perf_counter() - t0)


def tiny_batch(n: int = 3, seed: int = 0):
    cfg = SynthConfig(num_videos=n, T=TINY_MODEL.T, C=TINY_MODEL.C, d_a=TINY_MODEL.d_a, d_v=TINY_MODEL.d_v, seed=seed)
    return generate_synthetic(cfg).samples


def check_end_to_end(variant: str = "full", mu: float = 0.5, N: int = 1, max_entries: int | None = 6) -> CheckResult:
    """Finite differences of the full training loss, CAPC double forward included."""
    t0 = time.perf_counter()
    model = MMT(replace(TINY_MODEL, variant=variant), seed=3)
    batch = tiny_batch()
    labels = {s.id: (s.Y, s.Y) for s in batch}

    def f():
        # same pairing on every evaluation
        return batch_loss(model, batch, labels, mu, N, np.random.default_rng(7))[0]

    rep = tn.grad_check(f, model.params, max_entries=max_entries, rng=np.random.default_rng(0))
    return CheckResult(
        f"grad[L_total:{variant}]",
        rep.passed,
        f"{rep.n_checked} entries over {len(model.params)} tensors, max rel err {rep.max_rel_error:.2e} at {rep.worst}",
        time.perf_counter() - t0,
    )


def _random_spans(rng, T, k):
    out = []
    for _ in range(k):
        s = int(rng.integers(0, T))
        out.append((s, int(rng.integers(s, min(T, s + 5)))))
    return out


def check_matching(instances: int = 1000, max_events: int = 4, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    for i in range(instances):
        p = _random_spans(rng, 10, int(rng.integers(0, max_events + 1)))
        g = _random_spans(rng, 10, int(rng.integers(0, max_events + 1)))
        fast, slow = match_events(p, g), match_events_bruteforce(p, g)
        if fast != slow:
            return CheckResult("event-matching", False, f"instance {i}: {fast} != {slow} for {p} vs {g}", time.perf_counter() - t0)
    return CheckResult("event-matching", True, f"{instances} instances agree with brute force", time.perf_counter() - t0)


def check_formats(cases: int = 1000, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for i in range(cases):
            T, dim = (int(x) for x in rng.integers(1, 12, 2))
            feats = rng.normal(size=(T, dim)).astype(np.float32)
            write_feature_file(tmp / "x.feat", feats)
            gt = rng.integers(0, 2, (T, dim)).astype(np.uint8)
            write_gt_file(tmp / "x.gt", gt)
            if not (
                np.array_equal(read_feature_file(tmp / "x.feat", T, dim), feats)
                and np.array_equal(read_gt_file(tmp / "x.gt", T, dim), gt)
            ):
                return CheckResult("format-round-trip", False, f"case {i} differs", time.perf_counter() - t0)
        samples = tiny_batch(5, seed=seed)
        back = read_dataset(write_dataset(samples, tmp / "ds"))
        same = all(
            a.id == b.id and np.array_equal(a.audio_feats, b.audio_feats) and np.array_equal(a.Y, b.Y)
            for a, b in zip(samples, back)
        )
        model = MMT(TINY_MODEL, seed=1)
        from .train import Checkpoint, OptimState

        cp = Checkpoint(TINY_MODEL, {k: p.data for k, p in model.params.items()}, OptimState(), {}, 1, 0)
        loaded = load_checkpoint(save_checkpoint(cp, tmp / "c.ckpt"))
        same = same and all(np.array_equal(loaded.params[k], cp.params[k]) for k in cp.params)
    return CheckResult("format-round-trip", same, f"{cases} feature/gt files, dataset and checkpoint", time.perf_counter() - t0)


def check_determinism() -> CheckResult:
    t0 = time.perf_counter()
    samples = tiny_batch(8, seed=4)
    cfg = TrainConfig(epochs=3, lr0=1e-2, batch_size=4, seed=2)
    logs = [[format_log_line(r) for r in train_stage1(samples, TINY_MODEL, cfg).history] for _ in range(2)]
    return CheckResult("determinism", logs[0] == logs[1], f"{len(logs[0])} epoch log lines compared", time.perf_counter() - t0)


def run_verify(inject_fault: str | None = None, primitive_cases: int = 100) -> list[CheckResult]:
    """The verification battery; with ``inject_fault`` one backward rule is corrupted."""

    def battery():
        out = [check_primitive(op, primitive_cases) for op in PRIMITIVES]
        out += [check_end_to_end(v) for v in ("full", "han")]
        out += [check_matching(), check_formats(), check_determinism()]
        return out

    if inject_fault is None:
        return battery()
    with tn.corrupt_backward(inject_fault):
        return battery()
