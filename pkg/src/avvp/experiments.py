"""Train-and-evaluate helpers for variant comparisons on synthetic data."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import SynthConfig, VideoSample, generate_synthetic, stack_batch
from .metrics import EvalReport, binarize, evaluate
from .model import MMT, ModelConfig
from .train import TrainConfig, run_pipeline

log = logging.getLogger(__name__)


def split_samples(samples: list[VideoSample], n_train: int):
    return samples[:n_train], samples[n_train:]


def predict_dataset(model: MMT, samples, batch_size: int = 256, record: bool = False):
    """Per-video probability dicts, plus attention maps when ``record``."""
    out, attn = [], []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        audio, visual, _ = stack_batch(batch)
        pr = model.forward(audio, visual, record=record)
        arrs = pr.numpy()
        for i in range(len(batch)):
            out.append({k: v[i] for k, v in arrs.items()})
        if record:
            attn.append(pr.attention)
    return (out, attn) if record else out


def evaluate_model(model: MMT, samples, theta: float = 0.5) -> EvalReport:
    preds = predict_dataset(model, samples)
    parses = [binarize(p, theta) for p in preds]
    gts = [(s.gt_audio, s.gt_visual) for s in samples]
    return evaluate(parses, gts, theta)


@dataclass
class CellResult:
    variant: str
    seed: int
    mu: float
    N: int
    n_a: int
    n_v: int
    report: EvalReport
    model: MMT | None = None

    def key(self) -> tuple:
        return (self.variant, self.mu, self.N, self.n_a, self.n_v)


def run_cell(
    train_set,
    test_set,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variant: str,
    seed: int,
    mu: float | None = None,
    N: int | None = None,
    n_a: int | None = None,
    n_v: int | None = None,
    keep_model: bool = False,
) -> CellResult:
    mcfg = replace(
        model_cfg,
        variant=variant,
        n_a=model_cfg.n_a if n_a is None else n_a,
        n_v=model_cfg.n_v if n_v is None else n_v,
    )
    tcfg = replace(
        train_cfg,
        seed=seed,
        mu=train_cfg.mu if mu is None else mu,
        N=train_cfg.N if N is None else N,
    )
    result = run_pipeline(train_set, mcfg, tcfg)
    model = result.final.model()
    report = evaluate_model(model, test_set)
    log.info("cell variant=%s seed=%d mu=%g N=%d done", variant, seed, tcfg.mu, tcfg.N)
    return CellResult(variant, seed, tcfg.mu, tcfg.N, mcfg.n_a, mcfg.n_v, report, model if keep_model else None)


def grid(variants, seeds, mus=(None,), Ns=(None,), n_as=(None,), n_vs=(None,)):
    return list(itertools.product(variants, mus, Ns, n_as, n_vs, seeds))


SUMMARY_METRICS = (
    ("Audio", "segment"),
    ("Visual", "segment"),
    ("Audio-Visual", "segment"),
    ("Type@AV", "segment"),
    ("Event@AV", "segment"),
)


def summarize(cells: list[CellResult]) -> list[dict]:
    """Seed-mean of headline scores, one row per distinct non-seed setting."""
    rows: dict[tuple, list[CellResult]] = {}
    for c in cells:
        rows.setdefault(c.key(), []).append(c)
    out = []
    for key, group in rows.items():
        row = dict(zip(("variant", "mu", "N", "n_a", "n_v"), key))
        row["seeds"] = len(group)
        for cat, lvl in SUMMARY_METRICS:
            row[f"{cat}/{lvl}"] = float(np.mean([g.report.f(cat, lvl) for g in group]))
        for name, getter in (
            ("single", lambda r: r.exclusivity.single_modality_f),
            ("multi", lambda r: r.exclusivity.multi_modality_f),
            ("visual_single", lambda r: r.exclusivity.by_modality["visual_single"]),
            ("visual_multi", lambda r: r.exclusivity.by_modality["visual_multi"]),
        ):
            vals = [getter(g.report) for g in group]
            vals = [v for v in vals if v is not None]
            row[name] = float(np.mean(vals)) if vals else None
        out.append(row)
    return out


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            if v is None:
                cells.append("-")
            elif isinstance(v, float) and c not in ("mu",):
                cells.append(f"{100 * v:.1f}")
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines)


def make_splits(synth: SynthConfig, n_train: int):
    ds = generate_synthetic(synth)
    return split_samples(ds.samples, n_train)
