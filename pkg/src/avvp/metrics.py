"""Segment- and event-level F-scores for audio-visual video parsing.

All dataset-level scores pool true/false positive counts over videos,
segments and classes before computing ``F = 2TP / (2TP + FP + FN)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .data import extract_spans
from .errors import DimensionError

CATEGORIES = ("Audio", "Visual", "Audio-Visual", "Type@AV", "Event@AV")
LEVELS = ("segment", "event")
IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f(self) -> float:
        return f_score(self.tp, self.fp, self.fn)


def f_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class BinaryParse:
    audio: np.ndarray
    visual: np.ndarray

    @property
    def av(self) -> np.ndarray:
        return self.audio & self.visual


def binarize(preds, theta: float = 0.5) -> BinaryParse:
    """Threshold segment probabilities; ``p >= theta`` counts as positive."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if isinstance(preds, dict):
        P_a, P_v = preds["P_a"], preds["P_v"]
    else:
        P_a, P_v = preds.P_a.data, preds.P_v.data
    return BinaryParse(
        (np.asarray(P_a) >= theta).astype(np.uint8),
        (np.asarray(P_v) >= theta).astype(np.uint8),
    )


def segment_counts(pred, gt) -> Counts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"segment_counts: pred {pred.shape} vs gt {gt.shape}")
    return Counts(int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum()))


def segment_f1(preds, gts) -> float:
    """Micro F over a list of (T, C) binary matrices (or a single pair)."""
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
    total = Counts()
    for p, g in zip(preds, gts):
        total = total + segment_counts(p, g)
    return total.f


def extract_events(seq) -> list[tuple[int, int]]:
    return extract_spans(seq)


def span_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def match_events(pred_spans, gt_spans, threshold: float = IOU_THRESHOLD) -> int:
    """Size of a maximum one-to-one matching among pairs with IoU >= threshold."""
    if not pred_spans or not gt_spans:
        return 0
    adj = np.array(
        [[span_iou(p, g) >= threshold for g in gt_spans] for p in pred_spans], dtype=np.int8
    )
    if not adj.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(adj), perm_type="column")
    return int((match >= 0).sum())


def match_events_bruteforce(pred_spans, gt_spans, threshold: float = IOU_THRESHOLD) -> int:
    """Exhaustive search over partial one-to-one assignments (small inputs only)."""
    best = 0
    n_p, n_g = len(pred_spans), len(gt_spans)
    # each prediction picks a distinct ground truth or nothing (-1)
    for choice in itertools.product(range(-1, n_g), repeat=n_p):
        used = [g for g in choice if g >= 0]
        if len(used) != len(set(used)):
            continue
        ok = sum(
            1 for p, g in enumerate(choice) if g >= 0 and span_iou(pred_spans[p], gt_spans[g]) >= threshold
        )
        best = max(best, ok)
    return best


def event_counts(pred, gt, threshold: float = IOU_THRESHOLD) -> Counts:
    """Event-level counts for one (T, C) binary prediction and ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"event_counts: pred {pred.shape} vs gt {gt.shape}")
    total = Counts()
    for c in range(pred.shape[1]):
        ps = extract_events(pred[:, c])
        gs = extract_events(gt[:, c])
        tp = match_events(ps, gs, threshold)
        total = total + Counts(tp, len(ps) - tp, len(gs) - tp)
    return total


def event_f1(preds, gts, threshold: float = IOU_THRESHOLD) -> float:
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
    total = Counts()
    for p, g in zip(preds, gts):
        total = total + event_counts(p, g, threshold)
    return total.f


def type_at_av(audio_f: float, visual_f: float, av_f: float) -> float:
    return (audio_f + visual_f + av_f) / 3.0


def event_at_av(audio: Counts, visual: Counts) -> float:
    return (audio + visual).f


# -- single- vs multi-modality analysis ------------------------------------------------


@dataclass
class ExclusivityReport:
    single_modality_f: float | None
    multi_modality_f: float | None
    by_modality: dict[str, float | None]
    n_events: dict[str, int]


def _mean_or_none(xs):
    return float(np.mean(xs)) if xs else None


def exclusivity_report(parses, gts) -> ExclusivityReport:
    """Mean per-event segment F for single- and multi-modality events.

    ``parses`` is a list of :class:`BinaryParse`, ``gts`` a list of
    ``(gt_audio, gt_visual)`` pairs. An event is a maximal ground-truth span
    of one class in one modality; it is multi-modality if the same class is
    active in the other modality at any of its segments. Its score is the
    segment F of that class and modality within the video.
    """
    if gts is None or any(g is None or g[0] is None or g[1] is None for g in gts):
        raise ValueError("exclusivity analysis needs ground truth for every video")
    groups: dict[str, list[float]] = {
        k: [] for k in ("single", "multi", "audio_single", "audio_multi", "visual_single", "visual_multi")
    }
    for parse, (gt_a, gt_v) in zip(parses, gts):
        for name, pred, gt, other in (
            ("audio", parse.audio, gt_a, gt_v),
            ("visual", parse.visual, gt_v, gt_a),
        ):
            for c in range(gt.shape[1]):
                spans = extract_spans(gt[:, c])
                if not spans:
                    continue
                f = segment_counts(pred[:, c], gt[:, c]).f
                for s, e in spans:
                    kind = "multi" if other[s : e + 1, c].any() else "single"
                    groups[kind].append(f)
                    groups[f"{name}_{kind}"].append(f)
    return ExclusivityReport(
        _mean_or_none(groups["single"]),
        _mean_or_none(groups["multi"]),
        {k: _mean_or_none(v) for k, v in groups.items() if k not in ("single", "multi")},
        {k: len(v) for k, v in groups.items()},
    )


# -- dataset evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    counts: dict[tuple[str, str], Counts]
    scores: dict[tuple[str, str], float]
    exclusivity: ExclusivityReport | None = None
    theta: float = 0.5
    notes: list[str] = field(default_factory=list)

    def f(self, category: str, level: str = "segment") -> float:
        return self.scores[(category, level)]

    def to_records(self) -> list[str]:
        """Whitespace-separated ``category level TP FP FN F`` lines."""
        lines = []
        for cat in CATEGORIES:
            for lvl in LEVELS:
                c = self.counts.get((cat, lvl))
                tp, fp, fn = (c.tp, c.fp, c.fn) if c else ("-", "-", "-")
                lines.append(f"{cat} {lvl} {tp} {fp} {fn} {self.scores[(cat, lvl)]:.6f}")
        if self.exclusivity is not None:
            ex = self.exclusivity
            for key, val in (("single", ex.single_modality_f), ("multi", ex.multi_modality_f), *ex.by_modality.items()):
                shown = "absent" if val is None else f"{val:.6f}"
                n = ex.n_events.get(key, "-")
                lines.append(f"Exclusivity:{key} per-event {n} - - {shown}")
        return lines

    def to_table(self) -> str:
        head = f"{'Category':<14}{'Seg.':>8}{'Event':>8}"
        rows = [head, "-" * len(head)]
        for cat in CATEGORIES:
            rows.append(
                f"{cat:<14}{100 * self.scores[(cat, 'segment')]:>8.1f}{100 * self.scores[(cat, 'event')]:>8.1f}"
            )
        if self.exclusivity is not None:
            ex = self.exclusivity
            fmt = lambda v: "absent" if v is None else f"{100 * v:.1f}"
            rows.append("")
            rows.append(f"single-modality events: {fmt(ex.single_modality_f)}  (n={ex.n_events['single']})")
            rows.append(f"multi-modality events:  {fmt(ex.multi_modality_f)}  (n={ex.n_events['multi']})")
        rows += [f"note: {n}" for n in self.notes]
        return "\n".join(rows)


def evaluate(parses, gts, theta: float = 0.5) -> EvalReport:
    """Full metric suite over a dataset.

    ``parses``: list of :class:`BinaryParse` (one per video);
    ``gts``: list of ``(gt_audio, gt_visual)`` binary ``(T, C)`` pairs.
    """
    if len(parses) != len(gts):
        raise DimensionError(f"{len(parses)} parses but {len(gts)} ground truths")
    counts = {(cat, lvl): Counts() for cat in ("Audio", "Visual", "Audio-Visual") for lvl in LEVELS}
    for parse, (gt_a, gt_v) in zip(parses, gts):
        gt_av = np.asarray(gt_a).astype(bool) & np.asarray(gt_v).astype(bool)
        for cat, pred, gt in (
            ("Audio", parse.audio, gt_a),
            ("Visual", parse.visual, gt_v),
            ("Audio-Visual", parse.av, gt_av),
        ):
            counts[(cat, "segment")] += segment_counts(pred, gt)
            counts[(cat, "event")] += event_counts(pred, gt)
    scores = {k: c.f for k, c in counts.items()}
    for lvl in LEVELS:
        scores[("Type@AV", lvl)] = type_at_av(
            scores[("Audio", lvl)], scores[("Visual", lvl)], scores[("Audio-Visual", lvl)]
        )
        pooled = counts[("Audio", lvl)] + counts[("Visual", lvl)]
        counts[("Event@AV", lvl)] = pooled
        scores[("Event@AV", lvl)] = pooled.f
    return EvalReport(
        counts,
        scores,
        exclusivity_report(parses, gts),
        theta,
        notes=["Event@AV pools audio and visual counts (micro)"],
    )
