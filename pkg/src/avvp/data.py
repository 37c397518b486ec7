"""Video samples, synthetic data generation, on-disk format and batching.

On-disk layout of a dataset directory::

    manifest.jsonl          one JSON record per video
    <id>.audio.feat         AVVPFEAT header + T*d_a float32 (little endian)
    <id>.visual.feat        AVVPFEAT header + T*d_v float32
    <id>.audio.gt           AVVPGT__ header + T*C bytes (0/1), optional
    <id>.visual.gt          same, optional

Both binary headers are 16 bytes: the 8-byte magic, then two little-endian
uint32 values (T and dim, where dim is C for ground-truth files).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

FEAT_MAGIC = b"AVVPFEAT"
GT_MAGIC = b"AVVPGT__"
_HEADER = struct.Struct("<8sII")
MODES = ("audio_only", "visual_only", "both")


@dataclass
class VideoSample:
    id: str
    audio_feats: np.ndarray
    visual_feats: np.ndarray
    Y: np.ndarray
    gt_audio: np.ndarray | None = None
    gt_visual: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.audio_feats.shape[0]

    @property
    def C(self) -> int:
        return self.Y.shape[0]

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_audio is not None and self.gt_visual is not None

    @property
    def gt_av(self) -> np.ndarray:
        return self.gt_audio & self.gt_visual


def union_label(gt_audio: np.ndarray, gt_visual: np.ndarray) -> np.ndarray:
    return (gt_audio.any(axis=0) | gt_visual.any(axis=0)).astype(np.uint8)


def extract_spans(seq) -> list[tuple[int, int]]:
    """Maximal runs of ones as inclusive ``(start, end)`` pairs."""
    seq = np.asarray(seq).astype(bool)
    padded = np.concatenate([[False], seq, [False]])
    diff = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1) - 1
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def spans_to_binary(spans, T: int) -> np.ndarray:
    out = np.zeros(T, dtype=np.uint8)
    for s, e in spans:
        out[s : e + 1] = 1
    return out


def ground_truth_events(gt: np.ndarray) -> dict[int, list[tuple[int, int]]]:
    """Per class, the maximal positive spans of a ``(T, C)`` binary matrix."""
    return {c: extract_spans(gt[:, c]) for c in range(gt.shape[1]) if gt[:, c].any()}


# -- synthetic generator -------------------------------------------------------------


@dataclass
class SynthConfig:
    num_videos: int = 300
    T: int = 10
    C: int = 25
    d_a: int = 128
    d_v: int = 128
    p_audio_only: float = 0.3
    p_visual_only: float = 0.2
    p_both: float = 0.5
    events_per_video_mean: float = 1.64
    noise_sigma: float = 0.3
    min_span: int = 2
    max_jitter: int = 2
    seed: int = 0

    def validate(self) -> None:
        probs = np.array([self.p_audio_only, self.p_visual_only, self.p_both])
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"modality probabilities must be non-negative and sum to 1, got {probs}")
        if self.events_per_video_mean < 1:
            raise ConfigError("events_per_video_mean must be at least 1")
        if not 1 <= self.min_span <= self.T:
            raise ConfigError(f"min_span must lie in [1, T={self.T}]")
        if min(self.num_videos, self.T, self.C, self.d_a, self.d_v) < 1:
            raise ConfigError("num_videos, T, C, d_a, d_v must be positive")
        if self.noise_sigma < 0 or self.max_jitter < 0:
            raise ConfigError("noise_sigma and max_jitter must be non-negative")


@dataclass
class SynthEvent:
    cls: int
    mode: str
    audio_span: tuple[int, int] | None
    visual_span: tuple[int, int] | None


@dataclass
class SynthDataset:
    samples: list[VideoSample]
    events: list[list[SynthEvent]] = field(default_factory=list)
    proto_a: np.ndarray | None = None
    proto_v: np.ndarray | None = None

    def summary(self) -> dict:
        counts = {m: 0 for m in MODES}
        for evs in self.events:
            for e in evs:
                counts[e.mode] += 1
        total = sum(counts.values())
        return {
            "videos": len(self.samples),
            "events": total,
            "mean_events_per_video": total / max(len(self.samples), 1),
            **{f"frac_{m}": (counts[m] / total if total else 0.0) for m in MODES},
            "single_modality_events": counts["audio_only"] + counts["visual_only"],
        }


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _draw_span(rng, T, min_len):
    length = int(rng.integers(min_len, T + 1))
    start = int(rng.integers(0, T - length + 1))
    return start, start + length - 1


def _jitter(rng, span, T, min_len, J):
    while True:
        s = span[0] + int(rng.integers(-J, J + 1))
        e = span[1] + int(rng.integers(-J, J + 1))
        s, e = max(s, 0), min(e, T - 1)
        if e - s + 1 >= min_len:
            return s, e


def generate_synthetic(cfg: SynthConfig) -> SynthDataset:
    """Partially correlated audio-visual videos built from class prototypes.

    Each class owns one unit-norm prototype per modality. A segment's feature
    is the sum of prototypes of the events active in that modality at that
    segment plus isotropic Gaussian noise, so single-modality events leave the
    other modality untouched.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    proto_a = _unit_rows(rng, cfg.C, cfg.d_a)
    proto_v = _unit_rows(rng, cfg.C, cfg.d_v)
    probs = np.array([cfg.p_audio_only, cfg.p_visual_only, cfg.p_both])
    probs = probs / probs.sum()
    width = len(str(cfg.num_videos - 1))
    samples, all_events = [], []
    for i in range(cfg.num_videos):
        k = min(1 + int(rng.poisson(cfg.events_per_video_mean - 1)), cfg.C)
        classes = rng.choice(cfg.C, size=k, replace=False)
        gt_a = np.zeros((cfg.T, cfg.C), dtype=np.uint8)
        gt_v = np.zeros((cfg.T, cfg.C), dtype=np.uint8)
        events = []
        for c in classes:
            mode = MODES[int(rng.choice(3, p=probs))]
            base = _draw_span(rng, cfg.T, cfg.min_span)
            a_span = v_span = None
            if mode == "audio_only":
                a_span = base
            elif mode == "visual_only":
                v_span = base
            else:
                while True:
                    a_span = _jitter(rng, base, cfg.T, cfg.min_span, cfg.max_jitter)
                    v_span = _jitter(rng, base, cfg.T, cfg.min_span, cfg.max_jitter)
                    if min(a_span[1], v_span[1]) >= max(a_span[0], v_span[0]):
                        break
            if a_span is not None:
                gt_a[a_span[0] : a_span[1] + 1, c] = 1
            if v_span is not None:
                gt_v[v_span[0] : v_span[1] + 1, c] = 1
            events.append(SynthEvent(int(c), mode, a_span, v_span))
        audio = gt_a.astype(np.float64) @ proto_a
        visual = gt_v.astype(np.float64) @ proto_v
        audio += cfg.noise_sigma * rng.standard_normal(audio.shape)
        visual += cfg.noise_sigma * rng.standard_normal(visual.shape)
        samples.append(
            VideoSample(
                id=f"syn{i:0{width}d}",
                audio_feats=audio.astype(np.float32),
                visual_feats=visual.astype(np.float32),
                Y=union_label(gt_a, gt_v),
                gt_audio=gt_a,
                gt_visual=gt_v,
            )
        )
        all_events.append(events)
    return SynthDataset(samples, all_events, proto_a, proto_v)


# -- file formats ------------------------------------------------------------------


def _write_block(path: Path, magic: bytes, arr: np.ndarray, dtype: str) -> None:
    T, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, T, dim))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_block(path: Path, magic: bytes, dtype: str, T: int | None = None, dim: int | None = None) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: file referenced by manifest does not exist") from None
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {_HEADER.size} bytes)")
    got_magic, fT, fdim = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r} at offset 0, expected {magic!r}")
    if T is not None and fT != T:
        raise FormatError(f"{path}: header declares T={fT} at offset 8 but manifest says {T}")
    if dim is not None and fdim != dim:
        raise FormatError(f"{path}: header declares dim={fdim} at offset 12, expected {dim}")
    itemsize = np.dtype(dtype).itemsize
    need = _HEADER.size + fT * fdim * itemsize
    if len(raw) != need:
        raise FormatError(f"{path}: payload ends at offset {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(fT, fdim).copy()


def write_feature_file(path, feats: np.ndarray) -> None:
    _write_block(Path(path), FEAT_MAGIC, feats, "<f4")


def read_feature_file(path, T: int | None = None, dim: int | None = None) -> np.ndarray:
    return _read_block(Path(path), FEAT_MAGIC, "<f4", T, dim).astype(np.float32)


def write_gt_file(path, gt: np.ndarray) -> None:
    if not np.isin(gt, (0, 1)).all():
        raise FormatError(f"{path}: ground truth must be binary")
    _write_block(Path(path), GT_MAGIC, gt, "u1")


def read_gt_file(path, T: int | None = None, C: int | None = None) -> np.ndarray:
    gt = _read_block(Path(path), GT_MAGIC, "u1", T, C)
    if not np.isin(gt, (0, 1)).all():
        raise FormatError(f"{path}: ground-truth payload holds values other than 0/1")
    return gt


def pack_label_bits(Y) -> str:
    """Hex string whose integer value has bit ``c`` set iff ``Y[c] == 1``."""
    value = 0
    for c, bit in enumerate(np.asarray(Y).astype(int)):
        if bit:
            value |= 1 << c
    return format(value, f"0{(len(Y) + 3) // 4}x")


def unpack_label_bits(hexstr: str, C: int) -> np.ndarray:
    value = int(hexstr, 16)
    if value >> C:
        raise FormatError(f"label bits {hexstr!r} set classes beyond C={C}")
    return np.array([(value >> c) & 1 for c in range(C)], dtype=np.uint8)


def write_dataset(samples, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rec = {
            "id": s.id,
            "T": int(s.T),
            "C": int(s.C),
            "label_bits": pack_label_bits(s.Y),
            "audio_file": f"{s.id}.audio.feat",
            "visual_file": f"{s.id}.visual.feat",
        }
        write_feature_file(directory / rec["audio_file"], s.audio_feats)
        write_feature_file(directory / rec["visual_file"], s.visual_feats)
        if s.has_ground_truth:
            rec["gt_audio_file"] = f"{s.id}.audio.gt"
            rec["gt_visual_file"] = f"{s.id}.visual.gt"
            write_gt_file(directory / rec["gt_audio_file"], s.gt_audio)
            write_gt_file(directory / rec["gt_visual_file"], s.gt_visual)
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return directory


def read_dataset(directory) -> list[VideoSample]:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FormatError(f"{manifest}: manifest not found")
    samples = []
    offset = 0
    for lineno, line in enumerate(manifest.read_text().splitlines(keepends=True), 1):
        here, offset = offset, offset + len(line.encode())
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            T, C = int(rec["T"]), int(rec["C"])
            Y = unpack_label_bits(rec["label_bits"], C)
            audio_file, visual_file = rec["audio_file"], rec["visual_file"]
            sid = str(rec["id"])
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{manifest}: malformed record on line {lineno} (offset {here}): {exc}") from None
        audio = read_feature_file(directory / audio_file, T=T)
        visual = read_feature_file(directory / visual_file, T=T)
        gt_a = gt_v = None
        if "gt_audio_file" in rec or "gt_visual_file" in rec:
            try:
                gt_a = read_gt_file(directory / rec["gt_audio_file"], T, C)
                gt_v = read_gt_file(directory / rec["gt_visual_file"], T, C)
            except KeyError as exc:
                raise FormatError(f"{manifest}: line {lineno} names only one ground-truth file ({exc})") from None
            if not np.array_equal(union_label(gt_a, gt_v), Y):
                raise FormatError(f"{manifest}: line {lineno} label_bits disagree with ground truth")
        samples.append(VideoSample(sid, audio, visual, Y, gt_a, gt_v))
    return samples


# -- batching ----------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(samples, batch_size: int, seed: int, epoch: int):
    """Yield lists of samples in an order fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if len(samples) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = epoch_permutation(len(samples), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def stack_batch(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    audio = np.stack([s.audio_feats for s in batch]).astype(np.float64)
    visual = np.stack([s.visual_feats for s in batch]).astype(np.float64)
    Y = np.stack([s.Y for s in batch]).astype(np.float64)
    return audio, visual, Y
