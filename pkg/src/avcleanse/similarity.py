"""Intra-class average cosine scores.

Every sample is scored against the reference members of its own class.
The fast path uses the centroid identity for unit vectors,
``mean_j cos(v_i, v_j) = v_i . sum_j v_j / M``, so a class of M samples
costs O(M d) instead of O(M^2 d).

Classes are processed in fixed blocks whose boundaries depend only on the
label layout, never on the thread count, and each class sum is accumulated
in float64 in sample-index order. Results are therefore bit-identical for
any ``threads`` value.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .embed_store import EmbeddingSet, LabelMap, check_normalized
from .errors import CleanseError, FormatError, ModalityError

PLACEHOLDER = -1.0
THREADS_ENV = "AVCLEANSE_THREADS"
# Minimum rows per work block; blocks always end on a class boundary.
BLOCK_ROWS = 8192


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise CleanseError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return os.cpu_count() or 1


class ClassScores(NamedTuple):
    values: np.ndarray       # float64, PLACEHOLDER where flagged
    placeholder: np.ndarray  # bool


def as_mask(reference_mask, n: int) -> np.ndarray:
    """Boolean mask of length ``n`` from a bool mask, an index array or None (all)."""
    if reference_mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(reference_mask)
    if m.dtype == bool:
        if m.shape != (n,):
            raise CleanseError(f"reference mask has shape {m.shape}, expected ({n},)")
        return m.copy()
    out = np.zeros(n, dtype=bool)
    idx = m.astype(np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise CleanseError("reference mask index out of range")
    out[idx] = True
    return out


def mask_id(mask: Optional[np.ndarray]) -> str:
    if mask is None or bool(np.all(mask)):
        return "all"
    digest = hashlib.sha256(np.packbits(np.asarray(mask, dtype=bool)).tobytes()).hexdigest()
    return f"mask:{int(np.count_nonzero(mask))}:{digest[:16]}"


def _prepare(emb: EmbeddingSet, labels: LabelMap, reference_mask):
    check_normalized(emb)
    labels.check_covers(emb)
    ref = as_mask(reference_mask, emb.n)
    if not ref.any():
        raise CleanseError("reference mask selects no samples")
    # Zero-vector rows cannot vouch for anyone.
    ref &= ~emb.zero_rows
    return ref


def _class_blocks(sorted_classes: np.ndarray) -> list[tuple[int, int]]:
    starts = np.flatnonzero(np.r_[True, sorted_classes[1:] != sorted_classes[:-1]])
    bounds = list(starts) + [len(sorted_classes)]
    blocks = []
    lo = 0
    for b in bounds[1:]:
        if b - lo >= BLOCK_ROWS or b == len(sorted_classes):
            blocks.append((lo, int(b)))
            lo = int(b)
    return blocks


def intra_class_scores(
    emb: EmbeddingSet,
    labels: LabelMap,
    reference_mask=None,
    self_inclusion: bool = False,
    threads: Optional[int] = None,
) -> ClassScores:
    """Mean cosine of each sample to the reference members of its class.

    With ``self_inclusion`` the j = i term is kept whenever sample i is
    itself a reference member; otherwise it is dropped. The denominator is
    the number of terms actually averaged. Samples with no terms, and
    zero-vector samples, get the placeholder score -1 and a flag.
    """
    ref = _prepare(emb, labels, reference_mask)
    n = emb.n
    order = np.argsort(labels.classes, kind="stable")
    sorted_classes = labels.classes[order]
    blocks = _class_blocks(sorted_classes)

    values = np.empty(n, dtype=np.float64)
    flags = np.empty(n, dtype=bool)

    def run(block: tuple[int, int]) -> None:
        lo, hi = block
        rows = order[lo:hi]
        v = emb.vectors[rows].astype(np.float64)
        w = ref[rows]
        cls = sorted_classes[lo:hi]
        starts = np.flatnonzero(np.r_[True, cls[1:] != cls[:-1]])
        local = np.cumsum(np.r_[False, cls[1:] != cls[:-1]])
        sums = np.add.reduceat(v * w[:, None], starts, axis=0)
        counts = np.add.reduceat(w.astype(np.int64), starts)
        dots = np.einsum("ij,ij->i", v, sums[local])
        count = counts[local].astype(np.float64)
        if not self_inclusion:
            own = np.einsum("ij,ij->i", v, v)
            dots = np.where(w, dots - own, dots)
            count = np.where(w, count - 1.0, count)
        empty = (count <= 0) | emb.zero_rows[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = dots / count
        values[rows] = np.where(empty, PLACEHOLDER, s)
        flags[rows] = empty

    n_threads = threads if threads is not None else default_threads()
    if n_threads <= 1 or len(blocks) == 1:
        for block in blocks:
            run(block)
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run, blocks))
    return ClassScores(values, flags)


def pairwise_scores_bruteforce(
    emb: EmbeddingSet,
    labels: LabelMap,
    reference_mask=None,
    self_inclusion: bool = False,
) -> ClassScores:
    """Literal O(N^2) evaluation of the intra-class mean cosine.

    Computes every same-class cosine from its definition,
    dot / (|a| |b|), and averages the selected terms. Oracle for
    :func:`intra_class_scores`; meant for N up to ~1e4.
    """
    ref = _prepare(emb, labels, reference_mask)
    values = np.full(emb.n, PLACEHOLDER, dtype=np.float64)
    flags = np.ones(emb.n, dtype=bool)
    v = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    for c in np.unique(labels.classes):
        members = np.flatnonzero(labels.classes == c)
        a = v[members]
        with np.errstate(divide="ignore", invalid="ignore"):
            cos = (a @ a.T) / np.outer(norms[members], norms[members])
        take = np.repeat(ref[members][None, :], len(members), axis=0)
        if not self_inclusion:
            np.fill_diagonal(take, False)
        cnt = take.sum(axis=1)
        total = np.where(take, cos, 0.0).sum(axis=1)
        ok = (cnt > 0) & ~emb.zero_rows[members]
        values[members[ok]] = total[ok] / cnt[ok]
        flags[members[ok]] = False
    return ClassScores(values, flags)


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Per-sample (x, y) scores: x from speech, y from face when present."""

    sample_ids: tuple[str, ...]
    speaker_scores: np.ndarray
    face_scores: Optional[np.ndarray]
    speaker_placeholder: np.ndarray
    face_placeholder: Optional[np.ndarray]
    self_inclusion: bool
    mask_id: str

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        if self.speaker_scores.shape != (n,):
            raise CleanseError("speaker_scores length must equal number of sample ids")
        if self.face_scores is not None and self.face_scores.shape != (n,):
            raise CleanseError("face_scores length must equal number of sample ids")

    @property
    def has_face(self) -> bool:
        return self.face_scores is not None

    def flags(self, i: int) -> str:
        f = ""
        if self.speaker_placeholder[i]:
            f += "x"
        if self.face_placeholder is not None and self.face_placeholder[i]:
            f += "y"
        return f or "-"

    def points(self) -> np.ndarray:
        if self.face_scores is None:
            raise ModalityError("score table has no face scores")
        return np.column_stack([self.speaker_scores, self.face_scores])


def build_score_table(
    speech: EmbeddingSet,
    face: Optional[EmbeddingSet],
    labels: LabelMap,
    reference_mask=None,
    self_inclusion: bool = False,
    threads: Optional[int] = None,
) -> ScoreTable:
    if face is not None and face.sample_ids != speech.sample_ids:
        for a, b in zip(speech.sample_ids, face.sample_ids):
            if a != b:
                raise ModalityError(f"speech and face sample ids differ: first mismatch {a!r} vs {b!r}")
        raise ModalityError(f"speech has {speech.n} samples but face has {face.n}")
    x = intra_class_scores(speech, labels, reference_mask, self_inclusion, threads)
    y = intra_class_scores(face, labels, reference_mask, self_inclusion, threads) if face is not None else None
    ref = None if reference_mask is None else as_mask(reference_mask, speech.n)
    return ScoreTable(
        speech.sample_ids,
        x.values,
        None if y is None else y.values,
        x.placeholder,
        None if y is None else y.placeholder,
        self_inclusion,
        mask_id(ref),
    )


def write_score_table(table: ScoreTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\tx\ty\tflags\n")
        for i, sid in enumerate(table.sample_ids):
            y = "" if table.face_scores is None else f"{table.face_scores[i]:.6f}"
            fh.write(f"{sid}\t{table.speaker_scores[i]:.6f}\t{y}\t{table.flags(i)}\n")


def read_score_table(path: str | Path, self_inclusion: bool = False, mask: str = "unknown") -> ScoreTable:
    ids: list[str] = []
    xs: list[float] = []
    ys: list[Optional[float]] = []
    fx: list[bool] = []
    fy: list[bool] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["sample_id", "x", "y", "flags"]:
            raise FormatError(f"{path}: expected header 'sample_id<TAB>x<TAB>y<TAB>flags'")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns")
            try:
                ids.append(parts[0])
                xs.append(float(parts[1]))
                ys.append(float(parts[2]) if parts[2] else None)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            fx.append("x" in parts[3])
            fy.append("y" in parts[3])
    if not ids:
        raise FormatError(f"{path}: no rows")
    has_y = [y is not None for y in ys]
    if any(has_y) and not all(has_y):
        raise FormatError(f"{path}: y column must be filled for all rows or none")
    face = np.array(ys, dtype=np.float64) if all(has_y) else None
    return ScoreTable(
        tuple(ids),
        np.array(xs, dtype=np.float64),
        face,
        np.array(fx, dtype=bool),
        np.array(fy, dtype=bool) if face is not None else None,
        self_inclusion,
        mask,
    )


def trial_cosines(a: EmbeddingSet, idx_a: Sequence[int], idx_b: Sequence[int]) -> np.ndarray:
    """Cosine between rows ``idx_a[t]`` and ``idx_b[t]`` of a normalized set."""
    check_normalized(a)
    va = a.vectors[np.asarray(idx_a, dtype=np.int64)].astype(np.float64)
    vb = a.vectors[np.asarray(idx_b, dtype=np.int64)].astype(np.float64)
    return np.einsum("ij,ij->i", va, vb)
