"""Trial scoring, embedding fusion and equal error rate."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .boundary import TrialSet
from .embed_store import UNIT_NORM_TOL, EmbeddingSet, check_normalized
from .errors import CleanseError, ModalityError


class Mode(str, enum.Enum):
    SPEECH = "speech"
    FACE = "face"
    FUSION = "fusion"


@dataclass(frozen=True, eq=False)
class ScoredTrialList:
    scores: np.ndarray
    labels: np.ndarray  # True = target

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=bool)
        if s.ndim != 1 or s.shape != lab.shape:
            raise CleanseError("scores and labels must be 1-D and of equal length")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", lab)

    @property
    def n_target(self) -> int:
        return int(self.labels.sum())

    @property
    def n_imposter(self) -> int:
        return int((~self.labels).sum())


def fuse_embeddings(speech: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Concatenate unit-norm speech and face vectors (rows), without renormalizing.

    The cosine of two fused vectors is the mean of the two modality cosines.
    """
    s = np.asarray(speech, dtype=np.float64)
    f = np.asarray(face, dtype=np.float64)
    for name, part in (("speech", s), ("face", f)):
        norms = np.linalg.norm(np.atleast_2d(part), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise CleanseError(f"{name} embedding is not unit-norm")
    return np.concatenate([s, f], axis=-1)


def compute_eer(trials: ScoredTrialList) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    A trial is accepted when ``score >= threshold``. False rejection and
    false acceptance rates are evaluated at every distinct score (plus
    +inf); where their difference changes sign between two adjacent
    operating points, both rates are linearly interpolated to the crossing.
    """
    if trials.n_target == 0 or trials.n_imposter == 0:
        raise CleanseError("EER needs at least one target and one imposter trial")
    tar = np.sort(trials.scores[trials.labels])
    imp = np.sort(trials.scores[~trials.labels])
    thr = np.r_[np.unique(trials.scores), np.inf]
    frr = np.searchsorted(tar, thr, side="left") / len(tar)
    far = (len(imp) - np.searchsorted(imp, thr, side="left")) / len(imp)
    diff = frr - far
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return float(frr[k]), float(thr[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = frr[k - 1] + lam * (frr[k] - frr[k - 1])
    if np.isfinite(thr[k]):
        t = thr[k - 1] + lam * (thr[k] - thr[k - 1])
    else:
        t = thr[k - 1]
    return float(eer), float(t)


def _pair_cosine(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    dots = np.einsum("ij,ij->i", va, vb)
    norms = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)


def score_trial_list(
    trials: TrialSet,
    speech: Optional[EmbeddingSet],
    face: Optional[EmbeddingSet] = None,
    mode: Mode | str = Mode.SPEECH,
) -> ScoredTrialList:
    mode = Mode(mode)
    if mode is Mode.SPEECH:
        parts = [speech]
    elif mode is Mode.FACE:
        parts = [face]
    else:
        parts = [speech, face]
    if any(p is None for p in parts):
        need = "speech and face" if mode is Mode.FUSION else mode.value
        raise ModalityError(f"mode {mode.value!r} needs {need} embeddings")
    for p in parts:
        check_normalized(p, f"{p.modality.value} embeddings")
    if mode is Mode.FUSION and speech.sample_ids != face.sample_ids:
        raise ModalityError("speech and face embedding sets must share sample ids and order")
    ia, ib = trials.resolve(parts[0])
    if mode is Mode.FUSION:
        whole = np.concatenate([speech.vectors, face.vectors], axis=1).astype(np.float64)
    else:
        whole = parts[0].vectors.astype(np.float64)
    return ScoredTrialList(_pair_cosine(whole[ia], whole[ib]), trials.labels)


def evaluate(
    trials: TrialSet,
    speech: Optional[EmbeddingSet],
    face: Optional[EmbeddingSet] = None,
    mode: Mode | str = Mode.SPEECH,
) -> tuple[float, float, ScoredTrialList]:
    """(eer, threshold, scored trials) for one scoring mode."""
    scored = score_trial_list(trials, speech, face, mode)
    eer, thr = compute_eer(scored)
    return eer, thr, scored


def write_scored(scored: ScoredTrialList, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab, s in zip(scored.labels, scored.scores):
            fh.write(f"{int(lab)}\t{s:.6f}\n")
