"""Two-step cleansing: quantile split into easy/peculiar, then SVM clean/noisy.

Round 1 scores speech against every class member, keeps the top
``keep_fraction`` as easy samples, and classifies every sample's (x, y)
scores computed against the easy set. Each later round recomputes (x, y)
against the previous round's clean set and reclassifies. The loop ends
after ``rounds`` rounds or as soon as the clean set stops changing.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .boundary import BoundaryModel
from .embed_store import EmbeddingSet, LabelMap
from .errors import CleanseError, ModalityError
from .similarity import ScoreTable, as_mask, build_score_table, intra_class_scores, mask_id

log = logging.getLogger(__name__)

DEFAULT_KEEP_FRACTION = 0.92
DEFAULT_ROUNDS = 5
REPORT_VERSION = 1


class Scope(str, enum.Enum):
    ALL_SAMPLES = "all_samples"
    PECULIAR_ONLY = "peculiar_only"


def easy_count(n: int, keep_fraction: float) -> int:
    """round(keep_fraction * n), halves rounded up."""
    return int(math.floor(keep_fraction * n + 0.5))


@dataclass(frozen=True, eq=False)
class CoarsePartition:
    tau: float
    easy: np.ndarray  # bool mask
    keep_fraction: float

    @property
    def peculiar(self) -> np.ndarray:
        return ~self.easy

    @property
    def easy_indices(self) -> np.ndarray:
        return np.flatnonzero(self.easy)

    @property
    def peculiar_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.easy)


def coarse_partition(scores, keep_fraction: float = DEFAULT_KEEP_FRACTION,
                     placeholder: Optional[np.ndarray] = None) -> CoarsePartition:
    """Mark exactly round(keep_fraction * N) top-scoring samples as easy.

    Ranking is by score descending, then sample index ascending.
    Placeholder-scored samples rank after every real score, so they are
    peculiar unless the easy quota cannot be met without them. ``tau`` is
    the lowest easy score (+inf when no sample is easy).
    """
    x = np.asarray(scores, dtype=np.float64)
    n = x.shape[0] if x.ndim == 1 else 0
    if n == 0:
        raise CleanseError("cannot partition an empty score vector")
    if not 0.0 < keep_fraction < 1.0:
        raise CleanseError(f"keep_fraction must lie in (0, 1), got {keep_fraction}")
    if not np.all(np.isfinite(x)):
        raise CleanseError("scores must be finite")
    ph = np.zeros(n, dtype=bool) if placeholder is None else np.asarray(placeholder, dtype=bool)
    order = np.lexsort((np.arange(n), -x, ph))
    k = easy_count(n, keep_fraction)
    easy = np.zeros(n, dtype=bool)
    easy[order[:k]] = True
    tau = float(x[order[k - 1]]) if k > 0 else math.inf
    return CoarsePartition(tau, easy, keep_fraction)


@dataclass(frozen=True, eq=False)
class FineDecision:
    clean: np.ndarray   # bool
    margin: np.ndarray  # signed decision value per sample


def fine_cleanse(table: ScoreTable, model: BoundaryModel, scope: Scope | str = Scope.ALL_SAMPLES,
                 coarse: Optional[CoarsePartition] = None) -> FineDecision:
    """Clean iff the boundary puts (x_i, y_i) on the target side.

    With ``scope=peculiar_only`` easy samples are clean regardless of the
    model and only peculiar samples are classified.
    """
    scope = Scope(scope)
    if model.dim == 2 and not table.has_face:
        raise ModalityError("the boundary model is 2-D (speech, face): face scores are required")
    points = table.points() if model.dim == 2 else table.speaker_scores[:, None]
    margin = model.decision(points)
    clean = margin >= 0.0
    if scope is Scope.PECULIAR_ONLY:
        if coarse is None:
            raise CleanseError("scope peculiar_only needs the coarse partition")
        clean = clean | coarse.easy
    return FineDecision(clean, margin)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    reference: np.ndarray  # bool mask used as class members
    table: ScoreTable
    decision: FineDecision


@dataclass(eq=False)
class CleansingReport:
    sample_ids: tuple[str, ...]
    labels: LabelMap
    config: dict
    coarse_scores: np.ndarray
    coarse: CoarsePartition
    rounds: list[RoundRecord] = field(default_factory=list)
    stop_reason: str = "round_budget"

    @property
    def final_clean_mask(self) -> np.ndarray:
        return self.rounds[-1].decision.clean

    @property
    def final_clean(self) -> tuple[str, ...]:
        m = self.final_clean_mask
        return tuple(s for s, c in zip(self.sample_ids, m) if c)

    @property
    def final_noisy(self) -> tuple[str, ...]:
        m = self.final_clean_mask
        return tuple(s for s, c in zip(self.sample_ids, m) if not c)

    def to_dict(self) -> dict:
        ids = self.sample_ids
        coarse = {
            "tau": self.coarse.tau if math.isfinite(self.coarse.tau) else None,
            "keep_fraction": self.coarse.keep_fraction,
            "n_easy": int(self.coarse.easy.sum()),
            "samples": [
                {"sample_id": s, "x": float(x), "partition": "easy" if e else "peculiar"}
                for s, x, e in zip(ids, self.coarse_scores, self.coarse.easy)
            ],
        }
        rounds = []
        for rec in self.rounds:
            t = rec.table
            rounds.append({
                "round": rec.round,
                "reference_mask_id": t.mask_id,
                "n_reference": int(rec.reference.sum()),
                "n_clean": int(rec.decision.clean.sum()),
                "samples": [
                    {
                        "sample_id": s,
                        "x": float(t.speaker_scores[i]),
                        "y": float(t.face_scores[i]) if t.face_scores is not None else None,
                        "flags": t.flags(i),
                        "margin": float(rec.decision.margin[i]),
                        "decision": "clean" if rec.decision.clean[i] else "noisy",
                        "in_reference": bool(rec.reference[i]),
                    }
                    for i, s in enumerate(ids)
                ],
            })
        return {
            "report_version": REPORT_VERSION,
            "config": self.config,
            "n_samples": len(ids),
            "classes": list(self.labels.original_ids),
            "coarse": coarse,
            "rounds": rounds,
            "stop_reason": self.stop_reason,
            "final": {"clean": list(self.final_clean), "noisy": list(self.final_noisy)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"


def run_pipeline(
    speech: EmbeddingSet,
    face: EmbeddingSet,
    labels: LabelMap,
    model: BoundaryModel,
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
    rounds: int = DEFAULT_ROUNDS,
    self_inclusion: bool = False,
    scope: Scope | str = Scope.ALL_SAMPLES,
    fine_speech: Optional[EmbeddingSet] = None,
    initial_mask=None,
    threads: Optional[int] = None,
    extra_config: Optional[dict] = None,
) -> CleansingReport:
    """Run coarse partitioning once, then up to ``rounds`` fine rounds.

    ``fine_speech`` replaces ``speech`` for every fine round (e.g. embeddings
    from a network retrained on the easy set). ``initial_mask`` overrides the
    easy set as the round-1 reference.
    """
    scope = Scope(scope)
    if rounds < 1:
        raise CleanseError(f"rounds must be >= 1, got {rounds}")
    if face is None:
        raise ModalityError("fine cleansing needs both speech and face embeddings")
    fine_speech = fine_speech if fine_speech is not None else speech
    for other in (face, fine_speech):
        if other.sample_ids != speech.sample_ids:
            raise ModalityError(f"{other.modality.value} embeddings are not aligned with the speech sample ids")
    labels.check_covers(speech)

    config = {
        "keep_fraction": keep_fraction,
        "rounds": rounds,
        "self_inclusion": self_inclusion,
        "scope": scope.value,
        "C": model.C,
        "boundary_model_id": model.model_id,
        "boundary": model.to_dict(),
        "fine_speech_replaced": fine_speech is not speech,
        "initial_mask": None if initial_mask is None else mask_id(as_mask(initial_mask, speech.n)),
    }
    if extra_config:
        config.update(extra_config)

    x0 = intra_class_scores(speech, labels, None, self_inclusion, threads)
    coarse = coarse_partition(x0.values, keep_fraction, x0.placeholder)
    log.info("coarse: tau=%.4f, %d easy / %d peculiar", coarse.tau, coarse.easy.sum(), (~coarse.easy).sum())
    report = CleansingReport(speech.sample_ids, labels, config, x0.values, coarse)

    reference = coarse.easy.copy() if initial_mask is None else as_mask(initial_mask, speech.n)
    for r in range(1, rounds + 1):
        table = build_score_table(fine_speech, face, labels, reference, self_inclusion, threads)
        decision = fine_cleanse(table, model, scope, coarse)
        report.rounds.append(RoundRecord(r, reference, table, decision))
        n_noisy = int((~decision.clean).sum())
        log.info("round %d: %d clean / %d noisy", r, decision.clean.sum(), n_noisy)
        if r > 1 and np.array_equal(decision.clean, reference):
            report.stop_reason = "fixed_point"
            break
        if not decision.clean.any():
            log.warning("round %d marked every sample noisy; stopping", r)
            report.stop_reason = "empty_clean_set"
            break
        reference = decision.clean.copy()
    return report


def write_manifest(report: CleansingReport, path: str | Path) -> None:
    """TSV ``sample_id<TAB>class_id`` of the final clean samples (original class ids)."""
    clean = report.final_clean_mask
    labels = report.labels
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, c, keep in zip(labels.sample_ids, labels.classes, clean):
            if keep:
                fh.write(f"{sid}\t{labels.original_ids[c - 1]}\n")


def plot_rows(report_dict: dict) -> Iterable[tuple]:
    """(sample_id, x, y, decision, is_easy) from the last round of a report dict."""
    easy = {s["sample_id"]: s["partition"] == "easy" for s in report_dict["coarse"]["samples"]}
    for s in report_dict["rounds"][-1]["samples"]:
        yield s["sample_id"], s["x"], s["y"], s["decision"], easy[s["sample_id"]]


def write_plot_data(report_dict: dict, csv_path: str | Path, line_path: str | Path) -> None:
    """Scatter CSV of the final round plus the boundary line in raw score space."""
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id,x,y,decision,is_easy\n")
        for sid, x, y, dec, is_easy in plot_rows(report_dict):
            ytxt = "" if y is None else f"{y:.6f}"
            fh.write(f"{sid},{x:.6f},{ytxt},{dec},{int(is_easy)}\n")
    model = BoundaryModel.from_dict(report_dict["config"]["boundary"])
    a, c, d = model.raw_line()
    line = {
        "equation": "a*x + c*y + d = 0; target side has a*x + c*y + d > 0",
        "a": a, "c": c, "d": d,
        "boundary_model_id": model.model_id,
    }
    Path(line_path).write_text(json.dumps(line, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def recovery_metrics(flagged_noisy: Iterable[str], true_noisy: Iterable[str]) -> dict:
    """Precision/recall of flagged noisy ids against ground truth."""
    flagged = set(flagged_noisy)
    truth = set(true_noisy)
    hit = len(flagged & truth)
    precision = hit / len(flagged) if flagged else (1.0 if not truth else 0.0)
    recall = hit / len(truth) if truth else 1.0
    return {
        "n_flagged": len(flagged),
        "n_true_noisy": len(truth),
        "true_positives": hit,
        "precision": precision,
        "recall": recall,
    }
