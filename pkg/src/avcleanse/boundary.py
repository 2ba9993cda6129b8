"""Linear soft-margin SVM over (speaker score, face score) trial pairs.

Features are standardized on the training trials, then

    minimize  1/2 |w|^2 + (C / n) * sum_i max(0, 1 - y_i (w . z_i + b))

is solved in the dual by SMO with second-order working-set selection
(Fan, Chen & Lin, 2005). The per-trial weight C / n makes the solution
independent of dataset duplication. Training stops once the primal/dual
gap, with the primal evaluated at the exactly optimal bias for the
current w, drops below ``tol`` relative to the objective, or stops
shrinking once it is under 1e-6.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embed_store import EmbeddingSet, check_normalized
from .errors import CleanseError, FormatError, ModalityError

log = logging.getLogger(__name__)

DEFAULT_C = 1.0
DEFAULT_TOL = 1e-12  # relative to the objective
CONTRACT_GAP = 1e-6
MIN_EPS = 1e-12
MAX_ITER = 2_000_000
NEWTON_EVERY = 50
NEWTON_MAX_FREE = 256


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Verification trials; ``labels`` is True for target, False for imposter."""

    sample_a: tuple[str, ...]
    sample_b: tuple[str, ...]
    labels: np.ndarray
    scores: Optional[np.ndarray] = None  # (n, 2): speech cosine, face cosine

    def __post_init__(self) -> None:
        object.__setattr__(self, "sample_a", tuple(self.sample_a))
        object.__setattr__(self, "sample_b", tuple(self.sample_b))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=bool))
        n = len(self.sample_a)
        if len(self.sample_b) != n or self.labels.shape != (n,):
            raise CleanseError("trial columns must have equal length")
        if self.scores is not None:
            s = np.asarray(self.scores, dtype=np.float64)
            if s.shape != (n, 2):
                raise CleanseError(f"trial scores must be ({n}, 2), got {s.shape}")
            object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.sample_a)

    @property
    def n_target(self) -> int:
        return int(self.labels.sum())

    @property
    def n_imposter(self) -> int:
        return int((~self.labels).sum())

    def resolve(self, emb: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of both trial sides in ``emb``."""
        pos = emb.index_of()
        try:
            ia = np.array([pos[s] for s in self.sample_a], dtype=np.int64)
            ib = np.array([pos[s] for s in self.sample_b], dtype=np.int64)
        except KeyError as exc:
            raise CleanseError(f"trial references unknown sample id {exc.args[0]!r}") from None
        return ia, ib


def read_trials(path: str | Path) -> TrialSet:
    a, b, lab = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in ("0", "1") or not parts[1] or not parts[2]:
                raise FormatError(f"{path}:{lineno}: expected 'label<TAB>sample_id_a<TAB>sample_id_b' with label 0 or 1")
            lab.append(parts[0] == "1")
            a.append(parts[1])
            b.append(parts[2])
    if not lab:
        raise FormatError(f"{path}: no trials")
    return TrialSet(tuple(a), tuple(b), np.array(lab, dtype=bool))


def write_trials(trials: TrialSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, t in zip(trials.sample_a, trials.sample_b, trials.labels):
            fh.write(f"{int(t)}\t{a}\t{b}\n")


def score_trials(trials: TrialSet, speech: EmbeddingSet, face: EmbeddingSet) -> TrialSet:
    """Attach (speech cosine, face cosine) to every trial."""
    check_normalized(speech, "speech embeddings")
    check_normalized(face, "face embeddings")
    if face.sample_ids != speech.sample_ids:
        raise ModalityError("speech and face embedding sets must share sample ids and order")
    ia, ib = trials.resolve(speech)
    xs = np.einsum("ij,ij->i", speech.vectors[ia].astype(np.float64), speech.vectors[ib].astype(np.float64))
    ys = np.einsum("ij,ij->i", face.vectors[ia].astype(np.float64), face.vectors[ib].astype(np.float64))
    return replace(trials, scores=np.column_stack([xs, ys]))


@dataclass(frozen=True, eq=False)
class BoundaryModel:
    """decision(p) = w . (p - means) / stds + b; positive means target/clean."""

    weights: np.ndarray
    bias: float
    means: np.ndarray
    stds: np.ndarray
    C: float = DEFAULT_C
    kernel: str = "linear"
    objective: Optional[float] = None
    duality_gap: Optional[float] = None
    n_train: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("weights", "means", "stds"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.kernel != "linear":
            raise CleanseError(f"unsupported kernel {self.kernel!r}")
        if np.any(self.stds <= 0):
            raise CleanseError("standardization stds must be positive")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def standardize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.means) / self.stds

    def decision(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if p.shape[1] != self.dim:
            raise ModalityError(f"model expects {self.dim}-D points, got {p.shape[1]}-D")
        return self.standardize(p) @ self.weights + self.bias

    def raw_line(self) -> tuple[float, float, float]:
        """(a, c, d) with the boundary a*x + c*y + d = 0 in raw score space."""
        a, c = self.weights / self.stds
        d = self.bias - float(self.weights @ (self.means / self.stds))
        return float(a), float(c), float(d)

    def to_dict(self) -> dict:
        out = {
            "w": [float(v) for v in self.weights],
            "b": float(self.bias),
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "C": float(self.C),
            "kernel": self.kernel,
        }
        if self.objective is not None:
            out["objective"] = float(self.objective)
        if self.duality_gap is not None:
            out["duality_gap"] = float(self.duality_gap)
        if self.n_train is not None:
            out["n_train"] = int(self.n_train)
        return out

    @property
    def model_id(self) -> str:
        core = {k: v for k, v in self.to_dict().items() if k in ("w", "b", "means", "stds", "C", "kernel")}
        blob = json.dumps(core, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "BoundaryModel":
        try:
            return cls(
                np.array(d["w"], dtype=np.float64),
                float(d["b"]),
                np.array(d["means"], dtype=np.float64),
                np.array(d["stds"], dtype=np.float64),
                float(d.get("C", DEFAULT_C)),
                d.get("kernel", "linear"),
                d.get("objective"),
                d.get("duality_gap"),
                d.get("n_train"),
            )
        except KeyError as exc:
            raise FormatError(f"boundary model is missing field {exc.args[0]!r}") from None


def save_model(model: BoundaryModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> BoundaryModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return BoundaryModel.from_dict(data)


def hinge_objective(w: np.ndarray, b: float, z: np.ndarray, y: np.ndarray, C: float) -> float:
    """Primal objective in standardized space; ``y`` in {-1, +1}."""
    margins = y * (z @ w + b)
    return 0.5 * float(w @ w) + C / len(y) * float(np.maximum(0.0, 1.0 - margins).sum())


def optimal_bias(s: np.ndarray, y: np.ndarray) -> float:
    """Exact minimizer over b of sum_i max(0, 1 - y_i (s_i + b)).

    The loss is piecewise linear with kinks at b = y_i - s_i, so its
    minimum is attained at a kink. When it is flat over an interval the
    midpoint is returned.
    """
    bp = y - s
    pos = np.sort(bp[y > 0])
    neg = np.sort(bp[y < 0])
    pos_suffix = np.r_[np.cumsum(pos[::-1])[::-1], 0.0]
    neg_prefix = np.r_[0.0, np.cumsum(neg)]
    cand = np.unique(bp)
    # positives with kink > b contribute (kink - b); negatives with kink < b contribute (b - kink)
    ip = np.searchsorted(pos, cand, side="right")
    n_pos_above = len(pos) - ip
    inn = np.searchsorted(neg, cand, side="left")
    loss = (pos_suffix[ip] - cand * n_pos_above) + (cand * inn - neg_prefix[inn])
    best = loss.min()
    tied = cand[loss <= best + 1e-12 * max(1.0, abs(best))]
    return float(0.5 * (tied[0] + tied[-1]))


def _smo(z: np.ndarray, y: np.ndarray, cbox: float, alpha: np.ndarray, eps: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Run SMO until the maximal KKT violation is below ``eps``; updates alpha in place."""
    w = (alpha * y) @ z
    sq = np.einsum("ij,ij->i", z, z)
    pos = y > 0
    it = 0
    while it < max_iter:
        grad = y * (z @ w) - 1.0
        neg_yg = -y * grad
        up = np.where(pos, alpha < cbox, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < cbox)
        if not up.any() or not low.any():
            break
        cand_up = np.where(up, neg_yg, -np.inf)
        i = int(np.argmax(cand_up))
        m_up = cand_up[i]
        m_low = np.min(np.where(low, neg_yg, np.inf))
        if m_up - m_low < eps:
            break
        b_it = m_up - neg_yg
        a_it = sq[i] + sq - 2.0 * (z @ z[i])
        a_it = np.where(a_it > 0, a_it, 1e-12)
        sel = low & (b_it > 0)
        gain = np.where(sel, -(b_it * b_it) / a_it, np.inf)
        j = int(np.argmin(gain))
        t = b_it[j] / a_it[j]
        t = min(t, cbox - alpha[i] if pos[i] else alpha[i])
        t = min(t, alpha[j] if pos[j] else cbox - alpha[j])
        if not t > 0.0:
            break
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        for k in (i, j):
            if alpha[k] < 0.0:
                alpha[k] = 0.0
            elif alpha[k] > cbox:
                alpha[k] = cbox
        w = (alpha * y) @ z
        it += 1
        if it % NEWTON_EVERY == 0:
            w = _newton_step(z, y, cbox, alpha, w)
    return w, it


def _restore_balance(y: np.ndarray, cbox: float, alpha: np.ndarray, idx: np.ndarray) -> None:
    """Remove round-off drift from y . alpha = 0 using the strictly interior entries of ``idx``."""
    inner = idx[(alpha[idx] > 0.0) & (alpha[idx] < cbox)]
    if len(inner):
        alpha[inner] = np.clip(alpha[inner] - y[inner] * float(alpha @ y) / len(inner), 0.0, cbox)


def _newton_step(z: np.ndarray, y: np.ndarray, cbox: float, alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact steps on the free dual variables, clipped to the box.

    Pairwise updates zigzag for a long time when a few support vectors sit
    almost on the margin; a step in the span of all free variables removes
    that. Where the restricted dual is flat in curvature (more free
    variables than feature dimensions) the step follows the linear descent
    direction to the box; otherwise it is the Newton step. Repeated while
    each step pins another variable to a bound.
    """
    for _ in range(NEWTON_MAX_FREE):
        free = np.flatnonzero((alpha > 0.0) & (alpha < cbox))
        m = len(free)
        if not 2 <= m <= NEWTON_MAX_FREE:
            return w
        yf = y[free]
        yz = yf[:, None] * z[free]
        g = yf * (z[free] @ w) - 1.0
        _, sv, vt = np.linalg.svd(np.vstack([yz.T, yf]), full_matrices=True)
        null = vt[int(np.sum(sv > 1e-12 * sv[0])):]
        g_null = null.T @ (null @ g)
        if np.linalg.norm(g_null) > 1e-9 * max(1.0, np.linalg.norm(g)):
            step, flat = -g_null, True
        else:
            kkt = np.zeros((m + 1, m + 1))
            kkt[:m, :m] = yz @ yz.T
            kkt[:m, m] = kkt[m, :m] = yf
            step, flat = np.linalg.lstsq(kkt, np.append(-g, 0.0), rcond=None)[0][:m], False
            step -= yf * (yf @ step) / m
        slope = float(g @ step)
        if not slope < 0.0:
            return w
        curv = float(np.sum((yz.T @ step) ** 2))
        s = -slope / curv if (curv > 0.0 and not flat) else np.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(step > 0, (cbox - alpha[free]) / step, np.where(step < 0, -alpha[free] / step, np.inf))
        hit = int(np.argmin(room))
        s_max = float(room[hit])
        if s >= s_max:
            s = s_max
        if not (np.isfinite(s) and s > 0.0):
            return w
        alpha[free] = np.clip(alpha[free] + s * step, 0.0, cbox)
        if s == s_max:
            alpha[free[hit]] = cbox if step[hit] > 0 else 0.0
        _restore_balance(y, cbox, alpha, free)
        w = (alpha * y) @ z
        if s < s_max:
            return w
    return w

def _solve(z: np.ndarray, y: np.ndarray, C: float, tol: float) -> tuple[np.ndarray, float, float, float]:
    n = len(y)
    cbox = C / n
    alpha = np.zeros(n)
    eps = 1e-3
    total = 0
    prev_gap = np.inf
    while True:
        w, it = _smo(z, y, cbox, alpha, eps, MAX_ITER - total)
        total += it
        b = optimal_bias(z @ w, y)
        primal = hinge_objective(w, b, z, y, C)
        dual = float(alpha.sum()) - 0.5 * float(w @ w)
        gap = primal - dual
        if gap <= tol * max(1.0, abs(primal)):
            break
        # round-off floor: tightening eps no longer shrinks the gap
        if gap <= CONTRACT_GAP and gap >= 0.5 * prev_gap:
            break
        if eps <= MIN_EPS or total >= MAX_ITER:
            break
        prev_gap = gap
        eps /= 10.0
    if gap > CONTRACT_GAP:
        log.warning("SVM stopped with duality gap %.3g above %.3g", gap, CONTRACT_GAP)
    log.debug("SVM solved: %d SMO steps, objective %.12g, gap %.3g", total, primal, gap)
    return w, b, primal, gap


def train_boundary(trials: TrialSet, C: float = DEFAULT_C, tol: float = DEFAULT_TOL) -> BoundaryModel:
    """Fit the linear boundary on scored trials (targets positive)."""
    if trials.scores is None:
        raise CleanseError("trials must be scored before training (see score_trials)")
    if C <= 0:
        raise CleanseError(f"C must be positive, got {C}")
    if trials.n_target == 0 or trials.n_imposter == 0:
        raise CleanseError("training needs at least one target and one imposter trial")
    x = trials.scores
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    if np.any(~(stds > 0)):
        bad = [name for name, s in zip(("speech", "face"), stds) if not s > 0]
        raise CleanseError(f"zero-variance feature(s) in training trials: {', '.join(bad)}")
    z = (x - means) / stds
    y = np.where(trials.labels, 1.0, -1.0)
    w, b, primal, gap = _solve(z, y, C, tol)
    return BoundaryModel(w, b, means, stds, C, "linear", primal, gap, len(y))


def predict(model: BoundaryModel, point: Sequence[float]) -> tuple[bool, float]:
    """(is_target, signed margin); a margin of exactly zero counts as target."""
    margin = float(model.decision(np.asarray(point, dtype=np.float64))[0])
    return margin >= 0.0, margin
