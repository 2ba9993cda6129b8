"""Synthetic audio-visual identity data with known label noise.

Each class owns one unit prototype per modality. A sample is
``normalize(prototype + concentration * N(0, I))``. A mislabeled sample is
drawn around another class's prototypes but carries the victim class's
label. All randomness comes from one ``numpy.random.Generator`` over the
PCG64 bit generator, consumed in a fixed order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .boundary import TrialSet, write_trials
from .embed_store import EmbeddingSet, LabelMap, Modality, l2_normalize, write_embeddings, write_labels
from .errors import CleanseError

GENERATOR = "numpy.random.Generator(PCG64)"

# Per-coordinate perturbation std giving a mean intra-class cosine of 0.70
# at d = 64; produced by scripts/calibrate_concentration.py.
CALIBRATED_CONCENTRATION = 0.0822


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 200
    samples_per_class: int = 50
    dim_speech: int = 64
    dim_face: int = 64
    concentration_speech: float = CALIBRATED_CONCENTRATION
    concentration_face: float = CALIBRATED_CONCENTRATION
    noise_rate: float = 0.019
    modality_consistency: bool = True
    trials_per_label: int = 2000
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise CleanseError("n_classes and samples_per_class must be >= 1")
        if self.dim_speech < 1 or self.dim_face < 1:
            raise CleanseError("embedding dimensions must be >= 1")
        if not (self.concentration_speech > 0 and self.concentration_face > 0):
            raise CleanseError("concentration must be > 0")
        if not 0.0 <= self.noise_rate < 1.0:
            raise CleanseError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.n_noisy > 0 and self.n_classes < 2:
            raise CleanseError("label noise needs at least 2 classes")
        if self.trials_per_label < 0:
            raise CleanseError("trials_per_label must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise CleanseError("seed must be a 64-bit unsigned integer")

    @property
    def n_samples(self) -> int:
        return self.n_classes * self.samples_per_class

    @property
    def n_noisy(self) -> int:
        return int(math.floor(self.noise_rate * self.n_samples + 0.5))


@dataclass(frozen=True, eq=False)
class SynthDataset:
    config: SynthConfig
    speech: EmbeddingSet
    face: EmbeddingSet
    labels: LabelMap
    noisy_ids: frozenset
    trials: TrialSet
    true_class: np.ndarray  # 0-based class each sample was drawn from (speech)

    @property
    def is_noisy(self) -> np.ndarray:
        return np.array([s in self.noisy_ids for s in self.speech.sample_ids], dtype=bool)


def _unit_rows(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    p = rng.standard_normal((k, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _other_class(rng: np.random.Generator, k: int, exclude: int) -> int:
    c = int(rng.integers(0, k - 1))
    return c + 1 if c >= exclude else c


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    k, m = config.n_classes, config.samples_per_class
    n = config.n_samples

    proto_s = _unit_rows(rng, k, config.dim_speech)
    proto_f = _unit_rows(rng, k, config.dim_face)

    label = np.repeat(np.arange(k), m)
    src_s = label.copy()
    src_f = label.copy()
    noisy = np.zeros(n, dtype=bool)

    # victims without replacement first, then among classes with free slots
    free = np.full(k, m)
    victims = list(rng.permutation(k)[: config.n_noisy])
    while len(victims) < config.n_noisy:
        open_classes = np.flatnonzero(free - np.bincount(victims, minlength=k) > 0)
        victims.append(int(open_classes[rng.integers(0, len(open_classes))]))
    for v in victims:
        v = int(v)
        slots = np.flatnonzero(~noisy[v * m : (v + 1) * m])
        i = v * m + int(slots[rng.integers(0, len(slots))])
        noisy[i] = True
        src_s[i] = _other_class(rng, k, v)
        src_f[i] = src_s[i] if config.modality_consistency else _other_class(rng, k, v)

    speech = proto_s[src_s] + config.concentration_speech * rng.standard_normal((n, config.dim_speech))
    face = proto_f[src_f] + config.concentration_face * rng.standard_normal((n, config.dim_face))

    ids = tuple(f"s{i:06d}" for i in range(n))
    speech_set = l2_normalize(EmbeddingSet(Modality.SPEECH, ids, speech.astype(np.float32)))
    face_set = l2_normalize(EmbeddingSet(Modality.FACE, ids, face.astype(np.float32)))
    labels = LabelMap.from_raw(ids, (str(c + 1) for c in label))

    trials = _validation_trials(rng, label, noisy, ids, config.trials_per_label)
    return SynthDataset(
        config, speech_set, face_set, labels,
        frozenset(s for s, z in zip(ids, noisy) if z), trials, src_s,
    )


def _validation_trials(rng, label, noisy, ids, per_label: int) -> TrialSet:
    """Target and imposter pairs drawn from correctly labeled samples only."""
    clean_by_class = [np.flatnonzero((label == c) & ~noisy) for c in range(label.max() + 1)]
    eligible = np.array([c for c, mem in enumerate(clean_by_class) if len(mem) >= 2])
    populated = np.array([c for c, mem in enumerate(clean_by_class) if len(mem) >= 1])
    a, b, lab = [], [], []
    if per_label and len(eligible):
        for _ in range(per_label):
            c = eligible[rng.integers(0, len(eligible))]
            i, j = rng.choice(clean_by_class[c], size=2, replace=False)
            a.append(ids[i]); b.append(ids[j]); lab.append(True)
    if per_label and len(populated) >= 2:
        for _ in range(per_label):
            c1, c2 = rng.choice(populated, size=2, replace=False)
            i = clean_by_class[c1][rng.integers(0, len(clean_by_class[c1]))]
            j = clean_by_class[c2][rng.integers(0, len(clean_by_class[c2]))]
            a.append(ids[i]); b.append(ids[j]); lab.append(False)
    return TrialSet(tuple(a), tuple(b), np.array(lab, dtype=bool))


def write_dataset(ds: SynthDataset, out_dir: str | Path) -> dict[str, Path]:
    """Write AVCE embeddings, labels, ground truth, trials and a config sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "speech": out / "speech.avce",
        "face": out / "face.avce",
        "labels": out / "labels.tsv",
        "ground_truth": out / "ground_truth.tsv",
        "trials": out / "trials.tsv",
        "config": out / "synth.json",
    }
    write_embeddings(ds.speech, paths["speech"])
    write_embeddings(ds.face, paths["face"])
    write_labels(ds.labels, paths["labels"])
    with open(paths["ground_truth"], "w", encoding="utf-8", newline="\n") as fh:
        for sid, z in zip(ds.speech.sample_ids, ds.is_noisy):
            fh.write(f"{sid}\t{int(z)}\n")
    write_trials(ds.trials, paths["trials"])
    meta = {
        "config": asdict(ds.config),
        "generator": GENERATOR,
        "n_samples": ds.config.n_samples,
        "n_noisy": len(ds.noisy_ids),
        "n_target_trials": ds.trials.n_target,
        "n_imposter_trials": ds.trials.n_imposter,
    }
    paths["config"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_ground_truth(path: str | Path) -> frozenset:
    noisy = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise CleanseError(f"{path}:{lineno}: expected 'sample_id<TAB>0|1'")
            if parts[1] == "1":
                noisy.add(parts[0])
    return frozenset(noisy)
