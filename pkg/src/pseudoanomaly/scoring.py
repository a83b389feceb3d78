"""Reconstruction-error scores, AUROC, Tukey fences and benchmark aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


class ScoringError(ValueError):
    pass


class AggregationError(ValueError):
    pass


def anomaly_score(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Euclidean norm of the reconstruction error over all elements of one example."""
    if x.shape != x_hat.shape:
        raise ScoringError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return float(torch.linalg.vector_norm((x - x_hat).reshape(-1).double()))


def batch_scores(x: torch.Tensor, x_hat: torch.Tensor) -> np.ndarray:
    if x.shape != x_hat.shape:
        raise ScoringError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat).reshape(x.shape[0], -1).double()
    return torch.linalg.vector_norm(diff, dim=1).numpy()


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of P(anomaly score > normal score), ties counted 0.5.

    Computed from average ranks: (R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-d and of equal length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both normal and anomalous labels")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class TukeyResult:
    kept: list[float]
    removed: list[float]
    q1: float
    q3: float
    iqr: float

    @property
    def fences(self) -> tuple[float, float]:
        return self.q1 - 1.5 * self.iqr, self.q3 + 1.5 * self.iqr

    def summary(self) -> dict:
        lo, hi = self.fences
        return {
            "q1": self.q1,
            "median": float(np.median(self.kept)) if self.kept else float("nan"),
            "q3": self.q3,
            "iqr": self.iqr,
            "lower_fence": lo,
            "upper_fence": hi,
            "kept": len(self.kept),
            "removed": len(self.removed),
            "kept_min": min(self.kept) if self.kept else float("nan"),
            "kept_max": max(self.kept) if self.kept else float("nan"),
        }


def tukey_filter(scores: Sequence[float], k: float = 1.5) -> TukeyResult:
    """Split scores by the closed interval [Q1 - k IQR, Q3 + k IQR].

    Quartiles interpolate linearly between order statistics at (n - 1) p.
    Input order is preserved within ``kept`` and ``removed``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise MetricError("tukey_filter needs at least one score")
    q1, q3 = np.quantile(s, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    inside = (s >= q1 - k * iqr) & (s <= q3 + k * iqr)
    return TukeyResult(s[inside].tolist(), s[~inside].tolist(), float(q1), float(q3), float(iqr))


# Reports ###################################################################################


@dataclass
class ScoreReport:
    ids: list[str]
    scores: list[float]
    labels: list[int]
    auroc: float
    tukey: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, ids, scores, labels, meta=None) -> "ScoreReport":
        scores = [float(s) for s in scores]
        labels = [int(y) for y in labels]
        arr, lab = np.asarray(scores), np.asarray(labels)
        tukey = {}
        for name, value in (("normal", 0), ("anomalous", 1)):
            if (lab == value).any():
                tukey[name] = tukey_filter(arr[lab == value]).summary()
        return cls(list(ids), scores, labels, auroc(scores, labels), tukey, dict(meta or {}))

    def to_json(self) -> dict:
        return {
            "auroc": self.auroc,
            "tukey": self.tukey,
            "meta": self.meta,
            "examples": [{"id": i, "score": s, "label": y} for i, s, y in zip(self.ids, self.scores, self.labels)],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ScoreReport":
        ex = d["examples"]
        return cls([e["id"] for e in ex], [e["score"] for e in ex], [e["label"] for e in ex],
                   d["auroc"], d.get("tukey", {}), d.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "score", "label"])
        for row in zip(self.ids, self.scores, self.labels):
            w.writerow([row[0], repr(row[1]), row[2]])
        return buf.getvalue()

    def save(self, directory, stem: str = "scores") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath, cpath = directory / f"{stem}.json", directory / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=1))
        cpath.write_text(self.to_csv())
        return jpath, cpath


@torch.no_grad()
def reconstruct_scores(generator: torch.nn.Module, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    """Evaluation-mode anomaly scores for a stack of images, in fixed-size chunks."""
    was_training = generator.training
    generator.eval()
    try:
        out = [batch_scores(images[i:i + chunk], generator(images[i:i + chunk])) for i in range(0, len(images), chunk)]
    finally:
        generator.train(was_training)
    return np.concatenate(out) if out else np.empty(0)


def score_model(generator: torch.nn.Module, corpus, test_examples, image_size: int, chunk: int = 256,
                meta=None) -> ScoreReport:
    """Score ``test_examples`` ((id, y) pairs) with a trained generator."""
    spec = getattr(generator, "spec", None)
    if spec is not None:
        if spec.in_channels != corpus.channels:
            raise ScoringError(f"generator expects {spec.in_channels} channels, corpus has {corpus.channels}")
        if image_size % (2 ** spec.depth):
            raise ScoringError(f"image size {image_size} incompatible with generator depth {spec.depth}")
    ids = [i for i, _ in test_examples]
    labels = [y for _, y in test_examples]
    scores = []
    for start in range(0, len(ids), chunk):
        scores.append(reconstruct_scores(generator, corpus.images(ids[start:start + chunk], image_size), chunk))
    return ScoreReport.build(ids, np.concatenate(scores), labels, meta)


# Benchmark tables ##########################################################################


def population_sd(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(math.sqrt(np.mean((v - v.mean()) ** 2)))


@dataclass
class BenchmarkTable:
    rows: list[tuple[int, float]]
    avg: float
    sd: float
    seeds: list[int]
    title: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "mean_auroc"])
        for c, v in self.rows:
            w.writerow([c, repr(v)])
        w.writerow(["avg", repr(self.avg)])
        w.writerow(["sd", repr(self.sd)])
        return buf.getvalue()

    def to_text(self, percent: bool = True) -> str:
        scale = 100.0 if percent else 1.0
        header = [str(c) for c, _ in self.rows] + ["avg", "SD"]
        values = [f"{v * scale:.1f}" for _, v in self.rows] + [f"{self.avg * scale:.1f}", f"{self.sd * scale:.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, values)]
        line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        out = [self.title] if self.title else []
        out += [line(header), "-+-".join("-" * w for w in widths), line(values)]
        return "\n".join(out) + "\n"

    def to_json(self) -> dict:
        return {"title": self.title, "rows": [[c, v] for c, v in self.rows], "avg": self.avg, "sd": self.sd,
                "seeds": self.seeds, "sd_convention": "population"}


def aggregate_benchmark(results: Mapping[int, Mapping[int, float]], title: str = "") -> BenchmarkTable:
    """``results[class][seed] = auroc`` to a table of per-class seed means with avg / SD footer."""
    if not results:
        raise AggregationError("no results to aggregate")
    seed_sets = {c: set(per_seed) for c, per_seed in results.items()}
    reference = set().union(*seed_sets.values())
    gaps = {c: sorted(reference - s) for c, s in seed_sets.items() if s != reference}
    if gaps:
        raise AggregationError(f"ragged seed sets; missing seeds per class: {gaps}")
    rows = [(int(c), float(np.mean([results[c][s] for s in sorted(reference)]))) for c in results]
    means = [v for _, v in rows]
    return BenchmarkTable(rows, float(np.mean(means)), population_sd(means), sorted(reference), title)
