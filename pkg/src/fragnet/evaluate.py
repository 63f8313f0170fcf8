"""Identification and retrieval protocols, and fragment evidence heatmaps.

Ties are always broken towards the lower writer index / earlier item, so
every report is deterministic.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import FragmentSpec, UnsupportedOperation, make_grid, word_forward
from .config import NetworkConfig
from .nn import ParameterSet
from .tensor import Tensor


def class_rank(scores: np.ndarray, label: int, higher_is_better: bool = True) -> int:
    """0-based rank of ``label``; equal scores rank the lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    if not higher_is_better:
        s = -s
    target = s[label]
    better = np.count_nonzero(s > target)
    tied_before = np.count_nonzero(s[:label] == target)
    return int(better + tied_before)


def top_k_hit(scores: np.ndarray, label: int, k: int, higher_is_better: bool = True) -> bool:
    return class_rank(scores, label, higher_is_better) < k


def word_identify(word_probs: np.ndarray, label: int) -> int:
    """Rank of the true writer under the word's probabilities (0 = Top-1 hit)."""
    return class_rank(word_probs, label)


@dataclass
class EvalReport:
    top1: float
    top5: float
    n: int
    mode: str = "word"
    mAP: float | None = None
    skipped: int = 0
    per_writer: dict[int, float] = field(default_factory=dict)
    by_length: dict[int, tuple[float, int]] = field(default_factory=dict)

    def metric_lines(self) -> list[str]:
        lines = [f"mode {self.mode}", f"n {self.n}", f"top1 {self.top1:.4f}", f"top5 {self.top5:.4f}"]
        if self.mAP is not None:
            lines += [f"mAP {self.mAP:.6f}", f"skipped {self.skipped}"]
        lines += [f"writer_top1 {w} {v:.4f}" for w, v in sorted(self.per_writer.items())]
        lines += [f"length_top1 {k} {v:.4f} {c}" for k, (v, c) in sorted(self.by_length.items())]
        return lines

    def table(self) -> str:
        head = f"{'mode':<10}{'n':>7}{'Top-1':>9}{'Top-5':>9}"
        row = f"{self.mode:<10}{self.n:>7}{self.top1:>9.2f}{self.top5:>9.2f}"
        if self.mAP is not None:
            head += f"{'mAP':>9}"
            row += f"{self.mAP:>9.4f}"
        out = [head, row]
        if self.per_writer:
            out += ["", f"{'writer':<10}{'Top-1':>9}"]
            out += [f"{w:<10}{v:>9.2f}" for w, v in sorted(self.per_writer.items())]
        if self.by_length:
            out += ["", f"{'length':<10}{'n':>7}{'Top-1':>9}"]
            out += [f"{k:<10}{c:>7}{v:>9.2f}" for k, (v, c) in sorted(self.by_length.items())]
        return "\n".join(out)

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".txt").write_text(self.table() + "\n", encoding="utf-8")
        stem.with_suffix(".metrics").write_text("\n".join(self.metric_lines()) + "\n", encoding="utf-8")


def ranks_report(ranks: Sequence[int], labels: Sequence[int], mode: str,
                 texts: Sequence[str | None] | None = None) -> EvalReport:
    ranks = np.asarray(ranks)
    labels = np.asarray(labels)
    n = len(ranks)
    top1 = 100.0 * np.count_nonzero(ranks < 1) / n if n else 0.0
    top5 = 100.0 * np.count_nonzero(ranks < 5) / n if n else 0.0
    per_writer = {int(w): 100.0 * float(np.mean(ranks[labels == w] < 1)) for w in np.unique(labels)}
    by_length: dict[int, tuple[float, int]] = {}
    if texts is not None and any(t is not None for t in texts):
        groups: dict[int, list[int]] = defaultdict(list)
        for r, t in zip(ranks, texts):
            if t is not None:
                groups[len(t)].append(int(r))
        by_length = {k: (100.0 * float(np.mean(np.asarray(v) < 1)), len(v)) for k, v in groups.items()}
    return EvalReport(top1, top5, n, mode, per_writer=per_writer, by_length=by_length)


def identify_words(word_probs: np.ndarray, labels: Sequence[int],
                   texts: Sequence[str | None] | None = None) -> EvalReport:
    ranks = [word_identify(p, int(y)) for p, y in zip(word_probs, labels)]
    return ranks_report(ranks, labels, "word", texts)


def page_identify(word_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Page evidence: the arithmetic mean of its words' probability vectors."""
    if len(word_probs) == 0:
        raise ValueError("page_identify: page has no words")
    return np.mean(np.asarray(word_probs, dtype=np.float64), axis=0)


def group_pages(word_probs: np.ndarray, labels: Sequence[int], page_ids: Sequence[str]):
    """Page probability vectors and labels, pages in order of first appearance."""
    order: dict[str, list[int]] = {}
    for i, pid in enumerate(page_ids):
        order.setdefault(pid, []).append(i)
    probs, page_labels = [], []
    for pid, idx in order.items():
        owners = {int(labels[i]) for i in idx}
        if len(owners) != 1:
            raise ValueError(f"page {pid!r} mixes writers {sorted(owners)}")
        probs.append(page_identify(word_probs[idx]))
        page_labels.append(owners.pop())
    return np.asarray(probs), np.asarray(page_labels), list(order)


def identify_pages(word_probs: np.ndarray, labels: Sequence[int], page_ids: Sequence[str]) -> EvalReport:
    probs, page_labels, _ = group_pages(word_probs, labels, page_ids)
    ranks = [class_rank(p, int(y)) for p, y in zip(probs, page_labels)]
    return ranks_report(ranks, page_labels, "page")


# ---------------------------------------------------------------------------
# feature space protocols


def pairwise_distance(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class WriterModel:
    writer_id: int
    centroid: np.ndarray
    n_words: int


def build_writer_models(features: np.ndarray, labels: Sequence[int]) -> list[WriterModel]:
    labels = np.asarray(labels)
    return [WriterModel(int(w), np.asarray(features, dtype=np.float64)[labels == w].mean(axis=0),
                        int(np.count_nonzero(labels == w)))
            for w in np.unique(labels)]


def nn_identify(features: np.ndarray, labels: Sequence[int], models: Sequence[WriterModel],
                metric: str = "euclidean", texts: Sequence[str | None] | None = None) -> EvalReport:
    if not models:
        raise ValueError("nn_identify: no writer models")
    features = np.asarray(features, dtype=np.float64)
    models = sorted(models, key=lambda m: m.writer_id)
    ids = [m.writer_id for m in models]
    if features.shape[1] != models[0].centroid.shape[0]:
        raise ValueError(f"feature dimension {features.shape[1]} != model dimension {models[0].centroid.shape[0]}")
    dist = pairwise_distance(features, np.stack([m.centroid for m in models]), metric)
    ranks = []
    for d, y in zip(dist, labels):
        y = int(y)
        ranks.append(class_rank(d, ids.index(y), higher_is_better=False) if y in ids else len(ids))
    return ranks_report(ranks, labels, "nn", texts)


def average_precision(relevant_in_rank_order: Sequence[bool]) -> float:
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise ValueError("average_precision: no relevant items")
    positions = np.flatnonzero(rel) + 1
    return float(np.mean(np.arange(1, total + 1) / positions))


def retrieval_eval(features: np.ndarray, labels: Sequence[int],
                   metric: str = "euclidean") -> EvalReport:
    """Leave-one-out retrieval: every item queries all others.

    Queries with no other item by the same writer are skipped (counted in
    ``skipped``). Top-1 is the share of valid queries whose nearest
    neighbour has the same writer.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    dist = pairwise_distance(features, features, metric)
    aps, hits = [], []
    skipped = 0
    n = len(labels)
    for q in range(n):
        others = np.array([i for i in range(n) if i != q], dtype=np.int64)
        rel = labels[others] == labels[q]
        if not rel.any():
            skipped += 1
            continue
        order = np.argsort(dist[q, others], kind="stable")
        ranked = rel[order]
        aps.append(average_precision(ranked))
        hits.append(bool(ranked[0]))
    valid = len(aps)
    top1 = 100.0 * sum(hits) / valid if valid else 0.0
    mAP = float(np.mean(aps)) if valid else 0.0
    return EvalReport(top1, top1, valid, "retrieval", mAP=mAP, skipped=skipped)


# ---------------------------------------------------------------------------
# inference helpers


def predict(params: ParameterSet, config: NetworkConfig, images: np.ndarray,
            batch_size: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode word probabilities (n x M) and per-fragment probabilities (n x N x M)."""
    words, frags = [], []
    for lo in range(0, len(images), batch_size):
        wp, fp = word_forward(params, config, Tensor(images[lo:lo + batch_size]), "eval")
        words.append(wp)
        frags.append(np.stack(fp, axis=1))
    return np.concatenate(words), np.concatenate(frags)


def word_features(params: ParameterSet, config: NetworkConfig, images: np.ndarray,
                  batch_size: int = 10) -> np.ndarray:
    """Post-softmax word features; their length is the training writer count."""
    return predict(params, config, images, batch_size)[0]


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class Heatmap:
    evidence: np.ndarray  # H x W, coverage-normalised
    best: FragmentSpec
    target: int
    word_evidence: float
    fragment_evidence: np.ndarray
    specs: list[FragmentSpec]
    coverage: np.ndarray  # H x W, number of windows over each pixel

    def spatial_mean(self) -> float:
        """Coverage-weighted mean of the map; equals ``word_evidence``.

        With overlapping windows of uneven coverage a plain pixel mean would
        weight fragments near the border more than central ones.
        """
        return float((self.evidence * self.coverage).sum() / self.coverage.sum())


def coverage_map(specs: Sequence[FragmentSpec], shape: tuple[int, int]) -> np.ndarray:
    cover = np.zeros(shape, dtype=np.float64)
    for s in specs:
        cover[s.x:s.x + s.h, s.y:s.y + s.w] += 1
    return cover


def accumulate_heatmap(fragment_evidence: Sequence[float], specs: Sequence[FragmentSpec],
                       shape: tuple[int, int]) -> np.ndarray:
    """Spread each fragment's value over its window, divide by per-pixel coverage."""
    total = np.zeros(shape, dtype=np.float64)
    for v, s in zip(fragment_evidence, specs):
        total[s.x:s.x + s.h, s.y:s.y + s.w] += v
    cover = coverage_map(specs, shape)
    out = np.zeros(shape, dtype=np.float64)
    np.divide(total, cover, out=out, where=cover > 0)
    return out


def heatmap(params: ParameterSet, config: NetworkConfig, image: np.ndarray,
            target: int | None = None) -> Heatmap:
    """Per-fragment evidence for ``target`` (default: the predicted writer)."""
    if not config.is_fragnet:
        raise UnsupportedOperation("heatmaps need fragments; WordImgNet has none")
    x = np.asarray(image, dtype=np.float32).reshape(1, *config.input_shape)
    word, per_fragment = word_forward(params, config, Tensor(x), "eval")
    if target is None:
        target = int(np.argmax(word[0]))
    if not 0 <= target < config.writer_count:
        raise ValueError(f"class {target} outside [0, {config.writer_count})")
    grid = make_grid(config)
    ev = np.array([float(p[0, target]) for p in per_fragment])
    H, W, _ = config.input_shape
    emap = accumulate_heatmap(ev, grid.specs, (H, W))
    return Heatmap(emap, grid.specs[int(np.argmax(ev))], target, float(word[0, target]), ev,
                   list(grid.specs), coverage_map(grid.specs, (H, W)))


def write_heatmap(hm: Heatmap, png_path: str | Path) -> tuple[Path, Path]:
    from .data import write_png

    png_path = Path(png_path)
    write_png(png_path, np.round(np.clip(hm.evidence, 0, 1) * 255).astype(np.uint8))
    spec_path = png_path.with_suffix(".spec.txt")
    b = hm.best
    spec_path.write_text(
        f"target {hm.target}\nword_evidence {hm.word_evidence:.8f}\n"
        f"spatial_mean {hm.spatial_mean():.8f}\n"
        f"best_fragment {b.x} {b.y} {b.h} {b.w}\n"
        + "".join(f"fragment {s.x} {s.y} {s.h} {s.w} {v:.8f}\n"
                  for s, v in zip(hm.specs, hm.fragment_evidence)),
        encoding="utf-8")
    return png_path, spec_path

