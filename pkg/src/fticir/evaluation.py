"""Retrieval metrics, evaluation datasets, and benchmark suites.

Datasets are triplets (reference image, modification text, target ids) with
an optional subset of visually similar candidates for subset recall and an
optional group label (one per garment category, for instance). The canonical
on-disk form is JSON Lines plus an optional pool file; adapters translate the
native layouts of the common benchmarks into it.

Metrics follow the usual composed-retrieval conventions: recall@K counts a
query as hit when any target appears in the top K; subset recall re-ranks
only the subset members, preserving their original relative order; mAP@K
divides the summed precision at hit positions by min(K, number of targets).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ranking
from .backbone import Backbone
from .errors import ConfigError, DataError
from .inversion import FilterConfig, InversionNetwork
from .retrieval import ImageStore, RetrievalIndex, compose_query_embedding

FASHIONIQ_CATEGORIES = ("dress", "shirt", "toptee")


@dataclass
class EvalTriplet:
    """One evaluation query."""

    reference: str
    modification: str
    targets: tuple[str, ...]
    subset: Optional[tuple[str, ...]] = None
    group: str = ""

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.subset is not None:
            self.subset = tuple(self.subset)
        if not self.reference:
            raise DataError("triplet reference id is empty")
        if not self.modification.strip():
            raise DataError(f"triplet {self.reference!r} has empty modification")
        if not self.targets:
            raise DataError(f"triplet {self.reference!r} has no targets")
        if self.reference in self.targets:
            raise DataError(
                f"triplet reference {self.reference!r} appears in its own targets"
            )
        if self.subset is not None and not self.subset:
            raise DataError(f"triplet {self.reference!r} has an empty subset")


# ----- per-query metrics ---------------------------------------------------


def recall_at_k(ranked_ids: Sequence[str], targets: Sequence[str], k: int) -> float:
    """1.0 when any target sits within the first k ranked ids."""
    if k < 1:
        raise DataError(f"recall cutoff must be >= 1, got {k}")
    target_set = set(targets)
    return 1.0 if any(rid in target_set for rid in ranked_ids[:k]) else 0.0


def subset_recall_at_k(
    ranked_ids: Sequence[str], targets: Sequence[str],
    subset: Sequence[str], k: int,
) -> float:
    """Recall within the subset, keeping the original relative order."""
    if not subset:
        raise DataError("subset recall needs a non-empty subset")
    members = set(subset)
    reranked = [rid for rid in ranked_ids if rid in members]
    return recall_at_k(reranked, targets, k)


def average_precision_at_k(
    ranked_ids: Sequence[str], targets: Sequence[str], k: int
) -> float:
    """AP@K = sum of precision at each hit position / min(K, |targets|)."""
    if k < 1:
        raise DataError(f"AP cutoff must be >= 1, got {k}")
    target_set = set(targets)
    hits = 0
    precision_sum = 0.0
    for pos, rid in enumerate(ranked_ids[:k], start=1):
        if rid in target_set:
            hits += 1
            precision_sum += hits / pos
    return precision_sum / min(k, len(target_set))


def map_at_k(
    rankings: Sequence[Sequence[str]], triplets: Sequence[EvalTriplet], k: int
) -> float:
    """Mean AP@K over queries."""
    if len(rankings) != len(triplets) or not triplets:
        raise DataError("rankings and triplets must align and be non-empty")
    return float(np.mean([
        average_precision_at_k(r, t.targets, k)
        for r, t in zip(rankings, triplets)
    ]))


def mean_recall_at_k(rankings, triplets, k: int) -> float:
    if len(rankings) != len(triplets) or not triplets:
        raise DataError("rankings and triplets must align and be non-empty")
    return float(np.mean([
        recall_at_k(r, t.targets, k) for r, t in zip(rankings, triplets)
    ]))


def mean_subset_recall_at_k(rankings, triplets, k: int) -> float:
    if len(rankings) != len(triplets) or not triplets:
        raise DataError("rankings and triplets must align and be non-empty")
    for t in triplets:
        if t.subset is None:
            raise DataError(
                f"triplet {t.reference!r} has no subset; subset recall undefined"
            )
    return float(np.mean([
        subset_recall_at_k(r, t.targets, t.subset, k)
        for r, t in zip(rankings, triplets)
    ]))


# ----- dataset loading ------------------------------------------------------


def load_canonical(
    triplets_path: str | Path, pool_path: str | Path | None = None
) -> tuple[list[EvalTriplet], Optional[dict[str, list[str]]]]:
    """Read JSON Lines triplets and an optional pool file.

    Each triplet line is an object with keys reference, modification,
    targets, and optionally subset and group. The pool file has one id per
    line, optionally prefixed ``group<TAB>``; without it the caller falls
    back to the full index.
    """
    triplets: list[EvalTriplet] = []
    path = Path(triplets_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected an object")
        try:
            triplets.append(EvalTriplet(
                reference=str(obj["reference"]),
                modification=str(obj["modification"]),
                targets=[str(t) for t in obj["targets"]],
                subset=[str(s) for s in obj["subset"]] if "subset" in obj else None,
                group=str(obj.get("group", "")),
            ))
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
    if not triplets:
        raise DataError(f"dataset {path} contains no triplets")
    pools: Optional[dict[str, list[str]]] = None
    if pool_path is not None:
        pools = {}
        for line in Path(pool_path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            if "\t" in line:
                group, image_id = line.split("\t", 1)
            else:
                group, image_id = "", line
            pools.setdefault(group, []).append(image_id)
    return triplets, pools


def load_fashioniq(
    root: str | Path, split: str = "val", caption_joiner: str = " and "
) -> tuple[list[EvalTriplet], dict[str, list[str]]]:
    """Adapter for the FashionIQ layout (captions/ and image_splits/).

    The two relative captions of each annotation are joined into one
    modification sentence; each garment category becomes a group with its own
    candidate pool.
    """
    root = Path(root)
    triplets: list[EvalTriplet] = []
    pools: dict[str, list[str]] = {}
    for category in FASHIONIQ_CATEGORIES:
        cap_path = root / "captions" / f"cap.{category}.{split}.json"
        split_path = root / "image_splits" / f"split.{category}.{split}.json"
        if not cap_path.is_file() or not split_path.is_file():
            raise DataError(f"missing FashionIQ files for category {category}")
        annotations = json.loads(cap_path.read_text(encoding="utf-8"))
        pools[category] = sorted(
            str(i) for i in json.loads(split_path.read_text(encoding="utf-8"))
        )
        for ann in annotations:
            captions = [c.strip() for c in ann["captions"]]
            modification = caption_joiner.join(c for c in captions if c)
            triplets.append(EvalTriplet(
                reference=str(ann["candidate"]),
                modification=modification,
                targets=[str(ann["target"])],
                group=category,
            ))
    return triplets, pools


def load_cirr(
    root: str | Path, split: str = "val"
) -> tuple[list[EvalTriplet], dict[str, list[str]]]:
    """Adapter for the CIRR layout (captions/cap.rc2.*, image_splits/)."""
    root = Path(root)
    cap_path = root / "captions" / f"cap.rc2.{split}.json"
    split_path = root / "image_splits" / f"split.rc2.{split}.json"
    if not cap_path.is_file() or not split_path.is_file():
        raise DataError(f"missing CIRR files under {root}")
    annotations = json.loads(cap_path.read_text(encoding="utf-8"))
    split_map = json.loads(split_path.read_text(encoding="utf-8"))
    pool = sorted(str(k) for k in split_map)
    triplets = []
    for ann in annotations:
        reference = str(ann["reference"])
        target = str(ann["target_hard"])
        members = [str(m) for m in ann["img_set"]["members"]]
        subset = [m for m in members if m != reference]
        if target not in subset:
            raise DataError(
                f"CIRR pair {ann.get('pairid')}: target {target} missing from subset"
            )
        triplets.append(EvalTriplet(
            reference=reference,
            modification=str(ann["caption"]),
            targets=[target],
            subset=subset,
        ))
    return triplets, {"": pool}


def load_circo(
    root: str | Path, split: str = "val"
) -> tuple[list[EvalTriplet], Optional[dict[str, list[str]]]]:
    """Adapter for the CIRCO layout (annotations/<split>.json).

    CIRCO queries carry multiple ground-truth targets; the pool is the whole
    unlabeled image collection, so it defaults to every id in the index.
    """
    root = Path(root)
    ann_path = root / "annotations" / f"{split}.json"
    if not ann_path.is_file():
        raise DataError(f"missing CIRCO annotation file {ann_path}")
    annotations = json.loads(ann_path.read_text(encoding="utf-8"))
    triplets = []
    for ann in annotations:
        targets = ann.get("gt_img_ids") or [ann["target_img_id"]]
        triplets.append(EvalTriplet(
            reference=str(ann["reference_img_id"]),
            modification=str(ann["relative_caption"]),
            targets=[str(t) for t in targets],
        ))
    return triplets, None


def load_dataset(
    path: str | Path, fmt: str = "canonical", split: str = "val",
    pool_path: str | Path | None = None,
) -> tuple[list[EvalTriplet], Optional[dict[str, list[str]]]]:
    """Load triplets (and pools when the layout defines them) by format name."""
    if fmt == "canonical":
        return load_canonical(path, pool_path)
    if fmt == "fashioniq":
        return load_fashioniq(path, split)
    if fmt == "cirr":
        return load_cirr(path, split)
    if fmt == "circo":
        return load_circo(path, split)
    raise ConfigError(f"unknown dataset format {fmt!r}")


# ----- evaluation driver ----------------------------------------------------


@dataclass
class MetricReport:
    """Evaluation results, printable as deterministic TSV."""

    dataset: str
    num_queries: int
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = [f"dataset\t{self.dataset}", f"queries\t{self.num_queries}"]
        for group in sorted(self.groups):
            for metric, value in sorted(self.groups[group].items()):
                lines.append(f"group\t{group}\t{metric}\t{value:.6f}")
        for metric, value in sorted(self.overall.items()):
            lines.append(f"overall\t{metric}\t{value:.6f}")
        return "\n".join(lines) + "\n"


def _rank_pool(
    index: RetrievalIndex, pool_ids: list[str], query: np.ndarray
) -> list[str]:
    """Full ordering of a candidate pool for one query embedding."""
    rows = np.array([index.row(i) for i in pool_ids], dtype=np.int64)
    qnorm = float(np.linalg.norm(query))
    if qnorm == 0.0:
        scores = np.zeros(len(rows), dtype=np.float32)
    else:
        scores = index.unit_rows[rows] @ (query / qnorm).astype(np.float32)
    lex = sorted(range(len(pool_ids)), key=pool_ids.__getitem__)
    tie = np.empty(len(pool_ids), dtype=np.int64)
    for pos, idx in enumerate(lex):
        tie[idx] = pos
    order = ranking.topk_ranked(scores, tie, len(pool_ids))
    return [pool_ids[i] for i in order]


def _suite_metrics(
    dataset: str, rankings: list[list[str]], triplets: list[EvalTriplet]
) -> dict[str, float]:
    metrics: dict[str, float] = {}
    if dataset == "fashioniq":
        for k in (10, 50):
            metrics[f"recall@{k}"] = mean_recall_at_k(rankings, triplets, k)
    elif dataset == "cirr":
        for k in (1, 5, 10, 50):
            metrics[f"recall@{k}"] = mean_recall_at_k(rankings, triplets, k)
        for k in (1, 2, 3):
            metrics[f"subset_recall@{k}"] = mean_subset_recall_at_k(
                rankings, triplets, k
            )
        metrics["avg"] = (metrics["recall@5"] + metrics["subset_recall@1"]) / 2
    elif dataset == "circo":
        for k in (5, 10, 25, 50):
            metrics[f"map@{k}"] = map_at_k(rankings, triplets, k)
    else:
        for k in (1, 5, 10, 50):
            metrics[f"recall@{k}"] = mean_recall_at_k(rankings, triplets, k)
        for k in (5, 10, 25, 50):
            metrics[f"map@{k}"] = map_at_k(rankings, triplets, k)
        if all(t.subset is not None for t in triplets):
            for k in (1, 2, 3):
                metrics[f"subset_recall@{k}"] = mean_subset_recall_at_k(
                    rankings, triplets, k
                )
    return metrics


def evaluate(
    triplets: list[EvalTriplet],
    pools: Optional[dict[str, list[str]]],
    index: RetrievalIndex,
    network: InversionNetwork,
    backbone: Backbone,
    images: ImageStore,
    filter_cfg: FilterConfig,
    dataset: str = "generic",
    ablations: frozenset[str] = frozenset(),
) -> MetricReport:
    """Run every query and aggregate the dataset's metric suite.

    Groups are evaluated against their own candidate pools; the report
    carries per-group metrics plus cross-group means. Any pool or target id
    absent from the index is a data error listing the offenders.
    """
    if not triplets:
        raise DataError("no evaluation triplets")
    by_group: dict[str, list[EvalTriplet]] = {}
    for t in triplets:
        by_group.setdefault(t.group, []).append(t)

    all_index_ids = None
    group_pools: dict[str, list[str]] = {}
    for group in by_group:
        if pools and group in pools:
            group_pools[group] = pools[group]
        elif pools and "" in pools:
            group_pools[group] = pools[""]
        else:
            if all_index_ids is None:
                all_index_ids = sorted(index.ids)
            group_pools[group] = all_index_ids

    missing: set[str] = set()
    for group, members in by_group.items():
        pool_set = set(group_pools[group])
        missing.update(i for i in group_pools[group] if i not in index)
        for t in members:
            missing.update(t_id for t_id in t.targets if t_id not in index)
            for t_id in t.targets:
                if t_id not in pool_set:
                    raise DataError(
                        f"target {t_id!r} of reference {t.reference!r} "
                        f"is outside the candidate pool"
                    )
            if t.subset is not None:
                outside = [s for s in t.subset if s not in pool_set]
                if outside:
                    raise DataError(
                        f"subset ids outside the pool for reference "
                        f"{t.reference!r}: {sorted(outside)}"
                    )
    if missing:
        raise DataError(
            "ids missing from the index: " + ", ".join(sorted(missing))
        )

    report = MetricReport(dataset=dataset, num_queries=len(triplets))
    per_metric_values: dict[str, list[float]] = {}
    for group in sorted(by_group):
        members = by_group[group]
        pool_ids = group_pools[group]
        rankings = []
        for t in members:
            query = compose_query_embedding(
                network, backbone, images.path(t.reference), t.modification,
                filter_cfg, ablations,
            )
            rankings.append(_rank_pool(index, pool_ids, query))
        metrics = _suite_metrics(dataset, rankings, members)
        report.groups[group] = metrics
        for name, value in metrics.items():
            per_metric_values.setdefault(name, []).append(value)
    for name, values in per_metric_values.items():
        report.overall[name] = float(np.mean(values))
    if dataset == "fashioniq":
        report.overall["avg"] = float(np.mean([
            report.overall["recall@10"], report.overall["recall@50"]
        ]))
    return report
