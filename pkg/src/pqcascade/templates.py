"""Set-to-set template comparison.

A template is a set of embeddings of one subject. Comparison uses only the
well-aligned members when a template has any, and the final score is the
mean cosine similarity over the Cartesian product of the two selected
member subsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gallery import CandidateList
from .store import Dataset, EmbeddingRecord, normalize_rows


@dataclass
class FaceTemplate:
    """Non-empty set of embedding records sharing one subject."""

    template_id: int
    subject: str | None
    items: list

    def __post_init__(self):
        if not self.items:
            raise ValueError("empty template")
        dims = {len(r.vector) for r in self.items}
        if len(dims) != 1:
            raise ValueError(f"items disagree on dimension: {sorted(dims)}")


def select_comparison_subset(template: FaceTemplate) -> list:
    """Well-aligned items when the template has any, otherwise all items."""
    if not template.items:
        raise ValueError("empty template")
    well = [r for r in template.items if r.well_aligned]
    return well if well else list(template.items)


def _subset_matrix(template: FaceTemplate) -> np.ndarray:
    subset = select_comparison_subset(template)
    return normalize_rows(np.stack([np.asarray(r.vector, dtype=np.float32)
                                    for r in subset]))


def template_similarity(t1: FaceTemplate, t2: FaceTemplate) -> float:
    """Mean pairwise cosine over the two selected member subsets."""
    a = _subset_matrix(t1)
    b = _subset_matrix(t2)
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    return float(np.mean(a.astype(np.float64) @ b.astype(np.float64).T))


def template_search(gallery_templates, probe_template: FaceTemplate,
                    k: int) -> CandidateList:
    """Top-k gallery templates by set-to-set similarity (exact, no quantization)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gallery_templates = list(gallery_templates)
    if not gallery_templates:
        raise ValueError("empty gallery")
    probe = _subset_matrix(probe_template).astype(np.float64)
    scores = np.empty(len(gallery_templates), dtype=np.float64)
    for i, t in enumerate(gallery_templates):
        g = _subset_matrix(t).astype(np.float64)
        if g.shape[1] != probe.shape[1]:
            raise ValueError(
                f"dimension mismatch: template {t.template_id} has dim "
                f"{g.shape[1]}, probe has {probe.shape[1]}"
            )
        scores[i] = np.mean(probe @ g.T)
    tids = np.array([t.template_id for t in gallery_templates], dtype=np.uint64)
    order = np.lexsort((tids, -scores))[:k]
    return CandidateList(ids=tids[order], scores=scores[order])


def save_templates(templates, path) -> None:
    """Write a template manifest: JSON list of {template_id, subject, member ids}."""
    manifest = [
        {
            "template_id": int(t.template_id),
            "subject": t.subject,
            "member_ids": [int(r.id) for r in t.items],
        }
        for t in templates
    ]
    with open(path, "w") as f:
        json.dump(manifest, f)


def load_templates(path, dataset: Dataset) -> list:
    """Resolve a template manifest against a dataset's record ids."""
    with open(path) as f:
        manifest = json.load(f)
    by_id = {int(i): idx for idx, i in enumerate(dataset.ids)}
    templates = []
    for entry in manifest:
        items = []
        for member in entry["member_ids"]:
            if int(member) not in by_id:
                raise ValueError(
                    f"template {entry['template_id']} references unknown "
                    f"record id {member}"
                )
            items.append(dataset.record(by_id[int(member)]))
        templates.append(FaceTemplate(
            template_id=int(entry["template_id"]),
            subject=entry["subject"],
            items=items,
        ))
    return templates


def templates_from_dataset(dataset: Dataset) -> list:
    """Group a dataset into one template per subject (ordered by first use)."""
    groups: dict = {}
    for rec in dataset:
        groups.setdefault(rec.subject, []).append(rec)
    return [
        FaceTemplate(template_id=tid, subject=subj, items=items)
        for tid, (subj, items) in enumerate(groups.items())
    ]
