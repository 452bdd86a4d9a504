"""Landmark-based evaluation of a registered group.

Every landmark is projected into the common space by its image's
half-transform. Per category, the spread is the mean (and max) distance of
the projected instances to their centroid. Categories seen in fewer than two
images are skipped.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class LandmarkSet:
    image_id: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        clean = []
        for name, pos in self.entries:
            p = np.asarray(pos, dtype=float).reshape(3)
            if not np.all(np.isfinite(p)):
                raise ValueError(f"landmark {name!r} of image {self.image_id} is not finite")
            clean.append((str(name), p))
        self.entries = clean

    def categories(self) -> list[str]:
        return [name for name, _ in self.entries]


@dataclass
class CategoryStats:
    name: str
    mean_mm: float
    max_mm: float
    count: int


@dataclass
class LandmarkReport:
    categories: list[CategoryStats]
    global_mean: float
    global_max: float
    skipped: list[str]
    unknown: list[str]

    def table(self) -> str:
        lines = [f"{'category':<20} {'mean_mm':>10} {'max_mm':>10} {'count':>6}"]
        for c in self.categories:
            lines.append(f"{c.name:<20} {c.mean_mm:>10.3f} {c.max_mm:>10.3f} {c.count:>6d}")
        lines.append(f"{'GLOBAL':<20} {self.global_mean:>10.3f} {self.global_max:>10.3f} "
                     f"{len(self.categories):>6d}")
        if self.skipped:
            lines.append("skipped (fewer than 2 images): " + ", ".join(self.skipped))
        if self.unknown:
            lines.append("unknown categories: " + ", ".join(self.unknown))
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "mean_mm", "max_mm", "count"])
            for c in self.categories:
                w.writerow([c.name, f"{c.mean_mm:.6f}", f"{c.max_mm:.6f}", c.count])


def evaluate_landmarks(landmarks, transforms, dictionary=None) -> LandmarkReport:
    """Spread of projected landmarks per category.

    ``transforms`` is indexed by ``LandmarkSet.image_id``. When ``dictionary``
    is given, categories outside it are reported as unknown and ignored.
    """
    allowed = None if dictionary is None else set(dictionary)
    projected = defaultdict(list)
    unknown = set()
    for lm in landmarks:
        tau = transforms[lm.image_id]
        for name, pos in lm.entries:
            if allowed is not None and name not in allowed:
                unknown.add(name)
                continue
            projected[name].append(np.asarray(tau.apply(pos), dtype=float))
    stats, skipped = [], []
    for name in sorted(projected):
        pts = np.stack(projected[name])
        if len(pts) < 2:
            skipped.append(name)
            continue
        d = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        stats.append(CategoryStats(name, float(d.mean()), float(d.max()), len(pts)))
    if skipped:
        logger.info("skipped %d categories present in fewer than 2 images", len(skipped))
    g_mean = float(np.mean([c.mean_mm for c in stats])) if stats else float("nan")
    g_max = float(max(c.max_mm for c in stats)) if stats else float("nan")
    return LandmarkReport(stats, g_mean, g_max, skipped, sorted(unknown))


def save_landmarks(path, landmarks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "category", "x", "y", "z"])
        for lm in landmarks:
            for name, p in lm.entries:
                w.writerow([lm.image_id, name] + [repr(float(v)) for v in p])


def load_landmarks(path) -> list[LandmarkSet]:
    """Read the ``image_id,category,x,y,z`` CSV, one set per image id."""
    sets = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "category", "x", "y", "z"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"landmark file lacks columns: {sorted(missing)}")
        for row in reader:
            pos = [float(row[k]) for k in ("x", "y", "z")]
            sets[int(row["image_id"])].append((row["category"], pos))
    return [LandmarkSet(i, sets[i]) for i in sorted(sets)]
