"""Synthetic fold-structured shape dataset and N-way K-shot episode sampling.

Twelve classes, each a shape with its own colour and noise level, split into
four folds of three (``fold = class_id % 4``).  Masks rendered here carry
*global* labels ``class_id + 1`` (0 is background); episodes relabel them to
``1..N`` in sampling order, everything else becoming background.

Episodes draw their images from a ``SampleSource``: ``FreshSource`` renders a
new image per request (pure function of the seed), ``PoolSource`` picks from a
materialised dataset on disk.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, LayoutError, SamplingError

NUM_CLASSES = 12
NUM_FOLDS = 4
SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar",
          "ellipse", "diamond", "L", "T", "plus", "chevron")
MIN_RADIUS, MAX_RADIUS = 5.0, 9.0


@dataclass(frozen=True)
class SynthClass:
    class_id: int
    shape: str
    color: tuple[float, float, float]
    noise: float

    @property
    def fold(self) -> int:
        return self.class_id % NUM_FOLDS


def _class_color(class_id: int) -> tuple[float, float, float]:
    # each fold owns a contiguous band of hues, so a held-out fold's colours
    # are never seen while training on the other three
    hue = (3 * (class_id % NUM_FOLDS) + class_id // NUM_FOLDS) / NUM_CLASSES
    return tuple(float(x) for x in colorsys.hsv_to_rgb(hue, 0.75, 0.9))


CLASSES = tuple(
    SynthClass(c, SHAPES[c], _class_color(c), 0.03 + 0.01 * (c % 5))
    for c in range(NUM_CLASSES)
)


def fold_classes(fold: int) -> list[int]:
    return [c.class_id for c in CLASSES if c.fold == fold]


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    base: tuple[int, ...]
    novel: tuple[int, ...]

    @classmethod
    def for_fold(cls, fold: int) -> "FoldSplit":
        if not 0 <= fold < NUM_FOLDS:
            raise SamplingError(f"fold must be in 0..{NUM_FOLDS - 1}, got {fold}")
        novel = tuple(fold_classes(fold))
        base = tuple(c for c in range(NUM_CLASSES) if c not in novel)
        return cls(fold, base, novel)


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------

def shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in the unit frame (radius 1, upright)."""
    au, av = np.abs(u), np.abs(v)
    rho = np.hypot(u, v)
    if shape == "disk":
        return rho <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "triangle":
        return (v <= 0.5) & (v >= -1.0 + 1.732 * au)
    if shape == "ring":
        return (rho <= 1.0) & (rho >= 0.55)
    if shape == "cross":
        s, t = (u + v) / math.sqrt(2), (u - v) / math.sqrt(2)
        return ((np.abs(s) <= 0.28) | (np.abs(t) <= 0.28)) & (np.maximum(np.abs(s), np.abs(t)) <= 1.0)
    if shape == "bar":
        return (au <= 1.0) & (av <= 0.32)
    if shape == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "L":
        return ((u >= -0.8) & (u <= -0.3) & (av <= 0.9)) | ((au <= 0.8) & (v >= 0.4) & (v <= 0.9))
    if shape == "T":
        return ((v >= -0.9) & (v <= -0.45) & (au <= 0.9)) | ((au <= 0.25) & (av <= 0.9))
    if shape == "plus":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if shape == "chevron":
        return (np.abs(v - (0.9 * au - 0.4)) <= 0.28) & (au <= 0.9)
    raise LayoutError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class Placement:
    class_id: int
    cy: float
    cx: float
    radius: float
    angle: float
    color: tuple[float, float, float]


def layout(class_ids: Sequence[int], rng: np.random.Generator, H: int, W: int,
           tries: int = 200) -> list[Placement]:
    """Random placements, one object per class id, overlapping at most slightly."""
    placed: list[Placement] = []
    for cid in class_ids:
        for attempt in range(tries):
            # shrink the size range as attempts fail
            hi = max(MIN_RADIUS, MAX_RADIUS - (MAX_RADIUS - MIN_RADIUS) * 2 * attempt / tries)
            r = rng.uniform(MIN_RADIUS, hi)
            if 2 * r + 2 > min(H, W):
                continue
            cy = rng.uniform(r + 1, H - r - 1)
            cx = rng.uniform(r + 1, W - r - 1)
            if all(math.hypot(cy - p.cy, cx - p.cx) >= 0.85 * (r + p.radius) for p in placed):
                break
        else:
            raise LayoutError(f"cannot fit {len(class_ids)} objects on a {H}x{W} canvas")
        jitter = rng.uniform(-0.08, 0.08, size=3)
        color = tuple(np.clip(np.asarray(CLASSES[cid].color) + jitter, 0.0, 1.0))
        placed.append(Placement(cid, cy, cx, r, rng.uniform(-math.pi / 6, math.pi / 6), color))
    return placed


def rasterize(p: Placement, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dy, dx = (yy - p.cy) / p.radius, (xx - p.cx) / p.radius
    c, s = math.cos(p.angle), math.sin(p.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return shape_mask(CLASSES[p.class_id].shape, u, v)


def render(class_ids: Sequence[int], seed: int, H: int = 32, W: int = 32,
           placements: Sequence[Placement] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render objects over textured noise.

    Returns ``(image[3, H, W], mask[H, W])`` with mask values ``class_id + 1``.
    Later objects occlude earlier ones.
    """
    rng = np.random.default_rng(seed)
    if placements is None:
        placements = layout(class_ids, rng, H, W)
    bg = rng.uniform(0.3, 0.6, size=3)
    image = bg[:, None, None] + 0.12 * rng.standard_normal((3, H, W))
    mask = np.zeros((H, W))
    for p in placements:
        region = rasterize(p, H, W)
        noise = CLASSES[p.class_id].noise * rng.standard_normal((3, H, W))
        obj = np.asarray(p.color)[:, None, None] + noise
        image = np.where(region[None], obj, image)
        mask[region] = p.class_id + 1
    return np.clip(image, 0.0, 1.0), mask


# ----------------------------------------------------------------------------
# sample sources
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_ids: tuple[int, ...]
    seed: int


class SampleSource(Protocol):
    image_size: int

    def pick(self, rng: np.random.Generator, must: Sequence[int], allowed: Sequence[int],
             exclude: Sequence[str] = ()) -> SampleRecord: ...

    def load(self, record: SampleRecord) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class FreshSource:
    """Render a new image for every request; adds a distractor with ``distractor_prob``."""

    image_size: int = 32
    distractor_prob: float = 0.5

    def pick(self, rng, must, allowed, exclude=()):
        ids = list(must)
        extra = [c for c in allowed if c not in ids]
        if extra and rng.random() < self.distractor_prob:
            ids.append(int(rng.choice(extra)))
        seed = int(rng.integers(2**63))
        return SampleRecord(f"fresh-{seed:x}", tuple(ids), seed)

    def load(self, record):
        return render(record.class_ids, record.seed, self.image_size, self.image_size)


@dataclass
class PoolSource:
    """Pick among pre-rendered samples of one split directory."""

    root: Path
    records: list[SampleRecord]
    image_size: int = 32
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: str | Path) -> "PoolSource":
        root = Path(root)
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            raise DataError(f"no sample manifest at {manifest}")
        records = []
        for line in manifest.read_text().splitlines():
            rec = json.loads(line)
            records.append(SampleRecord(rec["id"], tuple(rec["class_ids"]), rec["seed"]))
        size = json.loads((root / "split.json").read_text())["image_size"]
        return cls(root, records, size)

    def pick(self, rng, must, allowed, exclude=()):
        must_set, ok, skip = set(must), set(allowed) | set(must), set(exclude)
        fits = [r for r in self.records
                if must_set <= set(r.class_ids) <= ok and r.sample_id not in skip]
        if not fits:
            raise SamplingError(f"no pooled sample contains {sorted(must_set)} within {sorted(ok)}")
        return fits[int(rng.integers(len(fits)))]

    def load(self, record):
        hit = self._cache.get(record.sample_id)
        if hit is None:
            hit = (ag.load_tensor(self.root / f"{record.sample_id}.image.tapt"),
                   ag.load_tensor(self.root / f"{record.sample_id}.mask.tapt"))
            self._cache[record.sample_id] = hit
        return hit


# ----------------------------------------------------------------------------
# episodes
# ----------------------------------------------------------------------------

@dataclass
class Episode:
    support_images: np.ndarray  # (N*K, 3, H, W)
    support_masks: np.ndarray  # (N*K, H, W), labels 0..N
    query_image: np.ndarray  # (3, H, W)
    query_mask: np.ndarray  # (H, W)
    classes: list[int]
    n_way: int
    k_shot: int
    seed: int
    support_records: list[SampleRecord] = field(default_factory=list)
    query_record: SampleRecord | None = None
    replicated: int = 1
    episode_id: str = ""

    @property
    def num_classes(self) -> int:
        return self.n_way + 1

    @property
    def support(self) -> list[tuple[Tensor, Tensor]]:
        return [(Tensor(x), Tensor(y)) for x, y in zip(self.support_images, self.support_masks)]

    @property
    def query(self) -> tuple[Tensor, Tensor]:
        return Tensor(self.query_image), Tensor(self.query_mask)

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "classes": self.classes,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "seed": self.seed,
            "support": [r.sample_id for r in self.support_records],
            "query": self.query_record.sample_id if self.query_record else None,
        }


def relabel(global_mask: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Global labels (``class_id + 1``) to episode labels ``1..N``; others to 0."""
    out = np.zeros_like(global_mask)
    for j, c in enumerate(classes):
        out[global_mask == c + 1] = j + 1
    return out


def _assemble(source: SampleSource, classes, support_recs, query_rec, n_way, k_shot, seed) -> Episode:
    s_img, s_mask = [], []
    for j, rec in enumerate(support_recs):
        img, gm = source.load(rec)
        # a support image only annotates the class it was drawn for
        target = classes[j // k_shot]
        s_img.append(img)
        s_mask.append(np.where(gm == target + 1, j // k_shot + 1, 0).astype(np.float64))
    q_img, q_gm = source.load(query_rec)
    return Episode(np.stack(s_img), np.stack(s_mask), q_img, relabel(q_gm, classes),
                   list(classes), n_way, k_shot, seed, list(support_recs), query_rec)


def sample_episode(split: FoldSplit, n_way: int, k_shot: int, seed: int,
                   query_presence_policy: str = "all", source: SampleSource | None = None,
                   use: str = "novel") -> Episode:
    """Draw an N-way K-shot episode from the split's novel (or base) classes.

    Supports are ordered class-major: the first K annotate class 1, and so on.
    ``query_presence_policy`` is ``"all"`` (every sampled class in the query)
    or ``"subset"`` (a random subset of size 0..N).  With ``use="base"`` and
    N > 1 the classes come from a single base fold.
    """
    source = source or FreshSource()
    if k_shot < 1:
        raise SamplingError("K must be >= 1")
    if query_presence_policy not in ("all", "subset"):
        raise SamplingError(f"unknown query presence policy {query_presence_policy!r}")
    rng = np.random.default_rng(seed)
    if use == "novel":
        pool = list(split.novel)
        allowed = [c for c in range(NUM_CLASSES)]
    elif use == "base":
        allowed = list(split.base)
        folds = sorted({CLASSES[c].fold for c in allowed})
        pool = fold_classes(int(rng.choice(folds))) if n_way > 1 else allowed
    else:
        raise SamplingError(f"unknown class pool {use!r}")
    if not 1 <= n_way <= len(pool):
        raise SamplingError(f"cannot draw N={n_way} classes from {len(pool)} available")
    classes = [int(c) for c in rng.choice(pool, n_way, replace=False)]
    others = [c for c in allowed if c not in classes]
    support_recs: list[SampleRecord] = []
    for c in classes:
        for _ in range(k_shot):
            support_recs.append(source.pick(rng, [c], others, [r.sample_id for r in support_recs]))
    if query_presence_policy == "all":
        present = list(classes)
    else:
        size = int(rng.integers(0, n_way + 1))
        present = [int(c) for c in rng.permutation(classes)[:size]]
    query_rec = source.pick(rng, present, others, [r.sample_id for r in support_recs])
    ep = _assemble(source, classes, support_recs, query_rec, n_way, k_shot, seed)
    ep.episode_id = f"f{split.fold_index}-{use}-n{n_way}k{k_shot}-{seed}"
    return ep


def replicate_support(episode: Episode, copies: int) -> Episode:
    """Repeat every support pair ``copies`` times (consecutively)."""
    if copies < 1:
        raise SamplingError("copies must be >= 1")
    if copies == 1:
        return episode
    return replace(
        episode,
        support_images=np.repeat(episode.support_images, copies, axis=0),
        support_masks=np.repeat(episode.support_masks, copies, axis=0),
        support_records=[r for r in episode.support_records for _ in range(copies)],
        k_shot=episode.k_shot * copies,
        replicated=episode.replicated * copies,
    )


def episode_stream(split: FoldSplit, n_way: int, k_shot: int, seed: int, use: str = "base",
                   source: SampleSource | None = None, policy: str = "all") -> Iterator[Episode]:
    """Endless deterministic stream; episode ``i`` uses seed ``seed * 1_000_003 + i``."""
    i = 0
    while True:
        yield sample_episode(split, n_way, k_shot, seed * 1_000_003 + i, policy, source, use)
        i += 1


def mixed_way_stream(split: FoldSplit, ways: Sequence[int], k_shot: int, seed: int,
                     source: SampleSource | None = None) -> Iterator[Episode]:
    """Base-class stream cycling through several N values."""
    i = 0
    while True:
        n = ways[i % len(ways)]
        yield sample_episode(split, n, k_shot, seed * 1_000_003 + i, "all", source, "base")
        i += 1


# ----------------------------------------------------------------------------
# on-disk pools
# ----------------------------------------------------------------------------

def pool_records(per_class: int, per_pair: int, seed: int) -> list[SampleRecord]:
    """Class sets are single classes (with an optional same-fold distractor) and
    same-fold pairs, so every record stays inside one fold."""
    rng = np.random.default_rng(seed)
    records = []
    for c in range(NUM_CLASSES):
        mates = [d for d in fold_classes(CLASSES[c].fold) if d != c]
        for i in range(per_class):
            ids = (c,) if rng.random() < 0.5 else (c, int(rng.choice(mates)))
            records.append(SampleRecord(f"c{c:02d}-{i:04d}", ids, int(rng.integers(2**63))))
    for f in range(NUM_FOLDS):
        cls = fold_classes(f)
        for a in range(len(cls)):
            for b in range(a + 1, len(cls)):
                for i in range(per_pair):
                    ids = tuple(int(x) for x in rng.permutation([cls[a], cls[b]]))
                    records.append(SampleRecord(f"p{cls[a]:02d}{cls[b]:02d}-{i:04d}", ids,
                                                int(rng.integers(2**63))))
    return records


def write_pool(root: str | Path, records: Sequence[SampleRecord], image_size: int) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        img, mask = render(rec.class_ids, rec.seed, image_size, image_size)
        ag.save_tensor(root / f"{rec.sample_id}.image.tapt", img)
        ag.save_tensor(root / f"{rec.sample_id}.mask.tapt", mask)
        lines.append(json.dumps({"id": rec.sample_id,
                                 "image": f"{rec.sample_id}.image.tapt",
                                 "mask": f"{rec.sample_id}.mask.tapt",
                                 "class_ids": list(rec.class_ids), "seed": rec.seed}))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    (root / "split.json").write_text(json.dumps({"image_size": image_size, "samples": len(records)}))


def write_episode_manifest(path: str | Path, episodes: Sequence[Episode], fold: int) -> None:
    lines = [json.dumps({"fold": fold, **ep.to_record()}) for ep in episodes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_episode_manifest(path: str | Path, source: PoolSource) -> list[Episode]:
    by_id = {r.sample_id: r for r in source.records}
    episodes = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        try:
            support = [by_id[s] for s in rec["support"]]
            query = by_id[rec["query"]]
        except KeyError as exc:
            raise DataError(f"episode {rec['episode_id']} references unknown sample {exc}") from exc
        ep = _assemble(source, rec["classes"], support, query, rec["n_way"], rec["k_shot"], rec["seed"])
        ep.episode_id = rec["episode_id"]
        episodes.append(ep)
    return episodes
