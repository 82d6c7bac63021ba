"""Dataset layout, tiling, split manifests, and a synthetic bi-temporal generator.

On disk a dataset is three parallel PNG directories with identical filenames:

    root/
      A/<id>.png       first-date RGB tile
      B/<id>.png       second-date RGB tile
      label/<id>.png   binary change mask, values {0, 255}
      splits.json      train/val/test partition (written by the generator)

A *split manifest* additionally divides the train ids into a labelled and an
unlabelled pool; its id lists are stored sorted so manifests diff cleanly, and
training-time iteration order is re-derived from the seed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError


@dataclass
class BiTemporalSample:
    """A co-registered pair of RGB tiles plus an optional binary change mask."""

    id: str
    image_t1: np.ndarray  # float32 [3, S, S] in [0, 1]
    image_t2: np.ndarray  # float32 [3, S, S] in [0, 1]
    label: np.ndarray | None = None  # float32 [S, S] in {0, 1}


@dataclass
class SplitManifest:
    """Labelled/unlabelled division of the train ids, plus val/test lists."""

    dataset: str
    seed: int
    ratio: float
    labelled: list[str]
    unlabelled: list[str]
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "dataset": self.dataset,
            "seed": self.seed,
            "ratio": self.ratio,
            "labelled": self.labelled,
            "unlabelled": self.unlabelled,
            "val": self.val,
            "test": self.test,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        try:
            payload = json.loads(Path(path).read_text())
            return cls(dataset=payload["dataset"], seed=payload["seed"],
                       ratio=payload["ratio"], labelled=list(payload["labelled"]),
                       unlabelled=list(payload["unlabelled"]),
                       val=list(payload.get("val", [])),
                       test=list(payload.get("test", [])))
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read split manifest {path}: {exc}") from exc


def tile_pair(image_t1: np.ndarray, image_t2: np.ndarray,
              label: np.ndarray | None = None, size: int = 256,
              source_id: str = "tile") -> list[BiTemporalSample]:
    """Cut a co-registered pair into non-overlapping size x size tiles.

    Remainder pixels on the right/bottom are dropped.  Ids encode the source
    name and the grid position, e.g. ``scene_r003_c001``.
    """
    image_t1 = np.asarray(image_t1)
    image_t2 = np.asarray(image_t2)
    if image_t1.shape != image_t2.shape:
        raise ValueError(f"images differ in shape: {image_t1.shape} vs {image_t2.shape}")
    if label is not None and label.shape != image_t1.shape[-2:]:
        raise ValueError(f"label shape {label.shape} does not match images")
    h, w = image_t1.shape[-2:]
    if h < size or w < size:
        warnings.warn(f"image {source_id} ({h}x{w}) smaller than tile size {size}; "
                      "no tiles produced")
        return []
    tiles = []
    for r in range(h // size):
        for c in range(w // size):
            rs, cs = r * size, c * size
            win = (slice(rs, rs + size), slice(cs, cs + size))
            tiles.append(BiTemporalSample(
                id=f"{source_id}_r{r:03d}_c{c:03d}",
                image_t1=image_t1[..., win[0], win[1]].copy(),
                image_t2=image_t2[..., win[0], win[1]].copy(),
                label=None if label is None else label[win].copy(),
            ))
    return tiles


def labelled_count(n_train: int, ratio: float) -> int:
    """ceil(ratio * N) with the ratio treated as an exact decimal.

    Plain float arithmetic would round 0.05 * 740 up to 38; snapping the ratio
    to the nearest small fraction keeps every published split count exact.
    """
    frac = Fraction(ratio).limit_denominator(10 ** 6)
    return int(math.ceil(frac * n_train))


def make_split(train_ids, ratio: float, seed: int, dataset_name: str = "dataset",
               val_ids=(), test_ids=()) -> SplitManifest:
    """Seeded uniform split of the train ids into labelled/unlabelled pools.

    The first ceil(ratio * N) ids of a seeded shuffle become the labelled
    pool.  Id lists are sorted afterwards for stable manifests.
    """
    train_ids = list(train_ids)
    if not train_ids:
        raise ConfigurationError("cannot split an empty id list")
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError(f"ratio must lie in (0, 1], got {ratio}")
    if len(set(train_ids)) != len(train_ids):
        raise ConfigurationError("train ids contain duplicates")
    overlap = (set(train_ids) & set(val_ids)) | (set(train_ids) & set(test_ids)) \
        | (set(val_ids) & set(test_ids))
    if overlap:
        raise ConfigurationError(f"train/val/test ids overlap: {sorted(overlap)[:5]}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_ids))
    n_lab = labelled_count(len(train_ids), ratio)
    labelled = sorted(train_ids[i] for i in order[:n_lab])
    unlabelled = sorted(train_ids[i] for i in order[n_lab:])
    return SplitManifest(dataset=dataset_name, seed=seed, ratio=ratio,
                         labelled=labelled, unlabelled=unlabelled,
                         val=sorted(val_ids), test=sorted(test_ids))


# --- synthetic bi-temporal data ----------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic change-detection dataset."""

    n_train: int = 200
    n_val: int = 16
    n_test: int = 48
    tile_size: int = 64
    shapes_per_tile: tuple[int, int] = (2, 5)
    change_prob: float = 0.5
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.tile_size % 16 != 0 or self.tile_size <= 0:
            problems.append("tile_size must be a positive multiple of 16")
        lo, hi = self.shapes_per_tile
        if not (1 <= lo <= hi):
            problems.append("shapes_per_tile must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.change_prob <= 1.0:
            problems.append("change_prob must lie in [0, 1]")
        return problems


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 8,
                  lo: float = 0.15, hi: float = 0.75) -> np.ndarray:
    """Low-frequency RGB value noise: a coarse grid upsampled bilinearly."""
    coarse = rng.uniform(lo, hi, size=(3, cells + 1, cells + 1)).astype(np.float32)
    pos = np.linspace(0.0, cells, size, dtype=np.float32)
    i0 = np.clip(np.floor(pos).astype(int), 0, cells - 1)
    t = pos - i0
    rows = (coarse[:, i0, :] * (1 - t)[None, :, None]
            + coarse[:, i0 + 1, :] * t[None, :, None])
    out = (rows[:, :, i0] * (1 - t)[None, None, :]
           + rows[:, :, i0 + 1] * t[None, None, :])
    return out.astype(np.float32)


def _shape_footprint(rng: np.random.Generator, size: int) -> np.ndarray:
    """Boolean footprint of one random axis-aligned rectangle or ellipse."""
    cy, cx = rng.uniform(0.12 * size, 0.88 * size, size=2)
    ry, rx = rng.uniform(0.07 * size, 0.19 * size, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_sample(cfg: SynthConfig, sample_seed) -> BiTemporalSample:
    """One synthetic pair: shared textured background, shapes inserted or
    removed between the dates, mask = symmetric difference of the footprints.

    A global brightness jitter on the second date keeps unchanged regions from
    being pixel-identical.
    """
    rng = np.random.default_rng(sample_seed)
    size = cfg.tile_size
    bg = _smooth_noise(rng, size)
    scene1 = bg.copy()
    scene2 = bg.copy()
    present1 = np.zeros((size, size), dtype=bool)
    present2 = np.zeros((size, size), dtype=bool)

    lo, hi = cfg.shapes_per_tile
    for _ in range(int(rng.integers(lo, hi + 1))):
        footprint = _shape_footprint(rng, size)
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        # keep shapes at least mildly visible against the local background
        while np.abs(color.mean() - bg[:, footprint].mean()) < 0.18:
            color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        changed = rng.random() < cfg.change_prob
        in_t1 = True
        in_t2 = True
        if changed:
            if rng.random() < 0.5:
                in_t1 = False  # inserted at the second date
            else:
                in_t2 = False  # removed after the first date
        if in_t1:
            scene1[:, footprint] = color[:, None]
            present1 |= footprint
        if in_t2:
            scene2[:, footprint] = color[:, None]
            present2 |= footprint

    jitter = 1.0 + rng.uniform(-0.08, 0.08)
    scene2 = np.clip(scene2 * jitter, 0.0, 1.0)
    mask = (present1 ^ present2).astype(np.float32)
    return BiTemporalSample(id="", image_t1=np.clip(scene1, 0.0, 1.0),
                            image_t2=scene2.astype(np.float32), label=mask)


def _save_rgb(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def synth_generate(cfg: SynthConfig, root) -> dict:
    """Write a synthetic dataset under ``root`` and return its partition.

    Fully determined by ``cfg.seed``: the same config writes byte-identical
    files.  The partition {train, val, test} is stored as ``splits.json``.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    root = Path(root)
    try:
        for sub in ("A", "B", "label"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directories under {root}: {exc}") from exc

    partition = {"train": [], "val": [], "test": []}
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    master = np.random.SeedSequence(cfg.seed)
    children = iter(master.spawn(sum(counts.values())))
    for split in ("train", "val", "test"):
        for i in range(counts[split]):
            sample = synth_sample(cfg, next(children))
            sample_id = f"{split}{i:04d}"
            partition[split].append(sample_id)
            _save_rgb(root / "A" / f"{sample_id}.png", sample.image_t1)
            _save_rgb(root / "B" / f"{sample_id}.png", sample.image_t2)
            _save_mask(root / "label" / f"{sample_id}.png", sample.label)

    payload = {"dataset": "synthetic", "seed": cfg.seed,
               "tile_size": cfg.tile_size, **partition}
    (root / "splits.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return partition


def load_partition(root) -> dict | None:
    """Read ``splits.json`` if present."""
    path = Path(root) / "splits.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read partition file {path}: {exc}") from exc


def list_tile_ids(root) -> list[str]:
    """Sorted sample ids inferred from the PNG filenames under root/A."""
    a_dir = Path(root) / "A"
    if not a_dir.is_dir():
        raise DataError(f"dataset root {root} has no A/ directory")
    return sorted(p.stem for p in a_dir.glob("*.png"))


def load_image(path, sample_id: str) -> np.ndarray:
    """RGB PNG -> float32 [3, S, S] in [0, 1]; failures name the sample."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except FileNotFoundError as exc:
        raise DataError(f"missing image for sample {sample_id!r}: {path}") from exc
    except OSError as exc:
        raise DataError(f"corrupt image for sample {sample_id!r}: {path} ({exc})") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def load_mask(path, sample_id: str) -> np.ndarray:
    """Binary PNG mask -> float32 [S, S] in {0, 1}; values must be 0 or 255."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataError(f"missing mask for sample {sample_id!r}: {path}") from exc
    except OSError as exc:
        raise DataError(f"corrupt mask for sample {sample_id!r}: {path} ({exc})") from exc
    bad = np.setdiff1d(np.unique(arr), (0, 255))
    if bad.size:
        raise DataError(f"mask for sample {sample_id!r} has values outside "
                        f"{{0, 255}}: {bad.tolist()[:5]}")
    return (arr == 255).astype(np.float32)


class TileDataset:
    """Ordered access to one pool of samples.

    With ``with_labels=False`` mask files are never opened, which is what the
    unlabelled stream relies on in cross-dataset training.  Samples are cached
    in memory after the first read (desk-scale datasets are small).
    """

    def __init__(self, root, ids, with_labels: bool, cache: bool = True):
        self.root = Path(root)
        self.ids = list(ids)
        self.with_labels = with_labels
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> BiTemporalSample:
        sample_id = self.ids[index]
        if self._cache is not None and sample_id in self._cache:
            return self._cache[sample_id]
        sample = BiTemporalSample(
            id=sample_id,
            image_t1=load_image(self.root / "A" / f"{sample_id}.png", sample_id),
            image_t2=load_image(self.root / "B" / f"{sample_id}.png", sample_id),
            label=(load_mask(self.root / "label" / f"{sample_id}.png", sample_id)
                   if self.with_labels else None),
        )
        if sample.image_t1.shape != sample.image_t2.shape:
            raise DataError(f"sample {sample_id!r}: A/B tiles differ in shape")
        if self._cache is not None:
            self._cache[sample_id] = sample
        return sample

    def shuffled_indices(self, rng: np.random.Generator) -> np.ndarray:
        """One seeded pass order over the pool."""
        return rng.permutation(len(self.ids))


@dataclass
class DatasetSplits:
    """The four sample pools named by a manifest."""

    labelled: TileDataset
    unlabelled: TileDataset
    val: TileDataset
    test: TileDataset
    manifest: SplitManifest


def load_dataset(root, manifest: SplitManifest, unlabelled_root=None,
                 unlabelled_ids=None) -> DatasetSplits:
    """Open the pools listed in a manifest.

    ``unlabelled_root`` redirects the unlabelled pool to a second dataset root
    (cross-dataset training); its label files are never touched.  In that case
    ``unlabelled_ids`` names the second root's samples, defaulting to its full
    train partition (or every tile it holds).
    """
    if unlabelled_root is not None and unlabelled_ids is None:
        partition = load_partition(unlabelled_root)
        unlabelled_ids = (partition["train"] if partition and "train" in partition
                          else list_tile_ids(unlabelled_root))
    if unlabelled_ids is None:
        unlabelled_ids = manifest.unlabelled
    return DatasetSplits(
        labelled=TileDataset(root, manifest.labelled, with_labels=True),
        unlabelled=TileDataset(unlabelled_root or root, unlabelled_ids,
                               with_labels=False),
        val=TileDataset(root, manifest.val, with_labels=True),
        test=TileDataset(root, manifest.test, with_labels=True),
        manifest=manifest,
    )
