"""Training-data preparation: band stacks, masks, chips, splits, synthesis.

The default model input is a six-band stack [R, G, B, NIR, SWIR1, NDSW]
where NDSW = (SWIR1 - SWIR2) / (SWIR1 + SWIR2) is a normalized-difference
index computed from the two shortwave-infrared bands. SWIR2 itself enters
the stack only through the index.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import geodata
from ._fileio import atomic_write_json
from .geodata import GeoTransform, PolygonAnnotation, Raster

NDSW_BAND = "NDSW"
SOURCE_BANDS = ("R", "G", "B", "NIR", "SWIR1", "SWIR2")
DEFAULT_BAND_SPEC = ("R", "G", "B", "NIR", "SWIR1", NDSW_BAND)

# Band subsets for the input ablation, in presentation order.
ABLATION_SPECS: dict[str, tuple[str, ...]] = {
    "RGB": ("R", "G", "B"),
    "RGB-NIR": ("R", "G", "B", "NIR"),
    "RGB-NIR-SWIR": ("R", "G", "B", "NIR", "SWIR1"),
    "RGB-NIR-SWIR-NDSW": DEFAULT_BAND_SPEC,
}

_NDSW_EPS = 1e-12

CATALOG_FORMAT = "dumpwatch.catalog"
CATALOG_FORMAT_VERSION = 1


def compute_ndsw(
    swir1: np.ndarray, swir2: np.ndarray, nodata: float | None = None
) -> np.ndarray:
    """Normalized difference of the shortwave bands, in [-1, 1].

    Cells where |SWIR1 + SWIR2| < 1e-12 map to 0; nodata in either input
    propagates to the output.
    """
    s1 = np.asarray(swir1, dtype=np.float32)
    s2 = np.asarray(swir2, dtype=np.float32)
    if s1.shape != s2.shape:
        raise ValueError(f"band shapes differ: {s1.shape} vs {s2.shape}")
    total = s1 + s2
    degenerate = np.abs(total) < _NDSW_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate, np.float32(0.0), (s1 - s2) / total)
    if nodata is not None:
        if math.isnan(nodata):
            invalid = np.isnan(s1) | np.isnan(s2)
            out = np.where(invalid, np.float32(math.nan), out)
        else:
            invalid = (s1 == nodata) | (s2 == nodata)
            out = np.where(invalid, np.float32(nodata), out)
    return out.astype(np.float32)


def stack_bands(source: Raster, spec: tuple[str, ...] = DEFAULT_BAND_SPEC) -> Raster:
    """Assemble a model-input raster from named source bands.

    Every entry in ``spec`` names a source band except ``"NDSW"``, which is
    derived from SWIR1 and SWIR2.
    """
    if not spec:
        raise ValueError("band spec is empty")
    if source.band_names is None:
        raise ValueError("source raster has no band names")
    layers = []
    for name in spec:
        if name == NDSW_BAND:
            layers.append(
                compute_ndsw(source.band("SWIR1"), source.band("SWIR2"), source.nodata)
            )
        else:
            layers.append(source.band(name))
    return Raster(
        np.stack(layers),
        source.transform,
        nodata=source.nodata,
        band_names=tuple(spec),
    )


# ---------------------------------------------------------------------------
# rasterization (pixel-center, even-odd)
# ---------------------------------------------------------------------------


def rasterize_mask(
    polygons: list[PolygonAnnotation],
    transform: GeoTransform,
    width: int,
    height: int,
) -> np.ndarray:
    """Burn polygons into a uint8 [row, col] mask.

    A pixel is 1 when its center is inside any polygon under the even-odd
    rule; holes subtract. Centers exactly on a boundary edge follow the
    half-open ray-crossing convention (crossings strictly right of the
    center are counted), applied identically here and in any point test.
    """
    if width <= 0 or height <= 0:
        raise ValueError("mask dimensions must be positive")
    mask = np.zeros((height, width), dtype=np.uint8)
    centers_x = transform.origin_x + (np.arange(width) + 0.5) * transform.pixel_width
    for poly in polygons:
        edges = []
        for ring in poly.rings():
            edges.extend(zip(ring[:-1], ring[1:]))
        for row in range(height):
            y = transform.origin_y - (row + 0.5) * transform.pixel_height
            crossings = []
            for (x1, y1), (x2, y2) in edges:
                if (y1 > y) != (y2 > y):
                    crossings.append(x1 + (y - y1) * (x2 - x1) / (y2 - y1))
            if not crossings:
                continue
            xs = np.sort(np.asarray(crossings))
            greater = len(xs) - np.searchsorted(xs, centers_x, side="right")
            mask[row, greater % 2 == 1] = 1
    return mask


# ---------------------------------------------------------------------------
# chips and splits
# ---------------------------------------------------------------------------


@dataclass
class Chip:
    """One training window: image samples, binary mask, and georeferencing."""

    samples: np.ndarray  # [band, size, size] float32
    mask: np.ndarray  # [size, size] uint8
    origin: tuple[int, int]  # (col, row) in the source raster
    transform: GeoTransform
    band_names: tuple[str, ...] | None = None
    scene_id: str = ""

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    def is_positive(self) -> bool:
        return bool(self.mask.any())


def extract_chips(
    image: Raster,
    mask: np.ndarray,
    chip_size: int,
    stride: int,
    negatives_per_positive: float = 1.0,
    seed: int = 0,
    scene_id: str = "",
) -> list[Chip]:
    """Cut positive and negative windows out of an image/mask pair.

    Positives are every stride-lattice window containing at least one mask
    pixel, ordered by origin (row-major). Negatives are
    ceil(negatives_per_positive * positives) seeded-random all-zero windows
    appended after the positives. The lattice is clipped to the raster, so
    windows never extend past the edge.
    """
    mask = np.asarray(mask)
    if mask.shape != (image.height, image.width):
        raise ValueError(
            f"mask shape {mask.shape} does not match raster "
            f"{(image.height, image.width)}"
        )
    if chip_size < 1 or chip_size > min(image.height, image.width):
        raise ValueError(
            f"chip_size {chip_size} does not fit raster "
            f"{image.height}x{image.width}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if negatives_per_positive < 0:
        raise ValueError("negatives_per_positive must be >= 0")

    def cut(col: int, row: int) -> Chip:
        return Chip(
            samples=image.samples[:, row : row + chip_size, col : col + chip_size].copy(),
            mask=mask[row : row + chip_size, col : col + chip_size].astype(np.uint8),
            origin=(col, row),
            transform=geodata.shift_transform(image.transform, col, row),
            band_names=image.band_names,
            scene_id=scene_id,
        )

    positives = []
    for row in range(0, image.height - chip_size + 1, stride):
        for col in range(0, image.width - chip_size + 1, stride):
            if mask[row : row + chip_size, col : col + chip_size].any():
                positives.append(cut(col, row))

    wanted = math.ceil(negatives_per_positive * len(positives))
    negatives: list[Chip] = []
    if wanted:
        rng = np.random.default_rng(seed)
        seen: set[tuple[int, int]] = set()
        budget = 200 * wanted + 200
        for _ in range(budget):
            if len(negatives) >= wanted:
                break
            row = int(rng.integers(0, image.height - chip_size + 1))
            col = int(rng.integers(0, image.width - chip_size + 1))
            if (col, row) in seen:
                continue
            seen.add((col, row))
            if mask[row : row + chip_size, col : col + chip_size].any():
                continue
            negatives.append(cut(col, row))
        if len(negatives) < wanted:
            warnings.warn(
                f"found only {len(negatives)} of {wanted} all-negative windows",
                stacklevel=2,
            )
    return positives + negatives


@dataclass
class DatasetSplit:
    train: list[Chip]
    val: list[Chip]
    test: list[Chip]
    seed: int = 0

    def all_chips(self) -> list[Chip]:
        return [*self.train, *self.val, *self.test]


def split_dataset(
    chips: list[Chip],
    test_frac: float = 0.1,
    val_frac: float = 0.2,
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle once with the seed, then slice off test and val by rounding."""
    if not chips:
        raise ValueError("cannot split an empty chip list")
    if test_frac < 0 or val_frac < 0 or test_frac + val_frac >= 1:
        raise ValueError(
            f"fractions must be >= 0 and sum below 1, got test={test_frac} "
            f"val={val_frac}"
        )
    n = len(chips)
    n_test = round(test_frac * n)
    n_val = round(val_frac * n)
    perm = np.random.default_rng(seed).permutation(n)
    test = [chips[i] for i in perm[:n_test]]
    val = [chips[i] for i in perm[n_test : n_test + n_val]]
    train = [chips[i] for i in perm[n_test + n_val :]]
    return DatasetSplit(train=train, val=val, test=test, seed=seed)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    """Per-band mean and population std fitted on the training chips only."""

    means: tuple[float, ...]
    stds: tuple[float, ...]
    band_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "stds", tuple(float(s) for s in self.stds))
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds differ in length")
        if any(s <= 0 for s in self.stds):
            raise ValueError(f"stds must be positive, got {self.stds}")
        if self.band_names is not None:
            object.__setattr__(self, "band_names", tuple(self.band_names))
            if len(self.band_names) != len(self.means):
                raise ValueError("band_names length does not match stats")

    def to_json_dict(self) -> dict:
        return {
            "means": list(self.means),
            "stds": list(self.stds),
            "band_names": list(self.band_names) if self.band_names else None,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "NormalizationStats":
        names = obj.get("band_names")
        return cls(
            means=tuple(obj["means"]),
            stds=tuple(obj["stds"]),
            band_names=tuple(names) if names else None,
        )

    def save(self, path: str | Path) -> None:
        atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def fit_normalization(train_chips: list[Chip]) -> NormalizationStats:
    """Fit per-band stats over every pixel of the training chips."""
    if not train_chips:
        raise ValueError("cannot fit normalization on an empty training set")
    stacked = np.stack([c.samples for c in train_chips])  # [n, band, s, s]
    means = stacked.mean(axis=(0, 2, 3), dtype=np.float64)
    stds = stacked.std(axis=(0, 2, 3), dtype=np.float64)
    if np.any(stds == 0):
        flat = [i for i, s in enumerate(stds) if s == 0]
        raise ValueError(f"constant band(s) {flat}: std is zero, cannot normalize")
    return NormalizationStats(
        means=tuple(means), stds=tuple(stds), band_names=train_chips[0].band_names
    )


def apply_normalization(chip: Chip, stats: NormalizationStats) -> Chip:
    if chip.samples.shape[0] != len(stats.means):
        raise ValueError(
            f"chip has {chip.samples.shape[0]} bands, stats cover {len(stats.means)}"
        )
    means = np.asarray(stats.means, dtype=np.float32)[:, None, None]
    stds = np.asarray(stats.stds, dtype=np.float32)[:, None, None]
    return replace(chip, samples=(chip.samples - means) / stds)


def normalize_split(split: DatasetSplit, stats: NormalizationStats) -> DatasetSplit:
    return DatasetSplit(
        train=[apply_normalization(c, stats) for c in split.train],
        val=[apply_normalization(c, stats) for c in split.val],
        test=[apply_normalization(c, stats) for c in split.test],
        seed=split.seed,
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def default_spectral_profiles() -> dict[str, dict[str, tuple[float, float]]]:
    """Per-class (mean, std) for each source band.

    Dump sites are nearly indistinguishable in RGB, mildly darker in NIR,
    and strongly separated in the shortwave bands, so NDSW carries most of
    the signal. That ordering is what the input ablation exercises.
    """
    return {
        "background": {
            "R": (0.10, 0.030),
            "G": (0.14, 0.030),
            "B": (0.08, 0.030),
            "NIR": (0.30, 0.060),
            "SWIR1": (0.18, 0.040),
            "SWIR2": (0.16, 0.040),
        },
        "dump": {
            "R": (0.12, 0.030),
            "G": (0.13, 0.030),
            "B": (0.09, 0.030),
            "NIR": (0.24, 0.060),
            "SWIR1": (0.30, 0.040),
            "SWIR2": (0.12, 0.040),
        },
    }


@dataclass
class SynthConfig:
    """Parameters for one synthetic scene."""

    scene_size: int = 256
    pixel_size: float = 10.0
    dump_count: int = 5
    dump_radius_range: tuple[float, float] = (4.0, 12.0)
    background_texture_seed: int = 0
    spectral_profiles: dict[str, dict[str, tuple[float, float]]] = field(
        default_factory=default_spectral_profiles
    )

    def __post_init__(self):
        if self.scene_size < 16:
            raise ValueError(f"scene_size must be >= 16, got {self.scene_size}")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.dump_count < 0:
            raise ValueError(f"dump_count must be >= 0, got {self.dump_count}")
        rmin, rmax = self.dump_radius_range
        if not (0 < rmin <= rmax):
            raise ValueError(f"bad dump_radius_range {self.dump_radius_range}")
        if rmax >= self.scene_size / 2:
            raise ValueError(
                f"dump radius {rmax} too large for scene_size {self.scene_size}"
            )
        for cls in ("background", "dump"):
            if cls not in self.spectral_profiles:
                raise ValueError(f"spectral_profiles missing class {cls!r}")
            for band in SOURCE_BANDS:
                if band not in self.spectral_profiles[cls]:
                    raise ValueError(f"spectral_profiles[{cls!r}] missing band {band}")


_BLOB_VERTICES = 28


def generate_synthetic(
    config: SynthConfig,
) -> tuple[Raster, list[PolygonAnnotation]]:
    """Build a six-band scene with irregular elliptic dump blobs.

    Returns the source raster [R, G, B, NIR, SWIR1, SWIR2] and polygon
    annotations that exactly outline the painted blobs: the blob mask is
    rasterized from the very polygons that are returned.
    """
    rng = np.random.default_rng(config.background_texture_seed)
    size = config.scene_size
    ps = config.pixel_size
    transform = GeoTransform(0.0, size * ps, ps, ps)

    rmin, rmax = config.dump_radius_range
    placed: list[tuple[float, float, float]] = []
    polygons: list[PolygonAnnotation] = []
    for _ in range(config.dump_count):
        for _attempt in range(400):
            radius = float(rng.uniform(rmin, rmax))
            margin = 1.2 * radius + 2.0
            if 2 * margin >= size:
                continue
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            if all(
                math.hypot(cx - px, cy - py) > radius + pr + 3.0
                for px, py, pr in placed
            ):
                break
        else:
            raise ValueError(
                f"could not place {config.dump_count} blobs of radius "
                f"<= {rmax} in a {size}px scene"
            )
        placed.append((cx, cy, radius))
        eccentricity = float(rng.uniform(0.65, 1.0))
        tilt = float(rng.uniform(0.0, math.pi))
        phase = float(rng.uniform(0.0, 2 * math.pi))
        jitter = rng.uniform(0.9, 1.1, _BLOB_VERTICES)
        ring = []
        for k in range(_BLOB_VERTICES):
            ang = phase + 2 * math.pi * k / _BLOB_VERTICES
            ex = radius * math.cos(ang) * jitter[k]
            ey = radius * eccentricity * math.sin(ang) * jitter[k]
            px = cx + ex * math.cos(tilt) - ey * math.sin(tilt)
            py = cy + ex * math.sin(tilt) + ey * math.cos(tilt)
            ring.append(geodata.pixel_to_world(transform, px, py))
        polygons.append(PolygonAnnotation((*ring, ring[0])))

    mask = rasterize_mask(polygons, transform, size, size)

    profiles = config.spectral_profiles
    layers = []
    for band in SOURCE_BANDS:
        noise = rng.standard_normal((size, size))
        texture = uniform_filter(noise, size=5, mode="reflect")
        texture = (texture - texture.mean()) / texture.std()
        bg_mean, bg_std = profiles["background"][band]
        dump_mean, dump_std = profiles["dump"][band]
        values = np.where(
            mask == 1, dump_mean + dump_std * texture, bg_mean + bg_std * texture
        )
        layers.append(values.astype(np.float32))

    raster = Raster(
        np.stack(layers), transform, nodata=math.nan, band_names=SOURCE_BANDS
    )
    return raster, polygons


# ---------------------------------------------------------------------------
# chip catalog persistence
# ---------------------------------------------------------------------------


def save_catalog(
    path: str | Path,
    split: DatasetSplit,
    stats: NormalizationStats | None = None,
) -> None:
    """Persist a split as one native raster pair per chip plus an index.

    Each chip raster carries the image bands plus a trailing "mask" band.
    Raw (unnormalized) samples are stored; stats ride along in stats.json.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    chip_size = None
    band_names = None
    for split_name in ("train", "val", "test"):
        for chip in getattr(split, split_name):
            idx = len(entries)
            rel = f"chips/chip_{idx:05d}"
            names = chip.band_names or tuple(
                f"band{i}" for i in range(chip.samples.shape[0])
            )
            stackable = np.concatenate(
                [chip.samples, chip.mask[None].astype(np.float32)]
            )
            geodata.write_raster(
                Raster(
                    stackable,
                    chip.transform,
                    nodata=None,
                    band_names=(*names, "mask"),
                ),
                root / rel,
            )
            entries.append(
                {
                    "id": idx,
                    "file": rel,
                    "origin": list(chip.origin),
                    "split": split_name,
                    "positive": chip.is_positive(),
                    "scene": chip.scene_id,
                }
            )
            chip_size = chip.size
            band_names = names
    index = {
        "format": CATALOG_FORMAT,
        "format_version": CATALOG_FORMAT_VERSION,
        "chip_size": chip_size,
        "band_names": list(band_names) if band_names else None,
        "seed": split.seed,
        "chips": entries,
    }
    atomic_write_json(root / "index.json", index)
    if stats is not None:
        stats.save(root / "stats.json")


def load_catalog(path: str | Path) -> tuple[DatasetSplit, NormalizationStats | None]:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"missing catalog index {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("format") != CATALOG_FORMAT:
        raise ValueError(f"unrecognized catalog format in {index_path}")
    if index.get("format_version") != CATALOG_FORMAT_VERSION:
        raise ValueError(
            f"unsupported catalog version {index.get('format_version')!r}"
        )
    buckets: dict[str, list[Chip]] = {"train": [], "val": [], "test": []}
    for entry in index["chips"]:
        raster = geodata.read_raster(root / entry["file"])
        chip = Chip(
            samples=raster.samples[:-1],
            mask=raster.samples[-1].astype(np.uint8),
            origin=tuple(entry["origin"]),
            transform=raster.transform,
            band_names=raster.band_names[:-1] if raster.band_names else None,
            scene_id=entry.get("scene", ""),
        )
        if entry["split"] not in buckets:
            raise ValueError(f"unknown split {entry['split']!r} in catalog index")
        buckets[entry["split"]].append(chip)
    stats = None
    stats_path = root / "stats.json"
    if stats_path.exists():
        stats = NormalizationStats.load(stats_path)
    split = DatasetSplit(
        train=buckets["train"],
        val=buckets["val"],
        test=buckets["test"],
        seed=int(index.get("seed", 0)),
    )
    return split, stats


def _reflect_indices(n: int, lo: int, hi: int) -> np.ndarray:
    """Source indices for reflect padding of width lo/hi around an n-axis.

    Extends the triangular wave 0..n-1..0 in both directions, so arbitrary
    pad widths work (numpy-compatible edge-unrepeated reflection). A 1-wide
    axis degrades to edge replication.
    """
    if n == 1:
        return np.zeros(lo + 1 + hi, dtype=np.intp)
    idx = np.arange(-lo, n + hi)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def reflect_pad(array: np.ndarray, pads: tuple[tuple[int, int], tuple[int, int]]) -> np.ndarray:
    """Reflect-pad the trailing two axes; pads may exceed the axis length."""
    (top, bottom), (left, right) = pads
    h, w = array.shape[-2], array.shape[-1]
    out = np.take(array, _reflect_indices(h, top, bottom), axis=-2)
    return np.take(out, _reflect_indices(w, left, right), axis=-1)
