"""Region data model, synthetic scene rendering, and corpus file formats.

A corpus is a grid of regions per city. Each region has a rendered image,
one or more captions, and three ground-truth indicators (carbon, population,
gdp) derived from the measured pixel coverage of the rendered features.
Everything is a pure function of (seed, config): rebuilding a city yields
byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IMGF32_MAGIC = b"URBC"
INDICATORS = ("carbon", "population", "gdp")
FEATURES = ("building", "road", "green", "water")

# One flat color per feature so coverage can be recovered exactly from pixels.
# Render order: background, water, greenery, roads, buildings (later overwrites).
PALETTE = {
    "background": (0.82, 0.71, 0.55),
    "water": (0.18, 0.42, 0.78),
    "green": (0.20, 0.60, 0.25),
    "road": (0.25, 0.25, 0.27),
    "building": (0.55, 0.55, 0.58),
}

PROFILES = ("sparse", "moderate", "dense")

# Count ranges (inclusive) drawn per density profile.
_PROFILE_COUNTS = {
    "sparse": {"building": (0, 5), "road": (0, 3), "green": (0, 3), "water": (0, 2)},
    "moderate": {"building": (6, 20), "road": (2, 8), "green": (1, 5), "water": (0, 2)},
    "dense": {"building": (21, 60), "road": (5, 14), "green": (2, 7), "water": (0, 3)},
}


@dataclass(frozen=True)
class Coverage:
    """Pixel-coverage fractions of the rendered image, one per feature."""

    b: float
    r: float
    g: float
    w: float

    def __post_init__(self) -> None:
        total = self.b + self.r + self.g + self.w
        if total > 1.0 + 1e-6:
            raise ValueError(f"coverage fractions sum to {total} > 1")
        for name, value in self.as_dict().items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"coverage.{name}={value} outside [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {"b": self.b, "r": self.r, "g": self.g, "w": self.w}

    def for_feature(self, feature: str) -> float:
        return {"building": self.b, "road": self.r, "green": self.g, "water": self.w}[feature]


@dataclass(frozen=True)
class SceneSpec:
    """Ground truth for one synthetic region: drawn counts plus measured coverage."""

    seed: int
    building_count: int
    road_count: int
    green_blob_count: int
    water_blob_count: int
    coverage: Coverage

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coverage"] = self.coverage.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=d["seed"],
            building_count=d["building_count"],
            road_count=d["road_count"],
            green_blob_count=d["green_blob_count"],
            water_blob_count=d["water_blob_count"],
            coverage=Coverage(**d["coverage"]),
        )


@dataclass
class RegionRecord:
    region_id: str
    city: str
    grid_ij: tuple[int, int]
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    captions: list[str]
    indicators_raw: dict[str, float]
    indicators_log: dict[str, float]
    scene: SceneSpec | None = None


@dataclass(frozen=True)
class CorpusSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def all_ids(self) -> tuple[str, ...]:
        return self.train_ids + self.val_ids + self.test_ids


@dataclass
class CorpusConfig:
    """Knobs for synthetic corpus generation; (city_seed, config) fixes a city."""

    height: int = 64
    width: int = 64
    patch_size: int = 8
    noise_sigma_frac: float = 0.05
    captions_per_image: float = 4.5
    inject_bad_prob: float = 0.0
    refine: bool = True
    factual_keep_threshold: float = 0.5
    profile_weights: tuple[float, float, float] = (0.3, 0.4, 0.3)  # sparse/moderate/dense

    def __post_init__(self) -> None:
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"image size {self.height}x{self.width} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.captions_per_image < 1:
            raise ValueError("captions_per_image must be >= 1")


def region_seed(city_seed: int, region_id: str) -> int:
    """Stable per-region seed so parallel and serial builds agree."""
    digest = hashlib.blake2b(
        f"{city_seed}:{region_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def log_scale(x: float) -> float:
    """log(1 + x); indicators may be exactly zero."""
    if x < 0:
        raise ValueError(f"log_scale requires x >= 0, got {x}")
    return math.log1p(x)


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------


def _paint_disc(img: np.ndarray, cy: float, cx: float, radius: float, color) -> None:
    h, w, _ = img.shape
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img[mask] = color


def _paint_segment(img, y0, x0, y1, x1, half_width, color) -> None:
    # Distance from every pixel center to the segment, vectorized.
    h, w, _ = img.shape
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    dy, dx = y1 - y0, x1 - x0
    length_sq = dy * dy + dx * dx
    if length_sq == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length_sq, 0.0, 1.0)
    dist_sq = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
    img[dist_sq <= half_width**2] = color


def _paint_rect(img, y0, x0, rh, rw, color) -> None:
    h, w, _ = img.shape
    y1, x1 = min(h, y0 + rh), min(w, x0 + rw)
    img[y0:y1, x0:x1] = color


def measure_coverage(image: np.ndarray) -> Coverage:
    """Coverage fractions by exact palette match over the pixel buffer."""
    h, w, _ = image.shape
    total = h * w
    fracs = {}
    for feature in FEATURES:
        color = np.asarray(PALETTE[feature], dtype=np.float32)
        fracs[feature] = int(np.all(image == color, axis=-1).sum()) / total
    return Coverage(b=fracs["building"], r=fracs["road"], g=fracs["green"], w=fracs["water"])


def generate_scene(
    seed: int,
    density_profile: str,
    height: int = 64,
    width: int = 64,
    patch_size: int = 8,
) -> tuple[np.ndarray, SceneSpec]:
    """Render one synthetic region image and its ground-truth SceneSpec.

    Deterministic given (seed, profile, height, width). Coverage fractions
    are measured from the emitted pixels, not from the requested counts.
    """
    if density_profile not in PROFILES:
        raise ValueError(f"unknown density profile {density_profile!r}")
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"image size {height}x{width} not divisible by patch size {patch_size}"
        )
    rng = np.random.default_rng(seed)
    ranges = _PROFILE_COUNTS[density_profile]
    counts = {
        feature: int(rng.integers(lo, hi + 1)) for feature, (lo, hi) in ranges.items()
    }

    img = np.empty((height, width, 3), dtype=np.float32)
    img[:] = PALETTE["background"]

    # Feature sizes are kept in narrow bands so the primitive counts (what
    # captions state) stay tightly coupled to pixel coverage (what the
    # indicators derive from).
    scale = min(height, width)
    for _ in range(counts["water"]):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        _paint_disc(img, cy, cx, rng.uniform(scale / 12, scale / 8), PALETTE["water"])
    for _ in range(counts["green"]):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        _paint_disc(img, cy, cx, rng.uniform(scale / 14, scale / 10), PALETTE["green"])
    for _ in range(counts["road"]):
        y0, x0 = rng.uniform(0, height), rng.uniform(0, width)
        angle = rng.uniform(0, math.pi)
        length = rng.uniform(scale * 0.6, scale * 0.9)
        y1 = y0 + length * math.sin(angle)
        x1 = x0 + length * math.cos(angle)
        _paint_segment(img, y0, x0, y1, x1, max(0.7, scale / 80), PALETTE["road"])
    side_lo = max(2, round(scale * 0.075))
    side_hi = max(side_lo + 1, round(scale * 0.095))
    for _ in range(counts["building"]):
        rh = int(rng.integers(side_lo, side_hi + 1))
        rw = int(rng.integers(side_lo, side_hi + 1))
        y0 = int(rng.integers(0, max(1, height - rh + 1)))
        x0 = int(rng.integers(0, max(1, width - rw + 1)))
        _paint_rect(img, y0, x0, rh, rw, PALETTE["building"])

    scene = SceneSpec(
        seed=seed,
        building_count=counts["building"],
        road_count=counts["road"],
        green_blob_count=counts["green"],
        water_blob_count=counts["water"],
        coverage=measure_coverage(img),
    )
    return img, scene


def derive_indicators(
    scene: SceneSpec, noise_sigma_frac: float, seed: int
) -> dict[str, float]:
    """Ground-truth indicators from coverage, with truncated multiplicative noise."""
    if noise_sigma_frac < 0:
        raise ValueError("noise_sigma_frac must be >= 0")
    cov = scene.coverage
    base = {
        "carbon": max(0.0, 30000.0 * cov.b + 20000.0 * cov.r - 5000.0 * cov.g),
        "population": 50000.0 * cov.b * (1.0 + 0.2 * cov.r),
        "gdp": 80000.0 * cov.b + 40000.0 * cov.r,
    }
    rng = np.random.default_rng(seed)
    out = {}
    for key in INDICATORS:
        eps = float(np.clip(rng.normal(0.0, noise_sigma_frac), -0.5, 0.5)) if noise_sigma_frac > 0 else 0.0
        out[key] = base[key] * (1.0 + eps)
    return out


# ---------------------------------------------------------------------------
# Corpus build
# ---------------------------------------------------------------------------


def _draw_profile(rng: np.random.Generator, weights: Sequence[float]) -> str:
    p = np.asarray(weights, dtype=np.float64)
    return PROFILES[int(rng.choice(len(PROFILES), p=p / p.sum()))]


def build_records(
    city: str,
    n_regions: int,
    grid_shape: tuple[int, int],
    config: CorpusConfig,
    city_seed: int,
    provider=None,
    rules=None,
) -> list[RegionRecord]:
    """Generate all RegionRecords for one city (no files written)."""
    from . import textpipe

    rows, cols = grid_shape
    if rows * cols != n_regions:
        raise ValueError(f"grid {rows}x{cols} does not hold {n_regions} regions")
    if provider is None:
        provider = textpipe.SyntheticCaptionProvider(
            captions_per_image=config.captions_per_image,
            inject_bad_prob=config.inject_bad_prob,
        )
    if rules is None:
        rules = textpipe.RefineRules.default()

    width = len(str(max(0, n_regions - 1)))
    records = []
    for i in range(n_regions):
        region_id = f"{city}_{i:0{width}d}"
        rseed = region_seed(city_seed, region_id)
        rng = np.random.default_rng(rseed)
        profile = _draw_profile(rng, config.profile_weights)
        image, scene = generate_scene(
            int(rng.integers(0, 2**63)),
            profile,
            config.height,
            config.width,
            config.patch_size,
        )
        raw = derive_indicators(scene, config.noise_sigma_frac, int(rng.integers(0, 2**63)))
        captions = provider.generate(image, scene, instruction="", seed=int(rng.integers(0, 2**63)))
        if config.refine:
            captions = textpipe.refine_captions(
                captions, scene, rules, keep_threshold=config.factual_keep_threshold
            )
        if not captions:
            raise RuntimeError(f"region {region_id} has no captions after refinement")
        records.append(
            RegionRecord(
                region_id=region_id,
                city=city,
                grid_ij=(i // cols, i % cols),
                image=image,
                captions=captions,
                indicators_raw=raw,
                indicators_log={k: log_scale(v) for k, v in raw.items()},
                scene=scene,
            )
        )
    return records


def build_corpus(
    city: str,
    n_regions: int,
    grid_shape: tuple[int, int],
    config: CorpusConfig,
    city_seed: int,
    out_dir: str | Path,
    overwrite: bool = False,
    provider=None,
    rules=None,
) -> list[RegionRecord]:
    """Generate a city and write images plus manifest.jsonl under out_dir."""
    out = Path(out_dir)
    manifest = out / "manifest.jsonl"
    if manifest.exists() and not overwrite:
        raise FileExistsError(f"{manifest} exists; pass overwrite to replace it")
    records = build_records(
        city, n_regions, grid_shape, config, city_seed, provider=provider, rules=rules
    )
    write_corpus(records, out)
    return records


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def encode_imgf32(image: np.ndarray) -> bytes:
    """16-byte header (magic + H, W, C as little-endian u32) then f32 payload."""
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.ndim != 3:
        raise ValueError(f"expected HxWxC image, got shape {image.shape}")
    h, w, c = image.shape
    return IMGF32_MAGIC + struct.pack("<III", h, w, c) + image.tobytes()


def write_imgf32(path: str | Path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_imgf32(image))


def read_imgf32(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_imgf32(data)


def decode_imgf32(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != IMGF32_MAGIC:
        raise ValueError("not an .imgf32 payload (bad magic)")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + h * w * c * 4
    if len(data) != expected:
        raise ValueError(f"payload length {len(data)} != expected {expected}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w, c).copy()


def _record_to_manifest_row(record: RegionRecord, image_path: str) -> dict:
    return {
        "region_id": record.region_id,
        "city": record.city,
        "grid_ij": list(record.grid_ij),
        "image_path": image_path,
        "captions": record.captions,
        "indicators_raw": record.indicators_raw,
        "indicators_log": record.indicators_log,
        "scene": record.scene.to_dict() if record.scene is not None else None,
    }


def write_corpus(records: Iterable[RegionRecord], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for record in records:
            rel = f"images/{record.region_id}.imgf32"
            write_imgf32(out / rel, record.image)
            fh.write(json.dumps(_record_to_manifest_row(record, rel)) + "\n")
    return manifest


def load_corpus(corpus_dir: str | Path) -> list[RegionRecord]:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    records = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            records.append(
                RegionRecord(
                    region_id=row["region_id"],
                    city=row["city"],
                    grid_ij=tuple(row["grid_ij"]),
                    image=read_imgf32(corpus_dir / row["image_path"]),
                    captions=list(row["captions"]),
                    indicators_raw=row["indicators_raw"],
                    indicators_log=row["indicators_log"],
                    scene=SceneSpec.from_dict(row["scene"]) if row["scene"] else None,
                )
            )
    return records


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_corpus(ids: Sequence[str], seed: int) -> CorpusSplit:
    """Seeded shuffle then 60/20/20 partition (floor train, floor val, rest test)."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("region ids must be unique")
    if len(ids) < 5:
        raise ValueError(f"need at least 5 ids to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(n * 0.6)
    n_val = int(n * 0.2)
    return CorpusSplit(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train : n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val :]),
        seed=seed,
    )


def save_split(split: CorpusSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": split.seed,
                "train": list(split.train_ids),
                "val": list(split.val_ids),
                "test": list(split.test_ids),
            },
            fh,
        )


def load_split(path: str | Path) -> CorpusSplit:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return CorpusSplit(
        train_ids=tuple(d["train"]),
        val_ids=tuple(d["val"]),
        test_ids=tuple(d["test"]),
        seed=d["seed"],
    )
