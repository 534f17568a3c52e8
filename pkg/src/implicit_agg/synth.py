"""Deterministic synthetic place-recognition corpus.

Each place is a smooth random texture carrying a few high-frequency
"landmark" patches. Views jitter the crop position, brightness and pixel
noise. Confuser pairs share texture and all but one landmark, which makes
them near-duplicates that only a landmark-aware descriptor can separate.

The pixel path is integer arithmetic over PCG64 integer draws, so a seed
yields byte-identical images on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .pnm import write_ppm
from .retrieval import PlaceManifest, Record, write_manifest

POOLS = {"eval": 0, "train": 1, "val": 2}
POOL_NORTHING = {"eval": 0.0, "train": 1_000_000.0, "val": 2_000_000.0}
METERS_THRESHOLD = 25.0


@dataclass
class SynthSpec:
    num_places: int = 64
    views_per_place: int = 6
    image_size: int = 56
    confuser_pairs: int = 8
    max_shift_px: int = 4
    max_brightness_delta: int = 24
    noise_sigma: float = 6.0
    grid_spacing_m: float = 100.0
    train_places: int = 256
    val_places: int = 32
    texture_cells: int = 4
    landmark_size: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.num_places < 1 or self.views_per_place < 2:
            raise ContractError("need at least one place and two views per place")
        if 2 * self.confuser_pairs > self.num_places:
            raise ContractError("confuser_pairs * 2 exceeds num_places")
        if not 0 <= self.max_shift_px < self.image_size / 4:
            raise ContractError("max_shift_px must be below image_size / 4")
        if self.grid_spacing_m < 2 * METERS_THRESHOLD:
            raise ContractError("grid spacing must be at least twice the 25 m threshold")
        if not 0 < self.landmark_size <= self.image_size // 2:
            raise ContractError("landmark_size must be in (0, image_size / 2]")

    @property
    def canvas(self) -> int:
        return self.image_size + 2 * self.max_shift_px

    def pool_size(self, pool: str) -> int:
        return {"eval": self.num_places, "train": self.train_places, "val": self.val_places}[pool]

    def pool_confusers(self, pool: str) -> int:
        if pool == "eval":
            return self.confuser_pairs
        n = self.pool_size(pool)
        return min(n // 2, (self.confuser_pairs * n) // self.num_places)


@dataclass
class Landmark:
    row: int
    col: int
    size: int
    pattern: np.ndarray  # (size, size, 3) uint8


@dataclass
class Place:
    index: int
    base: np.ndarray  # (canvas, canvas, 3) uint8
    landmarks: list = field(default_factory=list)
    confuser_of: int = -1
    replaced: int = -1  # landmark index that differs from the partner

    def render(self) -> np.ndarray:
        img = self.base.copy()
        for lm in self.landmarks:
            img[lm.row : lm.row + lm.size, lm.col : lm.col + lm.size] = lm.pattern
        return img


def _rng(spec: SynthSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *key])


def smooth_texture(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear upsampling of a coarse random lattice, integer arithmetic only."""
    lattice = rng.integers(0, 256, size=(cells + 1, cells + 1, 3), dtype=np.int64)
    # pixel centre positions in lattice units, fixed-point with scale `size`
    pos = np.arange(size, dtype=np.int64) * cells
    i0 = np.minimum(pos // size, cells - 1)
    f = pos - i0 * size  # in [0, size]
    y0, x0 = i0[:, None], i0[None, :]
    fy, fx = f[:, None, None], f[None, :, None]
    g = size
    top = lattice[y0, x0] * (g - fx) + lattice[y0, x0 + 1] * fx
    bot = lattice[y0 + 1, x0] * (g - fx) + lattice[y0 + 1, x0 + 1] * fx
    val = (top * (g - fy) + bot * fy + (g * g) // 2) // (g * g)
    return val.astype(np.uint8)


def landmark_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """Two-colour random blocky pattern with 2-pixel cells."""
    cells = (size + 1) // 2
    bits = rng.integers(0, 2, size=(cells, cells), dtype=np.int64)
    bits = np.repeat(np.repeat(bits, 2, axis=0), 2, axis=1)[:size, :size]
    c0 = rng.integers(0, 256, size=3, dtype=np.int64)
    c1 = (c0 + 128 + rng.integers(-40, 41, size=3, dtype=np.int64)) % 256
    out = np.where(bits[..., None] == 1, c1, c0)
    return out.astype(np.uint8)


def make_places(spec: SynthSpec, pool: str) -> list:
    n = spec.pool_size(pool)
    pid = POOLS[pool]
    S = spec.canvas
    places = []
    for i in range(n):
        rng = _rng(spec, pid, i)
        base = smooth_texture(rng, S, spec.texture_cells)
        count = int(rng.integers(2, 5))
        lms = []
        for _ in range(count):
            sz = spec.landmark_size
            r = int(rng.integers(0, S - sz + 1))
            c = int(rng.integers(0, S - sz + 1))
            lms.append(Landmark(r, c, sz, landmark_pattern(rng, sz)))
        places.append(Place(i, base, lms))
    for j in range(spec.pool_confusers(pool)):
        a, b = places[2 * j], places[2 * j + 1]
        rng = _rng(spec, pid, 10_000 + j)
        k = int(rng.integers(0, len(a.landmarks)))
        # the replaced landmark is drawn last in both places so nothing hides it
        a.landmarks.append(a.landmarks.pop(k))
        old = a.landmarks[-1]
        pat = landmark_pattern(rng, old.size)
        while np.array_equal(pat, old.pattern):
            pat = landmark_pattern(rng, old.size)
        lms = [Landmark(lm.row, lm.col, lm.size, lm.pattern.copy()) for lm in a.landmarks[:-1]]
        lms.append(Landmark(old.row, old.col, old.size, pat))
        last = len(lms) - 1
        places[2 * j + 1] = Place(b.index, a.base.copy(), lms, confuser_of=a.index, replaced=last)
        a.confuser_of, a.replaced = b.index, last
    return places


def noise_half_width(sigma: float) -> int:
    """Half-width ``a`` so a sum of four uniform integers in ``[-a, a]`` has std >= sigma."""
    if sigma <= 0:
        return 0
    a = 0
    while 4 * a * (a + 1) < 3 * sigma * sigma:
        a += 1
    return a


def render_view(spec: SynthSpec, place: Place, pool: str, view: int) -> np.ndarray:
    rng = _rng(spec, POOLS[pool], place.index, 1 + view)
    ms = spec.max_shift_px
    dy, dx = (int(v) for v in rng.integers(-ms, ms + 1, size=2))
    canvas = place.render().astype(np.int64)
    s = spec.image_size
    img = canvas[ms + dy : ms + dy + s, ms + dx : ms + dx + s]
    img = img + int(rng.integers(-spec.max_brightness_delta, spec.max_brightness_delta + 1))
    a = noise_half_width(spec.noise_sigma)
    if a:
        img = img + rng.integers(-a, a + 1, size=(4,) + img.shape, dtype=np.int64).sum(axis=0)
    return np.clip(img, 0, 255).astype(np.uint8)


def place_position(spec: SynthSpec, pool: str, i: int) -> tuple:
    cols = math.ceil(math.sqrt(spec.pool_size(pool)))
    return (
        float((i % cols) * spec.grid_spacing_m),
        POOL_NORTHING[pool] + float((i // cols) * spec.grid_spacing_m),
    )


def _write_pool(spec: SynthSpec, out: Path, pool: str, split: bool) -> PlaceManifest:
    img_dir = out / "images" / pool
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for place in make_places(spec, pool):
        e, n = place_position(spec, pool, place.index)
        for v in range(spec.views_per_place):
            name = f"p{place.index:04d}_v{v}"
            rel = f"images/{pool}/{name}.ppm"
            write_ppm(out / rel, render_view(spec, place, pool, v))
            role = "query" if split and v == 0 else "database"
            records.append(Record(f"{pool}-{name}", rel, role, easting_m=e, northing_m=n))
    man = PlaceManifest(records, threshold=METERS_THRESHOLD, root=out)
    write_manifest(out / f"{pool}.jsonl", man)
    return man


def generate(spec: SynthSpec, out_dir) -> PlaceManifest:
    """Write ``eval.jsonl``, ``train.jsonl``, ``val.jsonl`` and their images.

    Returns the eval manifest (view 0 of every place is the query, the other
    views form the database). Train and val use disjoint place pools; train
    records are all ``database`` role.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.train_places:
        _write_pool(spec, out, "train", split=False)
    if spec.val_places:
        _write_pool(spec, out, "val", split=True)
    return _write_pool(spec, out, "eval", split=True)
