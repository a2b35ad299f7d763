"""Procedural multi-object scenes with exact instance masks.

Scenes are flat- or gradient-background images with 2-D primitive
shapes drawn back to front. Images are anti-aliased via subpixel
supersampling; label maps are hard (a pixel belongs to the last object
whose coverage of it is at least half). Generation is a pure function
of (spec.rng_seed, index).
"""

import hashlib
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "cross")

#: Bright fills; background colors stay below 0.35 per channel so every
#: visible object pixel is separated from the background.
DEFAULT_PALETTE = (
    (0.90, 0.16, 0.16),
    (0.16, 0.82, 0.22),
    (0.22, 0.36, 0.95),
    (0.95, 0.84, 0.20),
    (0.88, 0.26, 0.86),
    (0.20, 0.84, 0.88),
)

BACKGROUND_LO = 0.05
BACKGROUND_HI = 0.30

#: Instances with fewer visible pixels than this are relabeled out.
MIN_VISIBLE_PIXELS = 16

SUPERSAMPLE = 4

RECORD_HEADER = struct.Struct("<HHH")
MANIFEST_NAME = "manifest.txt"
RECORDS_NAME = "records.bin"
MANIFEST_VERSION = 1


class SceneSpecError(ValueError):
    """Raised for degenerate or inconsistent scene specifications."""


class DatasetError(RuntimeError):
    """Raised for unreadable or corrupt dataset directories."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    n_min: int = 1
    n_max: int = 6
    shape_classes: tuple = ("circle", "square", "triangle")
    size_min: float = 0.15   # object extent as a fraction of the image side
    size_max: float = 0.30
    palette: tuple = DEFAULT_PALETTE
    background_mode: str = "gradient"
    allow_overlap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise SceneSpecError(f"image_size too small: {self.image_size}")
        if self.n_min < 1:
            raise SceneSpecError(f"n_min must be >= 1, got {self.n_min}")
        if self.n_max < self.n_min:
            raise SceneSpecError(f"n_max {self.n_max} < n_min {self.n_min}")
        if not self.shape_classes:
            raise SceneSpecError("shape_classes is empty")
        for s in self.shape_classes:
            if s not in SHAPE_NAMES:
                raise SceneSpecError(f"unknown shape class: {s!r}")
        if not (0.0 < self.size_min < self.size_max <= 1.0):
            raise SceneSpecError(
                f"degenerate size_range: [{self.size_min}, {self.size_max}]"
            )
        if not self.palette:
            raise SceneSpecError("palette is empty")
        if self.background_mode not in ("flat", "gradient"):
            raise SceneSpecError(f"unknown background_mode: {self.background_mode!r}")


@dataclass
class SceneSample:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    instance_labels: np.ndarray  # (H, W) uint16; 0 = background
    class_ids: np.ndarray        # (object_count,) int64 shape-class indices
    object_count: int


def scene_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    """Deterministic per-sample generator: a pure function of (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([spec.rng_seed, index]))


def draw_object_count(spec: SceneSpec, rng: np.random.Generator) -> int:
    return int(rng.integers(spec.n_min, spec.n_max + 1))


def render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Dark flat color or linear gradient; consumes a fixed number of draws."""
    h = w = spec.image_size
    if spec.background_mode == "flat":
        color = rng.uniform(BACKGROUND_LO, BACKGROUND_HI, size=3)
        return np.broadcast_to(color, (h, w, 3)).astype(np.float32).copy()
    c0 = rng.uniform(BACKGROUND_LO, BACKGROUND_HI, size=3)
    c1 = rng.uniform(BACKGROUND_LO, BACKGROUND_HI, size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    proj = xs * np.cos(angle) + ys * np.sin(angle)
    lo, hi = proj.min(), proj.max()
    t = ((proj - lo) / max(hi - lo, 1e-9))[..., None]
    return ((1.0 - t) * c0 + t * c1).astype(np.float32)


def _inside(shape: str, xs, ys, cx: float, cy: float, half: float):
    """Boolean inside-test for a shape of half-extent ``half`` at (cx, cy)."""
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    if shape == "cross":
        arm = half / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | (
            (np.abs(dx) <= half) & (np.abs(dy) <= arm)
        )
    if shape == "triangle":
        # apex-up triangle inscribed in the radius-``half`` circle;
        # sign-consistent half-plane test, independent of winding
        v = np.array([
            (cx, cy - half),
            (cx - half * np.sqrt(3) / 2, cy + half / 2),
            (cx + half * np.sqrt(3) / 2, cy + half / 2),
        ])
        shape2d = np.broadcast_shapes(xs.shape, ys.shape)
        pos = np.ones(shape2d, dtype=bool)
        neg = np.ones(shape2d, dtype=bool)
        for a in range(3):
            x0, y0 = v[a]
            x1, y1 = v[(a + 1) % 3]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            pos &= cross >= 0
            neg &= cross <= 0
        return pos | neg
    raise SceneSpecError(f"unknown shape class: {shape!r}")


def _alpha_map(shape: str, size: int, cx: float, cy: float, half: float):
    """Subpixel coverage of the shape inside its bounding box.

    Returns (alpha, y0, y1, x0, x1) with alpha shaped (y1-y0, x1-x0).
    """
    pad = 1.0
    x0 = max(int(np.floor(cx - half - pad)), 0)
    x1 = min(int(np.ceil(cx + half + pad)) + 1, size)
    y0 = max(int(np.floor(cy - half - pad)), 0)
    y1 = min(int(np.ceil(cy + half + pad)) + 1, size)
    ss = SUPERSAMPLE
    offs = (np.arange(ss) + 0.5) / ss
    sub_x = (x0 + np.add.outer(np.arange(x1 - x0), offs)).ravel()
    sub_y = (y0 + np.add.outer(np.arange(y1 - y0), offs)).ravel()
    xs = sub_x[None, :]
    ys = sub_y[:, None]
    fine = _inside(shape, xs, ys, cx, cy, half)
    coarse = fine.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return coarse, y0, y1, x0, x1


def _compact_labels(labels: np.ndarray, class_ids: list):
    """Drop instances below the visibility floor and renumber 1..n densely."""
    n = len(class_ids)
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    keep = [i for i in range(1, n + 1) if counts[i] >= MIN_VISIBLE_PIXELS]
    remap = np.zeros(n + 1, dtype=np.uint16)
    for new, old in enumerate(keep, start=1):
        remap[old] = new
    return remap[labels], [class_ids[old - 1] for old in keep]


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    """Render sample ``index``: background, then objects back to front.

    Later objects occlude earlier ones; instances occluded below the
    visibility floor are relabeled out so every retained label is
    visible. Deterministic in (spec.rng_seed, index).
    """
    rng = scene_rng(spec, index)
    n = draw_object_count(spec, rng)
    size = spec.image_size
    image = render_background(spec, rng)
    labels = np.zeros((size, size), dtype=np.uint16)
    class_ids = []
    palette = np.asarray(spec.palette, dtype=np.float32)
    # colors are distinct within a scene whenever the palette allows it
    color_idx = rng.choice(len(palette), size=n, replace=n > len(palette))

    for obj in range(1, n + 1):
        shape_idx = int(rng.integers(len(spec.shape_classes)))
        shape = spec.shape_classes[shape_idx]
        color = palette[color_idx[obj - 1]]
        half = float(rng.uniform(spec.size_min, spec.size_max)) * size / 2.0
        lo, hi = half, size - half
        if lo >= hi:
            lo, hi = size * 0.25, size * 0.75
        cx = cy = None
        for _ in range(200):
            cand_x = float(rng.uniform(lo, hi))
            cand_y = float(rng.uniform(lo, hi))
            if spec.allow_overlap:
                cx, cy = cand_x, cand_y
                break
            alpha, y0, y1, x0, x1 = _alpha_map(shape, size, cand_x, cand_y, half)
            if not (labels[y0:y1, x0:x1][alpha >= 0.5] > 0).any():
                cx, cy = cand_x, cand_y
                break
        if cx is None:
            # could not place without overlap; accept the last candidate
            cx, cy = cand_x, cand_y

        alpha, y0, y1, x0, x1 = _alpha_map(shape, size, cx, cy, half)
        region = image[y0:y1, x0:x1]
        a3 = alpha[..., None].astype(np.float32)
        image[y0:y1, x0:x1] = a3 * color + (1.0 - a3) * region
        hard = alpha >= 0.5
        labels[y0:y1, x0:x1][hard] = obj
        class_ids.append(shape_idx)

    labels, class_ids = _compact_labels(labels, class_ids)
    return SceneSample(
        image=image,
        instance_labels=labels,
        class_ids=np.asarray(class_ids, dtype=np.int64),
        object_count=len(class_ids),
    )


# --------------------------------------------------------------------------
# spec text round-trip (used by the manifest and the CLI spec files)
# --------------------------------------------------------------------------

def _format_color(c) -> str:
    return ",".join(repr(float(v)) for v in c)


def format_scene_spec(spec: SceneSpec) -> str:
    lines = [
        f"image_size={spec.image_size}",
        f"n_min={spec.n_min}",
        f"n_max={spec.n_max}",
        "shape_classes=" + ",".join(spec.shape_classes),
        f"size_min={spec.size_min!r}",
        f"size_max={spec.size_max!r}",
        "palette=" + ";".join(_format_color(c) for c in spec.palette),
        f"background_mode={spec.background_mode}",
        f"allow_overlap={'true' if spec.allow_overlap else 'false'}",
        f"rng_seed={spec.rng_seed}",
    ]
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    """Parse ``key=value`` lines; '#' starts a comment, blanks ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def scene_spec_from_mapping(kv: dict) -> SceneSpec:
    def parse_bool(s):
        if s.lower() in ("true", "1", "yes"):
            return True
        if s.lower() in ("false", "0", "no"):
            return False
        raise SceneSpecError(f"expected boolean, got {s!r}")

    kwargs = {}
    if "image_size" in kv:
        kwargs["image_size"] = int(kv["image_size"])
    if "n_min" in kv:
        kwargs["n_min"] = int(kv["n_min"])
    if "n_max" in kv:
        kwargs["n_max"] = int(kv["n_max"])
    if "shape_classes" in kv:
        kwargs["shape_classes"] = tuple(
            s.strip() for s in kv["shape_classes"].split(",") if s.strip()
        )
    if "size_min" in kv:
        kwargs["size_min"] = float(kv["size_min"])
    if "size_max" in kv:
        kwargs["size_max"] = float(kv["size_max"])
    if "palette" in kv:
        colors = []
        for chunk in kv["palette"].split(";"):
            chunk = chunk.strip()
            if chunk:
                colors.append(tuple(float(v) for v in chunk.split(",")))
        kwargs["palette"] = tuple(colors)
    if "background_mode" in kv:
        kwargs["background_mode"] = kv["background_mode"]
    if "allow_overlap" in kv:
        kwargs["allow_overlap"] = parse_bool(kv["allow_overlap"])
    if "rng_seed" in kv:
        kwargs["rng_seed"] = int(kv["rng_seed"])
    return SceneSpec(**kwargs)


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_spec_from_mapping(parse_key_values(fh.read()))


# --------------------------------------------------------------------------
# dataset records
# --------------------------------------------------------------------------

def _encode_record(sample: SceneSample) -> bytes:
    h, w = sample.instance_labels.shape
    n = sample.object_count
    head = RECORD_HEADER.pack(h, w, n)
    cls = struct.pack(f"<{n}H", *(int(c) for c in sample.class_ids))
    img = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    lab = np.ascontiguousarray(sample.instance_labels, dtype="<u2").tobytes()
    return head + cls + img + lab


def _read_record(fh):
    head = fh.read(RECORD_HEADER.size)
    if not head:
        return None
    if len(head) < RECORD_HEADER.size:
        raise DatasetError("truncated record header")
    h, w, n = RECORD_HEADER.unpack(head)
    cls = struct.unpack(f"<{n}H", fh.read(2 * n))
    img = np.frombuffer(fh.read(4 * h * w * 3), dtype="<f4").reshape(h, w, 3)
    lab = np.frombuffer(fh.read(2 * h * w), dtype="<u2").reshape(h, w)
    if img.size != h * w * 3 or lab.size != h * w:
        raise DatasetError("truncated record payload")
    return SceneSample(
        image=img.astype(np.float32),
        instance_labels=lab.astype(np.uint16),
        class_ids=np.asarray(cls, dtype=np.int64),
        object_count=n,
    )


def write_dataset(spec: SceneSpec, count: int, path) -> dict:
    """Generate ``count`` samples into ``path`` and return the manifest.

    The manifest (written last, atomically) carries the spec, the count
    and a sha256 over the record stream, so a partial write never leaves
    a loadable dataset behind.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    os.makedirs(path, exist_ok=True)
    records_path = os.path.join(path, RECORDS_NAME)
    digest = hashlib.sha256()
    with open(records_path, "wb") as fh:
        for index in range(count):
            blob = _encode_record(generate_scene(spec, index))
            digest.update(blob)
            fh.write(blob)
    manifest = {
        "format_version": str(MANIFEST_VERSION),
        "count": str(count),
        "checksum": digest.hexdigest(),
    }
    text = (
        f"format_version={MANIFEST_VERSION}\n"
        + format_scene_spec(spec)
        + f"count={count}\nchecksum={digest.hexdigest()}\n"
    )
    tmp = os.path.join(path, MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, os.path.join(path, MANIFEST_NAME))
    return manifest


def load_manifest(path) -> tuple[SceneSpec, int, str]:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        kv = parse_key_values(fh.read())
    spec = scene_spec_from_mapping(kv)
    return spec, int(kv["count"]), kv["checksum"]


def dataset_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(os.path.join(path, RECORDS_NAME), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_dataset(path, verify: bool = True) -> tuple[SceneSpec, list]:
    """Read every record; optionally verify the manifest checksum."""
    spec, count, checksum = load_manifest(path)
    if verify and dataset_checksum(path) != checksum:
        raise DatasetError(f"checksum mismatch for dataset at {path}")
    samples = []
    with open(os.path.join(path, RECORDS_NAME), "rb") as fh:
        while True:
            sample = _read_record(fh)
            if sample is None:
                break
            samples.append(sample)
    if len(samples) != count:
        raise DatasetError(
            f"manifest promises {count} records, found {len(samples)}"
        )
    return spec, samples


def replace_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, rng_seed=seed)
