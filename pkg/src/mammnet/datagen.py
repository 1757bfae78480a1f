"""Synthetic dual-view phantoms and the on-disk dataset format.

A phantom case is a pair of breast-shaped intensity fields with lesions.
Paired lesions appear in both views at the same distance from the chest wall
(the horizontal axis, up to Gaussian jitter), with the same malignancy:
malignant lesions are spiculated, benign ones smooth ellipses.  Distractors
are lesion-like blobs drawn from the same appearance distribution but present
in one view only, so a single view cannot tell them apart from lesions.

Dataset layout::

    <root>/manifest.json
    <root>/images/<case_id>_cc.png      16-bit grayscale
    <root>/images/<case_id>_mlo.png

Instance masks live inline in the manifest as run-length encodings: row-major,
starting with the count of 0-pixels, then alternating 1/0 runs, summing to
H·W.  Paired instances share an integer ``pair_id``; unpaired ones use null.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DatasetError, MalformedMaskError
from .rng import case_rngs
from .types import VIEWS, CaseAnnotation, ImagePair, InstanceGT

DATASET_FORMAT = "mammnet-dataset"
DATASET_VERSION = 1
_U16 = 65535.0


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 128
    lesions_per_case: tuple[int, int] = (1, 2)
    paired_fraction: float = 1.0
    distractors_per_case: tuple[int, int] = (0, 1)
    # "background": distractors are not annotated; "instance": annotated, unpaired
    distractor_labels: str = "background"
    malignant_fraction: float = 0.5
    lesion_radius: tuple[float, float] = (5.0, 9.0)
    lesion_contrast: tuple[float, float] = (0.25, 0.4)
    texture_sigma: float = 3.0
    texture_amplitude: float = 0.08
    noise_std: float = 0.015
    jitter_sigma: float = 1.5
    max_retries: int = 50

    def __post_init__(self):
        for name in ("lesions_per_case", "distractors_per_case", "lesion_radius", "lesion_contrast"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a non-negative (low, high) range, got {(lo, hi)}")
        for name in ("paired_fraction", "malignant_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.image_size % 32 or self.image_size < 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.distractor_labels not in ("background", "instance"):
            raise ConfigError(f"distractor_labels must be 'background' or 'instance', got {self.distractor_labels!r}")
        if self.lesion_radius[0] < 2:
            raise ConfigError("lesion_radius lower bound must be at least 2 pixels")
        if min(self.texture_sigma, self.texture_amplitude, self.noise_std, self.jitter_sigma) < 0:
            raise ConfigError("texture/noise/jitter parameters must be non-negative")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be positive")


# ---------------------------------------------------------------------------
# geometry and rendering


@dataclass
class _Breast:
    wall_x: float    # chest-wall column (0 for left, W for right)
    depth: float     # chest wall to nipple, pixels
    half_height: float
    center_y: float
    sign: int        # +1 when the nipple lies toward larger x

    def contains(self, x, y, margin=0.0):
        d = (x - self.wall_x) * self.sign
        a = self.depth - margin
        b = self.half_height - margin
        if a <= 0 or b <= 0:
            return np.zeros_like(np.asarray(d), dtype=bool)
        return (d >= margin) & ((d / a) ** 2 + ((y - self.center_y) / b) ** 2 <= 1.0)


@dataclass
class _Shape:
    radius: float
    malignant: bool
    aspect: float
    angle: float
    spikes: int
    spike_phase: float
    harmonics: np.ndarray  # (3, 2) amplitude, phase

    def scaled(self, factor: float, angle: float) -> "_Shape":
        return _Shape(self.radius * factor, self.malignant, self.aspect, angle,
                      self.spikes, self.spike_phase, self.harmonics)


def _draw_shape(rng, cfg: PhantomConfig, malignant: bool) -> _Shape:
    return _Shape(
        radius=float(rng.uniform(*cfg.lesion_radius)),
        malignant=malignant,
        aspect=float(rng.uniform(0.6, 1.0)),
        angle=float(rng.uniform(0, math.pi)),
        spikes=int(rng.integers(5, 10)),
        spike_phase=float(rng.uniform(0, 2 * math.pi)),
        harmonics=np.stack([rng.uniform(0.0, 0.12, 3), rng.uniform(0, 2 * math.pi, 3)], axis=1),
    )


def _shape_mask(shape: _Shape, cx: float, cy: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = math.cos(shape.angle), math.sin(shape.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if not shape.malignant:
        return (u / shape.radius) ** 2 + (v / (shape.radius * shape.aspect)) ** 2 <= 1.0
    phi = np.arctan2(v, u)
    r = np.full_like(phi, 0.75)
    for k, (amp, ph) in enumerate(shape.harmonics, start=2):
        r += amp * np.sin(k * phi + ph)
    r += 0.55 * np.maximum(0.0, np.cos(shape.spikes * (phi - shape.spike_phase))) ** 8
    return np.hypot(u, v) <= shape.radius * r


def _background(rng, cfg: PhantomConfig, breast: _Breast, view: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    inside = breast.contains(xx, yy)
    d = np.clip((xx - breast.wall_x) * breast.sign / breast.depth, 0, 1)
    field = 0.22 + 0.12 * (1 - d ** 2)
    if cfg.texture_amplitude > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), cfg.texture_sigma)
        tex /= tex.std() + 1e-12
        field = field + cfg.texture_amplitude * tex
    img = np.where(inside, field, 0.02)
    if view == "mlo":
        # pectoral muscle: bright triangle in the upper chest-wall corner
        dist = (xx - breast.wall_x) * breast.sign
        muscle = dist + yy * 0.45 < size * 0.22
        img = np.where(muscle & inside, img + 0.2, img)
    return img


def _muscle(breast: _Breast, view: str, x: float, y: float, size: int, margin: float) -> bool:
    if view != "mlo":
        return False
    return (x - breast.wall_x) * breast.sign + y * 0.45 < size * 0.22 + margin


def _render(img: np.ndarray, mask: np.ndarray, contrast: float) -> np.ndarray:
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.8)
    return img + contrast * soft


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * _U16).astype(np.uint16)


def _dequantize(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return (arr.astype(np.float32) / np.float32(255.0))
    return (arr.astype(np.float32) / np.float32(_U16))


class _PlacementError(Exception):
    pass


def _place(rng, cfg, breast, view, size, placed, radius, d=None):
    """Pick a center inside the breast, clear of the muscle and other objects."""
    extent = radius * 1.35 + 2
    for _ in range(cfg.max_retries):
        if d is None:
            dd = rng.uniform(0.15, 0.8) * breast.depth
        else:
            dd = d
        x = breast.wall_x + breast.sign * dd
        y = rng.uniform(extent, size - extent)
        if not (extent <= x <= size - extent):
            continue
        if not breast.contains(x, y, margin=extent):
            continue
        if _muscle(breast, view, x, y, size, extent):
            continue
        if any(math.hypot(x - px, y - py) < extent + pr + 2 for px, py, pr in placed):
            continue
        return x, y
    raise _PlacementError


def _try_case(rng, cfg: PhantomConfig, case_id: str):
    size = cfg.image_size
    laterality = "left" if rng.random() < 0.5 else "right"
    wall = 0.0 if laterality == "left" else float(size)
    sign = 1 if laterality == "left" else -1
    depth = rng.uniform(0.8, 0.95) * size
    breasts = {
        "cc": _Breast(wall, depth, rng.uniform(0.42, 0.48) * size, size / 2, sign),
        "mlo": _Breast(wall, depth * rng.uniform(0.97, 1.0), rng.uniform(0.45, 0.49) * size,
                       size * rng.uniform(0.5, 0.55), sign),
    }
    images = {v: _background(rng, cfg, breasts[v], v, size) for v in VIEWS}
    placed = {v: [] for v in VIEWS}
    instances = {v: [] for v in VIEWS}   # (mask, malignant, pair_key)

    n_lesions = int(rng.integers(cfg.lesions_per_case[0], cfg.lesions_per_case[1] + 1))
    n_distract = int(rng.integers(cfg.distractors_per_case[0], cfg.distractors_per_case[1] + 1))

    for k in range(n_lesions):
        malignant = bool(rng.random() < cfg.malignant_fraction)
        shape = _draw_shape(rng, cfg, malignant)
        contrast = rng.uniform(*cfg.lesion_contrast)
        if rng.random() < cfg.paired_fraction:
            d = rng.uniform(0.15, 0.8) * min(b.depth for b in breasts.values())
            for v in VIEWS:
                dv = d + (rng.normal(0.0, cfg.jitter_sigma) if cfg.jitter_sigma > 0 else 0.0)
                s = shape.scaled(rng.uniform(0.9, 1.1), rng.uniform(0, math.pi))
                x, y = _place(rng, cfg, breasts[v], v, size, placed[v], s.radius, d=dv)
                mask = _shape_mask(s, x, y, size)
                images[v] = _render(images[v], mask, contrast * rng.uniform(0.9, 1.1))
                placed[v].append((x, y, s.radius * 1.35))
                instances[v].append((mask, malignant, k))
        else:
            v = VIEWS[int(rng.integers(0, 2))]
            x, y = _place(rng, cfg, breasts[v], v, size, placed[v], shape.radius)
            mask = _shape_mask(shape, x, y, size)
            images[v] = _render(images[v], mask, contrast)
            placed[v].append((x, y, shape.radius * 1.35))
            instances[v].append((mask, malignant, None))

    for _ in range(n_distract):
        v = VIEWS[int(rng.integers(0, 2))]
        shape = _draw_shape(rng, cfg, bool(rng.random() < cfg.malignant_fraction))
        x, y = _place(rng, cfg, breasts[v], v, size, placed[v], shape.radius)
        mask = _shape_mask(shape, x, y, size)
        images[v] = _render(images[v], mask, rng.uniform(*cfg.lesion_contrast))
        placed[v].append((x, y, shape.radius * 1.35))
        if cfg.distractor_labels == "instance":
            instances[v].append((mask, shape.malignant, None))

    if cfg.noise_std > 0:
        for v in VIEWS:
            images[v] = images[v] + rng.normal(0.0, cfg.noise_std, images[v].shape)

    per_view, where = {}, {}
    for v in VIEWS:
        order = rng.permutation(len(instances[v]))
        per_view[v] = [InstanceGT(instances[v][i][0], instances[v][i][1]) for i in order]
        where[v] = {instances[v][i][2]: pos for pos, i in enumerate(order) if instances[v][i][2] is not None}
    pairs = {(where["cc"][key], where["mlo"][key]) for key in where["cc"]}
    pair = ImagePair(_dequantize(_quantize(images["cc"])), _dequantize(_quantize(images["mlo"])),
                     case_id=case_id, laterality=laterality)
    return pair, CaseAnnotation(tuple(per_view["cc"]), tuple(per_view["mlo"]), frozenset(pairs))


def generate_case(rng: np.random.Generator, cfg: PhantomConfig = PhantomConfig(),
                  case_id: str = "case"):
    """Draw one ``(ImagePair, CaseAnnotation)``.

    If an object cannot be placed within ``cfg.max_retries`` attempts, the
    whole case is redrawn from the continuing stream.
    """
    while True:
        try:
            return _try_case(rng, cfg, case_id)
        except _PlacementError:
            continue


def generate_cases(seed: int, cfg: PhantomConfig, n_cases: int, prefix: str = "case"):
    """``n_cases`` phantoms; case ``i`` depends only on ``(seed, i)``."""
    return [generate_case(r, cfg, f"{prefix}_{i:04d}") for i, r in enumerate(case_rngs(seed, n_cases))]


# ---------------------------------------------------------------------------
# run-length encoding


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts, shape: tuple[int, int]) -> np.ndarray:
    total = int(shape[0]) * int(shape[1])
    if not isinstance(counts, (list, tuple)) or not all(
            isinstance(c, (int, np.integer)) and not isinstance(c, bool) and c >= 0 for c in counts):
        raise MalformedMaskError("RLE counts must be a list of non-negative integers")
    if sum(counts) != total:
        raise MalformedMaskError(f"RLE run lengths sum to {sum(counts)}, expected {total} for shape {tuple(shape)}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


# ---------------------------------------------------------------------------
# dataset IO


def _write_png(path: Path, image: np.ndarray) -> None:
    try:
        Image.fromarray(_quantize(image)).save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write image {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG as float32 in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "LA", "P"):
                im = im.convert("L")
            arr = np.array(im)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype not in (np.uint8, np.uint16):
        if arr.dtype.kind in "iu" and arr.max(initial=0) <= 65535 and arr.min(initial=0) >= 0:
            arr = arr.astype(np.uint16)
        else:
            raise DatasetError(f"unsupported pixel type {arr.dtype} in {path}")
    return _dequantize(arr)


def case_record(pair: ImagePair, ann: CaseAnnotation, image_paths: dict[str, str]) -> dict:
    pair_ids = {}
    for pid, (i, j) in enumerate(ann.sorted_pairs()):
        pair_ids[("cc", i)] = pid
        pair_ids[("mlo", j)] = pid
    instances = []
    for v in VIEWS:
        for idx, inst in enumerate(ann.view(v)):
            instances.append({
                "view": v,
                "rle": rle_encode(inst.mask),
                "malignant": bool(inst.malignant),
                "pair_id": pair_ids.get((v, idx)),
            })
    return {
        "case_id": pair.case_id,
        "laterality": pair.laterality,
        "images": dict(image_paths),
        "instances": instances,
    }


def save_dataset(cases, out_path, image_size: tuple[int, int] | None = None) -> dict:
    """Write ``(ImagePair, CaseAnnotation)`` cases in the dataset layout; return the manifest."""
    root = Path(out_path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    records = []
    for pair, ann in cases:
        paths = {}
        for v in VIEWS:
            rel = f"images/{pair.case_id}_{v}.png"
            _write_png(root / rel, pair.view(v))
            paths[v] = rel
        records.append(case_record(pair, ann, paths))
        if image_size is None:
            image_size = pair.shape
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "image_size": list(image_size) if image_size is not None else None,
        "cases": records,
    }
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise DatasetError(f"cannot write manifest {root / 'manifest.json'}: {exc}") from exc
    return manifest


def generate_dataset(seed: int, cfg: PhantomConfig, n_cases: int, out_path) -> dict:
    cases = generate_cases(seed, cfg, n_cases)
    return save_dataset(cases, out_path, (cfg.image_size, cfg.image_size))


def _field(obj, key, types, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"schema error: missing field '{where}{key}'")
    value = obj[key]
    if not isinstance(value, types) or (isinstance(value, bool) and bool not in _as_tuple(types)):
        raise DatasetError(f"schema error: field '{where}{key}' has type {type(value).__name__}")
    return value


def _as_tuple(types):
    return types if isinstance(types, tuple) else (types,)


def read_manifest(path, expected_format: str = DATASET_FORMAT) -> tuple[Path, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    fmt = _field(manifest, "format", str, "")
    if fmt != expected_format:
        raise DatasetError(f"schema error: field 'format' is {fmt!r}, expected {expected_format!r}")
    _field(manifest, "version", int, "")
    if manifest["version"] != DATASET_VERSION:
        raise DatasetError(f"manifest version {manifest['version']} unsupported (expected {DATASET_VERSION})")
    _field(manifest, "cases", list, "")
    return manifest_path.parent, manifest


def decode_instances(record: dict, shape: tuple[int, int], where: str):
    """Masks per view plus the ``pair_id → index`` maps of one manifest case."""
    per_view = {v: [] for v in VIEWS}
    ids = {v: {} for v in VIEWS}
    for k, inst in enumerate(_field(record, "instances", list, where)):
        at = f"{where}instances[{k}]."
        view = _field(inst, "view", str, at)
        if view not in VIEWS:
            raise DatasetError(f"schema error: field '{at}view' must be 'cc' or 'mlo', got {view!r}")
        try:
            mask = rle_decode(_field(inst, "rle", list, at), shape)
        except MalformedMaskError as exc:
            raise MalformedMaskError(f"{at}rle: {exc}") from exc
        pid = inst.get("pair_id")
        if pid is not None and (isinstance(pid, bool) or not isinstance(pid, int)):
            raise DatasetError(f"schema error: field '{at}pair_id' must be an integer or null")
        if pid is not None:
            if pid in ids[view]:
                raise DatasetError(f"{where}: pair_id {pid} used twice in the {view} view")
            ids[view][pid] = len(per_view[view])
        per_view[view].append((mask, inst))
    for pid in set(ids["cc"]) ^ set(ids["mlo"]):
        only = "cc" if pid in ids["cc"] else "mlo"
        raise DatasetError(f"{where}: pair_id {pid} appears only in the {only} view")
    return per_view, ids


def load_dataset(path) -> list[tuple[ImagePair, CaseAnnotation]]:
    root, manifest = read_manifest(path)
    out = []
    for c, record in enumerate(manifest["cases"]):
        where = f"cases[{c}]."
        case_id = _field(record, "case_id", str, where)
        laterality = _field(record, "laterality", str, where)
        images = _field(record, "images", dict, where)
        views = {v: read_png(root / _field(images, v, str, f"{where}images.")) for v in VIEWS}
        shape = views["cc"].shape
        per_view, ids = decode_instances(record, shape, where)
        insts = {v: tuple(InstanceGT(m, _field(i, "malignant", bool, where)) for m, i in per_view[v])
                 for v in VIEWS}
        pairs = frozenset((ids["cc"][p], ids["mlo"][p]) for p in ids["cc"])
        try:
            pair = ImagePair(views["cc"], views["mlo"], case_id=case_id, laterality=laterality)
            ann = CaseAnnotation(insts["cc"], insts["mlo"], pairs)
        except (ConfigError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from exc
        out.append((pair, ann))
    return out


# ---------------------------------------------------------------------------
# augmentation


def flip_pair(pair: ImagePair, ann: CaseAnnotation, axis: int):
    """Mirror both views along ``axis`` (0 = up/down, 1 = left/right).

    A left/right mirror turns a left breast into a right one, so the
    laterality label follows.
    """
    def f(a):
        return np.ascontiguousarray(np.flip(a, axis=axis))

    lat = pair.laterality
    if axis == 1:
        lat = "right" if lat == "left" else "left"
    new_pair = ImagePair(f(pair.cc_image), f(pair.mlo_image), pair.case_id, lat)
    new_ann = CaseAnnotation(
        tuple(InstanceGT(f(i.mask), i.malignant) for i in ann.cc),
        tuple(InstanceGT(f(i.mask), i.malignant) for i in ann.mlo),
        ann.pair_map,
    )
    return new_pair, new_ann


def _affine(arr, angle_deg, scale, order, mode):
    h, w = arr.shape
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    # output->input map about the image center
    matrix = rot.T / scale
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode=mode,
                                    output_shape=arr.shape)


def augment(pair: ImagePair, ann: CaseAnnotation, rng: np.random.Generator, flags: dict[str, bool]):
    """Random training augmentation applied consistently to images and masks.

    ``flip`` mirrors both views up/down (laterality unchanged); ``rotation``
    (±10°) and ``random_scale`` (0.9-1.1) apply one shared affine map to both
    views and their masks; ``brightness_contrast`` jitters each view's
    intensities.  Pairing and malignancy labels never change.  A geometric
    draw that would push more than half of any lesion out of the image is
    discarded.
    """
    if flags.get("flip") and rng.random() < 0.5:
        pair, ann = flip_pair(pair, ann, axis=0)

    angle = float(rng.uniform(-10, 10)) if flags.get("rotation") else 0.0
    scale = float(rng.uniform(0.9, 1.1)) if flags.get("random_scale") else 1.0
    if angle != 0.0 or scale != 1.0:
        new_masks = {v: [_affine(i.mask.astype(np.uint8), angle, scale, 0, "constant").astype(bool)
                         for i in ann.view(v)] for v in VIEWS}
        kept = all(m.sum() >= 0.5 * i.mask.sum()
                   for v in VIEWS for m, i in zip(new_masks[v], ann.view(v)))
        if kept:
            imgs = {v: np.clip(_affine(pair.view(v).astype(np.float64), angle, scale, 1, "nearest"), 0, 1)
                    for v in VIEWS}
            pair = ImagePair(imgs["cc"], imgs["mlo"], pair.case_id, pair.laterality)
            ann = CaseAnnotation(
                tuple(InstanceGT(m, i.malignant) for m, i in zip(new_masks["cc"], ann.cc)),
                tuple(InstanceGT(m, i.malignant) for m, i in zip(new_masks["mlo"], ann.mlo)),
                ann.pair_map,
            )

    if flags.get("brightness_contrast"):
        imgs = {}
        for v in VIEWS:
            img = pair.view(v).astype(np.float64)
            c = rng.uniform(0.85, 1.15)
            b = rng.uniform(-0.08, 0.08)
            mean = img.mean()
            imgs[v] = np.clip((img - mean) * c + mean + b, 0.0, 1.0)
        pair = ImagePair(imgs["cc"], imgs["mlo"], pair.case_id, pair.laterality)
    return pair, ann
