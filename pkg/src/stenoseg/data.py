"""COCO-style annotation ingest, polygon rasterization, sample preparation and folds.

Masks use the even-odd rule sampled at pixel centres: pixel ``(r, c)`` is
foreground iff ``(c + 0.5, r + 0.5)`` lies inside the polygon.  All
categories collapse to one foreground class.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import serialize
from .errors import AnnotationParseError, DanglingReferenceError, FoldError, ImageDecodeError, PolygonError

TARGET_SIZE = 512


# ------------------------------------------------------------- annotations
@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageInfo, ...]
    annotations: tuple[Annotation, ...]
    categories: tuple[tuple[int, str], ...] = ()

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.images), len(self.annotations)

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def for_image(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]


def _field(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise AnnotationParseError(f"{where}: missing field {key!r}") from None


def _check_polygon(poly, ann_id) -> tuple[float, ...]:
    if not isinstance(poly, (list, tuple)) or not all(isinstance(v, (int, float)) for v in poly):
        raise AnnotationParseError(f"annotation {ann_id}: polygon must be a flat list of numbers")
    if len(poly) % 2 or len(poly) < 6:
        raise PolygonError(f"annotation {ann_id}: polygon has {len(poly)} coordinates (need an even count >= 6)")
    return tuple(float(v) for v in poly)


def parse_annotations(doc: dict) -> AnnotationSet:
    """Validate an already-decoded COCO document."""
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be an object")
    images = []
    for i, im in enumerate(_field(doc, "images", "document")):
        where = f"images[{i}]"
        images.append(ImageInfo(int(_field(im, "id", where)), str(_field(im, "file_name", where)),
                                int(_field(im, "width", where)), int(_field(im, "height", where))))
    known = {im.id for im in images}
    anns = []
    for i, a in enumerate(_field(doc, "annotations", "document")):
        where = f"annotations[{i}]"
        ann_id = _field(a, "id", where)
        image_id = _field(a, "image_id", where)
        if image_id not in known:
            raise DanglingReferenceError(ann_id, image_id)
        seg = _field(a, "segmentation", where)
        if not isinstance(seg, list):
            raise AnnotationParseError(f"{where}: segmentation must be a list of polygons")
        polys = tuple(_check_polygon(p, ann_id) for p in seg)
        anns.append(Annotation(int(ann_id), int(image_id), int(a.get("category_id", 1)), polys))
    cats = tuple((int(c["id"]), str(c.get("name", ""))) for c in doc.get("categories", []))
    return AnnotationSet(tuple(images), tuple(anns), cats)


def load_annotations(path) -> AnnotationSet:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: {exc}") from exc
    return parse_annotations(doc)


# ------------------------------------------------------------ rasterization
def polygon_area(poly) -> float:
    xy = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize_polygon(poly, H: int, W: int) -> np.ndarray:
    """Boolean H x W mask of the pixel centres inside ``poly`` (even-odd rule)."""
    if len(poly) % 2 or len(poly) < 6:
        raise PolygonError(f"polygon has {len(poly)} coordinates (need an even count >= 6)")
    xy = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    xy[:, 0] = np.clip(xy[:, 0], 0, W)
    xy[:, 1] = np.clip(xy[:, 1], 0, H)
    mask = np.zeros((H, W), dtype=bool)
    if polygon_area(xy.ravel()) == 0.0:
        warnings.warn("degenerate polygon with zero area gives an empty mask", stacklevel=2)
        return mask
    py = np.arange(H) + 0.5
    px = np.arange(W) + 0.5
    for (x1, y1), (x2, y2) in zip(xy, np.roll(xy, -1, axis=0)):
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        rows = py[crosses]
        x_at = x1 + (rows - y1) * (x2 - x1) / (y2 - y1)
        # the ray from each centre to +x crosses this edge
        mask[crosses] ^= px[None, :] < x_at[:, None]
    return mask


def rasterize_annotations(anns, H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    for a in anns:
        for poly in a.segmentation:
            mask |= rasterize_polygon(poly, H, W)
    return mask


# ------------------------------------------------------------------ folds
@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[tuple, tuple], ...]  # (train ids, validation ids) per fold

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "folds": [{"train": list(t), "val": list(v)} for t, v in self.folds]}


def make_folds(ids, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then a contiguous k-way split whose sizes differ by at most one."""
    ids = list(ids)
    if k < 2:
        raise FoldError(f"fold count must be >= 2, got {k}")
    if k > len(ids):
        raise FoldError(f"fold count {k} exceeds the {len(ids)} available ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    bounds = np.linspace(0, len(ids), k + 1).round().astype(int)
    folds = []
    for j in range(k):
        val = tuple(shuffled[bounds[j]:bounds[j + 1]])
        train = tuple(shuffled[:bounds[j]] + shuffled[bounds[j + 1]:])
        folds.append((train, val))
    return FoldPlan(k, seed, tuple(folds))


def check_fold(train, val) -> None:
    """Reject an empty fold or one whose validation ids leak into training."""
    if not train or not val:
        raise FoldError("fold has an empty train or validation set")
    overlap = set(train) & set(val)
    if overlap:
        raise FoldError(f"validation ids also in training: {sorted(map(str, overlap))[:5]}")


def check_plan(plan: FoldPlan, ids) -> None:
    seen = []
    for train, val in plan.folds:
        check_fold(train, val)
        if set(train) | set(val) != set(ids):
            raise FoldError("a fold does not cover the id set")
        seen.extend(val)
    if len(seen) != len(set(seen)) or set(seen) != set(ids):
        raise FoldError("validation sets do not partition the id set")


# ----------------------------------------------------------------- samples
@dataclass
class Sample:
    id: str
    image: np.ndarray  # 1 x S x S float32 in [0, 1]
    mask: np.ndarray  # S x S uint8 in {0, 1}
    source: str = ""


def read_image(path) -> np.ndarray:
    """Decode an 8- or 16-bit grayscale file and scale by its bit depth to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if mode in ("L", "P"):
        scale = 255.0
    elif mode.startswith("I"):
        scale = 65535.0 if arr.max(initial=0) > 255 or mode.startswith("I;16") else 255.0
    else:
        raise ImageDecodeError(f"{path}: not a grayscale image (mode {mode})")
    return (arr.astype(np.float64) / scale).clip(0.0, 1.0).astype(np.float32)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img.astype(np.float32)
    out = Image.fromarray(img.astype(np.float32)).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float32).clip(0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(np.uint8)
    out = Image.fromarray(mask.astype(np.uint8) * 255).resize((size, size), Image.Resampling.NEAREST)
    return (np.asarray(out) > 0).astype(np.uint8)


def prepare_sample(image_path, anns=(), sample_id: str | None = None, size: int = TARGET_SIZE) -> Sample:
    img = read_image(image_path)
    H, W = img.shape
    mask = rasterize_annotations(anns, H, W)
    return Sample(
        id=sample_id if sample_id is not None else Path(image_path).stem,
        image=resize_image(img, size)[None],
        mask=resize_mask(mask, size),
        source=str(image_path),
    )


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Random flip / quarter-turn applied identically to image and mask (off by default)."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    image = np.rot90(image, k, axes=(-2, -1))
    mask = np.rot90(mask, k, axes=(-2, -1))
    if flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ------------------------------------------------------------------- cache
CACHE_ENV = "STENOSEG_CACHE"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "stenoseg"))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_sample(sample: Sample, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{sample.id}.image.tnsr"
    mask_path = out_dir / f"{sample.id}.mask.tnsr"
    serialize.save(sample.image.astype(np.float32), img_path)
    serialize.save(sample.mask.astype(np.float32), mask_path)
    return {
        "id": sample.id,
        "image": img_path.name,
        "mask": mask_path.name,
        "image_sha256": _sha256(img_path),
        "mask_sha256": _sha256(mask_path),
        "foreground": int(sample.mask.sum()),
    }


def load_sample(entry: dict, cache_dir) -> Sample:
    cache_dir = Path(cache_dir)
    image = serialize.load(cache_dir / entry["image"]).data.astype(np.float32)
    mask = serialize.load(cache_dir / entry["mask"]).data.astype(np.uint8)
    return Sample(entry["id"], image, mask, str(cache_dir / entry["image"]))


@dataclass
class Manifest:
    entries: list[dict]
    failures: list[dict] = field(default_factory=list)
    size: int = TARGET_SIZE

    def to_dict(self) -> dict:
        return {"size": self.size, "count": len(self.entries), "failed": len(self.failures),
                "entries": self.entries, "failures": self.failures}

    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def by_id(self) -> dict[str, dict]:
        return {e["id"]: e for e in self.entries}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        doc = json.loads(Path(path).read_text())
        return cls(doc["entries"], doc.get("failures", []), doc.get("size", TARGET_SIZE))


def ingest(annotations_path, images_dir, out_dir, size: int = TARGET_SIZE) -> Manifest:
    """Prepare every annotated image into the cache; per-file failures are collected."""
    aset = load_annotations(annotations_path)
    images_dir = Path(images_dir)
    entries, failures = [], []
    for info in sorted(aset.images, key=lambda im: im.id):
        sid = Path(info.file_name).stem
        try:
            sample = prepare_sample(images_dir / info.file_name, aset.for_image(info.id), sid, size)
        except (ImageDecodeError, FileNotFoundError) as exc:
            failures.append({"id": sid, "file": info.file_name, "error": str(exc)})
            continue
        entries.append(save_sample(sample, out_dir))
    manifest = Manifest(entries, failures, size)
    manifest.save(Path(out_dir) / "manifest.json")
    return manifest


# --------------------------------------------------------------- synthetic
def synthetic_dataset(n: int, size: int = 64, seed: int = 0, max_blobs: int = 3):
    """Images with bright integer-cornered rectangles on noise, their masks and COCO polygons.

    Rectangle corners sit on the pixel grid, so rasterizing the polygons
    reproduces the analytic masks exactly.
    """
    rng = np.random.default_rng(seed)
    images, masks, polys = [], [], []
    for _ in range(n):
        mask = np.zeros((size, size), dtype=np.uint8)
        shapes = []
        for _ in range(int(rng.integers(1, max_blobs + 1))):
            h, w = (int(v) for v in rng.integers(size // 10, size // 4, size=2))
            r0 = int(rng.integers(0, size - h))
            c0 = int(rng.integers(0, size - w))
            mask[r0:r0 + h, c0:c0 + w] = 1
            shapes.append([c0, r0, c0 + w, r0, c0 + w, r0 + h, c0, r0 + h])
        noise = rng.normal(0.0, 0.05, size=(size, size))
        img = np.clip(0.25 + noise + 0.5 * mask, 0.0, 1.0)
        images.append(np.round(img * 255).astype(np.uint8))
        masks.append(mask)
        polys.append(shapes)
    return images, masks, polys


def write_synthetic(out_dir, n: int, size: int = 64, seed: int = 0) -> Path:
    """Write a synthetic set as PGM files plus ``annotations.json``; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, _, polys = synthetic_dataset(n, size, seed)
    doc = {"images": [], "annotations": [], "categories": [{"id": 1, "name": "stenosis"}]}
    ann_id = 1
    for i, (img, shapes) in enumerate(zip(images, polys), start=1):
        name = f"img{i:04d}.pgm"
        Image.fromarray(img).save(out_dir / name)
        doc["images"].append({"id": i, "file_name": name, "width": size, "height": size})
        for s in shapes:
            doc["annotations"].append({"id": ann_id, "image_id": i, "category_id": 1, "segmentation": [s]})
            ann_id += 1
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
