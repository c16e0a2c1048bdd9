"""Core raster/annotation types and the geometric operations shared by
training and inference: edge derivation, instance extraction, box math,
padded crops, foreground removal, context construction, and raster I/O.

All operations here are pure functions on numpy arrays. Images are float
arrays in [0, 1] with shape (H, W, 3); label grids are integer arrays of
shape (H, W).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

REMOVAL_MODES = ("zero_mask", "blur")


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Box:
    """Half-open pixel box [x0, x1) x [y0, y1).

    Coordinates may extend outside image bounds (negative or > dim) to
    represent padded crops.
    """

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class SemanticMap:
    """Per-pixel class-label grid; ids in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("semantic labels must be a 2-D grid")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise ValueError("semantic label exceeds num_classes")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("semantic labels must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class InstanceMap:
    """Per-pixel instance-id grid; id 0 means background / no instance."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise ValueError("instance ids must be a 2-D grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


@dataclass
class EdgeMap:
    """Binary instance-boundary grid, values in {0, 1}."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges)
        if self.edges.ndim != 2:
            raise ValueError("edges must be a 2-D grid")
        vals = np.unique(self.edges)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("edge map values must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.edges.shape


@dataclass
class SceneSample:
    """A scene's image with aligned semantic, instance, and edge annotations."""

    image: np.ndarray
    semantic: SemanticMap
    instances: InstanceMap
    edges: EdgeMap

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("scene image must be (H, W, 3)")
        hw = self.image.shape[:2]
        if self.semantic.shape != hw or self.instances.shape != hw or self.edges.shape != hw:
            raise ValueError("scene annotation grids must match the image dims")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("scene image values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def instance_records(self) -> list["InstanceRecord"]:
        """Extracted instance records, cached after the first call."""
        if not hasattr(self, "_records"):
            self._records = extract_instances(self.instances, self.semantic)
        return self._records


@dataclass
class InstanceRecord:
    """One object instance: identity, class, tight box, and its mask."""

    instance_id: int
    class_id: int
    tight_box: Box
    mask: np.ndarray  # bool grid over tight_box
    area: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.tight_box.height, self.tight_box.width):
            raise ValueError("mask dims must equal tight_box dims")
        if self.area < 1 or int(self.mask.sum()) != self.area:
            raise ValueError("mask must contain exactly `area` >= 1 set pixels")


@dataclass
class ContextPair:
    """Instance context: foreground-removed image crop plus one-hot semantics.

    Both rasters share the same square spatial resolution so they can be
    channel-concatenated as generator input. ``tight_box_in_context`` is the
    instance's un-enlarged box mapped into context coordinates; with centered
    2x enlargement of an even-sized box it is exactly the central half.
    """

    context_image: np.ndarray  # (R_c, R_c, 3) float, foreground removed
    context_semantic: np.ndarray  # (R_c, R_c, num_classes) one-hot float
    tight_box_in_context: Box
    removal_mode: str

    def __post_init__(self):
        if self.context_image.shape[:2] != self.context_semantic.shape[:2]:
            raise ValueError("context image and semantics must share spatial dims")
        if self.removal_mode not in REMOVAL_MODES:
            raise ValueError(f"removal_mode must be one of {REMOVAL_MODES}")

    def stacked(self) -> np.ndarray:
        """Channel concatenation cat(C_i, C_s) of image and one-hot semantics."""
        return np.concatenate([self.context_image, self.context_semantic], axis=2)


# ---------------------------------------------------------------------------
# operations


def derive_edge_map(instances: InstanceMap) -> EdgeMap:
    """Mark every pixel with at least one in-bounds 4-neighbor of another id."""
    ids = instances.ids
    edges = np.zeros(ids.shape, dtype=np.uint8)
    if ids.shape[0] > 1:
        vert = ids[:-1, :] != ids[1:, :]
        edges[:-1, :] |= vert
        edges[1:, :] |= vert
    if ids.shape[1] > 1:
        horiz = ids[:, :-1] != ids[:, 1:]
        edges[:, :-1] |= horiz
        edges[:, 1:] |= horiz
    return EdgeMap(edges)


def extract_instances(instances: InstanceMap, semantic: SemanticMap) -> list[InstanceRecord]:
    """One record per nonzero instance id, in ascending id order.

    The class id is the majority semantic label under the instance mask,
    with ties broken toward the smaller class id.
    """
    if instances.shape != semantic.shape:
        raise ValueError("instance and semantic grids must share dims")
    ids = instances.ids
    records = []
    for inst_id in np.unique(ids):
        if inst_id == 0:
            continue
        full_mask = ids == inst_id
        rows = np.flatnonzero(full_mask.any(axis=1))
        cols = np.flatnonzero(full_mask.any(axis=0))
        box = Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
        mask = full_mask[box.y0 : box.y1, box.x0 : box.x1]
        labels = semantic.labels[full_mask]
        class_id = int(np.bincount(labels).argmax())
        records.append(
            InstanceRecord(
                instance_id=int(inst_id),
                class_id=class_id,
                tight_box=box,
                mask=mask,
                area=int(full_mask.sum()),
            )
        )
    return records


def enlarge_box(box: Box, factor: float) -> Box:
    """Scale a box about its center; dims are rounded, center kept to +-0.5 px."""
    if factor < 1.0:
        raise ValueError("enlargement factor must be >= 1")
    new_w = round(box.width * factor)
    new_h = round(box.height * factor)
    cx = (box.x0 + box.x1) / 2.0
    cy = (box.y0 + box.y1) / 2.0
    x0 = round(cx - new_w / 2.0)
    y0 = round(cy - new_h / 2.0)
    return Box(x0, y0, x0 + new_w, y0 + new_h)


def crop_with_padding(image: np.ndarray, box: Box, pad_value: float = 0.0) -> np.ndarray:
    """Gather the box from the image, filling out-of-bounds pixels with pad_value."""
    h, w = image.shape[:2]
    out = np.full((box.height, box.width) + image.shape[2:], pad_value, dtype=image.dtype)
    sy0, sy1 = max(box.y0, 0), min(box.y1, h)
    sx0, sx1 = max(box.x0, 0), min(box.x1, w)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - box.y0 : sy1 - box.y0, sx0 - box.x0 : sx1 - box.x0] = image[sy0:sy1, sx0:sx1]
    return out


def remove_foreground(
    crop: np.ndarray, mask: np.ndarray, mode: str, blur_sigma: float = 0.0
) -> np.ndarray:
    """Erase instance content from a crop.

    ``zero_mask`` sets masked pixels to zero; ``blur`` replaces them with a
    Gaussian blur of the full crop so only low-frequency information remains.
    Unmasked pixels are always returned unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    if crop.shape[:2] != mask.shape:
        raise ValueError("crop and mask must share spatial dims")
    if mode not in REMOVAL_MODES:
        raise ValueError(f"unknown removal mode {mode!r}")
    out = crop.copy()
    if mode == "zero_mask":
        out[mask] = 0.0
        return out
    if blur_sigma <= 0.0:
        raise ValueError("blur mode requires blur_sigma > 0")
    sigma = (blur_sigma, blur_sigma) + (0.0,) * (crop.ndim - 2)
    blurred = gaussian_filter(crop.astype(np.float64), sigma=sigma, mode="reflect")
    out[mask] = blurred[mask].astype(out.dtype)
    return out


def _interp_coords(out_n: int, in_n: int):
    centers = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
    lo = np.floor(centers).astype(np.int64)
    t = centers - lo
    return np.clip(lo, 0, in_n - 1), np.clip(lo + 1, 0, in_n - 1), t


def resize_image(image: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a raster; bilinear for continuous images, nearest for label grids.

    Identical dims return an unchanged copy. Sampling uses half-pixel centers
    and no antialiasing.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dims must be positive")
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    if mode == "nearest":
        ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
        xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
        return image[np.ix_(ys, xs)].copy()
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    y0, y1, ty = _interp_coords(out_h, h)
    x0, x1, tx = _interp_coords(out_w, w)
    img = image.astype(np.float64)
    if image.ndim == 3:
        ty, tx = ty[:, None, None], tx[None, :, None]
    else:
        ty, tx = ty[:, None], tx[None, :]
    top = img[np.ix_(y0, x0)] * (1 - tx) + img[np.ix_(y0, x1)] * tx
    bot = img[np.ix_(y1, x0)] * (1 - tx) + img[np.ix_(y1, x1)] * tx
    out = top * (1 - ty) + bot * ty
    return out.astype(image.dtype) if image.dtype.kind == "f" else out


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) int labels -> (H, W, num_classes) float32 one-hot stack."""
    return np.eye(num_classes, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]


def default_blur_sigma(crop_h: int, crop_w: int) -> float:
    """Sigma for blur-mode removal, scaled with the crop so it matches a
    fixed fraction (1/16 of the instance resolution) after resizing."""
    return min(crop_h, crop_w) / 32.0


def build_context(
    scene: SceneSample,
    rec: InstanceRecord,
    mode: str,
    target_res: int,
    blur_sigma: float | None = None,
) -> ContextPair:
    """Crop the 2x-enlarged instance box, remove the foreground, and resize.

    The context image and one-hot semantics both come out at
    ``target_res x target_res`` (twice the class model's output resolution).
    Out-of-bounds regions are zero-padded so the instance stays centered.
    """
    box = rec.tight_box
    ebox = enlarge_box(box, 2.0)
    crop_img = crop_with_padding(scene.image, ebox, 0.0)
    crop_sem = crop_with_padding(scene.semantic.labels, ebox, 0)

    mask_in_crop = np.zeros((ebox.height, ebox.width), dtype=bool)
    oy, ox = box.y0 - ebox.y0, box.x0 - ebox.x0
    mask_in_crop[oy : oy + box.height, ox : ox + box.width] = rec.mask

    if blur_sigma is None:
        blur_sigma = default_blur_sigma(ebox.height, ebox.width)
    removed = remove_foreground(crop_img, mask_in_crop, mode, blur_sigma)

    context_image = resize_image(removed.astype(np.float32), target_res, target_res, "bilinear")
    sem_resized = resize_image(crop_sem, target_res, target_res, "nearest")
    context_semantic = one_hot(sem_resized, scene.semantic.num_classes)

    # extent of the tight box after nearest resize (half-pixel centers): the
    # set of context pixels whose centers land inside the tight region. For
    # even boxes this is exactly the central half.
    sx = target_res / ebox.width
    sy = target_res / ebox.height
    x0c = max(0, math.ceil(ox * sx - 0.5))
    y0c = max(0, math.ceil(oy * sy - 0.5))
    x1c = min(target_res, math.ceil((ox + box.width) * sx - 0.5))
    y1c = min(target_res, math.ceil((oy + box.height) * sy - 0.5))
    tight_in_ctx = Box(x0c, y0c, max(x1c, x0c + 1), max(y1c, y0c + 1))
    return ContextPair(
        context_image=context_image,
        context_semantic=context_semantic,
        tight_box_in_context=tight_in_ctx,
        removal_mode=mode,
    )


# ---------------------------------------------------------------------------
# raster + manifest I/O

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "scene-corpus-v1"


@dataclass
class Corpus:
    """An ordered set of scenes sharing one class vocabulary."""

    scenes: list[SceneSample]
    class_names: list[str]
    scene_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.scene_ids:
            self.scene_ids = [f"scene_{i:04d}" for i in range(len(self.scenes))]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, idx: int) -> SceneSample:
        return self.scenes[idx]


def _save_u16(path: Path, grid: np.ndarray) -> None:
    arr = np.asarray(grid)
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
        raise ValueError("grid values must fit 16-bit unsigned rasters")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _load_u16(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int32)


def save_scene(scene_dir: Path, scene: SceneSample) -> dict:
    """Write one scene's rasters; returns its manifest entry."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    img_u8 = np.clip(np.rint(scene.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img_u8).save(scene_dir / "image.png")
    _save_u16(scene_dir / "semantic.png", scene.semantic.labels)
    _save_u16(scene_dir / "instances.png", scene.instances.ids)
    return {
        "image": f"{scene_dir.name}/image.png",
        "semantic": f"{scene_dir.name}/semantic.png",
        "instances": f"{scene_dir.name}/instances.png",
    }


def load_scene(root: Path, entry: dict, num_classes: int) -> SceneSample:
    root = Path(root)
    image = np.asarray(Image.open(root / entry["image"]), dtype=np.float32) / 255.0
    semantic = SemanticMap(_load_u16(root / entry["semantic"]), num_classes)
    instances = InstanceMap(_load_u16(root / entry["instances"]))
    return SceneSample(image, semantic, instances, derive_edge_map(instances))


def save_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write all scenes plus the sidecar manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene_id, scene in zip(corpus.scene_ids, corpus.scenes):
        entry = save_scene(out_dir / scene_id, scene)
        entry["id"] = scene_id
        entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "class_names": corpus.class_names,
        "scenes": entries,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(corpus_dir: Path) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / MANIFEST_NAME).read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported corpus manifest format: {manifest.get('format')!r}")
    class_names = list(manifest["class_names"])
    scenes = [load_scene(corpus_dir, e, len(class_names)) for e in manifest["scenes"]]
    return Corpus(scenes, class_names, [e["id"] for e in manifest["scenes"]])
