"""Procedural generator of toy annotated scenes: flat-tinted backgrounds with
rectangle/ellipse/triangle instances, rendered back-to-front with exact
semantic and instance maps. Deterministic per (seed, grammar)."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    Corpus,
    EdgeMap,
    InstanceMap,
    SceneSample,
    SemanticMap,
    derive_edge_map,
    save_corpus,
)

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
BACKGROUND_CLASS = 0


@dataclass
class SceneGrammar:
    """Knobs for procedural scene generation.

    Class ids: 0 is background, then one class per entry of ``shape_kinds``
    in order. With ``context_coupling`` every foreground shape is filled with
    ``couple_color`` of the background tint, so foreground appearance is an
    exact function of the surrounding context.
    """

    canvas_size: int = 64
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    shapes_per_scene: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.25, 0.55)
    context_coupling: bool = False
    min_visible_px: int = 8
    max_place_tries: int = 30

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        self.shapes_per_scene = tuple(self.shapes_per_scene)
        self.size_range = tuple(self.size_range)
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")
        if self.shapes_per_scene[0] > self.shapes_per_scene[1] or self.shapes_per_scene[0] < 0:
            raise ValueError("shapes_per_scene must be a nonnegative (lo, hi) range")
        if not (0.0 < self.size_range[0] <= self.size_range[1] <= 1.0):
            raise ValueError("size_range fractions must satisfy 0 < lo <= hi <= 1")
        if self.canvas_size < 8:
            raise ValueError("canvas_size too small")

    @property
    def num_classes(self) -> int:
        return 1 + len(self.shape_kinds)

    @property
    def class_names(self) -> list[str]:
        return ["background"] + list(self.shape_kinds)


def hsv_to_rgb_u8(h: float, s: float, v: float) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return np.array([int(round(c * 255.0)) for c in rgb], dtype=np.uint8)


def couple_color(background_rgb_u8: np.ndarray) -> np.ndarray:
    """Deterministic context-coupling function g: complementary hue of the
    background tint at fixed saturation/value, quantized to 8 bits."""
    r, g, b = (float(c) / 255.0 for c in background_rgb_u8)
    h, _s, _v = colorsys.rgb_to_hsv(r, g, b)
    return hsv_to_rgb_u8(h + 0.5, 0.75, 0.85)


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _rectangle_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)


def _triangle_mask(size: int, verts: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    # consistent winding: positive doubled area means counter-clockwise
    e1, e2 = verts[1] - verts[0], verts[2] - verts[0]
    area2 = e1[0] * e2[1] - e1[1] * e2[0]
    if area2 < 0:
        verts = verts[::-1]
    for i in range(3):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % 3]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def _sample_shape(rng: np.random.Generator, grammar: SceneGrammar):
    size = grammar.canvas_size
    kind_idx = int(rng.integers(len(grammar.shape_kinds)))
    kind = grammar.shape_kinds[kind_idx]
    lo, hi = grammar.size_range
    rx = rng.uniform(lo, hi) * size / 2.0
    ry = rng.uniform(lo, hi) * size / 2.0
    cx = rng.uniform(rx * 0.5, size - rx * 0.5)
    cy = rng.uniform(ry * 0.5, size - ry * 0.5)
    if kind == "rectangle":
        mask = _rectangle_mask(size, cx, cy, rx, ry)
    elif kind == "ellipse":
        mask = _ellipse_mask(size, cx, cy, rx, ry)
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        angles = theta + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        verts = np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)
        mask = _triangle_mask(size, verts)
    return kind_idx + 1, mask


def generate_scene(seed: int, grammar: SceneGrammar) -> SceneSample:
    """Render one scene. Shapes are painted back-to-front (later shapes
    overwrite earlier ones); annotation maps record final visibility only.
    Placements that would erase an earlier instance below the visibility
    floor are retried, then skipped."""
    rng = np.random.default_rng(seed)
    size = grammar.canvas_size

    bg_hue = float(rng.uniform())
    bg_color = hsv_to_rgb_u8(bg_hue, 0.35, 0.75)
    image = np.broadcast_to(bg_color, (size, size, 3)).copy()
    labels = np.zeros((size, size), dtype=np.int32)
    ids = np.zeros((size, size), dtype=np.int32)

    lo, hi = grammar.shapes_per_scene
    n_shapes = int(rng.integers(lo, hi + 1))
    next_id = 1
    for _ in range(n_shapes):
        placed = None
        for _try in range(grammar.max_place_tries):
            class_id, mask = _sample_shape(rng, grammar)
            if int(mask.sum()) < grammar.min_visible_px:
                continue
            survivors = np.unique(ids[~mask])
            existing = np.unique(ids[ids > 0])
            if not np.isin(existing, survivors).all():
                continue
            ok = True
            for prev in existing:
                if int(((ids == prev) & ~mask).sum()) < grammar.min_visible_px:
                    ok = False
                    break
            if ok:
                placed = (class_id, mask)
                break
        if placed is None:
            continue
        class_id, mask = placed
        if grammar.context_coupling:
            color = couple_color(bg_color)
        else:
            color = rng.integers(0, 256, size=3, dtype=np.int64).astype(np.uint8)
        image[mask] = color
        labels[mask] = class_id
        ids[mask] = next_id
        next_id += 1

    instances = InstanceMap(ids)
    return SceneSample(
        image=image.astype(np.float32) / 255.0,
        semantic=SemanticMap(labels, grammar.num_classes),
        instances=instances,
        edges=derive_edge_map(instances),
    )


def background_color(scene: SceneSample) -> np.ndarray:
    """Tint of a generated scene's background as a float RGB triple."""
    bg = scene.instances.ids == 0
    if not bg.any():
        raise ValueError("scene has no visible background")
    ys, xs = np.nonzero(bg)
    return scene.image[ys[0], xs[0]].copy()


def generate_corpus(seed: int, grammar: SceneGrammar, n: int, out_dir) -> Corpus:
    """Generate n scenes (seeds seed..seed+n-1); write rasters + manifest when
    out_dir is given."""
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    scenes = [generate_scene(seed + i, grammar) for i in range(n)]
    corpus = Corpus(scenes, grammar.class_names)
    if out_dir is not None:
        save_corpus(corpus, out_dir)
    return corpus
