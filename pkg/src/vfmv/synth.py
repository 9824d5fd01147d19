"""Synthetic varifocal capture: layered scene, thin-lens defocus, array parallax.

Stands in for a physical camera-on-rails rig. Each view is rendered by
shifting every scene layer with depth-dependent disparity, applying a
circle-of-confusion disk blur per layer for the view's focus setting, and
compositing back to front. An optional focus-dependent magnification models
the slight zoom that real lenses exhibit across focus settings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import (
    ArrayGeometry,
    CameraIntrinsics,
    FocalPlane,
    VFMVField,
    ViewImage,
    ViewIndex,
    VfmvError,
    assemble_field,
    load_image,
    policy_label,
)


class NonPositiveDepth(VfmvError):
    pass


class WindowTooLarge(VfmvError):
    pass


@dataclass(frozen=True)
class SceneLayer:
    """One fronto-parallel textured plane: HxW color texture, HxW opacity, depth."""

    texture: np.ndarray
    alpha: np.ndarray
    depth: float


@dataclass(frozen=True)
class LayeredScene:
    """Layers ordered far to near (depths strictly decreasing along the list)."""

    layers: tuple[SceneLayer, ...]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        h, w = self.layers[0].texture.shape[:2]
        for lay in self.layers:
            if lay.texture.shape[:2] != (h, w) or lay.alpha.shape[:2] != (h, w):
                raise ValueError("all layers must share the reference resolution")
            if lay.depth <= 0:
                raise NonPositiveDepth(f"layer depth {lay.depth} <= 0")
        depths = [lay.depth for lay in self.layers]
        if any(b >= a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"layer depths {depths} must strictly decrease far to near")

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[0].texture.shape[:2]


@dataclass(frozen=True)
class LensConfig:
    """Thin-lens parameters in scene units; pixels_per_unit converts blur
    diameters on the sensor to pixels.

    kappa models focus breathing: rendering applies an isotropic scale
    1 + kappa * (focus_distance - reference_distance) about the principal
    point. kappa = 0 disables it.
    """

    focal_length: float
    aperture_diameter: float
    focus_distance: float
    pixels_per_unit: float
    kappa: float = 0.0
    reference_distance: float | None = None

    def __post_init__(self):
        if not (self.focus_distance > self.focal_length > 0):
            raise ValueError("need focus_distance > focal_length > 0")
        if self.aperture_diameter < 0:
            raise ValueError("aperture_diameter must be >= 0")


def magnification(lens: LensConfig) -> float:
    if lens.kappa == 0.0 or lens.reference_distance is None:
        return 1.0
    return 1.0 + lens.kappa * (lens.focus_distance - lens.reference_distance)


def coc_radius(lens: LensConfig, depth: float) -> float:
    """Circle-of-confusion radius in pixels for a point at the given depth."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    return (
        lens.pixels_per_unit
        * (lens.aperture_diameter / 2.0)
        * lens.focal_length
        * abs(depth - lens.focus_distance)
        / (depth * (lens.focus_distance - lens.focal_length))
    )


def disk_kernel(radius: float) -> np.ndarray:
    """Anti-aliased disk kernel normalized to sum exactly 1; radius 0 is identity."""
    if radius <= 0:
        return np.ones((1, 1))
    r = int(math.ceil(radius + 0.5))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.clip(radius + 0.5 - np.hypot(x, y), 0.0, 1.0)
    return k / k.sum()


def disparity(intrinsics: CameraIntrinsics, geometry: ArrayGeometry, depth: float) -> float:
    """Horizontal image shift in pixels per single view step along v."""
    return intrinsics.fx * geometry.baseline_x / depth


def _camera_offset(geometry: ArrayGeometry, view: ViewIndex) -> tuple[float, float]:
    dx = (view.v - geometry.reference.v) * geometry.baseline_x
    dy = (view.u - geometry.reference.u) * geometry.baseline_y
    return dx, dy


def _sample_layer(
    layer: SceneLayer,
    shift: tuple[float, float],
    scale: float,
    center: tuple[float, float],
) -> np.ndarray:
    """Premultiplied RGBA of the layer after parallax shift and magnification.

    Content moves by ``shift`` then scales by ``scale`` about ``center``;
    sampling is bilinear with transparent outside.
    """
    h, w = layer.texture.shape[:2]
    stack = np.dstack([layer.texture * layer.alpha[:, :, None], layer.alpha])
    if shift == (0.0, 0.0) and scale == 1.0:
        return stack
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = center
    src_x = cx + (xs - cx) / scale - shift[0]
    src_y = cy + (ys - cy) / scale - shift[1]
    out = np.empty_like(stack)
    for c in range(4):
        out[:, :, c] = map_coordinates(
            stack[:, :, c], [src_y, src_x], order=1, mode="constant", cval=0.0
        )
    return out


def _composite(scene: LayeredScene, rgba_layers: list[np.ndarray]) -> np.ndarray:
    h, w = scene.shape
    canvas = np.ones((h, w, 3)) * np.asarray(scene.background, dtype=np.float64)
    for rgba in rgba_layers:  # far to near
        a = rgba[:, :, 3:4]
        canvas = canvas * (1.0 - a) + rgba[:, :, :3]
    return np.clip(canvas, 0.0, 1.0)


def _blur(rgba: np.ndarray, radius: float) -> np.ndarray:
    if radius <= 0:
        return rgba
    k = disk_kernel(radius)
    return cv2.filter2D(rgba, -1, k, borderType=cv2.BORDER_CONSTANT)


def render_pinhole(
    scene: LayeredScene,
    geometry: ArrayGeometry,
    view: ViewIndex,
    intrinsics: CameraIntrinsics,
    scale: float = 1.0,
) -> ViewImage:
    """All-in-focus rendering of a view (plane index -1: no focal plane)."""
    dx, dy = _camera_offset(geometry, view)
    center = (intrinsics.cx, intrinsics.cy)
    rgba = [
        _sample_layer(
            lay,
            (-intrinsics.fx * dx / lay.depth, -intrinsics.fy * dy / lay.depth),
            scale,
            center,
        )
        for lay in scene.layers
    ]
    return ViewImage(_composite(scene, rgba), view, -1)


def render_defocused(
    scene: LayeredScene,
    geometry: ArrayGeometry,
    view: ViewIndex,
    intrinsics: CameraIntrinsics,
    lens: LensConfig,
    plane_index: int = -1,
) -> ViewImage:
    """Render a view through the lens: per-layer disk blur of shifted layers
    (premultiplied color and alpha jointly), composited back to front."""
    dx, dy = _camera_offset(geometry, view)
    center = (intrinsics.cx, intrinsics.cy)
    scale = magnification(lens)
    rgba = []
    for lay in scene.layers:
        shifted = _sample_layer(
            lay,
            (-intrinsics.fx * dx / lay.depth, -intrinsics.fy * dy / lay.depth),
            scale,
            center,
        )
        rgba.append(_blur(shifted, coc_radius(lens, lay.depth)))
    return ViewImage(_composite(scene, rgba), view, plane_index)


def generate_vfmv(
    scene: LayeredScene,
    geometry: ArrayGeometry,
    intrinsics: CameraIntrinsics,
    lens_template: LensConfig,
    planes: list[FocalPlane],
    assignment: dict[ViewIndex, int],
    dims: tuple[int, int],
    policy: str | None = None,
) -> VFMVField:
    """Render the full grid, focusing view (u,v) at planes[assignment[(u,v)]]."""
    U, V = dims
    plane_by_index = {p.index: p for p in planes}
    views = []
    for u in range(U):
        for v in range(V):
            vi = ViewIndex(u, v)
            pidx = assignment[vi]
            lens = replace(lens_template, focus_distance=plane_by_index[pidx].depth)
            views.append(
                render_defocused(scene, geometry, vi, intrinsics, lens, plane_index=pidx)
            )
    return assemble_field(views, planes, dims, intrinsics, geometry, policy=policy)


def focus_measure(image: np.ndarray, window: int = 9) -> np.ndarray:
    """Sum of modified-Laplacian magnitudes over a window; zero on flat input."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    gray = to_gray(image)
    h, w = gray.shape
    if window > min(h, w):
        raise WindowTooLarge(f"window {window} > min image side {min(h, w)}")
    k = np.array([[-1.0, 2.0, -1.0]])
    ml = np.abs(cv2.filter2D(gray, -1, k, borderType=cv2.BORDER_REFLECT)) + np.abs(
        cv2.filter2D(gray, -1, k.T, borderType=cv2.BORDER_REFLECT)
    )
    return cv2.boxFilter(ml, -1, (window, window), normalize=False, borderType=cv2.BORDER_REFLECT)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Rec.709 luminance of a linear RGB image (2D input passes through)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr[:, :, 0] * 0.2126 + arr[:, :, 1] * 0.7152 + arr[:, :, 2] * 0.0722


def region_masks(
    scene: LayeredScene,
    geometry: ArrayGeometry,
    view: ViewIndex,
    intrinsics: CameraIntrinsics,
    scale: float = 1.0,
) -> list[np.ndarray]:
    """Per-layer visibility masks (topmost layer wins), sharp, same order as
    scene.layers. Used to score focus per depth region."""
    dx, dy = _camera_offset(geometry, view)
    center = (intrinsics.cx, intrinsics.cy)
    h, w = scene.shape
    masks = []
    covered = np.zeros((h, w), dtype=bool)
    for lay in reversed(scene.layers):  # near first: nearer layers occlude
        rgba = _sample_layer(
            lay,
            (-intrinsics.fx * dx / lay.depth, -intrinsics.fy * dy / lay.depth),
            scale,
            center,
        )
        visible = (rgba[:, :, 3] > 0.5) & ~covered
        covered |= visible
        masks.append(visible)
    masks.reverse()
    return masks


# ---------------------------------------------------------------------------
# default desk scene
# ---------------------------------------------------------------------------

def _speckle_texture(rng: np.random.Generator, h: int, w: int, tint) -> np.ndarray:
    """High-contrast band-limited texture: fine speckle plus mid-scale blobs."""
    fine = gaussian_filter(rng.standard_normal((h, w)), 1.1)
    mid = gaussian_filter(rng.standard_normal((h, w)), 4.0)
    g = fine / (np.abs(fine).max() + 1e-12) * 0.55 + mid / (np.abs(mid).max() + 1e-12) * 0.25
    base = 0.5 + g
    tex = np.clip(base[:, :, None] * np.asarray(tint)[None, None, :], 0.0, 1.0)
    return tex


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def make_desk_scene(width: int = 768, height: int = 512, seed: int = 0) -> LayeredScene:
    """Three textured layers (near/mid/far) with disjoint visible regions.

    Depths 1.2 / 1.6 / 2.4 give per-step disparities in ratio 1 : 0.75 : 0.5,
    so the layer slopes land exactly on a 9-sample refocusing grid.
    """
    rng = np.random.default_rng(seed)
    h, w = height, width
    far = SceneLayer(
        texture=_speckle_texture(rng, h, w, (0.95, 0.9, 0.8)),
        alpha=np.ones((h, w)),
        depth=2.4,
    )
    mid_alpha = np.clip(
        _ellipse_mask(h, w, 0.42 * h, 0.62 * w, 0.30 * h, 0.26 * w)
        + _ellipse_mask(h, w, 0.30 * h, 0.28 * w, 0.17 * h, 0.14 * w),
        0,
        1,
    )
    mid = SceneLayer(
        texture=_speckle_texture(rng, h, w, (0.75, 0.95, 0.85)),
        alpha=mid_alpha,
        depth=1.6,
    )
    near_alpha = _ellipse_mask(h, w, 0.78 * h, 0.22 * w, 0.16 * h, 0.15 * w)
    near = SceneLayer(
        texture=_speckle_texture(rng, h, w, (0.95, 0.8, 0.9)),
        alpha=near_alpha,
        depth=1.2,
    )
    return LayeredScene(layers=(far, mid, near), background=(0.04, 0.04, 0.05))


def make_desk_planes(num_planes: int = 34, near: float = 1.2, far: float = 2.85) -> list[FocalPlane]:
    depths = np.linspace(near, far, num_planes)
    return [FocalPlane(i, float(d)) for i, d in enumerate(depths)]


# ---------------------------------------------------------------------------
# scene description files
# ---------------------------------------------------------------------------

def load_scene(path: str | Path) -> LayeredScene:
    """Load a scene description: JSON listing layer texture/alpha paths and
    depths (ordered far to near) plus a background color."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    layers = []
    for entry in doc["layers"]:
        tex = load_image(path.parent / entry["texture"])
        alpha_spec = entry.get("alpha", 1.0)
        if isinstance(alpha_spec, (int, float)):
            alpha = np.full(tex.shape[:2], float(alpha_spec))
        else:
            alpha = to_gray(load_image(path.parent / alpha_spec))
        layers.append(SceneLayer(texture=tex, alpha=alpha, depth=float(entry["depth"])))
    background = tuple(doc.get("background", (0.0, 0.0, 0.0)))
    return LayeredScene(layers=tuple(layers), background=background)
