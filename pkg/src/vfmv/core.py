"""Varifocal multiview data model.

A varifocal multiview (VFMV) field is a dense U x V grid of views in which
every view is focused on one focal plane out of an ordered near-to-far list.
A conventional fixed-focus multiview field is the degenerate case where all
views share a single plane. Pixel values are linear-light floats in [0, 1];
8-bit files are decoded from sRGB on load, datasets are stored as 16-bit
linear PNG plus a JSON manifest.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import cv2
import numpy as np


class VfmvError(Exception):
    """Base class for all toolkit errors."""


class DuplicateView(VfmvError):
    def __init__(self, u: int, v: int):
        super().__init__(f"duplicate view ({u},{v})")
        self.u, self.v = u, v


class MissingView(VfmvError):
    def __init__(self, u: int, v: int):
        super().__init__(f"missing view ({u},{v})")
        self.u, self.v = u, v


class ResolutionMismatch(VfmvError):
    def __init__(self, u: int, v: int, got: tuple, expected: tuple):
        super().__init__(f"view ({u},{v}) has resolution {got}, expected {expected}")
        self.u, self.v = u, v


class DanglingPlaneRef(VfmvError):
    def __init__(self, u: int, v: int, plane_index: int):
        super().__init__(f"view ({u},{v}) references unknown plane {plane_index}")
        self.plane_index = plane_index


class InvalidPlane(VfmvError):
    def __init__(self, plane_index: int, num_planes: int):
        super().__init__(f"plane {plane_index} out of range for {num_planes} planes")
        self.plane_index = plane_index


class ManifestError(VfmvError):
    """Required manifest field missing or malformed."""


@dataclass(frozen=True, order=True)
class ViewIndex:
    """Grid position of a view: u is the row, v the column (0-based)."""

    u: int
    v: int


@dataclass(frozen=True)
class FocalPlane:
    """One focal plane: id (0-based, near to far) and scene depth."""

    index: int
    depth: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class ArrayGeometry:
    """Camera-array spacing in scene units and the reference view."""

    baseline_x: float
    baseline_y: float
    reference: ViewIndex


def _frozen_pixels(pixels: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 pixel array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ViewImage:
    """A single view: HxWx3 linear RGB pixels, grid position, focal plane id."""

    pixels: np.ndarray
    view: ViewIndex
    plane_index: int

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen_pixels(self.pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_field (data, not an error)."""

    kind: str
    detail: str


@dataclass(frozen=True)
class VFMVField:
    """Complete U x V grid of views plus capture metadata.

    ``views`` is stored row-major: index of (u, v) is u * V + v. All core
    types are immutable after construction and safe to share across workers.
    """

    grid_dims: tuple[int, int]
    views: tuple[ViewImage, ...]
    planes: tuple[FocalPlane, ...]
    intrinsics: CameraIntrinsics
    geometry: ArrayGeometry
    policy: str | None = None

    def view(self, u: int, v: int) -> ViewImage:
        U, V = self.grid_dims
        if not (0 <= u < U and 0 <= v < V):
            raise MissingView(u, v)
        return self.views[u * V + v]

    def plane_of(self, u: int, v: int) -> FocalPlane:
        return self.planes[self.view(u, v).plane_index]

    @property
    def height(self) -> int:
        return self.views[0].height

    @property
    def width(self) -> int:
        return self.views[0].width

    @property
    def center_view(self) -> ViewIndex:
        U, V = self.grid_dims
        return ViewIndex(U // 2, V // 2)

    @property
    def is_fixed_focus(self) -> bool:
        indices = {vi.plane_index for vi in self.views}
        return len(indices) == 1

    def assignment(self) -> dict[ViewIndex, int]:
        return {vi.view: vi.plane_index for vi in self.views}


def validate_field(field: VFMVField) -> list[Violation]:
    """Check every field invariant; empty list means the field is valid."""
    out: list[Violation] = []
    U, V = field.grid_dims
    if U < 1 or V < 1 or len(field.views) != U * V:
        out.append(
            Violation("GridShape", f"expected {U * V} views for dims ({U},{V}), got {len(field.views)}")
        )

    seen: set[tuple[int, int]] = set()
    for vi in field.views:
        key = (vi.view.u, vi.view.v)
        if key in seen:
            out.append(Violation("DuplicateView", f"({key[0]},{key[1]})"))
        seen.add(key)
        if not (0 <= vi.view.u < U and 0 <= vi.view.v < V):
            out.append(Violation("ViewOutOfGrid", f"({key[0]},{key[1]})"))
    for u in range(U):
        for v in range(V):
            if (u, v) not in seen:
                out.append(Violation("MissingView", f"({u},{v})"))

    if field.views:
        h, w = field.views[0].pixels.shape[:2]
        for vi in field.views:
            if vi.pixels.shape[:2] != (h, w):
                out.append(
                    Violation(
                        "ResolutionMismatch",
                        f"({vi.view.u},{vi.view.v}) is {vi.pixels.shape[1]}x{vi.pixels.shape[0]}, "
                        f"expected {w}x{h}",
                    )
                )

    plane_ids = [p.index for p in field.planes]
    if len(set(plane_ids)) != len(plane_ids) or plane_ids != sorted(plane_ids):
        out.append(Violation("PlaneIndexViolation", f"plane indices {plane_ids} not unique/sorted"))
    depths = [p.depth for p in field.planes]
    if any(d <= 0 for d in depths):
        out.append(Violation("PlaneDepthViolation", "non-positive plane depth"))
    if any(b <= a for a, b in zip(depths, depths[1:])):
        out.append(Violation("PlaneOrderViolation", f"depths {depths} not strictly increasing"))

    known = set(plane_ids)
    for vi in field.views:
        if vi.plane_index not in known:
            out.append(
                Violation("DanglingPlaneRef", f"({vi.view.u},{vi.view.v}) -> plane {vi.plane_index}")
            )

    if field.views:
        k = field.intrinsics
        h, w = field.views[0].pixels.shape[:2]
        if k.fx <= 0 or k.fy <= 0 or not (0 <= k.cx < w) or not (0 <= k.cy < h):
            out.append(Violation("IntrinsicsOutOfRange", f"fx={k.fx} fy={k.fy} cx={k.cx} cy={k.cy}"))
    g = field.geometry
    if g.baseline_x < 0 or g.baseline_y < 0:
        out.append(Violation("GeometryOutOfRange", f"negative baseline ({g.baseline_x},{g.baseline_y})"))
    if not (0 <= g.reference.u < U and 0 <= g.reference.v < V):
        out.append(Violation("GeometryOutOfRange", f"reference {g.reference} outside grid"))
    return out


def assemble_field(
    views: Iterable[ViewImage],
    planes: Iterable[FocalPlane],
    dims: tuple[int, int],
    intrinsics: CameraIntrinsics,
    geometry: ArrayGeometry,
    policy: str | None = None,
) -> VFMVField:
    """Build a validated field from parts; raises on duplicates, holes,
    resolution mismatches, and dangling plane references."""
    views = list(views)
    U, V = dims
    by_pos: dict[tuple[int, int], ViewImage] = {}
    for vi in views:
        key = (vi.view.u, vi.view.v)
        if key in by_pos:
            raise DuplicateView(*key)
        by_pos[key] = vi
    ordered: list[ViewImage] = []
    for u in range(U):
        for v in range(V):
            if (u, v) not in by_pos:
                raise MissingView(u, v)
            ordered.append(by_pos[(u, v)])

    field = VFMVField(
        grid_dims=(U, V),
        views=tuple(ordered),
        planes=tuple(planes),
        intrinsics=intrinsics,
        geometry=geometry,
        policy=policy,
    )
    for violation in validate_field(field):
        if violation.kind == "ResolutionMismatch":
            h, w = field.views[0].pixels.shape[:2]
            bad = next(
                vi for vi in field.views if vi.pixels.shape[:2] != (h, w)
            )
            raise ResolutionMismatch(bad.view.u, bad.view.v, bad.pixels.shape[:2], (h, w))
        if violation.kind == "DanglingPlaneRef":
            bad = next(
                vi for vi in field.views if vi.plane_index not in {p.index for p in field.planes}
            )
            raise DanglingPlaneRef(bad.view.u, bad.view.v, bad.plane_index)
        raise VfmvError(f"{violation.kind}: {violation.detail}")
    return field


def disassemble(field: VFMVField):
    """Inverse of assemble_field: (views, planes, dims, intrinsics, geometry)."""
    return (
        set(field.views),
        list(field.planes),
        field.grid_dims,
        field.intrinsics,
        field.geometry,
    )


def focal_assignment(
    policy: str,
    dims: tuple[int, int],
    num_planes: int,
    plane: int | None = None,
) -> dict[ViewIndex, int]:
    """Map every grid view to a focal plane index.

    Policies: ``uniform`` (all views -> ``plane``), ``raster_cycle`` (view i in
    row-major order -> i mod num_planes), ``center_out`` (views sorted by
    distance from the grid center sweep the planes near to far).
    """
    U, V = dims
    if num_planes < 1 or U * V < 1:
        raise ValueError("need at least one plane and one view")
    if policy == "uniform":
        if plane is None:
            raise ValueError("uniform policy requires a plane index")
        if not (0 <= plane < num_planes):
            raise InvalidPlane(plane, num_planes)
        return {ViewIndex(u, v): plane for u in range(U) for v in range(V)}
    if policy == "raster_cycle":
        return {
            ViewIndex(u, v): (u * V + v) % num_planes for u in range(U) for v in range(V)
        }
    if policy == "center_out":
        cu, cv = (U - 1) / 2.0, (V - 1) / 2.0
        order = sorted(
            (ViewIndex(u, v) for u in range(U) for v in range(V)),
            key=lambda w: (math.hypot(w.u - cu, w.v - cv), w.u, w.v),
        )
        total = len(order)
        return {w: min(num_planes - 1, rank * num_planes // total) for rank, w in enumerate(order)}
    raise ValueError(f"unknown assignment policy {policy!r}")


def policy_label(policy: str, plane: int | None = None) -> str:
    return f"uniform({plane})" if policy == "uniform" else policy


# ---------------------------------------------------------------------------
# image and dataset I/O
# ---------------------------------------------------------------------------

def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.clip(x, 0, None) ** (1 / 2.4) - 0.055)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG as linear-light HxWx3 float in [0, 1].

    16-bit files are assumed linear (the dataset encoding); 8-bit files are
    decoded from sRGB.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise VfmvError(f"cannot read image {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    rgb = raw[:, :, ::-1]
    if raw.dtype == np.uint16:
        return rgb.astype(np.float64) / 65535.0
    if raw.dtype == np.uint8:
        return srgb_to_linear(rgb.astype(np.float64) / 255.0)
    return np.clip(rgb.astype(np.float64), 0.0, 1.0)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write linear-light floats as 16-bit PNG (lossless on the 16-bit lattice)."""
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if q.ndim == 3:
        q = q[:, :, ::-1]
    if not cv2.imwrite(str(path), q):
        raise VfmvError(f"cannot write image {path}")


_REQUIRED_MANIFEST = ("format", "grid_dims", "planes", "assignments", "intrinsics", "geometry")
_KNOWN_MANIFEST = _REQUIRED_MANIFEST + (
    "policy",
    "registered",
    "homographies",
    "provenance",
    "synth",
)


def view_filename(u: int, v: int) -> str:
    return f"view_u{u}_v{v}.png"


def save_field(
    field: VFMVField,
    directory: str | Path,
    registered: bool = False,
    homographies: Mapping[tuple[int, int], np.ndarray] | None = None,
    provenance: dict | None = None,
    synth: dict | None = None,
) -> Path:
    """Write the dataset directory: one 16-bit PNG per view plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for vi in field.views:
        save_image(directory / view_filename(vi.view.u, vi.view.v), vi.pixels)
    manifest: dict = {
        "format": "vfmv-dataset-v1",
        "grid_dims": list(field.grid_dims),
        "planes": [{"index": p.index, "depth": p.depth} for p in field.planes],
        "assignments": [[vi.view.u, vi.view.v, vi.plane_index] for vi in field.views],
        "intrinsics": {
            "fx": field.intrinsics.fx,
            "fy": field.intrinsics.fy,
            "cx": field.intrinsics.cx,
            "cy": field.intrinsics.cy,
            "skew": field.intrinsics.skew,
        },
        "geometry": {
            "baseline_x": field.geometry.baseline_x,
            "baseline_y": field.geometry.baseline_y,
            "reference": [field.geometry.reference.u, field.geometry.reference.v],
        },
        "registered": registered,
    }
    if field.policy is not None:
        manifest["policy"] = field.policy
    if homographies is not None:
        manifest["homographies"] = {
            f"{u},{v}": np.asarray(h, dtype=float).reshape(9).tolist()
            for (u, v), h in homographies.items()
        }
    if provenance is not None:
        manifest["provenance"] = provenance
    if synth is not None:
        manifest["synth"] = synth
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return directory


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest.json in {directory}")
    with open(path) as f:
        manifest = json.load(f)
    for key in _REQUIRED_MANIFEST:
        if key not in manifest:
            raise ManifestError(f"manifest missing required field {key!r}")
    for key in manifest:
        if key not in _KNOWN_MANIFEST:
            warnings.warn(f"unknown manifest field {key!r} ignored", stacklevel=2)
    return manifest


def load_field(directory: str | Path) -> VFMVField:
    """Load a dataset directory written by save_field (strict manifest check)."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    U, V = (int(x) for x in manifest["grid_dims"])
    planes = [FocalPlane(int(p["index"]), float(p["depth"])) for p in manifest["planes"]]
    assignment = {(int(u), int(v)): int(p) for u, v, p in manifest["assignments"]}
    ki = manifest["intrinsics"]
    intr = CameraIntrinsics(
        fx=float(ki["fx"]), fy=float(ki["fy"]), cx=float(ki["cx"]), cy=float(ki["cy"]),
        skew=float(ki.get("skew", 0.0)),
    )
    gm = manifest["geometry"]
    geom = ArrayGeometry(
        baseline_x=float(gm["baseline_x"]),
        baseline_y=float(gm["baseline_y"]),
        reference=ViewIndex(int(gm["reference"][0]), int(gm["reference"][1])),
    )
    views = []
    for u in range(U):
        for v in range(V):
            if (u, v) not in assignment:
                raise MissingView(u, v)
            pixels = load_image(directory / view_filename(u, v))
            views.append(ViewImage(pixels, ViewIndex(u, v), assignment[(u, v)]))
    return assemble_field(
        views, planes, (U, V), intr, geom, policy=manifest.get("policy")
    )
