"""Scale-space feature detection for single views and whole fields.

Per-view detection finds difference-of-Gaussians extrema with subpixel and
subscale refinement, principal-curvature edge rejection, dominant-orientation
assignment and 128-d gradient-histogram descriptors.

Field-level detection searches a slope (disparity-per-view-step) dimension on
top of scale: the field is refocused by shift-and-average at each slope
hypothesis, per-slice detections are pooled, and spatially-coincident
detections across slopes are merged down to the strongest response, which
keeps its slope as a depth proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter, minimum_filter

from .core import VFMVField, VfmvError
from .synth import to_gray


class ImageTooSmall(VfmvError):
    pass


class WindowOutOfBounds(VfmvError):
    pass


@dataclass(frozen=True)
class ScaleSpaceConfig:
    num_octaves: int = 4
    first_octave: int = -1
    levels_per_octave: int = 3
    peak_threshold: float = 0.0015
    edge_threshold: float = 10.0
    base_sigma: float = 1.6

    def __post_init__(self):
        if self.num_octaves < 1 or self.levels_per_octave < 1:
            raise ValueError("need at least one octave and one level per octave")
        if self.peak_threshold <= 0 or self.edge_threshold <= 0 or self.base_sigma <= 0:
            raise ValueError("thresholds and base_sigma must be positive")
        if self.first_octave not in (-1, 0):
            raise ValueError("first_octave must be -1 (2x upsampled) or 0")


@dataclass(frozen=True)
class Keypoint:
    """Detected feature in input-image coordinates.

    ``slope`` is the disparity-per-view-step hypothesis attached by
    field-level detection; per-view detections leave it None.
    """

    x: float
    y: float
    sigma: float
    response: float
    orientation: float = 0.0
    slope: float | None = None


@dataclass(frozen=True)
class FeatureSet:
    keypoints: tuple[Keypoint, ...]
    descriptors: np.ndarray  # N x 128, unit L2 rows
    source: str  # "per_view(u,v)" | "field_level"

    def __post_init__(self):
        desc = np.asarray(self.descriptors, dtype=np.float64).reshape(len(self.keypoints), -1)
        desc.setflags(write=False)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.keypoints)


@dataclass(frozen=True)
class ScaleSpacePyramid:
    """Gaussian stacks per octave: octaves[i] has shape (levels+3, H_i, W_i)."""

    octaves: tuple[np.ndarray, ...]
    octave_indices: tuple[int, ...]
    config: ScaleSpaceConfig
    input_shape: tuple[int, int]

    def sigma_of(self, octave: int, level: float) -> float:
        s = self.config.levels_per_octave
        return self.config.base_sigma * 2.0 ** (octave + level / s)


_INPUT_BLUR = 0.5  # assumed blur of the raw input image, in input pixels


def _upsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.mgrid[0 : 2 * h, 0 : 2 * w].astype(np.float64)
    return map_coordinates(img, [ys / 2.0, xs / 2.0], order=1, mode="nearest")


def gaussian_scale_space(image: np.ndarray, config: ScaleSpaceConfig = ScaleSpaceConfig()) -> ScaleSpacePyramid:
    """Build the Gaussian pyramid with per-level blur sigma(o, l) =
    base_sigma * 2^(o + l/levels) in input-pixel units."""
    gray = to_gray(np.asarray(image, dtype=np.float64))
    if gray.size == 0:
        raise ImageTooSmall("empty image")
    h, w = gray.shape
    s = config.levels_per_octave

    for i in range(config.num_octaves):
        o = config.first_octave + i
        oh, ow = int(round(h * 2.0**-o)), int(round(w * 2.0**-o))
        if min(oh, ow) < 8:
            raise ImageTooSmall(
                f"octave {o} would be {ow}x{oh} (<8 px) for input {w}x{h}"
            )

    if config.first_octave == -1:
        seed = _upsample2(gray)
        seed_blur = 2.0 * _INPUT_BLUR  # in octave pixels
    else:
        seed = gray.copy()
        seed_blur = _INPUT_BLUR

    # in octave-pixel units every octave runs the same schedule
    sigmas_oct = [config.base_sigma * 2.0 ** (l / s) for l in range(s + 3)]

    octaves: list[np.ndarray] = []
    indices: list[int] = []
    for i in range(config.num_octaves):
        o = config.first_octave + i
        levels = np.empty((s + 3,) + seed.shape)
        first_inc = math.sqrt(max(sigmas_oct[0] ** 2 - seed_blur**2, 0.0))
        levels[0] = gaussian_filter(seed, first_inc) if first_inc > 0 else seed
        for l in range(1, s + 3):
            inc = math.sqrt(sigmas_oct[l] ** 2 - sigmas_oct[l - 1] ** 2)
            levels[l] = gaussian_filter(levels[l - 1], inc)
        octaves.append(levels)
        indices.append(o)
        seed = levels[s][::2, ::2]
        seed_blur = sigmas_oct[0]
    return ScaleSpacePyramid(tuple(octaves), tuple(indices), config, (h, w))


_BORDER = 5  # pixels excluded at every octave border


def _octave_extrema(dog: np.ndarray, config: ScaleSpaceConfig):
    """Strict 3D extrema of one octave's DoG volume with quadratic refinement.

    Returns arrays (level_ref, y_ref, x_ref, response) in octave coordinates.
    """
    s = config.levels_per_octave
    fp = np.ones((3, 3, 3), dtype=bool)
    fp[1, 1, 1] = False
    neigh_max = maximum_filter(dog, footprint=fp, mode="nearest")
    neigh_min = minimum_filter(dog, footprint=fp, mode="nearest")
    cand = ((dog > neigh_max) | (dog < neigh_min)) & (np.abs(dog) >= 0.8 * config.peak_threshold)
    cand[: 1] = False
    cand[s + 1 :] = False
    cand[:, :_BORDER] = False
    cand[:, -_BORDER:] = False
    cand[:, :, :_BORDER] = False
    cand[:, :, -_BORDER:] = False
    ls, ys, xs = np.nonzero(cand)
    if len(ls) == 0:
        return (np.empty(0),) * 4

    nl, nh, nw = dog.shape
    alive = np.ones(len(ls), dtype=bool)
    settled = np.zeros(len(ls), dtype=bool)
    offs = np.zeros((len(ls), 3))
    for _ in range(5):
        work = alive & ~settled
        if not work.any():
            break
        l, y, x = ls[work], ys[work], xs[work]
        d0 = dog[l, y, x]
        gl = 0.5 * (dog[l + 1, y, x] - dog[l - 1, y, x])
        gy = 0.5 * (dog[l, y + 1, x] - dog[l, y - 1, x])
        gx = 0.5 * (dog[l, y, x + 1] - dog[l, y, x - 1])
        hll = dog[l + 1, y, x] + dog[l - 1, y, x] - 2 * d0
        hyy = dog[l, y + 1, x] + dog[l, y - 1, x] - 2 * d0
        hxx = dog[l, y, x + 1] + dog[l, y, x - 1] - 2 * d0
        hly = 0.25 * (dog[l + 1, y + 1, x] - dog[l + 1, y - 1, x] - dog[l - 1, y + 1, x] + dog[l - 1, y - 1, x])
        hlx = 0.25 * (dog[l + 1, y, x + 1] - dog[l + 1, y, x - 1] - dog[l - 1, y, x + 1] + dog[l - 1, y, x - 1])
        hyx = 0.25 * (dog[l, y + 1, x + 1] - dog[l, y + 1, x - 1] - dog[l, y - 1, x + 1] + dog[l, y - 1, x - 1])
        hess = np.stack(
            [
                np.stack([hll, hly, hlx], axis=-1),
                np.stack([hly, hyy, hyx], axis=-1),
                np.stack([hlx, hyx, hxx], axis=-1),
            ],
            axis=-2,
        )
        grad = np.stack([gl, gy, gx], axis=-1)
        det = np.linalg.det(hess)
        solvable = np.abs(det) > 1e-30
        off = np.zeros_like(grad)
        if solvable.any():
            off[solvable] = -np.linalg.solve(hess[solvable], grad[solvable])
        widx = np.nonzero(work)[0]
        bad = widx[~solvable]
        alive[bad] = False

        within = np.all(np.abs(off) <= 0.6, axis=-1)
        offs[widx[solvable & within]] = off[solvable & within]
        settled[widx[solvable & within]] = True

        moving = solvable & ~within
        midx = widx[moving]
        step = np.round(off[moving]).astype(int)
        step = np.clip(step, -1, 1)
        ls[midx] = np.clip(ls[midx] + step[:, 0], 1, nl - 2)
        ys[midx] = np.clip(ys[midx] + step[:, 1], _BORDER, nh - 1 - _BORDER)
        xs[midx] = np.clip(xs[midx] + step[:, 2], _BORDER, nw - 1 - _BORDER)
    alive &= settled

    l, y, x = ls[alive], ys[alive], xs[alive]
    off = offs[alive]
    d0 = dog[l, y, x]
    gl = 0.5 * (dog[l + 1, y, x] - dog[l - 1, y, x])
    gy = 0.5 * (dog[l, y + 1, x] - dog[l, y - 1, x])
    gx = 0.5 * (dog[l, y, x + 1] - dog[l, y, x - 1])
    response = d0 + 0.5 * (gl * off[:, 0] + gy * off[:, 1] + gx * off[:, 2])
    strong = np.abs(response) >= config.peak_threshold

    # principal-curvature ratio test on the 2x2 spatial Hessian
    hyy = dog[l, y + 1, x] + dog[l, y - 1, x] - 2 * d0
    hxx = dog[l, y, x + 1] + dog[l, y, x - 1] - 2 * d0
    hyx = 0.25 * (dog[l, y + 1, x + 1] - dog[l, y + 1, x - 1] - dog[l, y - 1, x + 1] + dog[l, y - 1, x - 1])
    tr = hxx + hyy
    det2 = hxx * hyy - hyx * hyx
    r = config.edge_threshold
    non_edge = (det2 > 0) & (tr * tr / np.where(det2 > 0, det2, 1.0) < (r + 1.0) ** 2 / r)

    keep = strong & non_edge
    return (
        l[keep] + off[keep, 0],
        y[keep] + off[keep, 1],
        x[keep] + off[keep, 2],
        response[keep],
    )


def _raw_extrema(pyramid: ScaleSpacePyramid):
    """All octaves' refined extrema as flat arrays in input coordinates,
    keeping octave bookkeeping for the descriptor stage."""
    cfg = pyramid.config
    h, w = pyramid.input_shape
    rows = {"octave": [], "level": [], "xo": [], "yo": [], "x": [], "y": [], "sigma": [], "response": []}
    for oi, gauss in zip(pyramid.octave_indices, pyramid.octaves):
        dog = gauss[1:] - gauss[:-1]
        lf, yf, xf, resp = _octave_extrema(dog, cfg)
        if len(lf) == 0:
            continue
        scale = 2.0**oi
        xi = xf * scale
        yi = yf * scale
        inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        rows["octave"].append(np.full(inside.sum(), oi))
        rows["level"].append(lf[inside])
        rows["xo"].append(xf[inside])
        rows["yo"].append(yf[inside])
        rows["x"].append(xi[inside])
        rows["y"].append(yi[inside])
        rows["sigma"].append(cfg.base_sigma * 2.0 ** (oi + lf[inside] / cfg.levels_per_octave))
        rows["response"].append(resp[inside])
    if not rows["octave"]:
        return {k: np.empty(0) for k in rows}
    out = {k: np.concatenate(v) for k, v in rows.items()}
    order = np.lexsort((out["x"], out["y"], out["sigma"]))
    return {k: v[order] for k, v in out.items()}


def dog_extrema(pyramid: ScaleSpacePyramid, config: ScaleSpaceConfig | None = None) -> list[Keypoint]:
    """Subpixel-refined DoG extrema passing the peak and edge thresholds."""
    if config is not None and config != pyramid.config:
        raise ValueError("config does not match the pyramid's config")
    raw = _raw_extrema(pyramid)
    return [
        Keypoint(x=float(x), y=float(y), sigma=float(s), response=float(r))
        for x, y, s, r in zip(raw["x"], raw["y"], raw["sigma"], raw["response"])
    ]


# ---------------------------------------------------------------------------
# orientation and descriptors
# ---------------------------------------------------------------------------

_N_ORI_BINS = 36
_DESC_WIDTH = 4
_DESC_ORI_BINS = 8
_DESC_NORM_CLAMP = 0.2


def _orientations_batch(grad_mag, grad_ang, xo, yo, sig_o):
    """Dominant gradient orientation per keypoint (octave-level coordinates)."""
    n = len(xo)
    h, w = grad_mag.shape
    out = np.zeros(n)
    radius = np.round(3.0 * 1.5 * sig_o).astype(int)
    rmax = int(radius.max()) if n else 0
    dy, dx = np.mgrid[-rmax : rmax + 1, -rmax : rmax + 1]
    dy, dx = dy.ravel(), dx.ravel()
    for start in range(0, n, 256):
        sl = slice(start, min(start + 256, n))
        cx = np.round(xo[sl]).astype(int)[:, None]
        cy = np.round(yo[sl]).astype(int)[:, None]
        px = np.clip(cx + dx[None, :], 0, w - 1)
        py = np.clip(cy + dy[None, :], 0, h - 1)
        in_win = (np.hypot(dx[None, :], dy[None, :]) <= radius[sl, None]) & (
            (cx + dx[None, :] >= 0) & (cx + dx[None, :] < w) & (cy + dy[None, :] >= 0) & (cy + dy[None, :] < h)
        )
        sig_w = 1.5 * sig_o[sl, None]
        weight = grad_mag[py, px] * np.exp(-(dx[None, :] ** 2 + dy[None, :] ** 2) / (2 * sig_w**2))
        weight = np.where(in_win, weight, 0.0)
        ang = np.mod(grad_ang[py, px], 2 * np.pi)
        bins = np.minimum((ang / (2 * np.pi) * _N_ORI_BINS).astype(int), _N_ORI_BINS - 1)
        k = sl.stop - sl.start
        flat = (np.arange(k)[:, None] * _N_ORI_BINS + bins).ravel()
        hist = np.bincount(flat, weights=weight.ravel(), minlength=k * _N_ORI_BINS).reshape(k, _N_ORI_BINS)
        for _ in range(6):
            hist = (np.roll(hist, 1, axis=1) + hist + np.roll(hist, -1, axis=1)) / 3.0
        peak = np.argmax(hist, axis=1)
        left = hist[np.arange(k), (peak - 1) % _N_ORI_BINS]
        right = hist[np.arange(k), (peak + 1) % _N_ORI_BINS]
        center = hist[np.arange(k), peak]
        denom = left - 2 * center + right
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(denom == 0, 1, denom), 0.0)
        out[sl] = (peak + 0.5 + shift) * (2 * np.pi / _N_ORI_BINS)
    return np.mod(out, 2 * np.pi)


def _descriptors_batch(grad_mag, grad_ang, xo, yo, sig_o, orient):
    """128-d descriptors; returns (descriptors, valid) with out-of-bounds
    windows marked invalid."""
    n = len(xo)
    h, w = grad_mag.shape
    d = _DESC_WIDTH
    nb = _DESC_ORI_BINS
    descs = np.zeros((n, d * d * nb))
    valid = np.ones(n, dtype=bool)

    hist_width = 3.0 * sig_o
    radius = np.round(hist_width * math.sqrt(2) * (d + 1) * 0.5).astype(int)
    valid &= (xo - radius >= 0) & (xo + radius <= w - 1) & (yo - radius >= 0) & (yo + radius <= h - 1)
    if not valid.any():
        return descs, valid

    rmax = int(radius[valid].max())
    dy, dx = np.mgrid[-rmax : rmax + 1, -rmax : rmax + 1]
    dy, dx = dy.ravel().astype(np.float64), dx.ravel().astype(np.float64)

    idx_all = np.nonzero(valid)[0]
    for start in range(0, len(idx_all), 192):
        sel = idx_all[start : start + 192]
        k = len(sel)
        cx, cy = xo[sel][:, None], yo[sel][:, None]
        px = np.clip(np.round(cx + dx[None, :]).astype(int), 0, w - 1)
        py = np.clip(np.round(cy + dy[None, :]).astype(int), 0, h - 1)
        fx = px - cx  # actual offsets after rounding
        fy = py - cy
        cos_t = np.cos(orient[sel])[:, None]
        sin_t = np.sin(orient[sel])[:, None]
        hw = hist_width[sel][:, None]
        xr = (cos_t * fx + sin_t * fy) / hw
        yr = (-sin_t * fx + cos_t * fy) / hw
        cbin = xr + d / 2 - 0.5
        rbin = yr + d / 2 - 0.5
        in_win = (cbin > -1) & (cbin < d) & (rbin > -1) & (rbin < d)
        mag = grad_mag[py, px]
        ang = np.mod(grad_ang[py, px] - orient[sel][:, None], 2 * np.pi)
        obin = ang / (2 * np.pi) * nb
        weight = mag * np.exp(-(xr**2 + yr**2) / (2 * (d / 2) ** 2))
        weight = np.where(in_win, weight, 0.0)

        r0 = np.floor(rbin).astype(int)
        c0 = np.floor(cbin).astype(int)
        o0 = np.floor(obin).astype(int)
        fr = rbin - r0
        fc = cbin - c0
        fo = obin - o0
        hist = np.zeros(k * d * d * nb)
        kidx = np.broadcast_to(np.arange(k)[:, None], r0.shape)
        for ir in (0, 1):
            rr = r0 + ir
            wr = np.where(ir == 0, 1 - fr, fr)
            okr = (rr >= 0) & (rr < d)
            for ic in (0, 1):
                cc = c0 + ic
                wc = np.where(ic == 0, 1 - fc, fc)
                okc = okr & (cc >= 0) & (cc < d)
                for io in (0, 1):
                    oo = (o0 + io) % nb
                    wo = np.where(io == 0, 1 - fo, fo)
                    wgt = weight * wr * wc * wo
                    wgt = np.where(okc, wgt, 0.0)
                    flat = ((kidx * d + np.clip(rr, 0, d - 1)) * d + np.clip(cc, 0, d - 1)) * nb + oo
                    hist += np.bincount(flat.ravel(), weights=wgt.ravel(), minlength=hist.size)
        block = hist.reshape(k, d * d * nb)
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        block = block / np.where(norms > 1e-12, norms, 1.0)
        block = np.minimum(block, _DESC_NORM_CLAMP)
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        flatmask = norms[:, 0] <= 1e-12
        block = block / np.where(norms > 1e-12, norms, 1.0)
        block[flatmask] = 1.0 / math.sqrt(d * d * nb)
        descs[sel] = block
    return descs, valid


def _describe_from_pyramid(pyramid: ScaleSpacePyramid, raw: dict):
    """Assign orientations and descriptors using the matching pyramid levels."""
    cfg = pyramid.config
    n = len(raw["x"])
    orient = np.zeros(n)
    descs = np.zeros((n, _DESC_WIDTH * _DESC_WIDTH * _DESC_ORI_BINS))
    valid = np.zeros(n, dtype=bool)
    oct_pos = {o: i for i, o in enumerate(pyramid.octave_indices)}
    lvl = np.clip(np.round(raw["level"]).astype(int), 0, cfg.levels_per_octave + 2)
    for o in np.unique(raw["octave"]).astype(int):
        for l in np.unique(lvl[raw["octave"] == o]):
            sel = np.nonzero((raw["octave"] == o) & (lvl == l))[0]
            img = pyramid.octaves[oct_pos[o]][l]
            gy, gx = np.gradient(img)
            mag = np.hypot(gx, gy)
            ang = np.arctan2(gy, gx)
            sig_o = cfg.base_sigma * 2.0 ** (raw["level"][sel] / cfg.levels_per_octave)
            ori = _orientations_batch(mag, ang, raw["xo"][sel], raw["yo"][sel], sig_o)
            dsc, ok = _descriptors_batch(mag, ang, raw["xo"][sel], raw["yo"][sel], sig_o, ori)
            orient[sel] = ori
            descs[sel] = dsc
            valid[sel] = ok
    return orient, descs, valid


def detect_and_describe(
    image: np.ndarray,
    config: ScaleSpaceConfig = ScaleSpaceConfig(),
    source: str = "per_view",
    slope: float | None = None,
) -> FeatureSet:
    """Full single-image pipeline: scale space, extrema, orientation, descriptors.

    Keypoints whose descriptor window leaves the image are dropped.
    """
    pyr = gaussian_scale_space(image, config)
    raw = _raw_extrema(pyr)
    if len(raw["x"]) == 0:
        return FeatureSet((), np.zeros((0, 128)), source)
    orient, descs, valid = _describe_from_pyramid(pyr, raw)
    kps = [
        Keypoint(
            x=float(raw["x"][i]),
            y=float(raw["y"][i]),
            sigma=float(raw["sigma"][i]),
            response=float(raw["response"][i]),
            orientation=float(orient[i]),
            slope=slope,
        )
        for i in np.nonzero(valid)[0]
    ]
    return FeatureSet(tuple(kps), descs[valid], source)


def compute_descriptor(image: np.ndarray, keypoint: Keypoint, config: ScaleSpaceConfig = ScaleSpaceConfig()) -> np.ndarray:
    """Descriptor for one keypoint: dominant orientation is assigned
    internally; raises WindowOutOfBounds if the window leaves the image."""
    gray = to_gray(np.asarray(image, dtype=np.float64))
    inc = math.sqrt(max(keypoint.sigma**2 - _INPUT_BLUR**2, 0.0))
    work = gaussian_filter(gray, inc) if inc > 0 else gray
    gy, gx = np.gradient(work)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    xo = np.array([keypoint.x])
    yo = np.array([keypoint.y])
    sig = np.array([keypoint.sigma])
    ori = _orientations_batch(mag, ang, xo, yo, sig)
    desc, valid = _descriptors_batch(mag, ang, xo, yo, sig, ori)
    if not valid[0]:
        raise WindowOutOfBounds(
            f"descriptor window for keypoint at ({keypoint.x:.1f},{keypoint.y:.1f}) "
            f"sigma {keypoint.sigma:.2f} leaves the image"
        )
    return desc[0]


# ---------------------------------------------------------------------------
# refocusing and field-level detection
# ---------------------------------------------------------------------------

def _translate_accumulate(gray_views, offsets):
    """Shift-and-average with bilinear sampling over valid pixels."""
    h, w = gray_views[0].shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros((h, w))
    weight = np.zeros((h, w))
    for g, (tx, ty) in zip(gray_views, offsets):
        sx = xs - tx
        sy = ys - ty
        valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        acc += np.where(valid, map_coordinates(g, [sy, sx], order=1, mode="constant", cval=0.0), 0.0)
        weight += valid
    out = np.zeros((h, w))
    np.divide(acc, weight, out=out, where=weight > 0)
    return out


def refocus_slice(field: VFMVField, slope: float) -> np.ndarray:
    """Shift-and-average refocusing: view (u,v) is translated by
    slope * (v - v0, u - u0) so content whose disparity-per-step equals the
    slope adds coherently. Returns a grayscale image."""
    ref = field.geometry.reference
    grays = [to_gray(vi.pixels) for vi in field.views]
    offsets = [
        (slope * (vi.view.v - ref.v), slope * (vi.view.u - ref.u)) for vi in field.views
    ]
    return _translate_accumulate(grays, offsets)


def _merge_radius_ok(kp: Keypoint, other: Keypoint, levels_per_octave: int) -> bool:
    if math.hypot(kp.x - other.x, kp.y - other.y) > 1.5:
        return False
    return abs(math.log2(kp.sigma / other.sigma)) <= 0.5 / levels_per_octave


def detect_field_features(
    field: VFMVField,
    config: ScaleSpaceConfig = ScaleSpaceConfig(),
    slopes: list[float] | None = None,
) -> FeatureSet:
    """Detect over refocus slices at each slope and keep, for every spatial
    location, the argmax-response detection across slopes (merge radius
    1.5 px and half a scale level)."""
    if not slopes:
        raise ValueError("need at least one slope hypothesis")
    ref = field.geometry.reference
    grays = [to_gray(vi.pixels) for vi in field.views]
    steps = [(vi.view.v - ref.v, vi.view.u - ref.u) for vi in field.views]

    per_slope: list[FeatureSet] = []
    for lam in slopes:
        offsets = [(lam * sv, lam * su) for sv, su in steps]
        sl = _translate_accumulate(grays, offsets)
        per_slope.append(detect_and_describe(sl, config, source="field_level", slope=lam))

    if len(per_slope) == 1:
        return per_slope[0]

    entries = []
    for fs in per_slope:
        for i, kp in enumerate(fs.keypoints):
            entries.append((kp, fs.descriptors[i]))
    entries.sort(key=lambda e: (-abs(e[0].response), e[0].slope, e[0].x, e[0].y))

    cell = 1.5
    grid: dict[tuple[int, int], list[Keypoint]] = {}
    kept_kps: list[Keypoint] = []
    kept_desc: list[np.ndarray] = []
    for kp, desc in entries:
        ci, cj = int(kp.x / cell), int(kp.y / cell)
        clash = False
        for ni in (ci - 1, ci, ci + 1):
            for nj in (cj - 1, cj, cj + 1):
                for other in grid.get((ni, nj), ()):
                    if _merge_radius_ok(kp, other, config.levels_per_octave):
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            grid.setdefault((ci, cj), []).append(kp)
            kept_kps.append(kp)
            kept_desc.append(desc)
    order = sorted(range(len(kept_kps)), key=lambda i: (kept_kps[i].y, kept_kps[i].x, kept_kps[i].sigma))
    return FeatureSet(
        tuple(kept_kps[i] for i in order),
        np.array([kept_desc[i] for i in order]).reshape(len(order), -1),
        "field_level",
    )


# ---------------------------------------------------------------------------
# matching and reporting
# ---------------------------------------------------------------------------

def match_features(a: FeatureSet, b: FeatureSet, ratio: float = 0.8) -> list[tuple[int, int]]:
    """Nearest-neighbor descriptor matching with the ratio test; one-to-one
    on the a-side."""
    if len(a) == 0 or len(b) == 0:
        return []
    if len(b) < 2:
        return [(i, 0) for i in range(len(a))] if len(b) == 1 else []
    da, db = a.descriptors, b.descriptors
    matches = []
    bb = np.sum(db * db, axis=1)
    for start in range(0, len(a), 512):
        chunk = da[start : start + 512]
        d2 = np.sum(chunk * chunk, axis=1)[:, None] + bb[None, :] - 2.0 * chunk @ db.T
        np.maximum(d2, 0.0, out=d2)
        idx = np.argpartition(d2, 1, axis=1)[:, :2]
        rows = np.arange(len(chunk))[:, None]
        two = d2[rows, idx]
        swap = two[:, 0] > two[:, 1]
        idx[swap] = idx[swap][:, ::-1]
        two[swap] = two[swap][:, ::-1]
        best = np.sqrt(two[:, 0])
        second = np.sqrt(two[:, 1])
        ok = best < ratio * np.where(second > 0, second, np.inf)
        for i in np.nonzero(ok)[0]:
            matches.append((start + int(i), int(idx[i, 0])))
    return matches


@dataclass(frozen=True)
class FeatureReport:
    counts: dict[str, int]
    coverage: dict[str, float]
    overlays: dict[str, np.ndarray]


def spatial_coverage(keypoints, shape: tuple[int, int], cells: int = 16) -> float:
    """Fraction of a cells x cells grid containing at least one keypoint."""
    if not keypoints:
        return 0.0
    h, w = shape
    occupied = set()
    for kp in keypoints:
        i = min(int(kp.y / h * cells), cells - 1)
        j = min(int(kp.x / w * cells), cells - 1)
        occupied.add((i, j))
    return len(occupied) / (cells * cells)


def draw_overlay(image: np.ndarray, keypoints, color=(0, 255, 0)) -> np.ndarray:
    """8-bit sRGB copy of the image with one circle per keypoint."""
    import cv2

    from .core import linear_to_srgb

    canvas = np.ascontiguousarray(
        (np.clip(linear_to_srgb(image), 0, 1) * 255).astype(np.uint8)
    )
    if canvas.ndim == 2:
        canvas = np.repeat(canvas[:, :, None], 3, axis=2)
    for kp in keypoints:
        cv2.circle(canvas, (int(round(kp.x)), int(round(kp.y))), max(2, int(round(kp.sigma))), color, 1)
    return canvas


def feature_report(sets: dict[str, FeatureSet], reference_image: np.ndarray) -> FeatureReport:
    """Counts, 16x16 spatial coverage, and overlay images for named sets."""
    shape = to_gray(reference_image).shape
    counts = {name: len(fs) for name, fs in sets.items()}
    coverage = {name: spatial_coverage(fs.keypoints, shape) for name, fs in sets.items()}
    overlays = {name: draw_overlay(reference_image, fs.keypoints) for name, fs in sets.items()}
    return FeatureReport(counts, coverage, overlays)


# ---------------------------------------------------------------------------
# feature table I/O
# ---------------------------------------------------------------------------

def save_feature_table(fs: FeatureSet, path: str | Path) -> None:
    """Plain-text table: x y sigma response slope orientation d0..d127."""
    with open(path, "w") as f:
        f.write("# source=%s\n" % fs.source)
        f.write("x,y,sigma,response,slope,orientation," + ",".join(f"d{i}" for i in range(fs.descriptors.shape[1])) + "\n")
        for kp, desc in zip(fs.keypoints, fs.descriptors):
            slope = "nan" if kp.slope is None else repr(kp.slope)
            head = f"{kp.x!r},{kp.y!r},{kp.sigma!r},{kp.response!r},{slope},{kp.orientation!r}"
            f.write(head + "," + ",".join(f"{v:.9g}" for v in desc) + "\n")


def load_feature_table(path: str | Path) -> FeatureSet:
    source = "per_view"
    kps = []
    descs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("# source="):
                source = line.split("=", 1)[1]
                continue
            if not line or line.startswith("x,"):
                continue
            parts = line.split(",")
            x, y, sigma, response = (float(p) for p in parts[:4])
            slope = None if parts[4] == "nan" else float(parts[4])
            orientation = float(parts[5])
            kps.append(Keypoint(x, y, sigma, response, orientation, slope))
            descs.append([float(p) for p in parts[6:]])
    arr = np.array(descs) if descs else np.zeros((0, 128))
    return FeatureSet(tuple(kps), arr, source)
