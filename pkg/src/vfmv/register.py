"""Cross-view registration by enhanced-correlation-coefficient maximization.

The solver estimates the 8-parameter homography (bottom-right entry pinned
to 1) that maps template coordinates onto the moving image, maximizing the
zero-mean unit-norm correlation between the template and the warped moving
image. Iterations run coarse-to-fine over a Gaussian pyramid; a step is
halved (up to 8 times) whenever it would decrease the correlation, which
makes the per-level score trace non-decreasing by construction.

The returned homography models the deformation of the moving image relative
to the template: if ``moving = warp_image(template, H_true)`` the recovered
homography approximates ``H_true``. To resample the moving image into the
template frame, warp it by the inverse.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import VFMVField, ViewImage, ViewIndex, VfmvError, assemble_field
from .synth import to_gray


class SingularHomography(VfmvError):
    pass


class DegenerateInput(VfmvError):
    pass


class DivergedError(VfmvError):
    pass


@dataclass(frozen=True)
class Homography:
    """Invertible 3x3 projective transform, normalized so m[2,2] = 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomography(f"matrix is singular: {m.tolist()}")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        """Apply to Nx2 points (x, y)."""
        pts = np.asarray(pts, dtype=np.float64)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.m.T
        return hom[:, :2] / hom[:, 2:3]


@dataclass(frozen=True)
class EccConfig:
    max_iterations: int = 200
    epsilon: float = 1e-6
    pyramid_levels: int = 3
    warp_model: str = "homography"  # translation | affine | homography

    def __post_init__(self):
        if self.max_iterations < 1 or self.epsilon <= 0 or self.pyramid_levels < 1:
            raise ValueError("all EccConfig numeric fields must be positive")
        if self.warp_model not in ("translation", "affine", "homography"):
            raise ValueError(f"unknown warp model {self.warp_model!r}")


@dataclass(frozen=True)
class RegistrationResult:
    homography: Homography
    ecc: float
    iterations: int
    converged: bool
    per_level_trace: tuple[tuple[int, int, float], ...] = dc_field(default_factory=tuple)


_FREE_PARAMS = {"translation": [2, 5], "affine": [0, 1, 2, 3, 4, 5], "homography": list(range(8))}


def ecc_score(template: np.ndarray, candidate: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Zero-mean unit-norm correlation over the valid mask, in [-1, 1].

    Symmetric in its arguments and invariant to gain/bias (a*I + b, a > 0)
    on either one.
    """
    t = to_gray(template)
    c = to_gray(candidate)
    if t.shape != c.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {c.shape}")
    if mask is None:
        tv, cv = t.ravel(), c.ravel()
    else:
        tv, cv = t[mask], c[mask]
    if tv.size < 2:
        raise DegenerateInput("fewer than 2 valid pixels")
    tz = tv - tv.mean()
    cz = cv - cv.mean()
    tn, cn = np.linalg.norm(tz), np.linalg.norm(cz)
    if tn == 0 or cn == 0:
        raise DegenerateInput("constant image under the mask")
    return float(np.clip(tz @ cz / (tn * cn), -1.0, 1.0))


def warp_image(
    image: np.ndarray, h: Homography, interpolation: str = "bilinear"
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the homography to image content via inverse mapping.

    Output pixel (x, y) samples the input at H^-1 (x, y, 1); pixels mapping
    outside the source are zero and marked invalid in the returned mask.
    """
    if interpolation != "bilinear":
        raise ValueError("only bilinear interpolation is supported")
    image = np.asarray(image, dtype=np.float64)
    hh, ww = image.shape[:2]
    inv = h.inverse().m
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    d = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / d
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / d
    mask = (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1) & (d > 1e-12)
    if image.ndim == 2:
        out = map_coordinates(image, [sy, sx], order=1, mode="constant", cval=0.0)
        out[~mask] = 0.0
    else:
        out = np.empty_like(image)
        for ch in range(image.shape[2]):
            out[:, :, ch] = map_coordinates(
                image[:, :, ch], [sy, sx], order=1, mode="constant", cval=0.0
            )
        out[~mask] = 0.0
    return out, mask


def decompose_homography(h: Homography | np.ndarray):
    """Split into blocks (A 2x2 scale/rotation/shear, T 2x1 translation,
    V 1x2 line map, h scalar). Pure block extraction: compose() restores the
    matrix exactly."""
    m = np.asarray(h.m if isinstance(h, Homography) else h, dtype=np.float64).reshape(3, 3)
    return m[:2, :2].copy(), m[:2, 2].copy(), m[2, :2].copy(), float(m[2, 2])


def compose_homography(a: np.ndarray, t: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    m = np.empty((3, 3))
    m[:2, :2] = np.asarray(a).reshape(2, 2)
    m[:2, 2] = np.asarray(t).reshape(2)
    m[2, :2] = np.asarray(v).reshape(2)
    m[2, 2] = h
    return m


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 is the (lightly smoothed) full-resolution image; each level
    halves resolution after a sigma=1.0 Gaussian prefilter."""
    out = [gaussian_filter(img, 1.0)]
    cur = img
    for _ in range(1, levels):
        cur = gaussian_filter(cur, 1.0)[::2, ::2]
        if min(cur.shape) < 16:
            break
        out.append(gaussian_filter(cur, 1.0))
    return out


def _params_to_matrix(p: np.ndarray) -> np.ndarray:
    return np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])


def _scale_matrix(m: np.ndarray, s: float) -> np.ndarray:
    """Conjugate the sampling map to coordinates scaled by s (x_l = s * x)."""
    sm = np.diag([s, s, 1.0])
    out = sm @ m @ np.linalg.inv(sm)
    return out / out[2, 2]


def _warp_and_sample(maps, p, xs, ys):
    d = p[6] * xs + p[7] * ys + 1.0
    wx = (p[0] * xs + p[1] * ys + p[2]) / d
    wy = (p[3] * xs + p[4] * ys + p[5]) / d
    hh, ww = maps[0].shape
    mask = (wx >= 0) & (wx <= ww - 1) & (wy >= 0) & (wy <= hh - 1) & (d > 1e-12)
    coords = [wy, wx]
    sampled = [
        map_coordinates(mp, coords, order=1, mode="constant", cval=0.0) for mp in maps
    ]
    return sampled, mask, d, wx, wy


def _masked_ecc(tmpl, warped, mask):
    tv = tmpl[mask]
    wv = warped[mask]
    if tv.size < 16:
        return None
    tz = tv - tv.mean()
    wz = wv - wv.mean()
    tn, wn = np.linalg.norm(tz), np.linalg.norm(wz)
    if tn == 0 or wn == 0:
        return None
    return float(tz @ wz / (tn * wn))


def _align_level(tmpl, moving, p, free, config, level, trace, iteration_base):
    """Run ECC iterations at one pyramid level; returns (p, converged, iters)."""
    hh, ww = tmpl.shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    gy, gx = np.gradient(moving)
    iters = 0
    converged = False
    (warped,), mask, _, _, _ = _warp_and_sample([moving], p, xs, ys)
    ecc = _masked_ecc(tmpl, warped, mask)
    if ecc is None:
        raise DegenerateInput("no overlap or constant image at initialization")

    for it in range(config.max_iterations):
        sampled, mask, d, wx, wy = _warp_and_sample([moving, gx, gy], p, xs, ys)
        warped, sgx, sgy = sampled
        n_valid = int(mask.sum())
        if n_valid < 16:
            break
        xm, ym, dm = xs[mask], ys[mask], d[mask]
        wxm, wym = wx[mask], wy[mask]
        gxm, gym = sgx[mask], sgy[mask]
        inv_d = 1.0 / dm

        cols = {
            0: gxm * xm * inv_d,
            1: gxm * ym * inv_d,
            2: gxm * inv_d,
            3: gym * xm * inv_d,
            4: gym * ym * inv_d,
            5: gym * inv_d,
            6: -(gxm * wxm + gym * wym) * xm * inv_d,
            7: -(gxm * wxm + gym * wym) * ym * inv_d,
        }
        g = np.column_stack([cols[k] for k in free])
        g -= g.mean(axis=0)
        tz = tmpl[mask] - tmpl[mask].mean()
        wz = warped[mask] - warped[mask].mean()

        hess = g.T @ g
        gt_w = g.T @ wz
        gt_t = g.T @ tz
        try:
            hinv_gw = np.linalg.solve(hess, gt_w)
        except np.linalg.LinAlgError:
            break
        lambda_n = wz @ wz - gt_w @ hinv_gw
        lambda_d = tz @ wz - gt_t @ hinv_gw
        if lambda_d <= 0:
            # past the linearized optimum: cannot improve from here
            break
        lam = lambda_n / lambda_d
        err = lam * tz - wz
        try:
            delta = np.linalg.solve(hess, g.T @ err)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) > 1e8:
            raise DivergedError(f"parameter update exploded at level {level}")

        step = delta.copy()
        accepted = False
        for _ in range(9):  # full step plus up to 8 halvings
            cand = p.copy()
            cand[free] += step
            (wc,), mc, _, _, _ = _warp_and_sample([moving], cand, xs, ys)
            cand_ecc = _masked_ecc(tmpl, wc, mc)
            if cand_ecc is not None and cand_ecc >= ecc - 1e-12:
                p, ecc = cand, cand_ecc
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            converged = True
            break
        iters += 1
        trace.append((level, iteration_base + iters, ecc))
        if np.linalg.norm(step) < config.epsilon:
            converged = True
            break
    return p, converged, iters


def ecc_align(
    template: np.ndarray,
    moving: np.ndarray,
    config: EccConfig = EccConfig(),
    initial: Homography | None = None,
) -> RegistrationResult:
    """Estimate the warp of ``moving`` relative to ``template``.

    Coarse-to-fine Gauss-Newton maximization of the enhanced correlation
    coefficient; within each level the accepted-iteration score trace is
    non-decreasing. ``converged`` means the last accepted update at the
    finest level fell below ``config.epsilon``.
    """
    t_gray = to_gray(np.asarray(template, dtype=np.float64))
    m_gray = to_gray(np.asarray(moving, dtype=np.float64))
    if t_gray.shape != m_gray.shape:
        raise ValueError(f"image sizes differ: {t_gray.shape} vs {m_gray.shape}")
    h0 = (initial or Homography.identity()).m

    t_pyr = _pyramid(t_gray, config.pyramid_levels)
    m_pyr = _pyramid(m_gray, config.pyramid_levels)
    levels = min(len(t_pyr), len(m_pyr))
    free = _FREE_PARAMS[config.warp_model]

    trace: list[tuple[int, int, float]] = []
    total_iters = 0
    converged = False
    mat = _scale_matrix(h0, 2.0 ** -(levels - 1))
    for level in range(levels - 1, -1, -1):
        p = np.array(
            [mat[0, 0], mat[0, 1], mat[0, 2], mat[1, 0], mat[1, 1], mat[1, 2], mat[2, 0], mat[2, 1]]
        )
        p, converged, iters = _align_level(
            t_pyr[level], m_pyr[level], p, free, config, level, trace, total_iters
        )
        total_iters += iters
        mat = _params_to_matrix(p)
        if level > 0:
            mat = _scale_matrix(mat, 2.0)

    h_final = Homography(mat)
    # score against the unsmoothed originals
    hh, ww = t_gray.shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    (warped,), mask, _, _, _ = _warp_and_sample(
        [m_gray],
        np.array([mat[0, 0], mat[0, 1], mat[0, 2], mat[1, 0], mat[1, 1], mat[1, 2], mat[2, 0], mat[2, 1]]),
        xs,
        ys,
    )
    final_ecc = _masked_ecc(t_gray, warped, mask)
    if final_ecc is None or not np.isfinite(final_ecc):
        raise DivergedError("correlation undefined at the recovered warp")
    return RegistrationResult(
        homography=h_final,
        ecc=final_ecc,
        iterations=total_iters,
        converged=converged,
        per_level_trace=tuple(trace),
    )


def register_field(
    field: VFMVField,
    reference: ViewIndex | None = None,
    config: EccConfig = EccConfig(),
    workers: int = 1,
) -> tuple[VFMVField, list[RegistrationResult]]:
    """Align every view toward the reference view's frame.

    The reference defaults to the grid center and is left untouched. Each
    other view is resampled by the inverse of its recovered warp; residual
    parallax is deliberately preserved (only the shared-frame deformation,
    dominated by focus magnification, is corrected). Results come back in
    grid order; non-convergence is recorded per view, never raised.
    """
    ref = reference or field.center_view
    template = field.view(ref.u, ref.v).pixels
    t_gray = to_gray(template)

    def _one(view_image: ViewImage):
        if view_image.view == ref:
            return RegistrationResult(Homography.identity(), 1.0, 0, True), view_image
        res = ecc_align(t_gray, view_image.pixels, config)
        aligned, _ = warp_image(view_image.pixels, res.homography.inverse())
        return res, ViewImage(aligned, view_image.view, view_image.plane_index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_one, field.views))
    else:
        pairs = [_one(v) for v in field.views]

    results = [r for r, _ in pairs]
    new_field = assemble_field(
        [v for _, v in pairs],
        field.planes,
        field.grid_dims,
        field.intrinsics,
        field.geometry,
        policy=field.policy,
    )
    return new_field, results
