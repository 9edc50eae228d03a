"""Procedural terrain RGBD source and training-pair construction.

A fractal heightfield is ray-marched into RGBD views with exact disparity
and sky masks, replacing photographic data.  Training pairs corrupt a view
by warping it to a random nearby pose and back, which simulates the missing
regions and resampling artifacts of camera motion while the original view
remains the ground truth.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (
    DISPARITY_MIN,
    CameraPose,
    Intrinsics,
    RgbdImage,
    intrinsics_from_fov,
    region_fractions,
    warp_rgbd,
)
from .rng import derive_int, stream
from .trajectory import (
    TRAIN_FOV_RANGE,
    AutocruiseParams,
    TrainingPoseRange,
    sample_training_pose,
)

# Terrain elevations are normalized into [0, ELEVATION_MAX] scene units.
ELEVATION_MAX = 10.0
DEFAULT_HORIZONTAL_SCALE = 0.5
# Ray-march limits (camera-frame depth, scene units).
_T_NEAR = 0.05
_T_MAX = 120.0
# Aerial haze: ground color approaches the horizon color with distance.
_FOG_SCALE = 25.0

_SUN_DIR = np.array([0.45, 0.7, 0.25])
_SUN_DIR = _SUN_DIR / np.linalg.norm(_SUN_DIR)
# Altitude-banded palette: (elevation, rgb); linearly interpolated.
_BANDS = [
    (0.0, (0.13, 0.35, 0.16)),
    (2.5, (0.24, 0.44, 0.19)),
    (5.0, (0.45, 0.40, 0.30)),
    (7.5, (0.52, 0.50, 0.48)),
    (10.0, (0.92, 0.93, 0.95)),
]
_SKY_HORIZON = np.array([0.74, 0.82, 0.92])
_SKY_ZENITH = np.array([0.25, 0.45, 0.78])


@dataclass
class Heightfield:
    """N x N elevation grid; N must be a power of two plus one."""

    elevations: np.ndarray
    horizontal_scale: float = DEFAULT_HORIZONTAL_SCALE

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        n = self.elevations.shape[0]
        if self.elevations.shape != (n, n) or not _is_pow2_plus_1(n):
            raise ValueError(f"grid must be (2^k+1) square, got {self.elevations.shape}")
        if not np.isfinite(self.elevations).all():
            raise ValueError("elevations must be finite")

    @property
    def n(self) -> int:
        return self.elevations.shape[0]

    @property
    def extent(self) -> float:
        """Side length of the covered square in scene units."""
        return (self.n - 1) * self.horizontal_scale


@dataclass
class TrainingPair:
    """Corrupted input, its missing mask, the ground truth, and its ground region."""

    corrupted: RgbdImage
    mask: np.ndarray
    target: RgbdImage
    ground: np.ndarray


def _is_pow2_plus_1(n: int) -> bool:
    m = n - 1
    return m >= 2 and (m & (m - 1)) == 0


def generate_heightfield(seed: int, n: int, roughness: float = 1.0,
                         horizontal_scale: float = DEFAULT_HORIZONTAL_SCALE) -> Heightfield:
    """Diamond-square fractal surface, normalized to [0, ELEVATION_MAX]."""
    if not _is_pow2_plus_1(n):
        raise ValueError(f"n must be a power of two plus one, got {n}")
    rng = stream(seed, "heightfield")
    e = np.zeros((n, n), dtype=np.float64)
    amp = float(roughness)
    e[0, 0], e[0, -1], e[-1, 0], e[-1, -1] = rng.uniform(-1, 1, 4) * amp

    step = n - 1
    while step > 1:
        half = step // 2
        amp *= 0.5
        # diamond: center of each square from its four corners
        cs = e[:-1:step, :-1:step]
        centers = (cs + e[step::step, :-1:step] + e[:-1:step, step::step]
                   + e[step::step, step::step]) / 4.0
        e[half::step, half::step] = centers + rng.uniform(-1, 1, centers.shape) * amp
        # square: edge midpoints from their axial neighbors (3 at the borders)
        half_pts = np.arange(half, n, step)
        step_pts = np.arange(0, n, step)
        for rows, cols in ((half_pts, step_pts), (step_pts, half_pts)):
            I, J = np.meshgrid(rows, cols, indexing="ij")
            total = np.zeros(I.shape)
            cnt = np.zeros(I.shape)
            for di, dj in ((-half, 0), (half, 0), (0, -half), (0, half)):
                ii, jj = I + di, J + dj
                ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
                total[ok] += e[ii[ok], jj[ok]]
                cnt[ok] += 1
            e[I, J] = total / cnt + rng.uniform(-1, 1, I.shape) * amp
        step = half

    lo, hi = e.min(), e.max()
    if hi > lo:
        e = (e - lo) / (hi - lo) * ELEVATION_MAX
    else:
        e = np.zeros_like(e)
    return Heightfield(elevations=e, horizontal_scale=horizontal_scale)


def elevation_at(h: Heightfield, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Bilinear terrain elevation at world (x, z); clamped beyond the extent."""
    half = (h.n - 1) / 2.0
    gx = np.clip(np.asarray(x) / h.horizontal_scale + half, 0.0, h.n - 1.0)
    gz = np.clip(np.asarray(z) / h.horizontal_scale + half, 0.0, h.n - 1.0)
    x0 = np.minimum(gx.astype(np.int64), h.n - 2)
    z0 = np.minimum(gz.astype(np.int64), h.n - 2)
    fx = gx - x0
    fz = gz - z0
    e = h.elevations
    return ((e[z0, x0] * (1 - fx) + e[z0, x0 + 1] * fx) * (1 - fz)
            + (e[z0 + 1, x0] * (1 - fx) + e[z0 + 1, x0 + 1] * fx) * fz)


def _shade(h: Heightfield, x: np.ndarray, z: np.ndarray, elev: np.ndarray) -> np.ndarray:
    """Altitude palette modulated by Lambert lighting from the fixed sun."""
    eps = h.horizontal_scale
    dedx = (elevation_at(h, x + eps, z) - elevation_at(h, x - eps, z)) / (2 * eps)
    dedz = (elevation_at(h, x, z + eps) - elevation_at(h, x, z - eps)) / (2 * eps)
    # world +y is down; the outward surface normal is (-de/dx, -1, -de/dz)
    normal = np.stack([-dedx, -np.ones_like(dedx), -dedz], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    lambert = np.maximum(normal @ (-_SUN_DIR), 0.0)

    bands_e = np.array([b[0] for b in _BANDS])
    bands_c = np.array([b[1] for b in _BANDS])
    idx = np.clip(np.searchsorted(bands_e, elev, side="right") - 1, 0, len(_BANDS) - 2)
    t = np.clip((elev - bands_e[idx]) / (bands_e[idx + 1] - bands_e[idx]), 0.0, 1.0)
    base = bands_c[idx] * (1 - t)[..., None] + bands_c[idx + 1] * t[..., None]
    return np.clip(base * (0.35 + 0.65 * lambert)[..., None], 0.0, 1.0)


def _sky_color(dirs_world: np.ndarray) -> np.ndarray:
    up = np.clip(-dirs_world[..., 1] / np.linalg.norm(dirs_world, axis=-1), 0.0, 1.0)
    return (_SKY_HORIZON * (1 - up)[..., None] + _SKY_ZENITH * up[..., None])


def render_view(h: Heightfield, pose: CameraPose, K: Intrinsics,
                supersample: int = 2) -> RgbdImage:
    """Ray-march the heightfield into an RGBD view with an exact sky mask.

    Rays are cast through a centered subpixel grid and box-averaged, which
    band-limits the image so warps resample it cleanly.  Ground colors blend
    toward the horizon with distance (aerial haze); a pixel is sky only when
    every subpixel misses the terrain, and sky disparity is exactly 0.
    """
    cam = pose.translation
    altitude = -cam[1]
    if altitude <= float(elevation_at(h, np.array(cam[0]), np.array(cam[2]))):
        raise ValueError("camera is at or below the terrain surface")

    H, W = K.height, K.width
    ss = int(supersample)
    offsets = (np.arange(ss) + 0.5) / ss - 0.5
    base_u, base_v = np.meshgrid(np.arange(W, dtype=np.float64),
                                 np.arange(H, dtype=np.float64))
    ou, ov = np.meshgrid(offsets, offsets)
    uu = (base_u[..., None] + ou.ravel()).reshape(-1)
    vv = (base_v[..., None] + ov.ravel()).reshape(-1)
    dirs_cam = np.stack([(uu - K.cx) / K.focal_px,
                         (vv - K.cy) / K.focal_px,
                         np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T  # depth t along a ray equals camera z

    def above(t):
        p = cam + dirs * t[:, None]
        return (-p[:, 1]) - elevation_at(h, p[:, 0], p[:, 2])

    n_ray = len(dirs)
    t_lo = np.full(n_ray, _T_NEAR)
    t_hi = np.full(n_ray, np.nan)
    t = np.full(n_ray, _T_NEAR)
    f_prev = above(t)
    inside = f_prev <= 0  # should not happen with the camera above ground
    t_hi[inside] = _T_NEAR
    while True:
        t_next = np.minimum(t * 1.03 + 0.01, _T_MAX)
        f = above(t_next)
        newly = np.isnan(t_hi) & (f <= 0)
        t_hi[newly] = t_next[newly]
        t_lo[np.isnan(t_hi)] = t_next[np.isnan(t_hi)]
        t = t_next
        if (t >= _T_MAX).all():
            break
    hit = ~np.isnan(t_hi)

    for _ in range(40):  # bisection on bracketed rays
        mid = np.where(hit, 0.5 * (t_lo + t_hi), _T_NEAR)
        f = above(mid)
        below = hit & (f <= 0)
        t_hi[below] = mid[below]
        sel = hit & (f > 0)
        t_lo[sel] = mid[sel]

    depth = 0.5 * (t_lo + t_hi)
    pix = np.empty((n_ray, 4), dtype=np.float64)
    if hit.any():
        p = cam + dirs[hit] * depth[hit][:, None]
        rgb = _shade(h, p[:, 0], p[:, 2], -p[:, 1])
        haze = 1.0 - np.exp(-np.maximum(depth[hit] - 2.0, 0.0) / _FOG_SCALE)
        pix[hit, 0:3] = rgb * (1 - haze)[:, None] + _SKY_HORIZON * haze[:, None]
        pix[hit, 3] = np.clip(1.0 / depth[hit], DISPARITY_MIN, 1.0)
    if (~hit).any():
        pix[~hit, 0:3] = _sky_color(dirs[~hit])
        pix[~hit, 3] = 0.0
    pix = pix.reshape(H, W, ss * ss, 4).mean(axis=2)
    sky = (~hit).reshape(H, W, ss * ss).all(axis=2)
    pix[..., 3][sky] = 0.0
    return RgbdImage(pixels=pix.astype(np.float32), sky=sky)


def fill_missing_with_noise(img: RgbdImage, mask: np.ndarray,
                            rng: np.random.Generator) -> RgbdImage:
    """Replace masked pixels (all 4 channels) with unit Gaussian samples.

    Samples live in the network's [-1, 1] value range and are stored through
    the inverse mapping, so unmasked pixels stay bit-identical and the noise
    round-trips exactly to N(0, 1) once the image is re-normalized.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.pixels.shape[:2]:
        raise ValueError("mask shape mismatch")
    noise = rng.standard_normal(img.pixels.shape, dtype=np.float32)
    out = img.pixels.copy()
    out[mask] = (noise[mask] + 1.0) / 2.0
    return RgbdImage(pixels=out,
                     sky=None if img.sky is None else img.sky.copy())


def make_pseudo_pair(gt: RgbdImage, pose0: CameraPose, K: Intrinsics,
                     pose_range: TrainingPoseRange, params: AutocruiseParams,
                     rng: np.random.Generator) -> TrainingPair:
    """Corrupt gt by warping to a random pseudo pose and back.

    The round trip loses occluded/out-of-frame content and stretches depth
    edges; the union of both warps' missing regions becomes the mask and is
    filled with fresh noise.
    """
    if gt.sky is None:
        raise ValueError("ground-truth image must carry a sky mask")
    c_pseudo = sample_training_pose(pose0, pose_range, params, rng)
    fwd = warp_rgbd(gt, pose0, c_pseudo, K)
    back = warp_rgbd(fwd.image, c_pseudo, pose0, K, extra_missing=fwd.missing)
    corrupted = fill_missing_with_noise(back.image, back.missing, rng)
    return TrainingPair(corrupted=corrupted, mask=back.missing.copy(),
                        target=gt, ground=~gt.sky)


def sample_camera(h: Heightfield, rng: np.random.Generator,
                  fov_range=TRAIN_FOV_RANGE, size: int = 32,
                  max_tries: int = 30):
    """Random camera above the terrain with a mostly-useful view.

    Returns (pose, K).  Views that are almost all sky or almost all ground
    are rejected and resampled.
    """
    from scipy.spatial.transform import Rotation

    half = h.extent / 2.0
    last = None
    for _ in range(max_tries):
        x = rng.uniform(-0.6 * half, 0.6 * half)
        z = rng.uniform(-0.6 * half, 0.6 * half)
        ground = float(elevation_at(h, np.array(x), np.array(z)))
        y = -(ground + rng.uniform(1.0, 4.0))
        yaw = rng.uniform(0.0, 360.0)
        pitch = rng.uniform(-5.0, 25.0)  # positive pitches toward the ground
        R = Rotation.from_euler("yx", [yaw, -pitch], degrees=True).as_matrix()
        fov = rng.uniform(*fov_range)
        pose = CameraPose(R, np.array([x, y, z]))
        K = intrinsics_from_fov(fov, size, size)
        view = render_view(h, pose, K)
        sky_f, _ = region_fractions(view.disparity)
        last = (pose, K, view)
        if 0.02 <= sky_f <= 0.75:
            return pose, K, view
    return last


def generate_dataset(seed: int, count: int, size: int, out_dir) -> dict:
    """Render `count` terrain views into out_dir plus a manifest.

    Layout: sample_%06d.rgbd and manifest.json {seed, count, size, fov}.
    """
    from .fileio import write_rgbd

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = stream(seed, f"data/sample/{i}")
        terrain = generate_heightfield(derive_int(seed, f"data/terrain/{i}"), 129,
                                       roughness=1.0)
        _, _, view = sample_camera(terrain, rng, size=size)
        write_rgbd(view, out / f"sample_{i:06d}.rgbd")
    manifest = {
        "seed": seed,
        "count": count,
        "size": size,
        "fov": list(TRAIN_FOV_RANGE),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir) -> list:
    """Read every sample_*.rgbd in the directory, in index order."""
    from .fileio import read_rgbd

    data = Path(data_dir)
    files = sorted(data.glob("sample_*.rgbd"))
    if not files:
        raise ValueError(f"no sample_*.rgbd files under {data}")
    return [read_rgbd(f) for f in files]
