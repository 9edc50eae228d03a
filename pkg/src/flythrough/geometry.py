"""Pinhole camera math and the software mesh-warp renderer.

An RGBD frame is lifted to a triangle mesh (one vertex per pixel, two
triangles per quad of neighboring pixels), transformed to a destination
camera, and rasterized with a z-buffer.  The output records which pixels
were covered and which need inpainting (uncovered, or covered by triangles
that span a disparity discontinuity in the source).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

# Disparities at or below this are treated as sky; 1/DISPARITY_MIN is the
# effective far-plane depth for sky vertices.
DISPARITY_MIN = 1e-3
# Classification thresholds on normalized disparity.
SKY_DISPARITY_MAX = 0.08
NEAR_DISPARITY_MIN = 0.4
# Disparity forward-difference magnitude above which mesh triangles are
# flagged as spanning a depth discontinuity.
DISPARITY_EDGE_THRESHOLD = 0.3

# Rasterizer vertex coordinates are snapped to a 1/256-pixel integer grid so
# that coverage tests and barycentric weights are exact integer arithmetic.
_SUBPIXEL = 256
_Z_EPS = 1e-6


@dataclass
class Intrinsics:
    """Pinhole intrinsics with a centered principal point."""

    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError(f"focal_px must be positive, got {self.focal_px}")
        if self.cx != self.width / 2 or self.cy != self.height / 2:
            raise ValueError("principal point must be centered")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.focal_px, 0.0, self.cx],
                [0.0, self.focal_px, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> Intrinsics:
    """Intrinsics for a horizontal field of view in degrees."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov_deg must be in (0, 180), got {fov_deg}")
    focal = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return Intrinsics(focal_px=float(focal), cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height)


@dataclass
class CameraPose:
    """World-from-camera rigid transform: x_world = R @ x_cam + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose must have a 3x3 rotation and 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:g})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must have det +1, got {det:g}")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def forward(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.rotation[:, 2].copy()

    def camera_from_world(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.translation) @ self.rotation

    def world_from_camera(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class RgbdImage:
    """H x W x 4 image: RGB in [0,1] plus normalized disparity in [0,1].

    The optional sky mask marks pixels whose content is at infinity; such
    pixels always carry disparity below SKY_DISPARITY_MAX.
    """

    pixels: np.ndarray
    sky: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4:
            raise ValueError(f"pixels must be HxWx4, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("pixels must be finite")
        if self.sky is not None:
            self.sky = np.asarray(self.sky, dtype=bool)
            if self.sky.shape != self.pixels.shape[:2]:
                raise ValueError("sky mask shape mismatch")
            if np.any(self.pixels[..., 3][self.sky] >= SKY_DISPARITY_MAX):
                raise ValueError("sky pixels must have disparity below "
                                 f"{SKY_DISPARITY_MAX}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def disparity(self) -> np.ndarray:
        return self.pixels[..., 3]


@dataclass
class MeshProjection:
    """Result of warping an RGBD frame into another view.

    valid marks pixels covered by at least one triangle; missing marks pixels
    that need inpainting (uncovered or covered only through a stretched
    triangle).
    """

    image: RgbdImage
    valid: np.ndarray
    missing: np.ndarray


def unproject_pixel(u: float, v: float, d: float, K: Intrinsics) -> np.ndarray:
    """Camera-frame 3D point for pixel (u, v) at disparity d.

    Disparity is clamped below at DISPARITY_MIN, which places sky pixels on
    the far plane instead of at infinity.
    """
    z = 1.0 / max(float(d), DISPARITY_MIN)
    return np.array([(u - K.cx) / K.focal_px * z, (v - K.cy) / K.focal_px * z, z])


def project_point(p_world: np.ndarray, pose: CameraPose, K: Intrinsics):
    """Project a world point into the given camera.

    Returns (u, v, disparity, in_front); in_front is False when the point is
    at or behind the camera plane, in which case u/v are not meaningful.
    """
    p_cam = pose.camera_from_world(p_world)
    z = p_cam[2]
    if z <= _Z_EPS:
        return 0.0, 0.0, 0.0, False
    u = K.focal_px * p_cam[0] / z + K.cx
    v = K.focal_px * p_cam[1] / z + K.cy
    return float(u), float(v), float(1.0 / z), True


def discontinuity_mask(D: np.ndarray, threshold: float = DISPARITY_EDGE_THRESHOLD) -> np.ndarray:
    """Pixels where the forward-difference disparity gradient exceeds threshold.

    Differences are taken toward the right/bottom neighbor with edge
    replication (zero gradient on the last column/row).
    """
    D = np.asarray(D, dtype=np.float64)
    gu = np.zeros_like(D)
    gv = np.zeros_like(D)
    gu[:, :-1] = np.abs(D[:, 1:] - D[:, :-1])
    gv[:-1, :] = np.abs(D[1:, :] - D[:-1, :])
    return np.maximum(gu, gv) > threshold


def region_fractions(D: np.ndarray) -> tuple:
    """(sky_fraction, near_fraction) of a disparity map."""
    D = np.asarray(D)
    return float(np.mean(D < SKY_DISPARITY_MAX)), float(np.mean(D > NEAR_DISPARITY_MIN))


def _grid_vertices(src: RgbdImage, src_pose: CameraPose, dst_pose: CameraPose,
                   K: Intrinsics):
    """Per-pixel vertex positions of the source mesh in the destination view.

    Returns (u, v, z, in_front) as flat float64/bool arrays in row-major pixel
    order.  z is destination camera depth.
    """
    H, W = src.height, src.width
    d = src.disparity.astype(np.float64).ravel()
    z_src = 1.0 / np.maximum(d, DISPARITY_MIN)
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    x = (uu.ravel() - K.cx) / K.focal_px * z_src
    y = (vv.ravel() - K.cy) / K.focal_px * z_src
    p_cam = np.stack([x, y, z_src], axis=1)
    p_world = p_cam @ src_pose.rotation.T + src_pose.translation
    p_dst = (p_world - dst_pose.translation) @ dst_pose.rotation
    z = p_dst[:, 2]
    in_front = z > _Z_EPS
    zs = np.where(in_front, z, 1.0)
    u = K.focal_px * p_dst[:, 0] / zs + K.cx
    v = K.focal_px * p_dst[:, 1] / zs + K.cy
    return u, v, z, in_front


def _triangle_indices(H: int, W: int) -> np.ndarray:
    """Vertex index triples for the two triangles of every pixel quad."""
    idx = np.arange(H * W).reshape(H, W)
    p = idx[:-1, :-1].ravel()
    pr = idx[:-1, 1:].ravel()
    pd = idx[1:, :-1].ravel()
    pdr = idx[1:, 1:].ravel()
    t0 = np.stack([p, pr, pd], axis=1)
    t1 = np.stack([pr, pdr, pd], axis=1)
    # Interleave so triangle index increases in source row-major quad order.
    tris = np.empty((2 * len(p), 3), dtype=np.int64)
    tris[0::2] = t0
    tris[1::2] = t1
    return tris


def _rasterize(u, v, z, in_front, tris, attrs, H: int, W: int):
    """Z-buffered rasterization of a triangle mesh with vertex attributes.

    Coverage is boundary-inclusive; contested pixels are resolved by depth
    with ties broken by lower triangle index, which keeps the result
    deterministic and makes the identity warp reproduce vertex attributes
    exactly.  Returns (out_attrs, covered) with out_attrs zero where
    uncovered.
    """
    n_attr = attrs.shape[1]
    out = np.zeros((H * W, n_attr), dtype=np.float64)
    covered = np.zeros(H * W, dtype=bool)

    uf = np.round(np.clip(u * _SUBPIXEL, -2**40, 2**40)).astype(np.int64)
    vf = np.round(np.clip(v * _SUBPIXEL, -2**40, 2**40)).astype(np.int64)
    # Keep int64 edge functions overflow-free: drop triangles with vertices
    # behind the camera or absurdly far off screen (their on-screen footprint
    # stays uncovered and is reported missing).
    sane = in_front & (np.abs(uf) < 2**26) & (np.abs(vf) < 2**26)
    ok = sane[tris].all(axis=1)
    tris = tris[ok]
    if len(tris) == 0:
        return out.reshape(H, W, n_attr), covered.reshape(H, W)
    ax, ay = uf[tris[:, 0]], vf[tris[:, 0]]
    bx, by = uf[tris[:, 1]], vf[tris[:, 1]]
    cx_, cy_ = uf[tris[:, 2]], vf[tris[:, 2]]

    # Pixel centers sit at integer coordinates; candidate pixels per triangle
    # come from the fixed-point bounding box.

    def _ceil_div(a, b):
        return -((-a) // b)

    x_lo = np.maximum(_ceil_div(np.minimum(np.minimum(ax, bx), cx_), _SUBPIXEL), 0)
    x_hi = np.minimum(np.maximum(np.maximum(ax, bx), cx_) // _SUBPIXEL, W - 1)
    y_lo = np.maximum(_ceil_div(np.minimum(np.minimum(ay, by), cy_), _SUBPIXEL), 0)
    y_hi = np.minimum(np.maximum(np.maximum(ay, by), cy_) // _SUBPIXEL, H - 1)

    area2 = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)
    keep = (x_hi >= x_lo) & (y_hi >= y_lo) & (area2 != 0)
    tri_ids = np.nonzero(keep)[0]
    if len(tri_ids) == 0:
        return out.reshape(H, W, n_attr), covered.reshape(H, W)

    bw = (x_hi - x_lo + 1)[tri_ids]
    bh = (y_hi - y_lo + 1)[tri_ids]
    counts = bw * bh
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(tri_ids)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - starts[rep]
    px = x_lo[tri_ids][rep] + within % bw[rep]
    py = y_lo[tri_ids][rep] + within // bw[rep]
    tri = tri_ids[rep]

    pxf = px * _SUBPIXEL
    pyf = py * _SUBPIXEL
    # Edge functions opposite each vertex; sign-normalized by triangle winding.
    e0 = (cx_[tri] - bx[tri]) * (pyf - by[tri]) - (cy_[tri] - by[tri]) * (pxf - bx[tri])
    e1 = (ax[tri] - cx_[tri]) * (pyf - cy_[tri]) - (ay[tri] - cy_[tri]) * (pxf - cx_[tri])
    e2 = (bx[tri] - ax[tri]) * (pyf - ay[tri]) - (by[tri] - ay[tri]) * (pxf - ax[tri])
    a2 = area2[tri]
    neg = a2 < 0
    e0 = np.where(neg, -e0, e0)
    e1 = np.where(neg, -e1, e1)
    e2 = np.where(neg, -e2, e2)
    inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    if not inside.any():
        return out.reshape(H, W, n_attr), covered.reshape(H, W)

    tri = tri[inside]
    px, py = px[inside], py[inside]
    inv_a2 = 1.0 / np.abs(a2[inside]).astype(np.float64)
    w0 = e0[inside] * inv_a2
    w1 = e1[inside] * inv_a2
    w2 = e2[inside] * inv_a2

    i0, i1, i2 = tris[tri, 0], tris[tri, 1], tris[tri, 2]
    z_pix = w0 * z[i0] + w1 * z[i1] + w2 * z[i2]
    pix = py * W + px

    order = np.lexsort((tri, z_pix, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    vals = (w0[win, None] * attrs[i0[win]]
            + w1[win, None] * attrs[i1[win]]
            + w2[win, None] * attrs[i2[win]])
    out[pix[win]] = vals
    covered[pix[win]] = True
    return out.reshape(H, W, n_attr), covered.reshape(H, W)


def warp_rgbd(src: RgbdImage, src_pose: CameraPose, dst_pose: CameraPose,
              K: Intrinsics, extra_missing: Optional[np.ndarray] = None) -> MeshProjection:
    """Warp an RGBD frame from src_pose into dst_pose via the pixel mesh.

    extra_missing marks source pixels whose content is already unreliable
    (e.g. from a previous warp); their footprint joins the missing mask of
    the output.  Flagged triangles are still rasterized so low-frequency
    content survives, but their pixels are reported as missing.
    """
    H, W = src.height, src.width
    u, v, z, in_front = _grid_vertices(src, src_pose, dst_pose, K)

    d_src = src.disparity.astype(np.float64).ravel()
    sky_v = d_src <= DISPARITY_MIN
    # New per-vertex disparity; sky keeps its source value (content at
    # infinity shows no parallax), ground gets 1/z in the destination view.
    d_new = np.where(sky_v, d_src, 1.0 / np.maximum(z, _Z_EPS))

    flags = discontinuity_mask(src.disparity).ravel()

    attrs = np.empty((H * W, 7), dtype=np.float64)
    attrs[:, 0:3] = src.rgb.reshape(-1, 3)
    attrs[:, 3] = d_new
    attrs[:, 4] = flags.astype(np.float64)
    if src.sky is not None:
        attrs[:, 5] = src.sky.ravel().astype(np.float64)
    else:
        attrs[:, 5] = sky_v.astype(np.float64)
    if extra_missing is not None:
        attrs[:, 6] = np.asarray(extra_missing, dtype=bool).ravel().astype(np.float64)
    else:
        attrs[:, 6] = 0.0

    tris = _triangle_indices(H, W)
    out, covered = _rasterize(u, v, z, in_front, tris, attrs, H, W)

    # Stretched content is real but distorted: masked when it dominates a
    # pixel.  Carried-missing content is garbage: any contribution taints.
    stretch = covered & ((out[..., 4] > 0.5) | (out[..., 6] > 0.0))
    missing = ~covered | stretch
    disp = np.clip(out[..., 3], 0.0, 1.0)
    sky = covered & ~stretch & (out[..., 5] > 0.5) & (disp < SKY_DISPARITY_MAX)
    pixels = np.concatenate([out[..., 0:3], disp[..., None]], axis=2).astype(np.float32)
    np.clip(pixels[..., :3], 0.0, 1.0, out=pixels[..., :3])
    image = RgbdImage(pixels=pixels, sky=sky)
    return MeshProjection(image=image, valid=covered, missing=missing)
