"""Metallic-roughness microfacet shading and planar / primitive renders.

Conventions
-----------
* Tangent-space normals: +X right, +Y up, +Z out of the surface.  A normal
  map pixel ``p`` decodes to ``normalize(2p - 1)``.
* Image rows run top to bottom, so row 0 is the +Y edge of a planar sample.
* Renders return linear radiance clamped to [0, 1]; :func:`srgb_encode` is
  applied when an image is stored as an 8-bit PNG.
* Environment maps are lat-long grids; row 0 touches the zenith.  Planar
  renders use +Z as zenith, primitive scenes use world +Y.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DIELECTRIC_F0 = 0.04
UNIT_TOL = 1e-3
PRIMITIVE_KINDS = ("cube", "sphere", "cylinder", "cone", "torus")


class ContractError(ValueError):
    """Shading inputs violate the unit-vector / facing contract."""


class CoverageUnsatisfiable(ValueError):
    """No centered crop reaches the requested material coverage."""


class DegenerateCamera(ValueError):
    pass


@dataclass
class MaterialMaps:
    """Four SVBRDF maps, each ``H x W x C`` float32 in [0, 1]."""

    basecolor: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def __post_init__(self):
        h, w = self.basecolor.shape[:2]
        for name in ("basecolor", "normal", "roughness", "metallic"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim == 2:
                arr = arr[..., None]
            if arr.shape[:2] != (h, w):
                raise ValueError(f"{name} has resolution {arr.shape[:2]}, expected {(h, w)}")
            expected = 1 if name in ("roughness", "metallic") else 3
            if arr.shape[2] != expected:
                raise ValueError(f"{name} must have {expected} channels, got {arr.shape[2]}")
            setattr(self, name, np.clip(arr, 0.0, 1.0))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.basecolor.shape[:2]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "basecolor": self.basecolor,
            "normal": self.normal,
            "roughness": self.roughness,
            "metallic": self.metallic,
        }


@dataclass
class Light:
    kind: str  # "directional" | "point" | "envmap"
    direction: tuple[float, float, float] | None = None
    position: tuple[float, float, float] | None = None
    radiance: tuple[float, float, float] = (1.0, 1.0, 1.0)
    envmap: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("directional", "point", "envmap"):
            raise ValueError(f"unknown light kind {self.kind!r}")
        if min(self.radiance) < 0:
            raise ValueError("light radiance must be nonnegative")
        if self.kind == "directional" and self.direction is None:
            raise ValueError("directional light needs a direction")
        if self.kind == "point" and self.position is None:
            raise ValueError("point light needs a position")
        if self.kind == "envmap":
            env = np.asarray(self.envmap, dtype=np.float64)
            if env.ndim != 3 or env.shape[0] < 4 or env.shape[1] < 8 or env.shape[2] != 3:
                raise ValueError(f"envmap must be at least 4x8x3, got {env.shape}")
            if (env < 0).any():
                raise ValueError("envmap radiance must be nonnegative")
            self.envmap = env


@dataclass
class PrimitiveShape:
    """Analytic primitive centred at the origin with world +Y as its axis.

    ``size`` is the radius (sphere, cylinder, cone base), half edge (cube) or
    major radius (torus); ``height`` is the half height of cylinders and
    cones; ``minor`` is the torus tube radius.  ``uv_repeat`` tiles the
    material across the surface parameterization.
    """

    kind: str
    size: float = 1.0
    height: float = 1.0
    minor: float = 0.4
    uv_repeat: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}")


@dataclass
class Camera:
    position: tuple[float, float, float] = (0.0, 0.0, 3.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_deg: float = 45.0
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not 10.0 < self.fov_deg < 120.0:
            raise ValueError(f"fov {self.fov_deg} outside (10, 120) degrees")


# ---------------------------------------------------------------------------
# BRDF pieces


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1, keepdims=True)


def decode_normal(pixel) -> np.ndarray:
    """Map encoded normal pixels in [0, 1] to unit tangent-space vectors."""
    v = 2.0 * np.asarray(pixel, dtype=np.float64) - 1.0
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if (norm == 0).any():
        raise ValueError("normal pixel decodes to the zero vector")
    return v / norm


def encode_normal(n) -> np.ndarray:
    return 0.5 * (np.asarray(n, dtype=np.float64) + 1.0)


def fresnel_schlick(f0: np.ndarray, cos_theta: np.ndarray) -> np.ndarray:
    return f0 + (1.0 - f0) * (1.0 - cos_theta) ** 5


def ggx_ndf(n_dot_h: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a2 = alpha * alpha
    d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * d * d)


def smith_visibility(n_dot_l: np.ndarray, n_dot_v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Height-correlated Smith GGX term ``G / (4 (n.l)(n.v))``."""
    a2 = alpha * alpha
    gv = n_dot_l * np.sqrt(n_dot_v * n_dot_v * (1.0 - a2) + a2)
    gl = n_dot_v * np.sqrt(n_dot_l * n_dot_l * (1.0 - a2) + a2)
    return 0.5 / np.maximum(gv + gl, 1e-12)


def base_reflectance(basecolor: np.ndarray, metallic: np.ndarray) -> np.ndarray:
    return DIELECTRIC_F0 * (1.0 - metallic) + basecolor * metallic


def specular_brdf(basecolor, normal, roughness, metallic, view, light) -> np.ndarray:
    """Specular BRDF value ``D * Vis * F`` (no cosine), zero below the horizon."""
    n_dot_l = _dot(normal, light)
    n_dot_v = _dot(normal, view)
    h = _normalize(view + light)
    alpha = np.asarray(roughness, dtype=np.float64) ** 2
    f = fresnel_schlick(base_reflectance(np.asarray(basecolor, float), np.asarray(metallic, float)),
                        np.clip(_dot(h, view), 0.0, 1.0))
    nl = np.clip(n_dot_l, 0.0, 1.0)
    nv = np.clip(n_dot_v, 1e-6, 1.0)
    val = ggx_ndf(np.clip(_dot(normal, h), 0.0, 1.0), alpha) * smith_visibility(nl, nv, alpha) * f
    return np.where(n_dot_l > 0, val, 0.0)


def _check_unit(name: str, v: np.ndarray) -> None:
    if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > UNIT_TOL):
        raise ContractError(f"{name} is not unit length")


def shade(basecolor, normal, roughness, metallic, view, light, irradiance, check: bool = True):
    """Diffuse and specular reflected radiance for one light sample.

    All arguments broadcast over leading axes; vectors and colours have a
    trailing axis of 3, roughness/metallic a trailing axis of 1 (or none).
    ``irradiance`` is the incident radiance times its solid angle.
    """
    a = np.asarray(basecolor, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    v = np.asarray(view, dtype=np.float64)
    l = np.asarray(light, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64)
    m = np.asarray(metallic, dtype=np.float64)
    if r.ndim and r.shape[-1] != 1:
        r = r[..., None]
    if m.ndim and m.shape[-1] != 1:
        m = m[..., None]
    e = np.asarray(irradiance, dtype=np.float64)
    if check:
        for name, vec in (("normal", n), ("view", v), ("light", l)):
            _check_unit(name, vec)
        if np.any(_dot(n, v) <= 0):
            raise ContractError("view direction is below the surface (n.v <= 0)")

    n_dot_l = _dot(n, l)
    n_dot_v = np.clip(_dot(n, v), 1e-6, 1.0)
    lit = n_dot_l > 0
    nl = np.clip(n_dot_l, 0.0, 1.0)
    h = _normalize(v + l + np.where(np.abs(v + l) < 1e-12, 1e-12, 0.0))
    alpha = r * r
    f = fresnel_schlick(base_reflectance(a, m), np.clip(_dot(h, v), 0.0, 1.0))
    f_avg = f.mean(axis=-1, keepdims=True)
    diffuse = (1.0 - m) * (1.0 - f_avg) * (a / math.pi) * nl * e
    spec = ggx_ndf(np.clip(_dot(n, h), 0.0, 1.0), alpha) * smith_visibility(nl, n_dot_v, alpha) * f * nl * e
    zero = np.zeros(np.broadcast_shapes(diffuse.shape, spec.shape))
    return np.where(lit, diffuse, zero), np.where(lit, spec, zero)


# ---------------------------------------------------------------------------
# tone mapping


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    x = np.clip(encoded, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


# ---------------------------------------------------------------------------
# environment maps


def envmap_texels(shape: tuple[int, int], up_axis: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions and solid angles of lat-long texel centres."""
    n_lat, n_lon = shape
    theta0 = np.arange(n_lat) * math.pi / n_lat
    theta1 = theta0 + math.pi / n_lat
    theta = 0.5 * (theta0 + theta1)
    phi = (np.arange(n_lon) + 0.5) * 2 * math.pi / n_lon
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    a, b = st * np.cos(phi)[None], st * np.sin(phi)[None]
    c = np.broadcast_to(ct, a.shape)
    if up_axis == 2:
        dirs = np.stack([a, b, c], axis=-1)
    else:
        dirs = np.stack([a, c, b], axis=-1)
    omega = (np.cos(theta0) - np.cos(theta1))[:, None] * (2 * math.pi / n_lon)
    return dirs, np.broadcast_to(omega, (n_lat, n_lon)).copy()


def make_envmap(seed: int, shape: tuple[int, int] = (16, 32), irradiance: float = 2.5) -> np.ndarray:
    """Procedural HDR sky: tinted gradient plus one bright sun lobe.

    Scaled so the cosine-weighted irradiance on an upward-facing surface is
    ``irradiance``.
    """
    rng = np.random.default_rng(seed)
    dirs, omega = envmap_texels(shape, up_axis=2)
    up = dirs[..., 2:3]
    sky = rng.uniform(0.6, 1.0, 3)
    ground = rng.uniform(0.05, 0.3, 3)
    base = np.where(up > 0, sky * (0.35 + 0.65 * up), ground * 0.3)
    sun_theta = rng.uniform(0.1, 1.1)
    sun_phi = rng.uniform(0, 2 * math.pi)
    sun = np.array([math.sin(sun_theta) * math.cos(sun_phi), math.sin(sun_theta) * math.sin(sun_phi), math.cos(sun_theta)])
    sun_col = rng.uniform(0.8, 1.0, 3)
    lobe = np.exp((np.sum(dirs * sun, axis=-1, keepdims=True) - 1.0) * 20.0)
    env = base + rng.uniform(6.0, 14.0) * sun_col * lobe
    e_up = float(np.sum(env.mean(-1) * np.clip(up[..., 0], 0, None) * omega))
    return (env * irradiance / e_up).astype(np.float64)


def envmap_light(seed: int, shape: tuple[int, int] = (16, 32)) -> Light:
    return Light("envmap", envmap=make_envmap(seed, shape))


# ---------------------------------------------------------------------------
# shading loops


def _light_samples(light: Light, up_axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Directions and per-sample irradiance (radiance x solid angle) of a distant light."""
    if light.kind == "envmap":
        dirs, omega = envmap_texels(light.envmap.shape[:2], up_axis)
        rad = (light.envmap * omega[..., None]).reshape(-1, 3)
        dirs = dirs.reshape(-1, 3)
        keep = rad.max(axis=1) > 0
        return dirs[keep], rad[keep]
    l = _normalize(np.asarray(light.direction, dtype=np.float64))[None]
    return l, np.asarray(light.radiance, dtype=np.float64)[None]


def shade_distant(a, n, r, m, v, dirs, rad, components: str = "both") -> np.ndarray:
    """Radiance summed over K distant light samples for P pixels.

    Same model as :func:`shade`, rearranged so every per-sample quantity is a
    ``P x K`` scalar and the colour sums become matrix products.
    """
    n_dot_l = n @ dirs.T
    lit = n_dot_l > 0
    if not lit.any():
        return np.zeros_like(a)
    keep = lit.any(axis=0)
    dirs, rad, n_dot_l, lit = dirs[keep], rad[keep], n_dot_l[:, keep], lit[:, keep]
    nl = np.where(lit, n_dot_l, 0.0)
    nv = np.clip(np.sum(n * v, axis=-1, keepdims=True), 1e-6, 1.0)
    v_dot_l = v @ dirs.T
    half_len = np.sqrt(np.maximum(2.0 + 2.0 * v_dot_l, 1e-24))
    v_dot_h = np.clip((1.0 + v_dot_l) / half_len, 0.0, 1.0)
    n_dot_h = np.clip((nv + n_dot_l) / half_len, 0.0, 1.0)
    schlick = (1.0 - v_dot_h) ** 5
    f0 = base_reflectance(a, m)
    out = np.zeros_like(a)
    if components in ("both", "diffuse"):
        f0_avg = f0.mean(axis=-1, keepdims=True)
        wsum = nl @ rad
        wsch = (nl * schlick) @ rad
        # sum_k (1 - F_avg,k) nl_k E_k with F_avg,k = f0_avg + (1 - f0_avg) s_k
        out += (1.0 - m) * (a / math.pi) * ((1.0 - f0_avg) * wsum - (1.0 - f0_avg) * wsch)
    if components in ("both", "specular"):
        alpha = r * r
        w = ggx_ndf(n_dot_h, alpha) * smith_visibility(nl, nv, alpha) * nl
        out += f0 * (w @ rad) + (1.0 - f0) * ((w * schlick) @ rad)
    return out


def _shade_pixels(a, n, r, m, v, p, light: Light, up_axis: int, components: str = "both") -> np.ndarray:
    if light.kind == "point":
        delta = np.asarray(light.position, dtype=np.float64)[None] - p
        dist2 = np.sum(delta * delta, axis=-1, keepdims=True)
        l = delta / np.sqrt(dist2)
        e = np.asarray(light.radiance, dtype=np.float64)[None] / dist2
        d, sp = shade(a, n, r, m, v, l, e, check=False)
        return {"both": d + sp, "diffuse": d, "specular": sp}[components]
    dirs, rad = _light_samples(light, up_axis)
    out = np.zeros_like(a)
    for s in range(0, len(a), 2048):
        sl = slice(s, s + 2048)
        out[sl] = shade_distant(a[sl], n[sl], r[sl], m[sl], v[sl], dirs, rad, components)
    return out


def render_planar(mat: MaterialMaps, light: Light, components: str = "both") -> np.ndarray:
    """Orthographic top-down render of a flat sample spanning [-1, 1]^2 at z=0.

    Returns linear RGB clamped to [0, 1], ``H x W x 3`` float32.  ``components``
    selects ``"diffuse"``, ``"specular"`` or ``"both"`` lobes.
    """
    h, w = mat.resolution
    a = mat.basecolor.reshape(-1, 3).astype(np.float64)
    n = decode_normal(mat.normal.reshape(-1, 3))
    r = mat.roughness.reshape(-1, 1).astype(np.float64)
    m = mat.metallic.reshape(-1, 1).astype(np.float64)
    ys, xs = np.meshgrid(1 - (np.arange(h) + 0.5) * 2 / h, (np.arange(w) + 0.5) * 2 / w - 1, indexing="ij")
    p = np.stack([xs, ys, np.zeros_like(xs)], -1).reshape(-1, 3)
    v = np.broadcast_to(np.array([0.0, 0.0, 1.0]), n.shape).copy()
    # normals tilted past the view direction are pulled back to grazing
    n = np.where(_dot(n, v) <= 1e-4, _normalize(n * np.array([1, 1, 0]) + np.array([0, 0, 1e-3])), n)
    rgb = _shade_pixels(a, n, r, m, v, p, light, up_axis=2, components=components)
    return np.clip(rgb, 0.0, 1.0).reshape(h, w, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# primitives


def _sdf(shape: PrimitiveShape, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.sqrt(x * x + z * z)
    k = shape.kind
    if k == "sphere":
        return np.linalg.norm(p, axis=-1) - shape.size
    if k == "cube":
        q = np.abs(p) - shape.size
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)
    if k == "cylinder":
        dx, dy = rho - shape.size, np.abs(y) - shape.height
        return np.minimum(np.maximum(dx, dy), 0) + np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
    if k == "cone":
        r1, hh = shape.size, shape.height
        qx, qy = rho, y
        ca_x = qx - np.minimum(qx, np.where(qy < 0, r1, 0.0))
        ca_y = np.abs(qy) - hh
        k2x, k2y = -r1, 2 * hh
        t = np.clip(((0 - qx) * k2x + (hh - qy) * k2y) / (k2x * k2x + k2y * k2y), 0, 1)
        cb_x = qx - 0 + k2x * t
        cb_y = qy - hh + k2y * t
        s = np.where((cb_x < 0) & (ca_y < 0), -1.0, 1.0)
        return s * np.sqrt(np.minimum(ca_x * ca_x + ca_y * ca_y, cb_x * cb_x + cb_y * cb_y))
    # torus
    return np.hypot(rho - shape.size, y) - shape.minor


def _surface_frame(shape: PrimitiveShape, p: np.ndarray):
    """Geometric normal, tangent, bitangent and UV at surface points ``p``."""
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    phi = np.arctan2(z, x)
    around_t = np.stack([np.sin(phi), np.zeros_like(phi), -np.cos(phi)], -1)
    u_around = 0.5 - phi / (2 * math.pi)
    k = shape.kind
    if k == "sphere":
        n = _normalize(p)
        t = around_t
        theta = np.arccos(np.clip(n[..., 1], -1, 1))
        uv = np.stack([u_around, 1 - theta / math.pi], -1)
    elif k == "torus":
        rho = np.hypot(x, z)
        centre = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], -1) * shape.size
        n = _normalize(p - centre)
        t = around_t
        psi = np.arctan2(y, rho - shape.size)
        uv = np.stack([u_around, psi / (2 * math.pi) + 0.5], -1)
    elif k == "cube":
        axis = np.argmax(np.abs(p) / shape.size, axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(p, axis[..., None], -1)), -1)
        side_t = _normalize(np.cross(np.array([0.0, 1.0, 0.0]), n) + (axis == 1)[..., None] * np.array([1.0, 0, 0]))
        t = side_t
        b = np.cross(n, t)
        uv = np.stack([(_dot(p, t)[..., 0] / shape.size + 1) / 2, (_dot(p, b)[..., 0] / shape.size + 1) / 2], -1)
        return n, t, b, uv
    else:  # cylinder / cone: side or cap
        rho = np.hypot(x, z)
        if k == "cylinder":
            side_n = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], -1)
            d_side = np.abs(rho - shape.size)
            top = np.abs(y - shape.height)
        else:
            slope = shape.size / (2 * shape.height)
            side_n = _normalize(np.stack([np.cos(phi), np.full_like(phi, slope), np.sin(phi)], -1))
            d_side = np.abs(rho - shape.size * (shape.height - y) / (2 * shape.height)) / math.sqrt(1 + slope**2)
            top = np.full_like(y, np.inf)
        bottom = np.abs(y + shape.height)
        cap_up = (top < d_side) & (top <= bottom)
        cap_down = (bottom < d_side) & ~cap_up
        cap = cap_up | cap_down
        n = np.where(cap_up[..., None], np.array([0.0, 1.0, 0.0]), side_n)
        n = np.where(cap_down[..., None], np.array([0.0, -1.0, 0.0]), n)
        t = np.where(cap[..., None], np.array([1.0, 0.0, 0.0]), around_t)
        b = np.cross(n, t)
        v_side = (y + shape.height) / (2 * shape.height)
        u_cap = (_dot(p, t)[..., 0] / shape.size + 1) / 2
        v_cap = (_dot(p, b)[..., 0] / shape.size + 1) / 2
        uv = np.stack([np.where(cap, u_cap, u_around), np.where(cap, v_cap, v_side)], -1)
        return n, t, b, uv
    b = np.cross(n, t)
    return n, t, b, uv


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    h, w = camera.resolution
    origin = np.asarray(camera.position, dtype=np.float64)
    fwd = _normalize(np.asarray(camera.look_at, dtype=np.float64) - origin)
    world_up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.999 else np.array([0.0, 0.0, 1.0])
    right = _normalize(np.cross(fwd, world_up))
    up = np.cross(right, fwd)
    tan = math.tan(math.radians(camera.fov_deg) / 2)
    xs = ((np.arange(w) + 0.5) / w * 2 - 1) * tan * (w / h)
    ys = (1 - (np.arange(h) + 0.5) / h * 2) * tan
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dirs = _normalize(fwd + xx[..., None] * right + yy[..., None] * up)
    return origin, dirs


def trace(shape: PrimitiveShape, origin: np.ndarray, dirs: np.ndarray, max_steps: int = 200, far: float = 50.0):
    """Sphere-trace an SDF; returns hit distances and a hit mask."""
    t = np.zeros(dirs.shape[:-1])
    active = np.ones(dirs.shape[:-1], dtype=bool)
    hit = np.zeros_like(active)
    for _ in range(max_steps):
        if not active.any():
            break
        d = _sdf(shape, origin + dirs[active] * t[active][..., None])
        t_act = t[active] + d
        done = d < 1e-6
        idx = np.flatnonzero(active.reshape(-1))
        t.reshape(-1)[idx] = t_act
        hit.reshape(-1)[idx[done]] = True
        gone = done | (t_act > far)
        active.reshape(-1)[idx[gone]] = False
    return t, hit


def sample_texture(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup with wrap-around; ``v`` = 1 is the top row."""
    h, w = tex.shape[:2]
    x = (uv[..., 0] % 1.0) * w - 0.5
    y = ((1.0 - uv[..., 1]) % 1.0) * h - 0.5
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    x0, y0 = x0 % w, y0 % h
    x1, y1 = (x0 + 1) % w, (y0 + 1) % h
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_primitive(mat: MaterialMaps, shape: PrimitiveShape, camera: Camera, light: Light, return_normals: bool = False):
    """Ray-cast the material on a primitive; returns (linear RGB, coverage mask)."""
    origin, dirs = camera_rays(camera)
    if _sdf(shape, origin[None])[0] <= 0:
        raise DegenerateCamera("camera is inside the primitive")
    t, hit = trace(shape, origin, dirs)
    h, w = camera.resolution
    rgb = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    if hit.any():
        p = origin + dirs[hit] * t[hit][..., None]
        n_geo, tan, bit, uv = _surface_frame(shape, p)
        uv = uv * shape.uv_repeat
        a = sample_texture(mat.basecolor.astype(np.float64), uv)
        nt = decode_normal(np.clip(sample_texture(mat.normal.astype(np.float64), uv), 0, 1))
        r = sample_texture(mat.roughness.astype(np.float64), uv)
        m = sample_texture(mat.metallic.astype(np.float64), uv)
        n = _normalize(nt[..., 0:1] * tan + nt[..., 1:2] * bit + nt[..., 2:3] * n_geo)
        v = -dirs[hit]
        # shading normals facing away from the viewer are folded back to the geometric normal
        n = np.where(_dot(n, v) <= 1e-4, n_geo, n)
        n = np.where(_dot(n, v) <= 1e-4, _normalize(n + v * (1e-3 - _dot(n, v))), n)
        rgb[hit] = _shade_pixels(a, n, r, m, v, p, light, up_axis=1)
        normals[hit] = n
    out = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    if return_normals:
        return out, hit.astype(np.float32), normals
    return out, hit.astype(np.float32)


def orbit_camera(azimuth_deg: float, elevation_deg: float, distance: float = 3.0, fov_deg: float = 45.0, resolution=(64, 64)) -> Camera:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    pos = (distance * math.cos(el) * math.sin(az), distance * math.sin(el), distance * math.cos(el) * math.cos(az))
    return Camera(position=pos, fov_deg=fov_deg, resolution=tuple(resolution))


# ---------------------------------------------------------------------------
# cropping


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-style resize with bilinear sampling of a pixel-centre grid."""
    h, w = image.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return image.copy()
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1, x1 = np.clip(y0 + 1, 0, h - 1), np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0, 1)[:, None, None]
    fx = np.clip(xs - x0, 0, 1)[None, :, None]
    img = image if image.ndim == 3 else image[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if image.ndim == 3 else out[..., 0]


def crop_to_coverage(
    image: np.ndarray,
    mask: np.ndarray,
    min_coverage: float = 0.70,
    out_size: tuple[int, int] | None = None,
    step: int = 2,
    min_fraction: float = 0.25,
) -> np.ndarray:
    """Largest centred square crop whose mask coverage is at least ``min_coverage``.

    Candidate squares shrink from the largest centred square by ``step``
    pixels per side; sides below ``min_fraction`` of the frame are not tried.
    The winning crop is resized to ``out_size`` (default: input resolution).
    """
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must be in (0, 1]")
    h, w = mask.shape[:2]
    out_size = out_size or (h, w)
    side = min(h, w)
    smallest = max(1, int(math.ceil(min_fraction * side)))
    while side >= smallest:
        top, left = (h - side) // 2, (w - side) // 2
        window = mask[top : top + side, left : left + side]
        if window.mean() >= min_coverage:
            return resize(image[top : top + side, left : left + side], out_size)
        side -= 2 * step
    raise CoverageUnsatisfiable(f"no centred crop reaches coverage {min_coverage:.2f}")
