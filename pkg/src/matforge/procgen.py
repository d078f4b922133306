"""Procedural SVBRDF materials with tag captions, and the hybrid dataset builders."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, render
from .render import Light, MaterialMaps, PrimitiveShape

log = logging.getLogger(__name__)

GENERATORS = ("checker", "stripes", "bricks", "fbm_bump", "metal_plate")

PALETTE = {
    "red": (0.75, 0.12, 0.10),
    "green": (0.15, 0.60, 0.20),
    "blue": (0.12, 0.25, 0.75),
    "yellow": (0.90, 0.80, 0.15),
    "orange": (0.90, 0.45, 0.10),
    "brown": (0.45, 0.28, 0.15),
    "beige": (0.85, 0.75, 0.60),
    "teal": (0.10, 0.55, 0.55),
    "purple": (0.45, 0.15, 0.60),
    "gray": (0.50, 0.50, 0.50),
    "white": (1.00, 1.00, 1.00),
    "black": (0.00, 0.00, 0.00),
}
METAL_PALETTE = {
    "gold": (1.00, 0.78, 0.34),
    "copper": (0.95, 0.64, 0.54),
    "silver": (0.95, 0.93, 0.88),
    "steel": (0.60, 0.62, 0.65),
}
PATTERN_WORDS = ("checker", "stripes", "brick", "wall", "stone", "bumpy", "metal", "plate")
FINISH_WORDS = ("glossy", "smooth", "rough")

# closed caption vocabulary; index 0 is padding
VOCAB: tuple[str, ...] = ("<pad>",) + tuple(PALETTE) + tuple(METAL_PALETTE) + PATTERN_WORDS + FINISH_WORDS
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
MAX_CAPTION_TOKENS = 4

SHAPE_PRESETS = {
    "cube": dict(size=0.8),
    "sphere": dict(size=1.0, uv_repeat=2.0),
    "cylinder": dict(size=0.8, height=0.9, uv_repeat=2.0),
    "cone": dict(size=1.0, height=1.0, uv_repeat=2.0),
    "torus": dict(size=0.9, minor=0.4, uv_repeat=2.0),
}


class UnknownTag(KeyError):
    pass


def tokenize(caption: str) -> list[int]:
    words = caption.split()
    if not words:
        raise UnknownTag("empty caption")
    unknown = [w for w in words if w not in TOKEN_IDS]
    if unknown:
        raise UnknownTag(f"tags not in vocabulary: {unknown}")
    if len(words) > MAX_CAPTION_TOKENS:
        raise UnknownTag(f"caption longer than {MAX_CAPTION_TOKENS} tags: {caption!r}")
    return [TOKEN_IDS[w] for w in words]


def finish_word(roughness: float) -> str:
    if roughness < 0.3:
        return "glossy"
    return "smooth" if roughness < 0.6 else "rough"


@dataclass
class MaterialSpec:
    generator: str
    params: dict
    seed: int
    caption: str

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError("caption must be non-empty")
        tokenize(self.caption)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialSpec":
        return cls(d["generator"], dict(d["params"]), int(d["seed"]), d["caption"])


# ---------------------------------------------------------------------------
# noise and height-to-normal


def perlin(res: tuple[int, int], period: int, rng: np.random.Generator) -> np.ndarray:
    """Tileable 2D gradient noise sampled on an ``H x W`` pixel grid."""
    h, w = res
    angles = rng.uniform(0, 2 * math.pi, (period, period))
    grads = np.stack([np.cos(angles), np.sin(angles)], -1)
    ys = (np.arange(h) + 0.5) * period / h
    xs = (np.arange(w) + 0.5) * period / w
    y, x = np.meshgrid(ys, xs, indexing="ij")
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0

    def corner(dy, dx):
        g = grads[(y0 + dy) % period, (x0 + dx) % period]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    u, v = fade(fx), fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bot = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bot * v


def fbm(res, period: int, octaves: int, rng, persistence: float = 0.5) -> np.ndarray:
    """Fractal sum of :func:`perlin` octaves rescaled to [0, 1]."""
    total = np.zeros(res)
    amp = 1.0
    for o in range(octaves):
        total += amp * perlin(res, period * 2**o, rng)
        amp *= persistence
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros(res)


def height_to_normal(height: np.ndarray, bump: float) -> np.ndarray:
    """Encoded tangent-space normals from a height field by central differences.

    ``bump`` is the height of a unit step measured in texture widths; image
    rows go down while tangent +Y goes up, hence the sign on the row slope.
    """
    h, w = height.shape
    gx = (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1)) * 0.5 * w
    gy_up = (np.roll(height, 1, axis=0) - np.roll(height, -1, axis=0)) * 0.5 * h
    n = np.stack([-bump * gx, -bump * gy_up, np.ones_like(height)], -1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return render.encode_normal(n)


# ---------------------------------------------------------------------------
# generators


def _grid(res):
    h, w = res
    y, x = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return y, x


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0, 1)
    return t * t * (3 - 2 * t)


def _checker(p, res, rng):
    h, w = res
    cells = int(p["cells"])
    rows = (np.arange(h) * cells // h)[:, None]
    cols = (np.arange(w) * cells // w)[None, :]
    is_a = ((rows + cols) % 2 == 0).astype(np.float64)
    a, b = np.asarray(p["color_a"]), np.asarray(p["color_b"])
    base = is_a[..., None] * a + (1 - is_a[..., None]) * b
    rough = np.where(is_a > 0, p["roughness_a"], p["roughness_b"])
    return base, is_a, rough, np.full(res, p.get("metallic", 0.0))


def _stripes(p, res, rng):
    y, x = _grid(res)
    s = 0.5 + 0.5 * np.sin(2 * math.pi * p["count"] * x)
    t = _smoothstep(0.35, 0.65, s)
    a, b = np.asarray(p["color_a"]), np.asarray(p["color_b"])
    base = t[..., None] * a + (1 - t[..., None]) * b
    rough = t * p["roughness_a"] + (1 - t) * p["roughness_b"]
    return base, s, rough, np.zeros(res)


def _bricks(p, res, rng):
    y, x = _grid(res)
    rows, cols = int(p["rows"]), int(p["cols"])
    ry = y * rows
    row = np.floor(ry).astype(int)
    bx = x * cols + 0.5 * (row % 2)
    col = np.floor(bx).astype(int) % cols
    fy, fx = ry - row, bx - np.floor(bx)
    mortar = p["mortar_width"]
    edge = np.minimum.reduce([fy, 1 - fy, (fx) * rows / cols, (1 - fx) * rows / cols])
    brick = _smoothstep(mortar * 0.5, mortar, edge)
    jitter = rng.uniform(-p["jitter"], p["jitter"], (rows, cols))[row % rows, col]
    color = np.clip(np.asarray(p["color"]) * (1 + jitter[..., None]), 0, 1)
    base = brick[..., None] * color + (1 - brick[..., None]) * np.asarray(p["mortar_color"])
    rough = brick * p["roughness"] + (1 - brick) * 0.9
    return base, brick, rough, np.zeros(res)


def _fbm_bump(p, res, rng):
    hgt = fbm(res, int(p["period"]), int(p["octaves"]), rng)
    base = np.asarray(p["color"]) * (0.55 + 0.45 * hgt[..., None])
    rough = np.clip(p["roughness"] + 0.25 * (0.5 - hgt), 0, 1)
    return base, hgt, rough, np.zeros(res)


def _metal_plate(p, res, rng):
    y, x = _grid(res)
    panels = int(p["panels"])
    fy, fx = (y * panels) % 1.0, (x * panels) % 1.0
    edge = np.minimum.reduce([fy, 1 - fy, fx, 1 - fx])
    plate = _smoothstep(0.02, 0.06, edge)
    streak = fbm(res, 4, 2, rng)
    base = np.asarray(p["color"]) * (0.85 + 0.15 * plate[..., None])
    rough = np.clip(p["roughness"] + 0.15 * (streak - 0.5) + 0.3 * (1 - plate), 0, 1)
    metal = np.where(plate > 0.5, 1.0, 0.6)
    return base, plate, rough, metal


_GENERATOR_FNS = {
    "checker": _checker,
    "stripes": _stripes,
    "bricks": _bricks,
    "fbm_bump": _fbm_bump,
    "metal_plate": _metal_plate,
}


def gen_material(spec: MaterialSpec, resolution: int | tuple[int, int] = 64, spatial_factor: int = 16) -> MaterialMaps:
    """Deterministic maps for ``spec``; normals come from the generator's height field."""
    if spec.generator not in _GENERATOR_FNS:
        raise ValueError(f"unknown generator {spec.generator!r}")
    res = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    if min(res) < 8 or res[0] % spatial_factor or res[1] % spatial_factor:
        raise ValueError(f"resolution {res} must be >= 8 and a multiple of {spatial_factor}")
    rng = np.random.default_rng(spec.seed)
    base, height, rough, metal = _GENERATOR_FNS[spec.generator](spec.params, res, rng)
    normal = height_to_normal(height, float(spec.params.get("bump", 0.0)))
    return MaterialMaps(base, normal, rough, metal)


def random_spec(generator: str, seed: int) -> MaterialSpec:
    """Draw parameters and a matching caption for one generator family."""
    rng = np.random.default_rng(seed)
    names = list(PALETTE)

    def pick(exclude=()):
        choices = [n for n in names if n not in exclude]
        return choices[rng.integers(len(choices))]

    if generator == "checker":
        a = pick()
        b = pick(exclude=(a,))
        ra, rb = rng.uniform(0.2, 0.9, 2)
        params = dict(color_a=PALETTE[a], color_b=PALETTE[b], cells=int(rng.choice([2, 4, 8])),
                      roughness_a=float(ra), roughness_b=float(rb), bump=float(rng.uniform(0.0, 0.01)))
        caption = f"checker {a} {b}"
    elif generator == "stripes":
        a = pick()
        b = pick(exclude=(a,))
        ra, rb = rng.uniform(0.2, 0.9, 2)
        params = dict(color_a=PALETTE[a], color_b=PALETTE[b], count=int(rng.integers(2, 6)),
                      roughness_a=float(ra), roughness_b=float(rb), bump=float(rng.uniform(0.005, 0.02)))
        caption = f"{a} {b} stripes {finish_word((ra + rb) / 2)}"
    elif generator == "bricks":
        c = pick(exclude=("white", "black"))
        r = float(rng.uniform(0.4, 0.95))
        params = dict(color=PALETTE[c], mortar_color=(0.75, 0.73, 0.7), rows=int(rng.choice([4, 8])), cols=2,
                      mortar_width=0.08, jitter=0.15, roughness=r, bump=float(rng.uniform(0.01, 0.03)))
        caption = f"{c} brick wall {finish_word(r)}"
    elif generator == "fbm_bump":
        c = pick(exclude=("black",))
        r = float(rng.uniform(0.3, 0.95))
        params = dict(color=PALETTE[c], period=int(rng.choice([2, 4])), octaves=3, roughness=r,
                      bump=float(rng.uniform(0.01, 0.04)))
        caption = f"{c} stone bumpy {finish_word(r)}"
    elif generator == "metal_plate":
        c = list(METAL_PALETTE)[rng.integers(len(METAL_PALETTE))]
        r = float(rng.uniform(0.15, 0.6))
        params = dict(color=METAL_PALETTE[c], panels=int(rng.choice([1, 2])), roughness=r, bump=0.01)
        caption = f"{c} metal plate {finish_word(r)}"
    else:
        raise ValueError(f"unknown generator {generator!r}")
    return MaterialSpec(generator, params, int(seed), caption)


def material_specs(n: int, seed: int, generators: tuple[str, ...] | list[str] = GENERATORS) -> list[MaterialSpec]:
    """``n`` specs cycling through ``generators`` (every family by default)."""
    generators = tuple(generators)
    unknown = [g for g in generators if g not in _GENERATOR_FNS]
    if unknown or not generators:
        raise ValueError(f"unknown generator {unknown[0]!r}" if unknown else "no generators given")
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(max(n, 1), dtype=np.uint32)
    return [random_spec(generators[i % len(generators)], int(seeds[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    kind: str  # "paired" | "rgb_only"
    rgb: str
    caption: str
    provenance: dict
    maps: dict[str, str] | None = None

    def files(self) -> list[str]:
        return [self.rgb] + (list(self.maps.values()) if self.maps else [])

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["maps"] is None:
            del d["maps"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(d["kind"], d["rgb"], d["caption"], dict(d["provenance"]), d.get("maps"))


@dataclass
class DatasetManifest:
    seed: int
    records: list[SampleRecord] = field(default_factory=list)
    version: int = 1
    root: Path | None = None

    @property
    def counts(self) -> dict[str, int]:
        out = {"paired": 0, "rgb_only": 0}
        for r in self.records:
            out[r.kind] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "counts": self.counts,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        m = cls(int(d["seed"]), [SampleRecord.from_dict(r) for r in d["records"]], int(d["version"]), root)
        if m.counts != d["counts"]:
            raise ValueError(f"manifest counts {d['counts']} disagree with records {m.counts}")
        return m

    def save(self, path: str | Path) -> str:
        return io.dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(io.load_json(path), root=path.parent)

    def digest(self) -> str:
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def save_maps(root: Path, stem: str, mat: MaterialMaps) -> dict[str, str]:
    out = {}
    for name, arr in mat.as_dict().items():
        rel = f"{stem}_{name}.f32"
        io.save_f32(root / rel, arr)
        out[name] = rel
    return out


def load_maps(manifest: DatasetManifest, record: SampleRecord) -> MaterialMaps:
    if not record.maps:
        raise ValueError("record has no material maps")
    arrs = {k: io.load_f32(manifest.path(v)) for k, v in record.maps.items()}
    return MaterialMaps(**arrs)


def load_rgb(manifest: DatasetManifest, record: SampleRecord) -> np.ndarray:
    return io.load_png(manifest.path(record.rgb))


def light_bank(seed: int, count: int, shape=(16, 32)) -> list[Light]:
    return [render.envmap_light(light_seed(seed, i), shape) for i in range(count)]


def light_seed(seed: int, light_id: int) -> int:
    return int(np.random.SeedSequence([seed, 17, light_id]).generate_state(1)[0])


def ldr(linear: np.ndarray) -> np.ndarray:
    """Tone map a linear render to the stored 8-bit sRGB values."""
    return np.round(render.srgb_encode(linear) * 255.0) / 255.0


def build_paired_set(
    out_dir: str | Path,
    n_materials: int = 64,
    lights_per_material: int = 4,
    primitives_per_material: int = 5,
    seed: int = 0,
    resolution: int = 64,
    render_scale: float = 1.5,
    min_coverage: float = 0.70,
    generators: tuple[str, ...] | list[str] = GENERATORS,
) -> DatasetManifest:
    """Planar and primitive-distorted renders, each paired with its material maps."""
    if lights_per_material < 1:
        raise ValueError("lights_per_material must be >= 1")
    root = Path(out_dir)
    lights = light_bank(seed, lights_per_material)
    for i, light in enumerate(lights):
        io.save_f32(root / "lights" / f"env_{i:02d}.f32", light.envmap)
    manifest = DatasetManifest(seed=seed, root=root)
    big = int(round(resolution * render_scale))
    for i, spec in enumerate(material_specs(n_materials, seed, generators)):
        mat = gen_material(spec, resolution)
        maps = save_maps(root, f"paired/mat{i:04d}", mat)
        prov = {"material": i, "spec": spec.to_dict()}
        for lid, light in enumerate(lights):
            rel = f"paired/mat{i:04d}_planar_l{lid:02d}.png"
            io.save_png(root / rel, render.srgb_encode(render.render_planar(mat, light)))
            manifest.records.append(SampleRecord("paired", rel, spec.caption,
                                                 dict(prov, view="planar", light=lid, primitive="planar"), maps))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29, i]))
        for k in range(primitives_per_material):
            kind = render.PRIMITIVE_KINDS[(i + k) % len(render.PRIMITIVE_KINDS)]
            az, el, dist = float(rng.uniform(0, 360)), float(rng.uniform(10, 50)), float(rng.uniform(2.7, 3.3))
            lid = int(rng.integers(lights_per_material))
            cam = render.orbit_camera(az, el, dist, resolution=(big, big))
            img, mask = render.render_primitive(mat, PrimitiveShape(kind, **SHAPE_PRESETS[kind]), cam, lights[lid])
            try:
                crop = render.crop_to_coverage(img, mask, min_coverage, out_size=(resolution, resolution))
            except render.CoverageUnsatisfiable:
                log.warning("material %d on %s: coverage below %.2f, sample skipped", i, kind, min_coverage)
                continue
            rel = f"paired/mat{i:04d}_{kind}_{k}.png"
            io.save_png(root / rel, render.srgb_encode(crop))
            manifest.records.append(SampleRecord(
                "paired", rel, spec.caption,
                dict(prov, view="distorted", light=lid, primitive=kind, camera=[az, el, dist]), maps))
    manifest.save(root / "paired.json")
    return manifest


def build_rgbonly_set(out_dir: str | Path, n: int, seed: int = 0, resolution: int = 64, n_lights: int = 4,
                      generators: tuple[str, ...] | list[str] = GENERATORS) -> DatasetManifest:
    """Planar RGB renders whose material maps are discarded after rendering."""
    root = Path(out_dir)
    manifest = DatasetManifest(seed=seed, root=root)
    if n:
        lights = light_bank(seed + 1, n_lights)
        for i, spec in enumerate(material_specs(n, seed + 100_003, generators)):
            mat = gen_material(spec, resolution)
            lid = i % n_lights
            rel = f"rgbonly/img{i:04d}.png"
            io.save_png(root / rel, render.srgb_encode(render.render_planar(mat, lights[lid])))
            manifest.records.append(SampleRecord("rgb_only", rel, spec.caption,
                                                 {"index": i, "light": lid, "view": "planar", "seed": spec.seed}))
    manifest.save(root / "rgbonly.json")
    return manifest


def mix_corpus(paired: DatasetManifest, rgbonly: DatasetManifest, rgbonly_fraction: float = 0.3, seed: int = 0) -> DatasetManifest:
    """Shuffle paired records with enough RGB-only records to reach ``rgbonly_fraction``.

    The RGB-only count is ``round(f * P / (1 - f))`` for ``P`` paired records,
    capped by what ``rgbonly`` holds.
    """
    if not 0 <= rgbonly_fraction < 1:
        raise ValueError("rgbonly_fraction must be in [0, 1)")
    n_paired = len(paired.records)
    k = min(len(rgbonly.records), int(round(rgbonly_fraction * n_paired / (1 - rgbonly_fraction))))
    records = list(paired.records) + list(rgbonly.records[:k])
    order = np.random.default_rng(seed).permutation(len(records))
    return DatasetManifest(seed=seed, records=[records[i] for i in order], root=paired.root)
