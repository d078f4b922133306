import json

import numpy as np
import pytest

from matforge import io, procgen as P, render
from matforge.procgen import MaterialSpec


def checker_spec(**over):
    params = dict(color_a=(1, 1, 1), color_b=(0, 0, 0), cells=2, roughness_a=0.5, roughness_b=0.5, bump=0.0)
    params.update(over)
    return MaterialSpec("checker", params, 0, "checker white black")


def test_checker_example():
    mat = P.gen_material(checker_spec(), 64)
    assert np.array_equal(mat.basecolor[0, 0], [1, 1, 1])
    assert np.array_equal(mat.basecolor[32, 32], [1, 1, 1])
    assert np.array_equal(mat.basecolor[0, 32], [0, 0, 0])


def test_flat_bump_gives_flat_normals():
    mat = P.gen_material(checker_spec(bump=0.0), 32)
    assert np.all(mat.normal == np.array([0.5, 0.5, 1.0], np.float32))


def test_height_to_normal_central_differences():
    # a ramp h = x has slope 1 per unit; normal tilts against +X
    res = 32
    ramp = np.tile(np.arange(res, dtype=np.float64) / res, (res, 1))
    n = render.decode_normal(P.height_to_normal(ramp, bump=1.0))
    interior = n[4:-4, 4:-4]
    assert np.all(interior[..., 0] < 0) and np.allclose(interior[..., 1], 0, atol=1e-9)
    assert np.allclose(np.linalg.norm(n, axis=-1), 1, atol=1e-6)


@pytest.mark.parametrize("gen", P.GENERATORS)
def test_generators_deterministic_and_valid(gen):
    spec = P.random_spec(gen, 123)
    a, b = P.gen_material(spec, 32), P.gen_material(spec, 32)
    for k in ("basecolor", "normal", "roughness", "metallic"):
        x, y = getattr(a, k), getattr(b, k)
        assert x.tobytes() == y.tobytes()
        assert x.min() >= 0 and x.max() <= 1
    n = render.decode_normal(a.normal)
    assert np.allclose(np.linalg.norm(n, axis=-1), 1, atol=1e-4)
    P.tokenize(spec.caption)


def test_gen_material_errors():
    with pytest.raises(ValueError, match="unknown generator"):
        P.gen_material(MaterialSpec("plaid", {}, 0, "checker"), 32)
    with pytest.raises(ValueError, match="multiple"):
        P.gen_material(checker_spec(), 40)


def test_vocabulary_closed():
    assert P.VOCAB[0] == "<pad>"
    assert len(set(P.VOCAB)) == len(P.VOCAB)
    with pytest.raises(P.UnknownTag):
        P.tokenize("plaid sofa")
    with pytest.raises(P.UnknownTag):
        P.tokenize("")
    with pytest.raises(ValueError):
        MaterialSpec("checker", {}, 0, "  ")
    for spec in P.material_specs(50, 9):
        ids = P.tokenize(spec.caption)
        assert 0 < len(ids) <= P.MAX_CAPTION_TOKENS and 0 not in ids


def test_material_specs_cycle_generators():
    specs = P.material_specs(10, 0)
    assert [s.generator for s in specs] == list(P.GENERATORS) * 2
    assert [s.to_dict() for s in specs] == [s.to_dict() for s in P.material_specs(10, 0)]
    assert MaterialSpec.from_dict(json.loads(json.dumps(specs[3].to_dict()))).to_dict() == json.loads(json.dumps(specs[3].to_dict()))


def test_planar_pair_arithmetic():
    # planar records = materials x lights
    assert 6000 * 32 == 192_000


@pytest.fixture(scope="module")
def small_paired(tmp_path_factory):
    root = tmp_path_factory.mktemp("paired")
    return P.build_paired_set(root, n_materials=10, lights_per_material=4, primitives_per_material=5, seed=0,
                              resolution=32)


def test_paired_counts(small_paired):
    planar = [r for r in small_paired.records if r.provenance["view"] == "planar"]
    distorted = [r for r in small_paired.records if r.provenance["view"] == "distorted"]
    assert len(planar) == 40
    assert len(distorted) <= 50
    assert small_paired.counts == {"paired": len(planar) + len(distorted), "rgb_only": 0}
    assert {r.provenance["primitive"] for r in distorted} <= set(render.PRIMITIVE_KINDS)
    assert len({r.provenance["primitive"] for r in distorted}) == 5


def test_paired_files_exist_and_consistent(small_paired):
    for rec in small_paired.records:
        assert len(rec.files()) == 5
        assert all(small_paired.path(f).exists() for f in rec.files())
    rec = small_paired.records[0]
    mat = P.load_maps(small_paired, rec)
    rgb = P.load_rgb(small_paired, rec)
    assert mat.resolution == rgb.shape[:2] == (32, 32)


def test_manifest_roundtrip(small_paired):
    loaded = P.DatasetManifest.load(small_paired.root / "paired.json")
    assert loaded.digest() == small_paired.digest()
    bad = loaded.to_dict()
    bad["counts"]["paired"] += 1
    with pytest.raises(ValueError):
        P.DatasetManifest.from_dict(bad)


def test_build_is_reproducible(tmp_path):
    kw = dict(n_materials=2, lights_per_material=1, primitives_per_material=2, seed=5, resolution=32)
    a = P.build_paired_set(tmp_path / "a", **kw)
    b = P.build_paired_set(tmp_path / "b", **kw)
    assert a.digest() == b.digest()
    for rel in {f for r in a.records for f in r.files()} | {"paired.json"}:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_rgbonly_set(tmp_path):
    assert P.build_rgbonly_set(tmp_path / "e", 0).records == []
    m = P.build_rgbonly_set(tmp_path / "r", 50, seed=1, resolution=16)
    assert m.counts == {"paired": 0, "rgb_only": 50}
    assert all(r.maps is None and len(r.files()) == 1 for r in m.records)
    assert "maps" not in json.loads((tmp_path / "r" / "rgbonly.json").read_text())["records"][0]


def fake_manifest(kind, n):
    return P.DatasetManifest(0, [P.SampleRecord(kind, f"{kind}{i}.png", "checker red blue", {"i": i}) for i in range(n)])


def test_mix_corpus():
    paired, rgb = fake_manifest("paired", 90), fake_manifest("rgb_only", 10)
    mixed = P.mix_corpus(paired, rgb, 0.1, seed=3)
    assert mixed.counts == {"paired": 90, "rgb_only": 10}
    assert [r.rgb for r in mixed.records] == [r.rgb for r in P.mix_corpus(paired, rgb, 0.1, seed=3).records]
    assert P.mix_corpus(paired, rgb, 0.0).counts == {"paired": 90, "rgb_only": 0}
    with pytest.raises(ValueError):
        P.mix_corpus(paired, rgb, 1.0)


def test_f32_format(tmp_path):
    arr = np.random.default_rng(0).uniform(size=(4, 6, 3)).astype(np.float32)
    io.save_f32(tmp_path / "x.f32", arr)
    raw = (tmp_path / "x.f32").read_bytes()
    assert raw[:4] == b"MF32" and np.frombuffer(raw[4:16], "<u4").tolist() == [4, 6, 3]
    assert len(raw) == 16 + arr.size * 4
    assert np.array_equal(io.load_f32(tmp_path / "x.f32"), arr)
