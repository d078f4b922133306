"""``matforge`` command-line front end.

Every subcommand reads one JSON config, writes its artifacts into a stage
directory under the output root together with the resolved config
(``config.json``) and a run manifest (``run.json``) holding the hashes of
all inputs and outputs.  ``verify`` walks those manifests.

Exit codes: 0 ok, 2 config error, 3 I/O or integrity error, 4 training or
sampling divergence, 5 missing prerequisite.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, io, metrics, procgen, render
from . import tensor as T
from .dit import DiT, DitConfig, SamplerError, TaskKind, attach_lora
from .pipeline import (
    DitTrainConfig,
    MaterialPipeline,
    decompose_data,
    img2mat_data,
    load_frames,
    lora_finetune,
    planar_paired,
    text2mat_data,
    train_dit,
)
from .vae import DivergenceError, JointVAE, VaeConfig, finetune_decoder, train_vae

log = logging.getLogger("matforge")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE, EXIT_MISSING = 0, 2, 3, 4, 5

COMMANDS = ("gendata", "train-vae", "finetune-decoder", "train-dit", "lora-finetune", "sample", "decompose", "eval",
            "render", "verify")

# stage directory written by each command
STAGE_DIRS = {
    "gendata": "data",
    "train-vae": "vae_stage1",
    "finetune-decoder": "vae",
    "train-dit": "dit",
    "lora-finetune": "lora",
    "sample": "samples",
    "decompose": "decompose",
    "eval": "eval",
    "render": "render",
}

DEFAULTS: dict = {
    "seed": 0,
    "out": "matforge_out",
    "dataset": {
        "n_materials": 8,
        "lights_per_material": 4,
        "primitives_per_material": 1,
        "resolution": 64,
        "render_scale": 1.5,
        "min_coverage": 0.7,
        "generators": list(procgen.GENERATORS),
        "rgbonly": 8,
        "rgbonly_fraction": 0.3,
    },
    "vae": {
        "latent_channels": 4,
        "widths": [8, 16, 24, 32, 48],
        "spatial_factor": 16,
        "temporal_from_level": 2,
        "beta_kl": 1e-6,
        "lambda1": 10.0,
        "lambda2": 1.0,
        "lr": 2e-3,
        "lr_finetune": 5e-5,
        "steps": 1200,
        "finetune_steps": 100,
        "batch_size": 4,
    },
    "dit": {
        "width": 128,
        "depth": 4,
        "heads": 4,
        "mlp_ratio": 4,
        "patch": 1,
        "tasks": ["text2mat"],
        "steps": 1500,
        "batch_size": 32,
        "lr": 5e-4,
        "warmup": 100,
        "weight_decay": 0.0,
    },
    "rf": {
        "steps": 50,
        "task": "text2mat",
        "caption": "checker red blue",
        "image": None,
        "count": 1,
        "limit": 0,
    },
    "lora": {
        "base": "text2mat",
        "tasks": ["decompose"],
        "rank": 4,
        "scale": 1.0,
        "steps": 1500,
        "batch_size": 32,
        "lr": 5e-4,
        "warmup": 100,
    },
    "eval": {
        "predictions": None,
        "references": None,
        "frechet": True,
        "plots": True,
    },
    "render": {
        "maps": None,
        "light": "point",
        "primitive": "planar",
        "resolution": 64,
    },
}

# keys whose value may take more than one JSON type
UNION_KEYS = {"render.light": (str, int)}

POINT_LIGHT = render.Light("point", position=(0.6, 0.8, 2.0), radiance=(5.0, 5.0, 5.0))


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class IntegrityError(CliError):
    code = EXIT_IO


class MissingPrerequisite(CliError):
    code = EXIT_MISSING


# ---------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    """Overlay ``user`` on ``defaults``, rejecting unknown keys and type mismatches."""
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {dotted!r}")
        ref = defaults[key]
        if dotted in UNION_KEYS:
            if isinstance(value, bool) or not isinstance(value, UNION_KEYS[dotted]):
                names = " or ".join(t.__name__ for t in UNION_KEYS[dotted])
                raise ConfigError(f"{dotted}: expected {names}")
            out[key] = value
        elif isinstance(ref, dict):
            out[key] = _merge(ref, value, dotted)
        elif ref is None or value is None:
            if value is not None and not isinstance(value, (str, int)):
                raise ConfigError(f"{dotted}: expected a string or null")
            out[key] = value
        elif isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{dotted}: expected true or false")
            out[key] = value
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{dotted}: expected a number")
            out[key] = float(value)
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{dotted}: expected an integer")
            out[key] = value
        elif isinstance(ref, list):
            if not isinstance(value, list):
                raise ConfigError(f"{dotted}: expected a list")
            out[key] = value
        else:
            if not isinstance(value, type(ref)):
                raise ConfigError(f"{dotted}: expected {type(ref).__name__}")
            out[key] = value
    return out


def _validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    for i, g in enumerate(ds["generators"]):
        if g not in procgen.GENERATORS:
            raise ConfigError(f"dataset.generators[{i}]: unknown generator {g!r}")
    if not ds["generators"]:
        raise ConfigError("dataset.generators: empty")
    for key in ("n_materials", "lights_per_material"):
        if ds[key] < 1:
            raise ConfigError(f"dataset.{key} must be >= 1")
    if ds["primitives_per_material"] < 0 or ds["rgbonly"] < 0:
        raise ConfigError("dataset counts must be nonnegative")
    if not 0 <= ds["rgbonly_fraction"] < 1:
        raise ConfigError("dataset.rgbonly_fraction must be in [0, 1)")
    sf = cfg["vae"]["spatial_factor"]
    if ds["resolution"] % sf or ds["resolution"] < sf:
        raise ConfigError(f"dataset.resolution must be a positive multiple of vae.spatial_factor ({sf})")
    try:
        VaeConfig(**_vae_fields(cfg))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"vae: {exc}") from exc
    for section in ("dit", "lora"):
        for i, task in enumerate(cfg[section]["tasks"]):
            if task not in {t.value for t in TaskKind}:
                raise ConfigError(f"{section}.tasks[{i}]: unknown task {task!r}")
    if cfg["lora"]["base"] not in {t.value for t in TaskKind}:
        raise ConfigError(f"lora.base: unknown task {cfg['lora']['base']!r}")
    if cfg["rf"]["task"] not in ("text2mat", "img2mat"):
        raise ConfigError("rf.task: sample supports text2mat or img2mat")
    for section, key in (("rf", "steps"), ("rf", "count"), ("lora", "rank"), ("dit", "steps"), ("lora", "steps")):
        if cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key} must be >= 1")
    if cfg["dit"]["width"] % cfg["dit"]["heads"]:
        raise ConfigError("dit.width must be divisible by dit.heads")
    if cfg["rf"]["caption"] is not None:
        try:
            procgen.tokenize(cfg["rf"]["caption"])
        except procgen.UnknownTag as exc:
            raise ConfigError(f"rf.caption: {exc}") from exc
    light = cfg["render"]["light"]
    if not (light == "point" or isinstance(light, int)):
        raise ConfigError("render.light must be 'point' or an environment light index")
    if cfg["render"]["primitive"] not in ("planar",) + render.PRIMITIVE_KINDS:
        raise ConfigError(f"render.primitive: unknown primitive {cfg['render']['primitive']!r}")


def load_config(path: str | Path, seed: int | None = None) -> tuple[dict, Path]:
    """Resolved config and output root (``MATFORGE_OUT`` wins over the file's ``out``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    out = os.environ.get("MATFORGE_OUT") or cfg["out"]
    root = Path(out)
    if not root.is_absolute():
        root = path.parent / root
    return cfg, root


def config_for_stage(cfg: dict) -> dict:
    """What gets written next to the outputs: everything but the output location."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _vae_fields(cfg: dict) -> dict:
    return dict(cfg["vae"], widths=tuple(cfg["vae"]["widths"]), seed=cfg["seed"])


# ---------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    deterministic: bool
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    metrics: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = __version__

    def save(self, path: Path) -> None:
        io.dump_json(path, asdict(self))

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**io.load_json(path))


class Stage:
    """Bookkeeping for one command: records inputs and outputs relative to the root."""

    def __init__(self, command: str, cfg: dict, root: Path, deterministic: bool):
        self.command = command
        self.root = root
        self.dir = root / STAGE_DIRS[command]
        self.dir.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        config_hash = io.dump_json(self.dir / "config.json", config_for_stage(cfg))
        self.manifest = RunManifest(command, config_hash, cfg["seed"], deterministic)

    def rel(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def use(self, path: Path) -> Path:
        self.manifest.inputs[self.rel(path)] = io.file_hash(path)
        return path

    def wrote(self, path: Path, metric: bool = False) -> Path:
        rel = self.rel(path)
        self.manifest.outputs[rel] = io.file_hash(path)
        if metric:
            self.manifest.metrics.append(rel)
        return path

    def finish(self) -> None:
        self.manifest.wall_clock_s = round(time.time() - self.t0, 3)
        self.manifest.save(self.dir / "run.json")


def require(root: Path, command: str, files: list[str]) -> list[Path]:
    """Prerequisite files produced by ``command``, checked against its run manifest."""
    run_path = root / STAGE_DIRS[command] / "run.json"
    if not run_path.exists():
        raise MissingPrerequisite(f"run `matforge {command}` first ({run_path} not found)")
    run = RunManifest.load(run_path)
    out = []
    for rel in files:
        path = root / rel
        if rel not in run.outputs or not path.exists():
            raise MissingPrerequisite(f"{rel} is missing; run `matforge {command}` first")
        if io.file_hash(path) != run.outputs[rel]:
            raise MissingPrerequisite(f"{rel} does not match the hash recorded by `matforge {command}`")
        out.append(path)
    return out


def write_loss_csv(path: Path, losses: list[float]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def save_model(stage: Stage, name: str, state: dict, meta: dict) -> Path:
    path = stage.dir / f"{name}.mftc"
    T.save_checkpoint(path, state)
    stage.wrote(path)
    io.dump_json(stage.dir / f"{name}.json", meta)
    stage.wrote(stage.dir / f"{name}.json")
    return path


# ---------------------------------------------------------------------------
# loading artifacts


DATA_MANIFESTS = {"paired": "data/paired.json", "rgbonly": "data/rgbonly.json", "corpus": "data/corpus.json"}


def load_dataset(stage: Stage, name: str) -> procgen.DatasetManifest:
    path = require(stage.root, "gendata", [DATA_MANIFESTS[name]])[0]
    stage.use(path)
    return procgen.DatasetManifest.load(path)


def load_vae(stage: Stage, finetuned: bool = True) -> JointVAE:
    command, rel = ("finetune-decoder", "vae/vae") if finetuned else ("train-vae", "vae_stage1/vae")
    ckpt, meta = require(stage.root, command, [rel + ".mftc", rel + ".json"])
    stage.use(ckpt)
    stage.use(meta)
    cfg = io.load_json(meta)["vae"]
    vae = JointVAE(VaeConfig(**dict(cfg, widths=tuple(cfg["widths"]))))
    vae.load_state_dict(T.load_checkpoint(ckpt))
    vae.eval()
    return vae


def load_dit(stage: Stage, task: str) -> DiT:
    """The adapter-tuned model for ``task`` if one exists, else a base model trained for it."""
    root = stage.root
    lora_run = root / STAGE_DIRS["lora-finetune"] / "run.json"
    if lora_run.exists() and f"lora/{task}.mftc" in RunManifest.load(lora_run).outputs:
        ckpt, meta = require(root, "lora-finetune", [f"lora/{task}.mftc", f"lora/{task}.json"])
        info = io.load_json(meta)
        model = load_dit(stage, info["base"])
        attach_lora(model, rank=info["rank"], scale=info["scale"], trainable=tuple(info["trainable"]))
        state = T.load_checkpoint(ckpt)
        missing = set(state) - set(model.state_dict())
        if missing:
            raise IntegrityError(f"adapter checkpoint has unexpected tensors: {sorted(missing)[:3]}")
        model.load_state_dict(state, strict=False)
    else:
        dit_run = root / STAGE_DIRS["train-dit"] / "run.json"
        if not dit_run.exists() or f"dit/{task}.mftc" not in RunManifest.load(dit_run).outputs:
            raise MissingPrerequisite(f"no model for task {task}; run `matforge train-dit` or `matforge lora-finetune`")
        ckpt, meta = require(root, "train-dit", [f"dit/{task}.mftc", f"dit/{task}.json"])
        model = DiT(DitConfig(**io.load_json(meta)["dit"]))
        model.load_state_dict(T.load_checkpoint(ckpt))
    stage.use(ckpt)
    stage.use(meta)
    model.eval()
    return model


def dit_config(cfg: dict) -> DitConfig:
    d, v = cfg["dit"], cfg["vae"]
    return DitConfig(latent_channels=v["latent_channels"], latent_size=cfg["dataset"]["resolution"] // v["spatial_factor"],
                     patch=d["patch"], width=d["width"], depth=d["depth"], heads=d["heads"], mlp_ratio=d["mlp_ratio"],
                     seed=cfg["seed"])


def _task_data(task: str, vae: JointVAE, stage: Stage, seed: int):
    if task == "text2mat":
        return text2mat_data(vae, load_dataset(stage, "corpus"), seed)
    paired = load_dataset(stage, "paired")
    return img2mat_data(vae, paired) if task == "img2mat" else decompose_data(vae, paired)


def _write_maps(stage: Stage, stem: str, maps: render.MaterialMaps) -> dict[str, str]:
    rels = procgen.save_maps(stage.dir, stem, maps)
    for rel in rels.values():
        stage.wrote(stage.dir / rel)
    return rels


def _write_png(stage: Stage, rel: str, image: np.ndarray) -> Path:
    path = stage.dir / rel
    io.save_png(path, image)
    return stage.wrote(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gendata(cfg: dict, stage: Stage) -> None:
    ds, seed = cfg["dataset"], cfg["seed"]
    gens = tuple(ds["generators"])
    paired = procgen.build_paired_set(stage.dir, ds["n_materials"], ds["lights_per_material"], ds["primitives_per_material"],
                                      seed, ds["resolution"], ds["render_scale"], ds["min_coverage"], gens)
    rgbonly = procgen.build_rgbonly_set(stage.dir, ds["rgbonly"], seed, ds["resolution"], ds["lights_per_material"], gens)
    corpus = procgen.mix_corpus(paired, rgbonly, ds["rgbonly_fraction"], seed)
    corpus.save(stage.dir / "corpus.json")
    for path in sorted(p for p in stage.dir.rglob("*") if p.is_file() and p.name not in ("run.json", "config.json")):
        stage.wrote(path)
    log.info("dataset: %s paired, %s rgb-only, corpus %s", paired.counts["paired"], rgbonly.counts["rgb_only"],
             corpus.counts)


def _vae_frames(stage: Stage) -> torch.Tensor:
    paired = load_dataset(stage, "paired")
    recs = planar_paired(paired)
    if not recs:
        raise MissingPrerequisite("the paired set has no planar records")
    return load_frames(paired, recs)


def _vae_meta(vae: JointVAE) -> dict:
    return {"vae": dict(asdict(vae.cfg), widths=list(vae.cfg.widths))}


def _vae_report(stage: Stage, vae: JointVAE, frames: torch.Tensor) -> None:
    from .vae import eval_reconstruction

    psnr = {k: round(v, 6) for k, v in eval_reconstruction(vae, frames).items()}
    path = stage.dir / "psnr.json"
    io.dump_json(path, {"psnr": psnr, "count": len(frames)})
    stage.wrote(path, metric=True)


def cmd_train_vae(cfg: dict, stage: Stage) -> None:
    frames = _vae_frames(stage)
    vae = JointVAE(VaeConfig(**_vae_fields(cfg)))
    losses = train_vae(vae, frames)
    stage.wrote(write_loss_csv(stage.dir / "loss.csv", losses))
    save_model(stage, "vae", vae.state_dict(), _vae_meta(vae))
    _vae_report(stage, vae, frames)


def cmd_finetune_decoder(cfg: dict, stage: Stage) -> None:
    vae = load_vae(stage, finetuned=False)
    frames = _vae_frames(stage)
    losses = finetune_decoder(vae, frames, steps=cfg["vae"]["finetune_steps"], lr=cfg["vae"]["lr_finetune"])
    stage.wrote(write_loss_csv(stage.dir / "loss.csv", losses))
    save_model(stage, "vae", vae.state_dict(), _vae_meta(vae))
    _vae_report(stage, vae, frames)


def _train_cfg(section: dict, seed: int) -> DitTrainConfig:
    return DitTrainConfig(steps=section["steps"], batch_size=section["batch_size"], lr=section["lr"],
                          weight_decay=section.get("weight_decay", 0.0), warmup=min(section["warmup"], section["steps"]),
                          seed=seed)


def cmd_train_dit(cfg: dict, stage: Stage) -> None:
    vae = load_vae(stage)
    for task in cfg["dit"]["tasks"]:
        data = _task_data(task, vae, stage, cfg["seed"])
        model = DiT(dit_config(cfg))
        losses = train_dit(model, data, _train_cfg(cfg["dit"], cfg["seed"]))
        stage.wrote(write_loss_csv(stage.dir / f"loss_{task}.csv", losses))
        save_model(stage, task, model.state_dict(), {"dit": asdict(model.cfg), "task": task})


def cmd_lora_finetune(cfg: dict, stage: Stage) -> None:
    lc = cfg["lora"]
    base = load_dit(stage, lc["base"])
    vae = load_vae(stage)
    trainable = ("latent_embed", "latent_pos")
    for task in lc["tasks"]:
        data = _task_data(task, vae, stage, cfg["seed"])
        model, losses = lora_finetune(base, data, lc["rank"], lc["scale"], _train_cfg(lc, cfg["seed"]), seed=cfg["seed"])
        stage.wrote(write_loss_csv(stage.dir / f"loss_{task}.csv", losses))
        state = {n: p.detach() for n, p in model.named_parameters() if p.requires_grad}
        save_model(stage, task, state, {"base": lc["base"], "rank": lc["rank"], "scale": lc["scale"], "task": task,
                                        "trainable": list(trainable)})


def _preview(maps: render.MaterialMaps) -> np.ndarray:
    return render.srgb_encode(render.render_planar(maps, POINT_LIGHT))


def cmd_sample(cfg: dict, stage: Stage) -> None:
    rf, seed = cfg["rf"], cfg["seed"]
    task = rf["task"]
    vae = load_vae(stage)
    model = load_dit(stage, task)
    pipe = MaterialPipeline(vae, {task: model}, steps=rf["steps"])
    if task == "img2mat":
        if rf["image"]:
            photo_path = Path(rf["image"])
            if not photo_path.exists():
                raise MissingPrerequisite(f"rf.image {photo_path} not found")
        else:
            paired = load_dataset(stage, "paired")
            distorted = [r for r in paired.records if r.provenance.get("view") == "distorted"]
            if not distorted:
                raise MissingPrerequisite("no distorted photos in the paired set; set rf.image")
            photo_path = paired.path(distorted[0].rgb)
        if photo_path.resolve().is_relative_to(stage.root.resolve()):
            stage.use(photo_path)
        photo = io.load_png(photo_path)
    rows = []
    for k in range(rf["count"]):
        s = seed + k
        if task == "text2mat":
            rgb, maps = pipe.text2mat(rf["caption"], seed=s)
        else:
            rgb, maps = pipe.img2mat(photo, seed=s)
        stem = f"{task}_s{s}"
        _write_png(stage, f"{stem}_rgb.png", rgb)
        _write_maps(stage, stem, maps)
        preview = _preview(maps)
        _write_png(stage, f"{stem}_preview.png", preview)
        rows.append((stem, maps, [rgb, preview]))
    from . import plotting

    stage.wrote(plotting.map_grid(rows, stage.dir / "grid.png"))


def _decompose_inputs(cfg: dict, stage: Stage) -> list[tuple[str, Path, str | None]]:
    """(stem, image path, reference key) triples."""
    rf = cfg["rf"]
    if rf["image"]:
        path = Path(rf["image"])
        if not path.exists():
            raise MissingPrerequisite(f"rf.image {path} not found")
        return [(path.stem, path, None)]
    paired = load_dataset(stage, "paired")
    recs = planar_paired(paired)
    if rf["limit"]:
        recs = recs[: rf["limit"]]
    return [(Path(r.rgb).stem, paired.path(r.rgb), r.rgb) for r in recs]


def cmd_decompose(cfg: dict, stage: Stage) -> None:
    vae = load_vae(stage)
    pipe = MaterialPipeline(vae, {"decompose": load_dit(stage, "decompose")}, steps=cfg["rf"]["steps"])
    items = []
    for stem, path, key in _decompose_inputs(cfg, stage):
        if path.resolve().is_relative_to(stage.root.resolve()):
            stage.use(path)
        maps = pipe.decompose(io.load_png(path), seed=cfg["seed"])
        items.append({"key": key, "stem": stem, "maps": _write_maps(stage, stem, maps)})
    path = stage.dir / "predictions.json"
    io.dump_json(path, {"items": items})
    stage.wrote(path)


def _load_light(paired: procgen.DatasetManifest, light_id: int, stage: Stage) -> render.Light:
    path = paired.path(f"lights/env_{light_id:02d}.f32")
    if not path.exists():
        raise IntegrityError(f"environment light {path} missing")
    stage.use(path)
    return render.Light("envmap", envmap=io.load_f32(path))


def cmd_eval(cfg: dict, stage: Stage) -> None:
    ev = cfg["eval"]
    root = stage.root
    pred_path = Path(ev["predictions"]) if ev["predictions"] else require(root, "decompose", ["decompose/predictions.json"])[0]
    ref_path = Path(ev["references"]) if ev["references"] else require(root, "gendata", ["data/paired.json"])[0]
    for p in (pred_path, ref_path):
        if not p.exists():
            raise MissingPrerequisite(f"{p} not found")
        if p.resolve().is_relative_to(root.resolve()):
            stage.use(p)
    preds = io.load_json(pred_path)["items"]
    refs = procgen.DatasetManifest.load(ref_path)
    by_key = {r.rgb: r for r in refs.records if r.maps}
    if not preds:
        raise ConfigError("eval: the prediction set is empty")
    names = ("basecolor", "normal", "roughness", "metallic")
    sq = {n: [] for n in names + ("render",)}
    perceptual, feats_pred, feats_ref, rows = [], [], [], []
    net = metrics.feature_net()
    lights: dict[int, render.Light] = {}
    for i, item in enumerate(preds):
        key = item.get("key")
        if key not in by_key:
            raise ConfigError(f"eval: prediction {i} ({item.get('stem')}) has no aligned reference record")
        rec = by_key[key]
        pred = render.MaterialMaps(**{n: io.load_f32(pred_path.parent / rel) for n, rel in item["maps"].items()})
        ref = procgen.load_maps(refs, rec)
        if pred.resolution != ref.resolution:
            raise ConfigError(f"eval: prediction {i} is {pred.resolution}, reference is {ref.resolution}")
        for n in names:
            sq[n].append(metrics.mse(getattr(pred, n), getattr(ref, n)))
        lid = int(rec.provenance["light"])
        if lid not in lights:
            lights[lid] = _load_light(refs, lid, stage)
        target = procgen.load_rgb(refs, rec)
        rerender = procgen.ldr(render.render_planar(pred, lights[lid])).astype(np.float32)
        sq["render"].append(metrics.mse(rerender, target))
        perceptual.append(metrics.perceptual_dist(rerender, target, net))
        with torch.no_grad():
            feats_pred.append(net.embed(metrics.to_chw(rerender)[None])[0].numpy())
            feats_ref.append(net.embed(metrics.to_chw(target)[None])[0].numpy())
        if len(rows) < 4:
            rows.append((item["stem"], pred, [rerender, target]))
    report = metrics.MetricReport()
    for n, vals in sq.items():
        report.mse[n] = float(np.mean(vals))
        report.psnr[n] = metrics.psnr_from_mse(report.mse[n])
        report.counts[n] = len(vals)
    report.perceptual["render"] = float(np.mean(perceptual))
    if ev["frechet"] and len(preds) >= 2:
        report.frechet["render"] = metrics.frechet_distance(np.stack(feats_pred), np.stack(feats_ref))
    path = stage.dir / "report.json"
    io.dump_json(path, report.to_dict())
    stage.wrote(path, metric=True)
    if ev["plots"]:
        from . import plotting

        stage.wrote(plotting.channel_bars(report.mse, stage.dir / "mse.png"))
        stage.wrote(plotting.map_grid(rows, stage.dir / "maps.png"))
        curves = {}
        for command in ("train-vae", "finetune-decoder", "train-dit", "lora-finetune"):
            for csv_path in sorted((root / STAGE_DIRS[command]).glob("loss*.csv")):
                curves[f"{command} {csv_path.stem.removeprefix('loss').strip('_')}".strip()] = stage.use(csv_path)
        if curves:
            stage.wrote(plotting.loss_curve(curves, stage.dir / "losses.png"))


def cmd_render(cfg: dict, stage: Stage) -> None:
    rc = cfg["render"]
    root = stage.root
    if rc["maps"]:
        stem = Path(rc["maps"])
        if not stem.is_absolute():
            stem = root / stem
        files = {n: Path(f"{stem}_{n}.f32") for n in ("basecolor", "normal", "roughness", "metallic")}
    else:
        paired = load_dataset(stage, "paired")
        rec = next(r for r in paired.records if r.maps)
        files = {n: paired.path(rel) for n, rel in rec.maps.items()}
    for path in files.values():
        if not path.exists():
            raise MissingPrerequisite(f"{path} not found")
        if path.resolve().is_relative_to(root.resolve()):
            stage.use(path)
    maps = render.MaterialMaps(**{n: io.load_f32(p) for n, p in files.items()})
    if rc["light"] == "point":
        light = POINT_LIGHT
    else:
        light = _load_light(load_dataset(stage, "paired"), rc["light"], stage)
    if rc["primitive"] == "planar":
        img = render.render_planar(maps, light)
    else:
        kind = rc["primitive"]
        cam = render.orbit_camera(30.0, 30.0, 3.0, resolution=(rc["resolution"], rc["resolution"]))
        img, _ = render.render_primitive(maps, render.PrimitiveShape(kind, **procgen.SHAPE_PRESETS[kind]), cam, light)
    _write_png(stage, f"render_{rc['primitive']}.png", render.srgb_encode(img))


def cmd_verify(root: Path) -> list[str]:
    """Check every run manifest against the files on disk and against each other.

    Returns the list of problems (empty when the chain is intact).
    """
    problems = []
    runs = {}
    for command, sub in STAGE_DIRS.items():
        path = root / sub / "run.json"
        if path.exists():
            runs[command] = RunManifest.load(path)
    if not runs:
        raise MissingPrerequisite(f"no run manifests under {root}")
    produced = {}
    for command, run in runs.items():
        cfg_path = root / STAGE_DIRS[command] / "config.json"
        if not cfg_path.exists() or io.file_hash(cfg_path) != run.config_hash:
            problems.append(f"{command}: resolved config does not match its hash")
        for rel, digest in run.outputs.items():
            path = root / rel
            if not path.exists():
                problems.append(f"{command}: output {rel} missing")
            elif io.file_hash(path) != digest:
                problems.append(f"{command}: output {rel} changed since it was written")
            produced[rel] = (command, digest)
    for command, run in runs.items():
        for rel, digest in run.inputs.items():
            if rel not in produced:
                problems.append(f"{command}: input {rel} was not produced by any recorded stage")
            elif produced[rel][1] != digest:
                problems.append(f"{command}: input {rel} differs from what {produced[rel][0]} wrote; rerun {command}")
    return problems


HANDLERS = {
    "gendata": cmd_gendata,
    "train-vae": cmd_train_vae,
    "finetune-decoder": cmd_finetune_decoder,
    "train-dit": cmd_train_dit,
    "lora-finetune": cmd_lora_finetune,
    "sample": cmd_sample,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matforge", description="Joint RGB/PBR material generation pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded bitwise-reproducible mode")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config: str | Path, seed: int | None = None, deterministic: bool = False) -> int:
    cfg, root = load_config(config, seed)
    if deterministic:
        T.set_deterministic(True)
    if command == "verify":
        problems = cmd_verify(root)
        for msg in problems:
            print(f"verify: {msg}", file=sys.stderr)
        if problems:
            raise IntegrityError(f"{len(problems)} problem(s) in the manifest chain")
        print(f"verify: ok ({root})")
        return EXIT_OK
    torch.manual_seed(cfg["seed"])
    stage = Stage(command, cfg, root, deterministic)
    HANDLERS[command](cfg, stage)
    stage.finish()
    log.info("%s done in %.1fs -> %s", command, stage.manifest.wall_clock_s, stage.dir)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return run(args.command, args.config, args.seed, args.deterministic)
    except CliError as exc:
        print(f"matforge {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except procgen.UnknownTag as exc:
        print(f"matforge {args.command}: bad caption: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, SamplerError) as exc:
        print(f"matforge {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"matforge {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
