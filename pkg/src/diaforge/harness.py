"""Editing, purification, image metrics and the benchmark runner.

The benchmark immunizes each toy image with every configured method,
optionally purifies it, runs each configured DDIM edit and scores the
result against the edit of the clean image (the natural edit) and against
the clean source image.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import OBJECTIVES, AttackConfig, AttackContext, immunize
from .diffusion import build_schedule, make_grid, rollout_invert, rollout_sample
from .models import (Condition, IdentityCodec, bind, load_model, make_toy_dataset, train_denoiser,
                     train_linear_codec)
from .numerics import Rng


class HarnessError(ValueError):
    pass


# -- editing -----------------------------------------------------------------


@dataclass(frozen=True)
class EditTask:
    source_cond: Condition
    target_cond: Condition
    steps: int = 10
    guidance: float = 1.0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise HarnessError(f"an edit needs at least one DDIM step, got {self.steps}")


def edit_ddim(x, task: EditTask, codec, denoiser, query: str = "source") -> np.ndarray:
    """Invert ``x`` under the source condition and resample under the target one."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise HarnessError("edit input must lie in [0, 1]")
    z0 = codec.encode(x)
    latent_shape = getattr(denoiser, "latent_shape", None)
    if latent_shape is not None and tuple(np.shape(z0)) != tuple(latent_shape):
        raise HarnessError(f"codec yields latents of shape {np.shape(z0)} but the denoiser expects {tuple(latent_shape)}")
    s = denoiser.schedule
    grid = make_grid(task.steps, s.T)
    zT = rollout_invert(z0, grid, denoiser, task.source_cond, s, query).final
    z = rollout_sample(zT, grid, bind(denoiser, task.target_cond, task.guidance), None, s, query).final
    return np.clip(codec.decode(z), 0.0, 1.0)


# -- purification ------------------------------------------------------------


def purify_gaussian(x, sigma: float, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise HarnessError("noise level must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + sigma * rng.normal(x.shape), 0.0, 1.0)


def bilinear_sample(img, rows, cols) -> np.ndarray:
    """Sample ``img`` at fractional ``(rows[i], cols[j])`` pairs on a product grid."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape

    def split(coords, n):
        coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
        lo = np.minimum(np.floor(coords).astype(int), n - 2) if n > 1 else np.zeros(len(coords), int)
        frac = coords - lo
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, frac

    r0, r1, fr = split(rows, h)
    c0, c1, fc = split(cols, w)
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def purify_crop_resize(x, crop_frac: float) -> np.ndarray:
    """Keep the central ``1 - crop_frac`` of each axis and stretch it back.

    Pixel centres are corner-aligned: output pixel ``i`` of ``n`` reads the
    source at ``c0 + i * (c1 - c0) / (n - 1)`` where ``[c0, c1]`` is the
    kept span in pixel coordinates.
    """
    if not 0 <= crop_frac < 1:
        raise HarnessError(f"crop fraction must lie in [0, 1), got {crop_frac}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise HarnessError("crop & resize expects a 2-D image")

    def coords(n):
        if n == 1:
            return np.zeros(1)
        c0 = 0.5 * crop_frac * (n - 1)
        return c0 + np.arange(n) * ((n - 1) - 2 * c0) / (n - 1)

    return bilinear_sample(x, coords(x.shape[0]), coords(x.shape[1]))


def purify_quantize(x, levels: int) -> np.ndarray:
    if int(levels) < 2:
        raise HarnessError(f"quantization needs at least 2 levels, got {levels}")
    q = int(levels) - 1
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * q) / q


# -- metrics -----------------------------------------------------------------

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise HarnessError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at 99 dB."""
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / m)))


def linf(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise HarnessError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b)))


def _ssim_window(a, b, c1, c2) -> float:
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = np.mean((a - ma) * (b - mb))
    return float((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Structural similarity with the usual constants.

    Images no larger than 8x8 are scored as a single window; larger ones
    average the score of every 8x8 window at stride 1.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise HarnessError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    h, w = a.shape
    if h <= SSIM_WINDOW and w <= SSIM_WINDOW:
        return _ssim_window(a, b, c1, c2)
    wh, ww = min(SSIM_WINDOW, h), min(SSIM_WINDOW, w)
    scores = [_ssim_window(a[i:i + wh, j:j + ww], b[i:i + wh, j:j + ww], c1, c2)
              for i in range(h - wh + 1) for j in range(w - ww + 1)]
    return float(np.mean(scores))


# -- PGM ---------------------------------------------------------------------


def write_pgm(path, img) -> None:
    """Write a unit-range image as binary 8-bit PGM (values rounded to the nearest level)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise HarnessError("PGM images must be 2-D")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head + data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HarnessError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise HarnessError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise HarnessError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise HarnessError(f"{path}: bad PGM header values {w}x{h} max {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - pos < nbytes:
        raise HarnessError(f"{path}: PGM payload truncated")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return data.astype(np.float64).reshape(h, w) / maxval


# -- benchmark ---------------------------------------------------------------

CSV_HEADER = ("image_id", "method", "edit", "purify", "psnr_src", "mse_src", "ssim_src",
              "linf_delta", "mse_vs_natural", "loss_final")
PURIFY_KINDS = ("none", "gaussian", "crop_resize", "quantize")
EDIT_TARGETS = ("same", "other")


@dataclass
class BenchRecord:
    image_id: str
    method: str
    edit: str
    purify: str
    psnr_src: float
    mse_src: float
    ssim_src: float
    linf_delta: float
    mse_vs_natural: float
    loss_final: float

    def row(self) -> list:
        return [self.image_id, self.method, self.edit, self.purify] + [
            _fmt(getattr(self, k)) for k in CSV_HEADER[4:]]


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


@dataclass
class BenchConfig:
    dataset: dict
    schedule: dict
    grid: dict
    model: dict
    attacks: list
    edits: list
    purifications: list
    seed: int = 0
    attack_defaults: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, obj: dict, base_dir: str = ".") -> "BenchConfig":
        missing = [k for k in ("dataset", "attacks", "edits") if k not in obj]
        if missing:
            raise HarnessError(f"benchmark config lacks keys: {', '.join(missing)}")
        known = {"dataset", "schedule", "grid", "model", "attacks", "edits", "purifications",
                 "seed", "attack_defaults"}
        extra = sorted(set(obj) - known)
        if extra:
            raise HarnessError(f"unknown benchmark config keys: {', '.join(extra)}")
        cfg = cls(
            dataset=dict(obj["dataset"]),
            schedule=dict(obj.get("schedule", {})),
            grid=dict(obj.get("grid", {"steps": 10})),
            model=dict(obj.get("model", {})),
            attacks=[_norm_attack(a) for a in obj["attacks"]],
            edits=[_norm_edit(e) for e in obj["edits"]],
            purifications=[_norm_purify(p) for p in obj.get("purifications", ["none"])],
            seed=int(obj.get("seed", 0)),
            attack_defaults=dict(obj.get("attack_defaults", {})),
            base_dir=base_dir,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "BenchConfig":
        with open(path) as fh:
            obj = json.load(fh)
        return cls.from_dict(obj, os.path.dirname(os.path.abspath(path)))

    def validate(self) -> None:
        for key in ("count", "size"):
            if int(self.dataset.get(key, 0)) < 1:
                raise HarnessError(f"dataset.{key} must be a positive integer")
        if not self.attacks or not self.edits:
            raise HarnessError("benchmark needs at least one attack and one edit")
        bad = [a["method"] for a in self.attacks if a["method"] not in OBJECTIVES]
        if bad:
            raise HarnessError(f"unknown attack methods {bad}; valid: {', '.join(OBJECTIVES)}")
        names = [a["name"] for a in self.attacks]
        if len(set(names)) != len(names):
            raise HarnessError(f"attack names must be unique, got {names}")
        for e in self.edits:
            if e["target"] not in EDIT_TARGETS:
                raise HarnessError(f"edit {e['name']!r}: target must be one of {EDIT_TARGETS}")
            EditTask(Condition(0), Condition(0), e["steps"], e["guidance"])
        for p in self.purifications:
            if p["kind"] not in PURIFY_KINDS:
                raise HarnessError(f"unknown purification {p['kind']!r}; valid: {', '.join(PURIFY_KINDS)}")
        for a in self.attacks:
            self.attack_config(a, 0)
        if "path" not in self.model and self.model.get("codec", "identity") not in ("identity", "linear"):
            raise HarnessError(f"unknown codec kind {self.model.get('codec')!r}")

    def attack_config(self, attack: dict, seed: int) -> AttackConfig:
        opts = {"traj_steps": int(self.grid.get("steps", 10))}
        opts.update(self.attack_defaults)
        opts.update({k: v for k, v in attack.items() if k not in ("name", "method")})
        try:
            return AttackConfig(objective=attack["method"], seed=seed, **opts)
        except TypeError as exc:
            raise HarnessError(f"attack {attack['name']!r}: {exc}") from exc


def _norm_attack(a) -> dict:
    if isinstance(a, str):
        a = {"method": a}
    a = dict(a)
    if "method" not in a:
        raise HarnessError(f"attack entry {a} lacks 'method'")
    a.setdefault("name", a["method"])
    return a


def _norm_edit(e) -> dict:
    if isinstance(e, str):
        e = {"target": e, "name": e}
    if not isinstance(e, dict):
        raise HarnessError(f"edit entries must be a target string or an object, got {e!r}")
    e = dict(e)
    e.setdefault("target", "other")
    e.setdefault("steps", 10)
    e.setdefault("guidance", 1.0)
    e.setdefault("name", f"{e['target']}_s{e['steps']}_w{e['guidance']:g}")
    return e


def _norm_purify(p) -> dict:
    if isinstance(p, str):
        p = {"kind": p}
    p = dict(p)
    p.setdefault("kind", "none")
    if "name" not in p:
        args = "".join(f"_{k}{p[k]:g}" for k in sorted(p) if k != "kind")
        p["name"] = p["kind"] + args
    return p


def apply_purification(x, entry: dict, rng: Rng) -> np.ndarray:
    kind = entry["kind"]
    if kind == "none":
        return np.asarray(x, dtype=np.float64)
    if kind == "gaussian":
        return purify_gaussian(x, float(entry.get("sigma", 0.1)), rng)
    if kind == "crop_resize":
        return purify_crop_resize(x, float(entry.get("crop_frac", 0.1)))
    if kind == "quantize":
        return purify_quantize(x, int(entry.get("levels", 16)))
    raise HarnessError(f"unknown purification {kind!r}")


@dataclass
class BenchModels:
    codec: object
    denoiser: object
    dataset: list


def build_models(cfg: BenchConfig) -> BenchModels:
    """Load or train the codec/denoiser pair and generate the evaluation images."""
    d = cfg.dataset
    images = make_toy_dataset(int(d["count"]), int(d["size"]), int(d.get("seed", 0)))
    m = cfg.model
    if "path" in m:
        path = m["path"] if os.path.isabs(m["path"]) else os.path.join(cfg.base_dir, m["path"])
        denoiser, codec = load_model(path)
        if codec is None:
            codec = IdentityCodec(np.shape(images[0][0]))
        return BenchModels(codec, denoiser, images)
    s = build_schedule(**{k: cfg.schedule[k] for k in ("T", "beta_start", "beta_end") if k in cfg.schedule})
    train = make_toy_dataset(int(m.get("train_count", 2048)), int(d["size"]), int(m.get("train_seed", 1)))
    if m.get("codec", "identity") == "linear":
        codec = train_linear_codec([x for x, _ in train], int(m.get("latent_dim", 16)))
    else:
        codec = IdentityCodec(np.shape(train[0][0]))
    denoiser = train_denoiser([(codec.encode(x), c) for x, c in train], s, int(m.get("epochs", 100)),
                              Rng(int(m.get("seed", 0))))
    return BenchModels(codec, denoiser, images)


def edit_task_for(edit: dict, cond: Condition, num_classes: int = 2) -> EditTask:
    target = cond if edit["target"] == "same" else Condition((cond.class_id + 1) % num_classes)
    return EditTask(cond, target, int(edit["steps"]), float(edit["guidance"]))


_WORKER = {}


def _init_worker(cfg, models, natural):
    _WORKER.update(cfg=cfg, models=models, natural=natural)


def _run_cell(job):
    image_index, attack_index = job
    return bench_cell(_WORKER["cfg"], _WORKER["models"], _WORKER["natural"], image_index, attack_index)


def bench_cell(cfg: BenchConfig, models: BenchModels, natural: dict, image_index: int, attack_index: int):
    """Attack one image with one method and score every (purification, edit) pair."""
    x, cond = models.dataset[image_index]
    attack = cfg.attacks[attack_index]
    rng = Rng(cfg.seed).split("cell", image_index, attack["name"])
    acfg = cfg.attack_config(attack, int(rng.split("attack").integers(0, 2 ** 31)))
    ctx = AttackContext(models.codec, models.denoiser, cond)
    result = immunize(x, acfg, ctx)
    image_id = f"{image_index:04d}"
    records = []
    for purify in cfg.purifications:
        xp = apply_purification(result.immunized, purify, rng.split("purify", purify["name"]))
        for e_index, edit in enumerate(cfg.edits):
            out = edit_ddim(xp, edit_task_for(edit, cond), models.codec, models.denoiser)
            records.append(BenchRecord(
                image_id, attack["name"], edit["name"], purify["name"],
                psnr(x, out), mse(x, out), ssim(x, out), linf(result.immunized, x),
                mse(out, natural[image_index, e_index]), result.final_loss))
    return records


def run_benchmark(cfg: BenchConfig, jobs: int = 1, models: BenchModels | None = None) -> list:
    """Every per-image record in a fixed order, followed by per-method medians."""
    if not isinstance(cfg, BenchConfig):
        cfg = BenchConfig.from_dict(cfg)
    models = models if models is not None else build_models(cfg)
    natural = {}
    for i, (x, cond) in enumerate(models.dataset):
        for j, edit in enumerate(cfg.edits):
            natural[i, j] = edit_ddim(x, edit_task_for(edit, cond), models.codec, models.denoiser)
    cells = [(i, a) for i in range(len(models.dataset)) for a in range(len(cfg.attacks))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg, models, natural)) as pool:
            parts = list(pool.map(_run_cell, cells, chunksize=max(1, len(cells) // (4 * jobs))))
    else:
        parts = [bench_cell(cfg, models, natural, i, a) for i, a in cells]
    records = [r for part in parts for r in part]
    return records + aggregate(records)


def aggregate(records) -> list:
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.edit, r.purify), []).append(r)
    out = []
    for (method, edit, purify), rows in groups.items():
        med = {k: float(np.median([getattr(r, k) for r in rows])) for k in CSV_HEADER[4:]}
        out.append(BenchRecord("median", method, edit, purify, **med))
    return out


def medians(records) -> dict:
    """``{(method, edit, purify): BenchRecord}`` for the aggregate rows."""
    return {(r.method, r.edit, r.purify): r for r in records if r.image_id == "median"}


def to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()
