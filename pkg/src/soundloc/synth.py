"""Synthetic audio-visual scenes with exact ground truth.

Each of K classes owns a striped disc appearance and a two-tone audio
signature whose frequencies sit exactly on filterbank band centers, so
band energies of mixtures are additive and silence is exactly zero.
Scenes are fully determined by a seed: same spec, same bytes.

Benchmarks are emulated as modes: single-source (``train``/``s4``),
multi-source (``ms3``), a negatives-heavy ``extended`` mix (matched /
mismatched-audio / silent), and the open-set ``heard``/``unheard`` class
splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audiofeat, formats
from .autodiff import ContractViolation

MODES = ("train", "s4", "ms3", "extended", "heard", "unheard")

# (bright, dark) stripe colors per class; chosen for pairwise contrast.
PALETTE = (
    ((0.90, 0.10, 0.10), (0.50, 0.05, 0.05)),
    ((0.10, 0.90, 0.10), (0.05, 0.50, 0.05)),
    ((0.15, 0.25, 0.95), (0.05, 0.10, 0.50)),
    ((0.90, 0.90, 0.10), (0.50, 0.50, 0.05)),
    ((0.90, 0.10, 0.90), (0.50, 0.05, 0.50)),
    ((0.10, 0.90, 0.90), (0.05, 0.50, 0.50)),
    ((0.95, 0.55, 0.10), (0.55, 0.30, 0.05)),
    ((0.60, 0.30, 0.90), (0.35, 0.15, 0.50)),
)

MAX_PLACEMENT_TRIES = 200
OVERLAP_LIMIT = 0.3


class SceneSpecError(ContractViolation):
    """The scene description violates placement or class constraints."""


@dataclass
class GeneratorConfig:
    """Scene universe. ``train_class_count`` defaults to all classes;
    open-set (heard/unheard) experiments shrink it, typically to half."""
    num_classes: int = 8
    image_size: int = 32
    single_radius: tuple[int, int] = (7, 11)
    multi_radius: tuple[int, int] = (4, 6)
    snr_db: float = 30.0
    mismatch_fraction: float = 0.25
    silent_fraction: float = 0.25
    train_class_count: int = 8

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ContractViolation(
                f"num_classes must be in [1, {len(PALETTE)}], got {self.num_classes}")
        if self.num_classes > audiofeat.N_BANDS // 2:
            raise ContractViolation(
                f"at most {audiofeat.N_BANDS // 2} classes have audio signatures")
        if not 0 < self.train_class_count <= self.num_classes:
            raise ContractViolation("train_class_count outside [1, num_classes]")
        if self.mismatch_fraction + self.silent_fraction > 1.0:
            raise ContractViolation("extended-mode fractions exceed 1")

    @property
    def train_class_set(self) -> tuple[int, ...]:
        return tuple(range(self.train_class_count))

    @property
    def test_class_set(self) -> tuple[int, ...]:
        return tuple(range(self.train_class_count, self.num_classes))


@dataclass
class SceneSpec:
    seed: int
    num_classes: int = 8
    objects: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)
    audible_class_ids: tuple[int, ...] = ()
    silent: bool = False


@dataclass
class SceneFlags:
    matched: bool
    visible: bool
    audible: bool

    def as_dict(self) -> dict[str, bool]:
        return {"matched": self.matched, "visible": self.visible, "audible": self.audible}

    @property
    def positive(self) -> bool:
        return self.matched and self.visible and self.audible


@dataclass
class SceneSample:
    image: np.ndarray      # (S, S, 3) float64 in [0, 1]
    audio: np.ndarray      # (8000,) float64
    gt_mask: np.ndarray    # (S, S) bool: audible-and-visible object pixels
    gt_box_mask: np.ndarray  # (S, S) bool: union of bounding boxes of the same
    class_map: np.ndarray  # (S, S) int: class id per pixel, -1 for background
    flags: SceneFlags
    class_ids: tuple[int, ...]
    audible_ids: tuple[int, ...]
    seed: int


def _disc_mask(size: int, center: tuple[int, int], radius: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2


def _paint_disc(image: np.ndarray, mask: np.ndarray, class_id: int) -> None:
    bright, dark = PALETTE[class_id]
    size = image.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.pi * class_id / len(PALETTE)
    period = 3 + class_id % 3
    phase = np.floor((np.cos(theta) * xx + np.sin(theta) * yy) / period).astype(int)
    stripe = phase % 2 == 0
    for ch in range(3):
        plane = image[:, :, ch]
        plane[mask & stripe] = bright[ch]
        plane[mask & ~stripe] = dark[ch]


def _validate_spec(spec: SceneSpec) -> None:
    if not spec.objects and not spec.silent and not spec.audible_class_ids:
        raise SceneSpecError("scene has no objects and no audio")
    for cid, _, _ in spec.objects:
        if not 0 <= cid < spec.num_classes:
            raise SceneSpecError(f"object class {cid} outside [0, {spec.num_classes})")
    for cid in spec.audible_class_ids:
        if not 0 <= cid < spec.num_classes:
            raise SceneSpecError(f"audible class {cid} outside [0, {spec.num_classes})")
    if spec.silent and spec.audible_class_ids:
        raise SceneSpecError("silent scene cannot list audible classes")


def _validate_placement(spec: SceneSpec, size: int) -> list[np.ndarray]:
    masks = []
    for cid, (cx, cy), r in spec.objects:
        if r < 2:
            raise SceneSpecError(f"radius {r} below minimum 2")
        if not (r <= cx <= size - 1 - r and r <= cy <= size - 1 - r):
            raise SceneSpecError(f"disc at {(cx, cy)} radius {r} leaves the image")
        masks.append(_disc_mask(size, (cx, cy), r))
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            inter = np.logical_and(masks[i], masks[j]).sum()
            smaller = min(masks[i].sum(), masks[j].sum())
            if smaller and inter / smaller > OVERLAP_LIMIT:
                raise SceneSpecError(
                    f"objects {i} and {j} overlap by {inter / smaller:.0%} of the smaller")
    return masks


def _synthesize_audio(audible: tuple[int, ...], silent: bool, snr_db: float,
                      rng: np.random.Generator) -> np.ndarray:
    if silent or not audible:
        return np.zeros(audiofeat.CLIP_LEN)
    n = np.arange(audiofeat.CLIP_LEN)
    signal = np.zeros(audiofeat.CLIP_LEN)
    power = 0.0
    for cid in audible:
        for bin_idx in audiofeat.class_tone_bins(cid):
            amp = rng.uniform(0.8, 1.2)
            phase = rng.uniform(0.0, 2 * np.pi)
            signal += amp * np.sin(2 * np.pi * bin_idx * n / audiofeat.FRAME_LEN + phase)
            power += amp ** 2 / 2.0
    noise_var = power / 10.0 ** (snr_db / 10.0)
    return signal + rng.normal(0.0, np.sqrt(noise_var), size=n.shape)


def generate_scene(spec: SceneSpec, cfg: GeneratorConfig) -> SceneSample:
    """Render a scene spec into pixels, samples, and ground truth."""
    _validate_spec(spec)
    size = cfg.image_size
    object_masks = _validate_placement(spec, size)
    # Sub-key 1 keeps the render stream distinct from the spec-building
    # stream in make_batch, which consumes SeedSequence(seed) directly.
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))

    image = 0.08 + 0.10 * rng.random((size, size, 3))
    gt = np.zeros((size, size), dtype=bool)
    boxes = np.zeros((size, size), dtype=bool)
    class_map = np.full((size, size), -1, dtype=np.int64)
    placed = set()
    for (cid, center, radius), mask in zip(spec.objects, object_masks):
        _paint_disc(image, mask, cid)
        class_map[mask] = cid
        placed.add(cid)
        if cid in spec.audible_class_ids:
            gt |= mask
            x0, x1 = center[0] - radius, center[0] + radius
            y0, y1 = center[1] - radius, center[1] + radius
            boxes[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = True

    audio = _synthesize_audio(spec.audible_class_ids, spec.silent, cfg.snr_db, rng)
    audible = bool(spec.audible_class_ids) and not spec.silent
    visible = all(cid in placed for cid in spec.audible_class_ids) if audible \
        else bool(spec.objects)
    flags = SceneFlags(matched=audible and visible, visible=visible, audible=audible)
    return SceneSample(image=image, audio=audio, gt_mask=gt, gt_box_mask=boxes,
                       class_map=class_map, flags=flags,
                       class_ids=tuple(cid for cid, _, _ in spec.objects),
                       audible_ids=spec.audible_class_ids, seed=spec.seed)


def _sample_seed(base_seed: int, mode: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, MODES.index(mode), index])
    return int(ss.generate_state(1)[0])


def _place_objects(rng: np.random.Generator, cfg: GeneratorConfig, count: int,
                   classes: list[int]) -> list[tuple[int, tuple[int, int], int]]:
    lo, hi = cfg.single_radius if count == 1 else cfg.multi_radius
    size = cfg.image_size
    for _ in range(MAX_PLACEMENT_TRIES):
        objects = []
        masks = []
        ok = True
        for cid in classes[:count]:
            r = int(rng.integers(lo, hi + 1))
            cx = int(rng.integers(r, size - r))
            cy = int(rng.integers(r, size - r))
            mask = _disc_mask(size, (cx, cy), r)
            for other in masks:
                inter = np.logical_and(mask, other).sum()
                smaller = min(mask.sum(), other.sum())
                if inter / smaller > OVERLAP_LIMIT:
                    ok = False
                    break
            if not ok:
                break
            objects.append((cid, (cx, cy), r))
            masks.append(mask)
        if ok:
            return objects
    raise SceneSpecError(f"could not place {count} objects in {MAX_PLACEMENT_TRIES} tries")


def _build_spec(rng: np.random.Generator, cfg: GeneratorConfig, mode: str,
                seed: int, kind: str, class_pool: list[int]) -> SceneSpec:
    if mode == "ms3":
        count = int(rng.integers(2, min(4, len(class_pool) + 1)))
        classes = list(rng.choice(class_pool, size=count, replace=False))
        objects = _place_objects(rng, cfg, count, classes)
        return SceneSpec(seed=seed, num_classes=cfg.num_classes, objects=objects,
                         audible_class_ids=tuple(int(c) for c in classes))
    target = int(rng.choice(class_pool))
    objects = _place_objects(rng, cfg, 1, [target])
    if kind == "matched":
        return SceneSpec(seed=seed, num_classes=cfg.num_classes, objects=objects,
                         audible_class_ids=(target,))
    if kind == "mismatched":
        others = [c for c in range(cfg.num_classes) if c != target]
        heard = int(rng.choice(others))
        return SceneSpec(seed=seed, num_classes=cfg.num_classes, objects=objects,
                         audible_class_ids=(heard,))
    if kind == "silent":
        return SceneSpec(seed=seed, num_classes=cfg.num_classes, objects=objects,
                         audible_class_ids=(), silent=True)
    raise ContractViolation(f"unknown sample kind {kind!r}")


def make_batch(cfg: GeneratorConfig, batch_size: int, mode: str,
               base_seed: int) -> list[SceneSample]:
    """Generate ``batch_size`` scenes for one benchmark mode."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "unheard" and not cfg.test_class_set:
        raise ContractViolation("unheard mode requires a nonempty held-out class set")

    if mode in ("train", "heard"):
        pool = list(cfg.train_class_set)
    elif mode == "unheard":
        pool = list(cfg.test_class_set)
    else:
        pool = list(range(cfg.num_classes))

    kinds = ["matched"] * batch_size
    if mode == "extended":
        n_mismatch = round(cfg.mismatch_fraction * batch_size)
        n_silent = round(cfg.silent_fraction * batch_size)
        for i in range(n_mismatch):
            kinds[i] = "mismatched"
        for i in range(n_mismatch, n_mismatch + n_silent):
            kinds[i] = "silent"

    samples = []
    for i in range(batch_size):
        seed = _sample_seed(base_seed, mode, i)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        spec = _build_spec(rng, cfg, mode, seed, kinds[i], pool)
        samples.append(generate_scene(spec, cfg))
    return samples


def dump_dataset(samples: list[SceneSample], out_dir: str | Path) -> Path:
    """Write images, masks, and audio plus an ``index.json`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        formats.write_ppm(out / f"{stem}_image.ppm", s.image)
        formats.write_pgm(out / f"{stem}_gt.pgm", s.gt_mask.astype(np.float64))
        formats.write_audio(out / f"{stem}_audio.spla", s.audio)
        index.append({
            "id": i,
            "files": {"image": f"{stem}_image.ppm", "gt": f"{stem}_gt.pgm",
                      "audio": f"{stem}_audio.spla"},
            "flags": s.flags.as_dict(),
            "class_ids": list(s.class_ids),
            "audible_ids": list(s.audible_ids),
            "seed": s.seed,
        })
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return out
