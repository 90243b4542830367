"""Run configuration, training loop, benchmark evaluation, and ablations.

A run is a single JSON config document.  Training is fully deterministic
under a fixed seed: data generation, splits, batch order, and parameter
init all derive from it, and parameters are snapped to float32 values
before the final loss is logged so a reloaded checkpoint reproduces that
loss bit-for-bit.

The full-scale reference values this desk-scale setup stands in for are
carried as inert metadata in every config (``reference_scale``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import formats, metrics, synth
from .autodiff import ContractViolation, Tensor
from .encoders import EncoderConfig
from .losses import LossWeights, area_regularization, infonce_symmetric, total_loss
from .model import SoundLocalizer
from .optim import Adam
from .prompting import PromptConfig
from .synth import GeneratorConfig, SceneSample

# benchmark name (CLI / report) -> scene generator mode
BENCHMARKS = {
    "s4-analog": "s4",
    "ms3-analog": "ms3",
    "extended-analog": "extended",
    "heard": "heard",
    "unheard": "unheard",
}

REPORT_COLUMNS = ("benchmark", "ciou", "auc", "miou", "fscore", "ap", "max_f1", "loc_acc")

# Full-scale values from the setup this miniature mirrors; provenance only.
REFERENCE_SCALE = {
    "image_size": 352,
    "audio_seconds": 10,
    "audio_sample_rate_hz": 16000,
    "epochs": 20,
    "batch_size": 16,
    "learning_rate": 1e-3,
    "weight_decay": 1e-5,
    "trainable_params_approx": 2_380_000,
}


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops a run; statistics are on disk."""


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 16
    epochs: int = 20
    train_samples: int = 512
    eval_samples: int = 64
    val_fraction: float = 0.2
    warmup: bool = True
    warmup_epochs: int = 3
    warmup_lr: float = 3e-3
    out_dir: str = "runs/default"
    reference_scale: dict = field(default_factory=lambda: dict(REFERENCE_SCALE))

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ContractViolation(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be >= 2 (contrastive pairs)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractViolation("val_fraction outside [0, 1)")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        gen = d["generator"]
        gen["single_radius"] = list(gen["single_radius"])
        gen["multi_radius"] = list(gen["multi_radius"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        prm = PromptConfig(**d.pop("prompt", {}))
        lw = LossWeights(**d.pop("loss", {}))
        gen_d = dict(d.pop("generator", {}))
        for key in ("single_radius", "multi_radius"):
            if key in gen_d:
                gen_d[key] = tuple(gen_d[key])
        gen = GeneratorConfig(**gen_d)
        opt = OptimConfig(**d.pop("optimizer", {}))
        return cls(encoder=enc, prompt=prm, loss=lw, generator=gen, optimizer=opt, **d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    warmup_stats: dict = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""
    final_loss: float = float("nan")
    wall_clock_sec: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


# -- small helpers -----------------------------------------------------------

def stack_batch(samples: list[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    audios = np.stack([s.audio for s in samples])
    return images, audios


def parameter_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def build_model(cfg: RunConfig) -> SoundLocalizer:
    return SoundLocalizer(cfg.encoder, cfg.prompt, seed=cfg.seed, dtype=cfg.np_dtype)


def _snap_float32(model: SoundLocalizer) -> None:
    """Round every parameter to its nearest float32 value (keeping dtype)."""
    for p in model.parameters().values():
        p.data = p.data.astype(np.float32).astype(model.dtype)


def batch_loss(model: SoundLocalizer, images: np.ndarray, audios: np.ndarray,
               weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    percept = model.perceive(images, audios)
    s_img, s_feat, stats, _ = model.similarity_tables(percept)
    l_img = infonce_symmetric(s_img, weights.temperature)
    l_feat = infonce_symmetric(s_feat, weights.temperature)
    l_reg = area_regularization(stats, weights.p_plus, weights.p_minus)
    total = total_loss(l_img, l_feat, l_reg, weights)
    parts = {"l_img": l_img.item(), "l_feat": l_feat.item(),
             "l_reg": l_reg.item(), "total": total.item()}
    return total, parts


# -- encoder warmup ----------------------------------------------------------

def warmup_image_encoder(model: SoundLocalizer, samples: list[SceneSample],
                         cfg: RunConfig) -> dict:
    """Supervised cell-classification alignment of the image encoder.

    Cell features are scored against learnable class prototypes (classes
    plus one background slot); cross-entropy on the cell's center-pixel
    label shapes the encoder before it is frozen.  Prototypes are
    discarded afterwards.
    """
    k = cfg.generator.num_classes
    d = cfg.encoder.embed_dim
    g, p = cfg.encoder.grid_size, cfg.encoder.patch_size
    centers = np.arange(g) * p + p // 2
    labels = np.stack([
        np.where(s.class_map[np.ix_(centers, centers)] < 0, k,
                 s.class_map[np.ix_(centers, centers)]).reshape(-1)
        for s in samples
    ])

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    protos = Tensor(rng.normal(0.0, 0.02, (k + 1, d)).astype(model.dtype),
                    requires_grad=True)
    enc_params = {f"image_encoder.{n}": t
                  for n, t in model.image_encoder.parameters().items()}
    for t in enc_params.values():
        t.requires_grad = True
    opt = Adam({**enc_params, "prototypes": protos}, lr=cfg.warmup_lr)

    n = len(samples)
    losses: list[float] = []
    acc = 0.0
    for _ in range(cfg.warmup_epochs):
        order = rng.permutation(n)
        correct = total = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size == 0:
                continue
            images, _ = stack_batch([samples[i] for i in idx])
            images_t = ad.constant(images.astype(model.dtype))
            grid, _ = model.image_encoder.forward(images_t)
            flat = grid.reshape(idx.size * g * g, d)
            logits = flat @ ad.transpose(protos, (1, 0))
            logp = ad.log_softmax(logits, axis=-1)
            y = labels[idx].reshape(-1)
            nll = -(logp[np.arange(y.size), y].mean())
            ad.backward(nll)
            opt.step()
            opt.zero_grad()
            losses.append(nll.item())
            correct += int((logits.data.argmax(axis=-1) == y).sum())
            total += y.size
        acc = correct / total if total else 0.0
    return {"epochs": cfg.warmup_epochs, "final_cell_accuracy": acc,
            "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None}


# -- training ----------------------------------------------------------------

def train(cfg: RunConfig, write_artifacts: bool = True
          ) -> tuple[SoundLocalizer, TrainLog]:
    """Full training run; returns the model plus its log.

    Artifacts under ``cfg.out_dir``: ``config.json``, ``model.splt``,
    ``trainlog.json`` (and ``abort_stats.json`` if the loss went
    non-finite).
    """
    t_start = time.perf_counter()
    out = Path(cfg.out_dir)
    if write_artifacts:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")

    scenes = synth.make_batch(cfg.generator, cfg.train_samples, "train",
                              base_seed=cfg.seed)
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    perm = split_rng.permutation(len(scenes))
    n_val = int(round(cfg.val_fraction * len(scenes)))
    val_scenes = [scenes[i] for i in perm[:n_val]]
    train_scenes = [scenes[i] for i in perm[n_val:]]
    if not train_scenes:
        raise ContractViolation("validation split left no training samples")

    model = build_model(cfg)
    log = TrainLog()
    if cfg.warmup and cfg.encoder.frozen:
        log.warmup_stats = warmup_image_encoder(model, train_scenes, cfg)
    model.apply_freezing()
    # Freeze on float32-representable values so the end-of-run snap (needed
    # for exact checkpoint round-trips) cannot move frozen parameters.
    _snap_float32(model)

    log.frozen_checksum_before = parameter_checksum(model.encoder_parameters())
    params = model.trainable_parameters()
    log.trainable_params = sum(p.size for p in params.values())
    log.total_params = model.num_params()

    opt = Adam(params, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay,
               beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
               eps=cfg.optimizer.eps)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))

    step = 0
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(train_scenes))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            images, audios = stack_batch([train_scenes[i] for i in idx])
            total, parts = batch_loss(model, images, audios, cfg.loss)
            if not np.isfinite(parts["total"]):
                _dump_abort_stats(out if write_artifacts else None, step, parts, model)
                raise TrainingAborted(
                    f"non-finite loss at step {step}: {parts}")
            ad.backward(total)
            opt.step()
            opt.zero_grad()
            log.steps.append({"epoch": epoch, "step": step, **parts})
            step += 1
        log.val_history.append(_validation_entry(model, val_scenes, epoch))

    _snap_float32(model)
    log.frozen_checksum_after = parameter_checksum(model.encoder_parameters())

    # Canonical post-snap loss on a fixed batch; a reloaded checkpoint
    # must reproduce this number.
    probe = (val_scenes or train_scenes)[: cfg.batch_size]
    with ad.no_grad():
        _, parts = batch_loss(model, *stack_batch(probe), cfg.loss)
    log.final_loss = parts["total"]
    log.wall_clock_sec = time.perf_counter() - t_start

    if write_artifacts:
        save_model(out / "model.splt", model)
        (out / "trainlog.json").write_text(json.dumps(log.as_dict(), indent=1) + "\n")
    return model, log


def final_loss_of(model: SoundLocalizer, cfg: RunConfig) -> float:
    """Recompute the canonical post-training loss (see ``train``)."""
    scenes = synth.make_batch(cfg.generator, cfg.train_samples, "train",
                              base_seed=cfg.seed)
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    perm = split_rng.permutation(len(scenes))
    n_val = int(round(cfg.val_fraction * len(scenes)))
    val_scenes = [scenes[i] for i in perm[:n_val]]
    train_scenes = [scenes[i] for i in perm[n_val:]]
    probe = (val_scenes or train_scenes)[: cfg.batch_size]
    with ad.no_grad():
        _, parts = batch_loss(model, *stack_batch(probe), cfg.loss)
    return parts["total"]


def _validation_entry(model: SoundLocalizer, val_scenes: list[SceneSample],
                      epoch: int, cap: int = 32) -> dict:
    subset = val_scenes[:cap]
    if not subset:
        return {"epoch": epoch}
    evs = predict_eval_samples(model, subset)
    miou, _ = metrics.miou_fscore(evs)
    return {"epoch": epoch, "ciou": metrics.ciou(evs), "miou": miou}


def _dump_abort_stats(out: Path | None, step: int, parts: dict,
                      model: SoundLocalizer) -> None:
    stats = {"step": step, "loss_parts": parts, "params": {}}
    for name, p in model.parameters().items():
        entry = {"data_absmax": float(np.abs(p.data).max()),
                 "data_finite": bool(np.isfinite(p.data).all())}
        if p.grad is not None:
            entry["grad_absmax"] = float(np.abs(p.grad).max())
            entry["grad_finite"] = bool(np.isfinite(p.grad).all())
        stats["params"][name] = entry
    if out is not None:
        (out / "abort_stats.json").write_text(json.dumps(stats, indent=1) + "\n")


# -- checkpoint plumbing -----------------------------------------------------

def save_model(path: str | Path, model: SoundLocalizer) -> None:
    ckpt_io.save_checkpoint(path, {k: v.data for k, v in model.parameters().items()})


def load_model(cfg: RunConfig, path: str | Path) -> SoundLocalizer:
    model = build_model(cfg)
    model.load_state(ckpt_io.load_checkpoint(path))
    model.apply_freezing()
    return model


# -- evaluation --------------------------------------------------------------

def benchmark_scenes(cfg: RunConfig, benchmark: str) -> list[SceneSample]:
    if benchmark not in BENCHMARKS:
        raise ContractViolation(
            f"benchmark must be one of {sorted(BENCHMARKS)}, got {benchmark!r}")
    return synth.make_batch(cfg.generator, cfg.eval_samples,
                            BENCHMARKS[benchmark], base_seed=cfg.seed)


def predict_eval_samples(model: SoundLocalizer, scenes: list[SceneSample],
                         chunk: int = 32) -> list[metrics.EvalSample]:
    out = []
    for start in range(0, len(scenes), chunk):
        part = scenes[start:start + chunk]
        preds = model.predict_masks(*stack_batch(part))
        for s, pred in zip(part, preds):
            out.append(metrics.EvalSample(
                pred_mask=pred.astype(np.float64), gt_mask=s.gt_mask,
                flags=s.flags, gt_box_mask=s.gt_box_mask))
    return out


def evaluate(model: SoundLocalizer, cfg: RunConfig, benchmark: str,
             out_dir: str | Path | None = None,
             proto: metrics.MetricProtocol | None = None) -> metrics.MetricsReport:
    """Score one benchmark; optionally write the CSV report and JSON twin."""
    scenes = benchmark_scenes(cfg, benchmark)
    evs = predict_eval_samples(model, scenes)
    report = metrics.compute_report(evs, proto)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out, benchmark, report, evs)
    return report


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def write_report(out: Path, benchmark: str, report: metrics.MetricsReport,
                 evs: list[metrics.EvalSample]) -> None:
    row = report.as_dict()
    with (out / f"report_{benchmark}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerow([benchmark] + [_fmt(row[c]) for c in REPORT_COLUMNS[1:]])
    twin = {
        "benchmark": benchmark,
        "metrics": row,
        "metadata": report.metadata,
        "per_sample": [
            {"iou": report.per_sample_iou[i],
             "confidence": evs[i].confidence,
             "flags": evs[i].flags.as_dict()}
            for i in range(len(evs))
        ],
    }
    (out / f"report_{benchmark}.json").write_text(json.dumps(twin, indent=1) + "\n")


# -- ablations ---------------------------------------------------------------

ABLATION_DIMENSIONS = ("context_length", "va_position", "fusion", "epochs")


def token_order_label(m: int, position: int) -> str:
    """Printable prompt layout, audio token bracketed at its slot."""
    tokens = [f"[V_{i}]" for i in range(1, m + 1)]
    tokens.insert(position - 1, "[V_A]")
    return "".join(tokens)


def _variant_config(cfg: RunConfig, dimension: str, value) -> RunConfig:
    d = cfg.to_dict()
    if dimension == "context_length":
        d["prompt"]["context_length"] = int(value)
        d["prompt"]["va_position"] = int(value) + 1
    elif dimension == "va_position":
        d["prompt"]["context_length"] = 4
        d["prompt"]["va_position"] = int(value)
    elif dimension == "fusion":
        if value not in ("none", "fused", "ensemble"):
            raise ContractViolation(f"fusion value must be none/fused/ensemble, got {value!r}")
        d["prompt"]["fusion_mode"] = value
    elif dimension == "epochs":
        d["epochs"] = int(value)
    else:
        raise ContractViolation(
            f"dimension must be one of {ABLATION_DIMENSIONS}, got {dimension!r}")
    d["out_dir"] = str(Path(cfg.out_dir) / f"ablate_{dimension}" / str(value))
    return RunConfig.from_dict(d)


def ablate(cfg: RunConfig, dimension: str, values: list,
           out_dir: str | Path | None = None) -> list[dict]:
    """One train+evaluate per value; emits a table mirroring the ablation
    tables' layout (rows = values, columns = label fields + ciou + auc)."""
    rows = []
    for value in values:
        sub = _variant_config(cfg, dimension, value)
        model, _ = train(sub, write_artifacts=False)
        report = evaluate(model, sub, "s4-analog")
        rows.append(_ablation_row(dimension, value, sub, report))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_ablation_table(out, dimension, rows)
    return rows


def _ablation_row(dimension: str, value, cfg: RunConfig,
                  report: metrics.MetricsReport) -> dict:
    if dimension == "context_length":
        return {"ctx": f"ctx={value}", "ciou": report.ciou, "auc": report.auc}
    if dimension == "va_position":
        return {"ctx": "ctx=4", "va_index": f"pos={value}",
                "token_order": token_order_label(4, int(value)),
                "ciou": report.ciou, "auc": report.auc}
    if dimension == "epochs":
        return {"ctx": f"ctx={cfg.prompt.context_length}", "epochs": int(value),
                "ciou": report.ciou, "auc": report.auc}
    return {"method": "soundloc",
            "fusion": "yes" if value == "fused" else "",
            "ensemble": "yes" if value == "ensemble" else "",
            "ciou": report.ciou, "auc": report.auc}


def _write_ablation_table(out: Path, dimension: str, rows: list[dict]) -> None:
    columns = list(rows[0].keys())
    with (out / f"ablation_{dimension}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else _fmt(r[c])
                        for c in columns])
    (out / f"ablation_{dimension}.json").write_text(
        json.dumps(rows, indent=1) + "\n")


# -- rendering ---------------------------------------------------------------

def render_heatmaps(model: SoundLocalizer, scenes: list[SceneSample],
                    out_dir: str | Path) -> list[dict]:
    """Write predicted/GT/difference masks per sample plus an index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evs = predict_eval_samples(model, scenes)
    index = []
    for i, ev in enumerate(evs):
        stem = f"sample_{i:05d}"
        files = {"pred": f"{stem}_pred.pgm", "gt": f"{stem}_gt.pgm",
                 "diff": f"{stem}_diff.pgm"}
        gt = ev.gt_mask.astype(np.float64)
        formats.write_pgm(out / files["pred"], ev.pred_mask)
        formats.write_pgm(out / files["gt"], gt)
        formats.write_pgm(out / files["diff"], np.abs(ev.pred_mask - gt))
        index.append({"id": i, "files": files,
                      "iou": metrics.iou(metrics.binarize_half_max(ev.pred_mask),
                                         ev.gt_mask)})
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return index
