"""Training loop: batch composition, SGD with momentum, inverse-decay LR.

Every step samples a handful of source queries (exactly once each per epoch,
trailing partial batch dropped) and target queries (an independently shuffled
stream that reshuffles on exhaustion), attaches one mined view per query, and
pushes all role images through one shared parameter set. Four independent rng
streams (source sampling, target sampling, view choice, augmentation) keep
runs reproducible: the metrics byte stream is a pure function of
(config, manifests, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model
from .errors import DataError, NumericError
from .evaluation import evaluate
from .imaging import (
    AugPolicy,
    load_image,
    resize_normalize,
    strong_augment,
    weak_augment,
)
from .losses import LossConfig
from .manifest import DatasetManifest, manifest_sha256
from .viewmining import DEFAULT_BINS, DEFAULT_SIDE, ViewSet, mine_view_sets

MINING_METHODS = ("sgvm", "random")


@dataclass
class TrainConfig:
    epochs: int = 20
    source_batch: int = 4
    target_batch: int = 4
    lr0: float = 3e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    alpha: float = 8.0
    beta: float = 0.75
    n_views: int = 5
    mining: str = "sgvm"
    input_side: int = 32
    seed: int = 0
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    nmi_bins: int = DEFAULT_BINS
    nmi_side: int = DEFAULT_SIDE
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.source_batch < 1 or self.target_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("weight_decay, alpha and beta must be non-negative")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.mining not in MINING_METHODS:
            raise ValueError(f"mining must be one of {MINING_METHODS}, got {self.mining!r}")
        if self.input_side % 4 != 0 or self.input_side < 8:
            raise ValueError("input_side must be a multiple of 4 and >= 8")
        if self.nmi_bins < 2 or self.nmi_side < 2:
            raise ValueError("nmi_bins and nmi_side must be >= 2")

    @property
    def tau(self) -> float:
        return self.loss.tau


# --- flat key = value config files -----------------------------------------

_INT_KEYS = ("epochs", "source_batch", "target_batch", "n_views", "input_side",
             "seed", "nmi_bins", "nmi_side")
_FLOAT_KEYS = ("lr0", "momentum", "weight_decay", "alpha", "beta")
_TRIPLE_KEYS = ("norm_mean", "norm_std")
_STR_KEYS = ("mining",)
_LOSS_FLOAT_KEYS = ("tau",)
_LOSS_BOOL_KEYS = ("source_view", "target_view", "target_self")
_LOSS_STR_KEYS = ("label_mode", "view_aug", "source_view_supervision")

CONFIG_KEYS = (_INT_KEYS + _FLOAT_KEYS + _TRIPLE_KEYS + _STR_KEYS
               + _LOSS_FLOAT_KEYS + _LOSS_BOOL_KEYS + _LOSS_STR_KEYS)

# named loss-term configurations; values are flat config overrides
PRESETS: dict[str, dict[str, str]] = {
    "source-only": {
        "source_view": "false", "target_view": "false", "target_self": "false",
    },
    "fixmatch": {
        "source_view": "false", "target_view": "false", "target_self": "true",
        "label_mode": "hard", "tau": "0.8", "view_aug": "strong",
    },
    "mv-match-hard": {
        "source_view": "true", "target_view": "true", "target_self": "true",
        "label_mode": "hard", "tau": "0.8", "view_aug": "strong",
    },
    "mv-match-soft": {
        "source_view": "true", "target_view": "true", "target_self": "true",
        "label_mode": "soft", "tau": "0.0", "view_aug": "strong",
    },
    "wa2-only": {
        "source_view": "true", "target_view": "true", "target_self": "false",
        "view_aug": "weak",
    },
}


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise DataError(f"config key {key}: expected a boolean, got {value!r}")


def _parse_triple(value: str, key: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 3:
        raise DataError(f"config key {key}: expected three comma-separated floats, got {value!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise DataError(f"config key {key}: {exc}") from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """key = value lines into a raw string mapping; '#' starts a comment."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def config_from_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from flat string pairs layered over ``base``."""
    cfg = base if base is not None else TrainConfig()
    kwargs: dict = {}
    loss_kwargs: dict = {}
    for key, value in pairs.items():
        if key in _INT_KEYS:
            try:
                kwargs[key] = int(value)
            except ValueError as exc:
                raise DataError(f"config key {key}: {exc}") from exc
        elif key in _FLOAT_KEYS:
            try:
                kwargs[key] = float(value)
            except ValueError as exc:
                raise DataError(f"config key {key}: {exc}") from exc
        elif key in _TRIPLE_KEYS:
            kwargs[key] = _parse_triple(value, key)
        elif key in _STR_KEYS:
            kwargs[key] = value
        elif key in _LOSS_FLOAT_KEYS:
            try:
                loss_kwargs[key] = float(value)
            except ValueError as exc:
                raise DataError(f"config key {key}: {exc}") from exc
        elif key in _LOSS_BOOL_KEYS:
            loss_kwargs[key] = _parse_bool(value, key)
        elif key in _LOSS_STR_KEYS:
            loss_kwargs[key] = value
        else:
            raise DataError(f"unknown config key {key!r}")
    try:
        if loss_kwargs:
            kwargs["loss"] = replace(cfg.loss, **loss_kwargs)
        return replace(cfg, **kwargs)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def load_train_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    return config_from_pairs(parse_config_text(path.read_text("utf-8"), str(path)), base)


def config_to_pairs(config: TrainConfig) -> dict[str, str]:
    """Flat form that round-trips through config_from_pairs."""
    fmt = lambda v: repr(float(v))
    pairs = {
        "epochs": str(config.epochs),
        "source_batch": str(config.source_batch),
        "target_batch": str(config.target_batch),
        "lr0": fmt(config.lr0),
        "momentum": fmt(config.momentum),
        "weight_decay": fmt(config.weight_decay),
        "alpha": fmt(config.alpha),
        "beta": fmt(config.beta),
        "n_views": str(config.n_views),
        "mining": config.mining,
        "input_side": str(config.input_side),
        "seed": str(config.seed),
        "norm_mean": ",".join(repr(float(v)) for v in config.norm_mean),
        "norm_std": ",".join(repr(float(v)) for v in config.norm_std),
        "nmi_bins": str(config.nmi_bins),
        "nmi_side": str(config.nmi_side),
        "tau": fmt(config.loss.tau),
        "label_mode": config.loss.label_mode,
        "source_view": "true" if config.loss.source_view else "false",
        "target_view": "true" if config.loss.target_view else "false",
        "target_self": "true" if config.loss.target_self else "false",
        "view_aug": config.loss.view_aug,
        "source_view_supervision": config.loss.source_view_supervision,
    }
    return pairs


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise DataError(f"unknown loss preset {preset!r}; known: {', '.join(sorted(PRESETS))}")
    return config_from_pairs(PRESETS[preset], config)


# --- optimizer --------------------------------------------------------------

def lr_schedule(p: float, lr0: float = 3e-3, alpha: float = 8.0, beta: float = 0.75) -> float:
    """Inverse decay lr0 / (1 + alpha*p)^beta over training progress p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {p}")
    return lr0 / (1.0 + alpha * p) ** beta


@dataclass
class TrainState:
    params: model.ModelParams
    buffers: dict[str, np.ndarray]
    step: int
    total_steps: int
    rng_source: np.random.Generator
    rng_target: np.random.Generator
    rng_view: np.random.Generator
    rng_aug: np.random.Generator
    fallback_views: int = 0


def init_state(config: TrainConfig, class_count: int, total_steps: int) -> TrainState:
    params = model.init_params(config.input_side, class_count, config.seed)
    return TrainState(
        params=params,
        buffers=model.zero_grads(params),
        step=0,
        total_steps=total_steps,
        rng_source=np.random.default_rng([config.seed, 101]),
        rng_target=np.random.default_rng([config.seed, 202]),
        rng_view=np.random.default_rng([config.seed, 303]),
        rng_aug=np.random.default_rng([config.seed, 404]),
    )


def sgd_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-3,
) -> TrainState:
    """In-place SGD update with decoupled-from-nothing classic weight decay."""
    for name in sorted(state.params.arrays):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {state.step}")
        g = g + weight_decay * state.params.arrays[name]
        state.buffers[name] = momentum * state.buffers[name] + g
        state.params.arrays[name] -= lr * state.buffers[name]
    return state


# --- data plumbing ----------------------------------------------------------

@dataclass
class TrainData:
    """Everything train() consumes; images are raw [0,1] arrays keyed by id."""

    source_train: DatasetManifest
    target_train: DatasetManifest
    images: dict[str, np.ndarray]
    target_test: DatasetManifest | None = None
    view_sets: dict[str, ViewSet] | None = None


def load_images(manifest: DatasetManifest, root: str | Path) -> dict[str, np.ndarray]:
    """Decode every record's image; relative paths resolve against root."""
    root = Path(root)
    out: dict[str, np.ndarray] = {}
    for rec in manifest:
        p = Path(rec.path)
        full = p if p.is_absolute() else root / p
        if not full.exists():
            raise DataError(f"missing image file {full} for record {rec.id}")
        out[rec.id] = load_image(full)
    return out


class _ShuffledStream:
    """Endless without-replacement sampler; reshuffles when exhausted."""

    def __init__(self, records, rng):
        if not records:
            raise DataError("empty training split")
        self.records = records
        self.rng = rng
        self.queue: list[int] = []

    def draw(self, k: int):
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue = list(self.rng.permutation(len(self.records)))
            out.append(self.records[self.queue.pop(0)])
        return out


def make_train_batch(state, config, data, src_queries, tgt_queries, policy, by_id, view_sets):
    """Assemble role-tagged image tensors for one optimization step.

    Role augmentation: queries get weak augmentation (they anchor the
    reference predictions), mined views get strong or weak augmentation per
    the loss config, and the target self-consistency role is a strong
    augmentation of the target query's own image. A query whose ViewSet is
    empty stands in for its own view; the fallback counter tracks how often.
    """
    lc = config.loss

    def prep(img):
        return resize_normalize(img, config.input_side, config.norm_mean,
                                config.norm_std).transpose(2, 0, 1)

    def pick_view(rec):
        vs = view_sets.get(rec.id)
        if vs is None:
            raise DataError(f"no mined view set for record {rec.id}")
        draw = state.rng_view.random()  # always one draw per enabled view slot
        if not vs.member_ids:
            state.fallback_views += 1
            return rec
        idx = min(int(draw * len(vs.member_ids)), len(vs.member_ids) - 1)
        return by_id[vs.member_ids[idx]]

    def view_augment(img):
        if lc.view_aug == "strong":
            return strong_augment(img, policy, state.rng_aug)
        return weak_augment(img, state.rng_aug)

    roles: dict[str, np.ndarray] = {}
    labels = np.array([r.label for r in src_queries], dtype=np.int64)
    src_raw = [data.images[r.id] for r in src_queries]
    roles["src_query"] = np.stack([prep(weak_augment(im, state.rng_aug)) for im in src_raw])
    if lc.source_view:
        picked = [pick_view(r) for r in src_queries]
        roles["src_view"] = np.stack([prep(view_augment(data.images[v.id])) for v in picked])
    if lc.target_view or lc.target_self:
        tgt_raw = [data.images[r.id] for r in tgt_queries]
        roles["tgt_query"] = np.stack([prep(weak_augment(im, state.rng_aug)) for im in tgt_raw])
        if lc.target_self:
            roles["tgt_self"] = np.stack([prep(strong_augment(im, policy, state.rng_aug)) for im in tgt_raw])
        if lc.target_view:
            picked = [pick_view(r) for r in tgt_queries]
            roles["tgt_view"] = np.stack([prep(view_augment(data.images[v.id])) for v in picked])
    return roles, labels


# --- the training loop ------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_supervised: float
    loss_source_view: float
    loss_target_view: float
    loss_target_self: float
    masked_frac_source_view: float
    masked_frac_target_view: float
    masked_frac_target_self: float
    target_test_top1: float | None


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss_supervised: float
    loss_source_view: float
    loss_target_view: float
    loss_target_self: float
    masked_source_view: int
    masked_target_view: int
    masked_target_self: int
    loss_total: float


@dataclass
class RunReport:
    config: TrainConfig
    total_steps: int
    epochs: list[EpochMetrics]
    steps: list[StepMetrics]
    fallback_views: int
    manifest_hashes: dict[str, str]
    final_target_top1: float | None


def _validate_data(config: TrainConfig, data: TrainData) -> None:
    if len(data.source_train) == 0:
        raise DataError("empty source training split")
    if len(data.target_train) == 0:
        raise DataError("empty target training split")
    # labels of the target split must be unreadable during training
    if any(r.label is not None for r in data.target_train):
        raise DataError("target training split must be label-stripped (see strip_labels)")
    if any(r.domain != "source" for r in data.source_train):
        raise DataError("source training split contains non-source records")
    if any(r.domain != "target" for r in data.target_train):
        raise DataError("target training split contains non-target records")
    if data.source_train.class_count != data.target_train.class_count:
        raise DataError("source and target manifests disagree on class count")
    for split in (data.source_train, data.target_train):
        for rec in split:
            if rec.id not in data.images:
                raise DataError(f"no image loaded for record {rec.id}")


def _prepare_view_sets(config: TrainConfig, data: TrainData) -> dict[str, ViewSet]:
    if data.view_sets is not None:
        return data.view_sets
    if not (config.loss.source_view or config.loss.target_view):
        return {}
    mined: dict[str, ViewSet] = {}
    for split in (data.source_train, data.target_train):
        mined.update(
            mine_view_sets(split, data.images, config.n_views, config.mining,
                           config.nmi_bins, config.nmi_side, config.seed)
        )
    return mined


def train(
    config: TrainConfig,
    data: TrainData,
    out_dir: str | Path | None = None,
    log=None,
) -> tuple[model.ModelParams, RunReport]:
    """Run the full loop; returns final parameters and the run report.

    With ``out_dir`` set, also writes checkpoint.bin, metrics.csv (per
    epoch), steps.csv (per step) and run.json. All four are byte-identical
    across runs with the same config, manifests and seed.
    """
    _validate_data(config, data)
    view_sets = _prepare_view_sets(config, data)
    src_records = data.source_train.records
    steps_per_epoch = len(src_records) // config.source_batch
    if steps_per_epoch == 0:
        raise DataError(
            f"source split of {len(src_records)} records is smaller than "
            f"one batch of {config.source_batch}"
        )
    total_steps = config.epochs * steps_per_epoch
    state = init_state(config, data.source_train.class_count, total_steps)
    policy = AugPolicy()
    by_id = {r.id: r for r in src_records}
    by_id.update({r.id: r for r in data.target_train.records})

    step_rows: list[StepMetrics] = []
    epoch_rows: list[EpochMetrics] = []
    term_names = ("supervised", "source_view", "target_view", "target_self")
    tgt_stream = _ShuffledStream(data.target_train.records, state.rng_target)

    for epoch in range(1, config.epochs + 1):
        order = state.rng_source.permutation(len(src_records))
        sums = dict.fromkeys(("total",) + term_names, 0.0)
        masked = dict.fromkeys(("source_view", "target_view", "target_self"), 0)
        for b in range(steps_per_epoch):
            src_queries = [src_records[i] for i in order[b * config.source_batch:(b + 1) * config.source_batch]]
            tgt_queries = tgt_stream.draw(config.target_batch)
            roles, labels = make_train_batch(
                state, config, data, src_queries, tgt_queries, policy, by_id, view_sets
            )
            breakdown, grads = model.composite_loss_and_grads(
                state.params, roles, labels, config.loss
            )
            if not np.isfinite(breakdown.total):
                raise NumericError(f"non-finite loss {breakdown.total} at step {state.step}")
            lr = lr_schedule(state.step / total_steps, config.lr0, config.alpha, config.beta)
            sgd_step(state, grads, lr, config.momentum, config.weight_decay)
            state.step += 1
            step_rows.append(StepMetrics(
                step=state.step, lr=lr,
                loss_supervised=breakdown.supervised,
                loss_source_view=breakdown.source_view,
                loss_target_view=breakdown.target_view,
                loss_target_self=breakdown.target_self,
                masked_source_view=breakdown.masked_source_view,
                masked_target_view=breakdown.masked_target_view,
                masked_target_self=breakdown.masked_target_self,
                loss_total=breakdown.total,
            ))
            sums["total"] += breakdown.total
            for t in term_names:
                sums[t] += getattr(breakdown, t)
            masked["source_view"] += breakdown.masked_source_view
            masked["target_view"] += breakdown.masked_target_view
            masked["target_self"] += breakdown.masked_target_self

        acc = None
        if data.target_test is not None and len(data.target_test) > 0:
            acc = evaluate(state.params, data.target_test, data.images,
                           config.norm_mean, config.norm_std).top1
        row = EpochMetrics(
            epoch=epoch,
            loss_total=sums["total"] / steps_per_epoch,
            loss_supervised=sums["supervised"] / steps_per_epoch,
            loss_source_view=sums["source_view"] / steps_per_epoch,
            loss_target_view=sums["target_view"] / steps_per_epoch,
            loss_target_self=sums["target_self"] / steps_per_epoch,
            masked_frac_source_view=masked["source_view"] / (steps_per_epoch * config.source_batch),
            masked_frac_target_view=masked["target_view"] / (steps_per_epoch * config.target_batch),
            masked_frac_target_self=masked["target_self"] / (steps_per_epoch * config.target_batch),
            target_test_top1=acc,
        )
        epoch_rows.append(row)
        if log is not None:
            acc_txt = "n/a" if acc is None else f"{acc:.4f}"
            log(f"epoch {epoch}/{config.epochs}  loss {row.loss_total:.4f}  "
                f"target top1 {acc_txt}")

    hashes = {
        "source_train": manifest_sha256(data.source_train),
        "target_train": manifest_sha256(data.target_train),
    }
    if data.target_test is not None:
        hashes["target_test"] = manifest_sha256(data.target_test)
    report = RunReport(
        config=config,
        total_steps=total_steps,
        epochs=epoch_rows,
        steps=step_rows,
        fallback_views=state.fallback_views,
        manifest_hashes=hashes,
        final_target_top1=epoch_rows[-1].target_test_top1,
    )
    if out_dir is not None:
        write_run_outputs(Path(out_dir), state.params, report)
    return state.params, report


# --- artifact writers -------------------------------------------------------

def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def write_run_outputs(out_dir: Path, params: model.ModelParams, report: RunReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = config_to_pairs(report.config)
    model.save_checkpoint(out_dir / "checkpoint.bin", params, extra_meta={"config": pairs})
    _write_csv(
        out_dir / "metrics.csv",
        ["epoch", "loss_total", "loss_supervised", "loss_source_view",
         "loss_target_view", "loss_target_self", "masked_frac_source_view",
         "masked_frac_target_view", "masked_frac_target_self", "target_test_top1"],
        [[e.epoch, e.loss_total, e.loss_supervised, e.loss_source_view,
          e.loss_target_view, e.loss_target_self, e.masked_frac_source_view,
          e.masked_frac_target_view, e.masked_frac_target_self, e.target_test_top1]
         for e in report.epochs],
    )
    _write_csv(
        out_dir / "steps.csv",
        ["step", "lr", "loss_supervised", "loss_source_view", "loss_target_view",
         "loss_target_self", "masked_source_view", "masked_target_view",
         "masked_target_self", "loss_total"],
        [[s.step, s.lr, s.loss_supervised, s.loss_source_view, s.loss_target_view,
          s.loss_target_self, s.masked_source_view, s.masked_target_view,
          s.masked_target_self, s.loss_total] for s in report.steps],
    )
    run_doc = {
        "config": pairs,
        "seed": report.config.seed,
        "manifest_sha256": report.manifest_hashes,
        "total_steps": report.total_steps,
        "view_fallbacks": report.fallback_views,
        "final_target_top1": report.final_target_top1,
    }
    with (out_dir / "run.json").open("w", encoding="utf-8") as fh:
        json.dump(run_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
