"""Loss terms for consistency training across domains and views.

One supervised cross-entropy term on labeled source queries plus up to three
consistency terms (source view, target view, target weak-to-strong self
consistency). Reference predictions always come from the weakly augmented
query and are treated as constants: no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-12

LABEL_MODES = ("hard", "soft")
VIEW_AUGS = ("strong", "weak")
SUPERVISION_MODES = ("pseudo_label", "ground_truth")


@dataclass(frozen=True)
class PseudoLabel:
    mode: str
    hard: int | None
    soft: np.ndarray | None
    confidence: float


@dataclass(frozen=True)
class LossConfig:
    """Which consistency terms run, and how their targets are built.

    view_aug selects the augmentation applied to mined views: "strong" is the
    default regime, "weak" is the no-strong-augmentation variant. The weak
    variant has no self-consistency term (that term is defined by a strong
    augmentation of the query), so target_self must be off when view_aug is
    weak. This also guarantees a domain never has both variants of its view
    term enabled at once.
    """

    tau: float = 0.8
    label_mode: str = "hard"
    source_view: bool = True
    target_view: bool = True
    target_self: bool = True
    view_aug: str = "strong"
    source_view_supervision: str = "pseudo_label"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.view_aug not in VIEW_AUGS:
            raise ValueError(f"view_aug must be one of {VIEW_AUGS}, got {self.view_aug!r}")
        if self.source_view_supervision not in SUPERVISION_MODES:
            raise ValueError(
                f"source_view_supervision must be one of {SUPERVISION_MODES}, "
                f"got {self.source_view_supervision!r}"
            )
        if self.view_aug == "weak" and self.target_self:
            raise ValueError("target_self requires strong augmentation; disable it when view_aug is weak")


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    source_view: float
    target_view: float
    target_self: float
    masked_source_view: int
    masked_target_view: int
    masked_target_self: int
    total: float


@dataclass(frozen=True)
class RolePredictions:
    """Per-role probability batches from one shared forward pass.

    Query rows are references (weak augmentation); view/self rows are the
    predictions being trained. Roles not used by the active config may be None.
    """

    src_query: np.ndarray | None
    src_view: np.ndarray | None = None
    tgt_query: np.ndarray | None = None
    tgt_self: np.ndarray | None = None
    tgt_view: np.ndarray | None = None


def cross_entropy(target: PseudoLabel | int, probs: np.ndarray) -> float:
    """-ln p[c] for a hard target, -sum q ln p for a soft one (p clamped)."""
    logp = np.log(np.maximum(probs, PROB_CLAMP))
    if isinstance(target, PseudoLabel):
        if target.mode == "hard":
            return float(-logp[target.hard])
        return float(-(target.soft * logp).sum())
    return float(-logp[int(target)])


def supervised_loss(probs_wa: np.ndarray, label: int) -> float:
    if not 0 <= label < probs_wa.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs_wa.shape[-1]} classes")
    return cross_entropy(int(label), probs_wa)


def make_pseudo_label(ref_probs: np.ndarray, mode: str) -> PseudoLabel:
    """Reference prediction -> training target; ties go to the lowest index."""
    if mode not in LABEL_MODES:
        raise ValueError(f"mode must be one of {LABEL_MODES}, got {mode!r}")
    confidence = float(ref_probs.max())
    if mode == "hard":
        return PseudoLabel("hard", int(np.argmax(ref_probs)), None, confidence)
    return PseudoLabel("soft", None, ref_probs.copy(), confidence)


def consistency_loss(ref: PseudoLabel, pred: np.ndarray, tau: float) -> tuple[float, bool]:
    """(loss value, masked). Masked exactly when reference confidence < tau."""
    if ref.confidence < tau:
        return 0.0, True
    return cross_entropy(ref, pred), False


def _one_hot(index: int, width: int) -> np.ndarray:
    v = np.zeros(width)
    v[index] = 1.0
    return v


def _ce_logit_grad(target_vec: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient of clamped cross-entropy w.r.t. logits for one row.

    Equals probs - target_vec wherever the clamp is inactive; rows that hit
    the clamp get the exact derivative of the loss as implemented.
    """
    dp = np.where(probs < PROB_CLAMP, 0.0, -target_vec / np.maximum(probs, PROB_CLAMP))
    return probs * (dp - (probs * dp).sum())


def _consistency_targets(refs, labels, config, use_ground_truth):
    """Per-row (target PseudoLabel, masked) pairs for one consistency term."""
    out = []
    for i, ref_row in enumerate(refs):
        pl = make_pseudo_label(ref_row, config.label_mode)
        if pl.confidence < config.tau:
            out.append((None, True))
            continue
        if use_ground_truth:
            pl = PseudoLabel("hard", int(labels[i]), None, pl.confidence)
        out.append((pl, False))
    return out


def _term(refs, preds, config, labels=None, use_ground_truth=False):
    """Mean loss over the full batch (masked rows contribute 0), masked count, row grads."""
    batch = preds.shape[0]
    targets = _consistency_targets(refs, labels, config, use_ground_truth)
    value = 0.0
    masked = 0
    grads = np.zeros_like(preds)
    for i, (pl, is_masked) in enumerate(targets):
        if is_masked:
            masked += 1
            continue
        value += cross_entropy(pl, preds[i])
        vec = _one_hot(pl.hard, preds.shape[1]) if pl.mode == "hard" else pl.soft
        grads[i] = _ce_logit_grad(vec, preds[i]) / batch
    return value / batch, masked, grads


def _check_roles(preds: RolePredictions, config: LossConfig) -> None:
    if preds.src_query is None:
        raise ValueError("src_query predictions are required")
    required = []
    if config.source_view:
        required.append("src_view")
    if config.target_view or config.target_self:
        required.append("tgt_query")
    if config.target_view:
        required.append("tgt_view")
    if config.target_self:
        required.append("tgt_self")
    for role in required:
        if getattr(preds, role) is None:
            raise ValueError(f"{role} predictions are required by the enabled loss terms")


def total_loss_logit_grads(
    preds: RolePredictions, labels: np.ndarray, config: LossConfig
) -> tuple[LossBreakdown, dict[str, np.ndarray | None]]:
    """LossBreakdown plus d(total)/d(logits) per role.

    References are constants: query rows receive gradient only from the
    supervised term, never from the consistency terms they anchor.
    """
    _check_roles(preds, config)
    sq = preds.src_query
    batch_s = sq.shape[0]
    if labels.shape[0] != batch_s:
        raise ValueError(f"{batch_s} source rows but {labels.shape[0]} labels")

    sup = 0.0
    d_src_query = np.zeros_like(sq)
    for i in range(batch_s):
        sup += supervised_loss(sq[i], int(labels[i]))
        d_src_query[i] = _ce_logit_grad(_one_hot(int(labels[i]), sq.shape[1]), sq[i]) / batch_s
    sup /= batch_s

    grads: dict[str, np.ndarray | None] = {
        "src_query": d_src_query, "src_view": None, "tgt_query": None,
        "tgt_self": None, "tgt_view": None,
    }
    src_view_val, src_view_masked = 0.0, 0
    tgt_view_val, tgt_view_masked = 0.0, 0
    tgt_self_val, tgt_self_masked = 0.0, 0

    if config.source_view:
        src_view_val, src_view_masked, g = _term(
            sq, preds.src_view, config, labels=labels,
            use_ground_truth=config.source_view_supervision == "ground_truth",
        )
        grads["src_view"] = g
    if config.target_view:
        tgt_view_val, tgt_view_masked, g = _term(preds.tgt_query, preds.tgt_view, config)
        grads["tgt_view"] = g
    if config.target_self:
        tgt_self_val, tgt_self_masked, g = _term(preds.tgt_query, preds.tgt_self, config)
        grads["tgt_self"] = g

    breakdown = LossBreakdown(
        supervised=sup,
        source_view=src_view_val,
        target_view=tgt_view_val,
        target_self=tgt_self_val,
        masked_source_view=src_view_masked,
        masked_target_view=tgt_view_masked,
        masked_target_self=tgt_self_masked,
        total=sup + src_view_val + tgt_view_val + tgt_self_val,
    )
    return breakdown, grads


def total_loss(preds: RolePredictions, labels: np.ndarray, config: LossConfig) -> LossBreakdown:
    breakdown, _ = total_loss_logit_grads(preds, labels, config)
    return breakdown
