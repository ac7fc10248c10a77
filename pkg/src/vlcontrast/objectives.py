"""The contrastive primitive and the five training loss terms.

Every similarity is an inner product of L2-normalized vectors divided by a
shared temperature. The softmax denominator includes the positive by default
(keeps the loss nonnegative and bounded by ln(1+K)); the printed-form variant
that sums only over negatives is available behind `include_positive=False`.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .common import ConfigurationError, ContractViolation, STREAM_ITM, TrainingAbort, rng_from
from .momentum import NegativeQueue

TERM_NAMES = ("cma", "imc", "lmi", "itm", "mlm")


@dataclass
class ContrastiveBatch:
    anchors: Tensor  # (B, d) unit rows
    positives: Tensor  # (B, d) unit rows
    queue_negatives: np.ndarray  # (K, d) unit rows, constants
    tau: float

    def __post_init__(self):
        self.anchors = ad.as_tensor(self.anchors)
        self.positives = ad.as_tensor(self.positives)
        self.queue_negatives = np.asarray(self.queue_negatives, dtype=np.float64)
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.tau}")
        if self.anchors.shape[0] < 1:
            raise ContractViolation("empty anchor set")
        for name, rows in (("anchors", self.anchors.data), ("positives", self.positives.data)):
            norms = np.linalg.norm(rows, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ContractViolation(f"{name} rows must be unit-norm")


def infonce_from_logits(pos_logits: Tensor, neg_logits: Tensor | None, include_positive: bool = True) -> Tensor:
    """Mean over anchors of -log softmax(positive | positive + negatives).

    pos_logits: (B,); neg_logits: (B, K) or None. Logits are already sim/tau.
    """
    pos_logits = ad.as_tensor(pos_logits)
    if neg_logits is None or neg_logits.shape[-1] == 0:
        if not include_positive:
            raise ContractViolation("the negatives-only denominator needs at least one negative")
        return ad.tmean(ad.mul(pos_logits, 0.0))  # softmax over a singleton: exactly zero
    neg_logits = ad.as_tensor(neg_logits)
    if include_positive:
        all_logits = ad.concat([pos_logits.reshape((-1, 1)), neg_logits], axis=1)
    else:
        all_logits = neg_logits
    return ad.tmean(ad.add(ad.logsumexp(all_logits, axis=-1), ad.mul(pos_logits, -1.0)))


def infonce(batch: ContrastiveBatch, include_positive: bool = True) -> Tensor:
    """InfoNCE over a batch: each anchor against its positive plus the queue."""
    inv_tau = 1.0 / batch.tau
    pos = ad.mul(ad.tsum(ad.mul(batch.anchors, batch.positives), axis=-1), inv_tau)
    neg = None
    if batch.queue_negatives.shape[0] > 0:
        neg = ad.mul(batch.anchors @ Tensor(batch.queue_negatives.T), inv_tau)
    return infonce_from_logits(pos, neg, include_positive=include_positive)


def _check_queue(queue: NegativeQueue, expected_kind: str, role: str):
    if queue.kind != expected_kind:
        raise ContractViolation(f"{role} require the {expected_kind} queue, got the {queue.kind} queue")


def cma_loss(
    img_anchor: Tensor,
    txt_target: Tensor,
    txt_anchor: Tensor,
    img_target: Tensor,
    text_queue: NegativeQueue,
    image_queue: NegativeQueue,
    tau: float,
    include_positive: bool = True,
) -> Tensor:
    """Cross-modal alignment: image->text and text->image InfoNCE, averaged.

    img_anchor/txt_anchor are online projections; txt_target/img_target are the
    momentum projections of the other modality. Image anchors contrast against
    the text queue and vice versa.
    """
    _check_queue(text_queue, "text", "image anchors")
    _check_queue(image_queue, "image", "text anchors")
    i2t = infonce(ContrastiveBatch(img_anchor, txt_target, text_queue.negatives(), tau), include_positive)
    t2i = infonce(ContrastiveBatch(txt_anchor, img_target, image_queue.negatives(), tau), include_positive)
    return ad.mul(ad.add(i2t, t2i), 0.5)


def imc_loss(
    img_anchor: Tensor,
    img_target: Tensor,
    txt_anchor: Tensor,
    txt_target: Tensor,
    text_queue: NegativeQueue,
    image_queue: NegativeQueue,
    tau: float,
    include_positive: bool = True,
) -> Tensor:
    """Intra-modal contrast: two image views, and two dropout views of the text,
    each against the same-modality queue."""
    _check_queue(text_queue, "text", "text anchors")
    _check_queue(image_queue, "image", "image anchors")
    t2t = infonce(ContrastiveBatch(txt_anchor, txt_target, text_queue.negatives(), tau), include_positive)
    i2i = infonce(ContrastiveBatch(img_anchor, img_target, image_queue.negatives(), tau), include_positive)
    return ad.mul(ad.add(t2t, i2i), 0.5)


def pool_patches(patch_locals: Tensor, target: int | None) -> Tensor:
    """Block-average a row-major sqrt(M) x sqrt(M) patch grid down to `target` vectors."""
    x = ad.as_tensor(patch_locals)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    b, m, d = x.shape
    if target is None:
        target = m
    g = math.isqrt(m)
    t = math.isqrt(target)
    if g * g != m or t * t != target:
        raise ConfigurationError(f"patch count {m} and target {target} must both be perfect squares")
    if g % t != 0:
        raise ConfigurationError(f"target grid {t} must divide patch grid {g}")
    block = g // t
    pooled = ad.tmean(x.reshape((b, t, block, t, block, d)), axis=(2, 4)).reshape((b, target, d))
    return pooled.reshape((target, d)) if single else pooled


def _local_nce_side(anchor: Tensor, local_targets: Tensor, pad_mask: np.ndarray | None, tau: float) -> Tensor:
    """Average InfoNCE of one global anchor against each of its own locals,
    with every other sample's (non-pad) locals as negatives."""
    b, length, _ = local_targets.shape
    flat = local_targets.reshape((b * length, local_targets.shape[-1]))
    sims = ad.mul(anchor @ ad.transpose(flat, (1, 0)), 1.0 / tau)  # (B, B*L)
    valid = np.ones(b * length, dtype=bool) if pad_mask is None else ~pad_mask.reshape(-1)
    own = np.zeros((b, b * length), dtype=bool)
    for i in range(b):
        own[i, i * length : (i + 1) * length] = True
    shift = np.where(valid[None, :], sims.data, -np.inf).max(axis=1, keepdims=True)  # constant
    shifted = ad.add(sims, -shift)
    e = ad.exp(shifted)
    neg_weight = (valid[None, :] & ~own).astype(np.float64)
    negsum = ad.tsum(ad.mul(e, neg_weight), axis=1)  # (B,)
    diag = np.arange(b)
    own_shifted = shifted.reshape((b, b, length))[(diag, diag)]  # (B, L)
    per_local = ad.add(ad.log(ad.add(ad.exp(own_shifted), negsum.reshape((b, 1)))), ad.mul(own_shifted, -1.0))
    own_weight = np.ones((b, length)) if pad_mask is None else (~pad_mask).astype(np.float64)
    counts = np.maximum(own_weight.sum(axis=1), 1.0)
    per_sample = ad.mul(ad.tsum(ad.mul(per_local, own_weight), axis=1), 1.0 / counts)
    return ad.tmean(per_sample)


def lmi_loss(
    img_anchor: Tensor,
    img_local_targets: Tensor,
    txt_anchor: Tensor,
    txt_local_targets: Tensor,
    tau: float,
    txt_pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Global-to-local contrast on both modalities, in-batch negatives only.

    img_local_targets: (B, M', d_proj) pooled momentum patch projections;
    txt_local_targets: (B, N-1, d_proj) momentum token projections with
    txt_pad_mask marking [PAD] slots to exclude from positives and negatives.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    img_anchor = ad.as_tensor(img_anchor)
    if img_anchor.shape[0] == 1:
        warnings.warn("batch of one: local-MI loss has no in-batch negatives and is degenerate")
    img_side = _local_nce_side(img_anchor, ad.as_tensor(img_local_targets), None, tau)
    txt_side = _local_nce_side(ad.as_tensor(txt_anchor), ad.as_tensor(txt_local_targets), txt_pad_mask, tau)
    return ad.mul(ad.add(img_side, txt_side), 0.5)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    picked = logits[(np.arange(labels.shape[0]), labels)]
    return ad.tmean(ad.add(ad.logsumexp(logits, axis=-1), ad.mul(picked, -1.0)))


def sample_itm_negatives(
    sim_i2t: np.ndarray,
    sim_t2i: np.ndarray,
    tau: float,
    seed: int,
    hard: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """One non-matching text per image and image per text; similarity-weighted
    when `hard`, uniform otherwise. Returns (neg_text_idx, neg_image_idx)."""
    b = sim_i2t.shape[0]
    if b < 2:
        warnings.warn("batch of one: no candidates for matching-loss negatives")
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rng = rng_from(seed, STREAM_ITM)

    def draw(sims):
        idx = np.zeros(b, dtype=np.int64)
        for i in range(b):
            if hard:
                logits = sims[i] / tau
                logits[i] = -np.inf
                p = np.exp(logits - logits.max())
            else:
                p = np.ones(b)
                p[i] = 0.0
            idx[i] = rng.choice(b, p=p / p.sum())
        return idx

    return draw(np.array(sim_i2t, dtype=np.float64)), draw(np.array(sim_t2i, dtype=np.float64))


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of match logits against {0,1} labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels > 1)):
        raise ContractViolation("matching labels must be 0 or 1")
    return _cross_entropy(ad.as_tensor(logits), labels)


def mlm_loss(logits: Tensor | None, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy at masked positions; an empty mask contributes zero."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits is None or labels.size == 0:
        return Tensor(0.0)
    logits = ad.as_tensor(logits)
    if np.any(labels >= logits.shape[-1]) or np.any(labels < 0):
        raise ContractViolation("masked-token label outside the vocabulary")
    return _cross_entropy(logits, labels)


@dataclass
class LossReport:
    cma: float
    imc: float
    lmi: float
    itm: float
    mlm: float
    total: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in TERM_NAMES + ("total",)}


def total_loss(
    cma: Tensor | None = None,
    imc: Tensor | None = None,
    lmi: Tensor | None = None,
    itm: Tensor | None = None,
    mlm: Tensor | None = None,
) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the enabled terms; disabled (None) terms count as zero."""
    terms = {"cma": cma, "imc": imc, "lmi": lmi, "itm": itm, "mlm": mlm}
    values = {}
    for name, t in terms.items():
        v = float(t.item()) if t is not None else 0.0
        if not np.isfinite(v):
            raise TrainingAbort(f"non-finite {name} loss ({v})")
        values[name] = v
    total = Tensor(0.0)
    for name in TERM_NAMES:
        if terms[name] is not None:
            total = ad.add(total, terms[name])
    report = LossReport(total=float(total.item()), **values)
    return total, report
