"""The optimization loop: batch assembly, forward/backward, EMA and queue updates.

One thread owns all mutable state. Every stochastic choice (shuffling,
augmentation, masking, dropout, negative sampling) is derived from
(config seed, epoch/step, purpose), so a run is a pure function of its config
and a checkpoint resume continues the exact trace.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
import json
import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .common import (
    ConfigurationError,
    ContractViolation,
    STREAM_AUGMENT,
    STREAM_DROPOUT,
    STREAM_ITM,
    STREAM_MLM,
    STREAM_SHUFFLE,
    TrainingAbort,
    derive_seed,
)
from .encoders import EncoderConfig, EmbeddingSet, ParamSet, ProjectionHead, build_params, fuse, project, text_encode, vision_encode
from .momentum import MomentumPair, NegativeQueue, ema_update, make_momentum_pair
from .objectives import LossReport, cma_loss, imc_loss, itm_loss, lmi_loss, mlm_loss, sample_itm_negatives, total_loss
from .serialization import load_checkpoint, save_checkpoint
from .synthdata import IGNORE_ID, SyntheticPair, augment, generate_dataset, mlm_mask


@dataclass
class TrainConfig:
    """Flat run configuration; one key per field in the config-file schema."""

    # synthetic corpus
    train_count: int = 512
    eval_count: int = 128
    grid: int = 2
    image_size: int = 64
    synonyms: int = 0
    # encoders
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    fusion_layers: int = 2
    d_proj: int = 32
    patch: int = 8
    mlp_ratio: int = 4
    dropout: float = 0.1
    init_std: float = 0.02
    tap_layer: int = 0
    # objectives
    tau: float = 0.07
    include_positive: int = 1
    lmi_pool_target: int = 16
    lmi_intermediate: int = 0
    itm_hard_negatives: int = 1
    # loss gates
    use_cma: int = 1
    use_imc: int = 1
    use_lmi: int = 1
    use_itm: int = 1
    use_mlm: int = 1
    # augmentation
    aug_strength: str = "strong"
    aug_shared: int = 0
    # token masking
    mlm_rate: float = 0.15
    mlm_mask_prob: float = 0.8
    mlm_random_prob: float = 0.1
    mlm_keep_prob: float = 0.1
    # momentum machinery
    m: float = 0.995
    queue_size: int = 1024
    # optimizer and schedule
    lr_init: float = 1e-5
    lr_peak: float = 1e-4
    lr_floor: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # loop
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    threads: int = 1
    resume: str = ""

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.lr_floor > self.lr_peak:
            raise ConfigurationError("lr_floor must not exceed lr_peak")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigurationError("momentum coefficient m must be in [0, 1]")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            fusion_layers=self.fusion_layers,
            d_proj=self.d_proj,
            image_size=self.image_size,
            patch=self.patch,
            mlp_ratio=self.mlp_ratio,
            dropout=self.dropout,
            init_std=self.init_std,
            tap_layer=self.tap_layer,
        )

    def steps_per_epoch(self) -> int:
        return math.ceil(self.train_count / self.batch_size)

    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_from_dict(values: dict) -> TrainConfig:
    """Build a config, rejecting unknown keys with the list of valid ones."""
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) {unknown}; valid keys: {sorted(_FIELD_TYPES)}"
        )
    coerced = {}
    for key, raw in values.items():
        kind = _FIELD_TYPES[key]
        if kind in ("int", int):
            coerced[key] = int(raw)
        elif kind in ("float", float):
            coerced[key] = float(raw)
        else:
            coerced[key] = str(raw)
    return TrainConfig(**coerced)


def parse_config_file(path: str) -> dict:
    """key = value lines; '#' starts a comment; blank lines ignored."""
    values: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
    return values


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay. Missing grads count as zero,
    so disabled losses still decay the weights."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.02):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{n}": a.copy() for n, a in self.m.items()}
        out.update({f"adam_v/{n}": a.copy() for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int):
        self.t = t
        for name in self.m:
            self.m[name] = arrays[f"adam_m/{name}"].copy()
            self.v[name] = arrays[f"adam_v/{name}"].copy()


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_init to lr_peak, then cosine decay to lr_floor."""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    total = cfg.total_steps()
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac
    span = max(1, total - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- state -------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    enc: EncoderConfig
    params: ParamSet
    vision_pair: MomentumPair
    text_pair: MomentumPair
    text_queue: NegativeQueue
    image_queue: NegativeQueue
    optimizer: AdamW
    step: int = 0

    def shadow_ids(self) -> set[int]:
        ids = {id(t) for t in self.vision_pair.shadow.tensors()}
        ids |= {id(t) for t in self.text_pair.shadow.tensors()}
        return ids


def new_state(cfg: TrainConfig) -> TrainState:
    enc = cfg.encoder_config()
    params = build_params(enc, cfg.seed)
    vision_pair = make_momentum_pair(params.subset("vision.", "proj.v."), cfg.m)
    text_pair = make_momentum_pair(params.subset("text.", "proj.t."), cfg.m)
    return TrainState(
        cfg=cfg,
        enc=enc,
        params=params,
        vision_pair=vision_pair,
        text_pair=text_pair,
        text_queue=NegativeQueue(cfg.queue_size, cfg.d_proj, "text", seed=cfg.seed),
        image_queue=NegativeQueue(cfg.queue_size, cfg.d_proj, "image", seed=cfg.seed),
        optimizer=AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
    )


def state_arrays(state: TrainState) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        arrays[f"params/{name}"] = t.data
    for name, t in state.vision_pair.shadow.items():
        arrays[f"shadow/{name}"] = t.data
    for name, t in state.text_pair.shadow.items():
        arrays[f"shadow/{name}"] = t.data
    arrays.update(state.optimizer.state())
    arrays["queue_text/buffer"] = state.text_queue.buffer
    arrays["queue_image/buffer"] = state.image_queue.buffer
    meta = {
        "adam_t": state.optimizer.t,
        "queue_text": {"head": state.text_queue.head, "filled": state.text_queue.filled},
        "queue_image": {"head": state.image_queue.head, "filled": state.image_queue.filled},
        "rng": {"seed": state.cfg.seed, "scheme": "derived(seed, stream, epoch/step)"},
    }
    return arrays, meta


def save_state(state: TrainState, path: str):
    arrays, meta = state_arrays(state)
    save_checkpoint(path, state.cfg.to_dict(), state.step, arrays, meta)


def load_state(path: str) -> TrainState:
    config, step, arrays, meta = load_checkpoint(path)
    cfg = config_from_dict(config)
    state = new_state(cfg)
    state.step = step
    state.params.load_state({n[len("params/") :]: a for n, a in arrays.items() if n.startswith("params/")})
    shadow_arrays = {n[len("shadow/") :]: a for n, a in arrays.items() if n.startswith("shadow/")}
    state.vision_pair.shadow.load_state({n: shadow_arrays[n] for n in state.vision_pair.shadow.names()})
    state.text_pair.shadow.load_state({n: shadow_arrays[n] for n in state.text_pair.shadow.names()})
    state.optimizer.load_state(arrays, meta["adam_t"])
    state.text_queue.load_state(
        {"buffer": arrays["queue_text/buffer"], "kind": "text", **meta["queue_text"]}
    )
    state.image_queue.load_state(
        {"buffer": arrays["queue_image/buffer"], "kind": "image", **meta["queue_image"]}
    )
    return state


# -- batches ------------------------------------------------------------------------


@dataclass
class StepBatch:
    view_a: np.ndarray  # (B, 3, H, W)
    view_b: np.ndarray
    captions: np.ndarray  # (B, N)
    masked_ids: np.ndarray  # (B, N)
    mlm_labels: np.ndarray  # (B, N) with IGNORE_ID off-mask
    epoch: int
    indices: np.ndarray


def assemble_batch(pairs: list[SyntheticPair], indices: np.ndarray, cfg: TrainConfig, epoch: int) -> StepBatch:
    """Augment + mask the selected samples; per-sample seeds are fixed at epoch
    start, so worker scheduling cannot change the result."""

    def prepare(idx: int):
        pair = pairs[idx]
        views = augment(
            pair.image,
            derive_seed(cfg.seed, STREAM_AUGMENT, epoch, idx),
            strength=cfg.aug_strength,
            shared=bool(cfg.aug_shared),
        )
        masked = mlm_mask(
            pair.caption,
            derive_seed(cfg.seed, STREAM_MLM, epoch, idx),
            rate=cfg.mlm_rate,
            split=(cfg.mlm_mask_prob, cfg.mlm_random_prob, cfg.mlm_keep_prob),
        )
        return views, masked

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            prepared = list(pool.map(prepare, indices))
    else:
        prepared = [prepare(idx) for idx in indices]
    return StepBatch(
        view_a=np.stack([v.view_a for v, _ in prepared]),
        view_b=np.stack([v.view_b for v, _ in prepared]),
        captions=np.stack([pairs[i].caption for i in indices]),
        masked_ids=np.stack([m.input_ids for _, m in prepared]),
        mlm_labels=np.stack([m.labels for _, m in prepared]),
        epoch=epoch,
        indices=np.asarray(indices),
    )


# -- forward / losses ----------------------------------------------------------------


def _select_rows(emb: EmbeddingSet, idx: np.ndarray) -> EmbeddingSet:
    return EmbeddingSet(
        cls=emb.cls[idx],
        locals=emb.locals[idx],
        modality=emb.modality,
        source=emb.source,
        pad_mask=None if emb.pad_mask is None else emb.pad_mask[idx],
    )


def compute_losses(state: TrainState, batch: StepBatch) -> tuple[dict[str, Tensor | None], Tensor, Tensor]:
    """All enabled loss terms for one batch, in the documented evaluation order.

    Returns (terms, momentum image projections, momentum text projections);
    the projections are what gets pushed onto the queues after the step.
    """
    cfg, enc = state.cfg, state.enc
    step = state.step
    want_tap = bool(cfg.lmi_intermediate) and bool(cfg.use_lmi)

    # (1) momentum branch, no gradients
    with ad.no_grad():
        v_hat = vision_encode(
            batch.view_b, state.vision_pair.shadow, enc, source="momentum", want_intermediate=want_tap
        )
        t_hat = text_encode(
            batch.captions,
            state.text_pair.shadow,
            enc,
            dropout_seed=derive_seed(cfg.seed, STREAM_DROPOUT, step, 0),
            dropout_rate=cfg.dropout,
            source="momentum",
            want_intermediate=want_tap,
        )
        fhat_v = ProjectionHead(state.vision_pair.shadow["proj.v.w"], "fhat_v")
        fhat_t = ProjectionHead(state.text_pair.shadow["proj.t.w"], "fhat_t")
        img_target = project(v_hat, fhat_v, "cls")
        txt_target = project(t_hat, fhat_t, "cls")
        img_local_targets = txt_local_targets = None
        if cfg.use_lmi:
            v_src = v_hat.intermediate_locals if want_tap else v_hat.locals
            v_for_pool = EmbeddingSet(cls=v_hat.cls, locals=v_src, modality="vision", source="momentum")
            if cfg.lmi_pool_target > 0:
                img_local_targets = project(v_for_pool, fhat_v, "pooled_locals", pool_target=cfg.lmi_pool_target)
            else:
                img_local_targets = project(v_for_pool, fhat_v, "locals")
            t_src = t_hat.intermediate_locals if want_tap else t_hat.locals
            t_for_proj = EmbeddingSet(cls=t_hat.cls, locals=t_src, modality="text", source="momentum")
            txt_local_targets = project(t_for_proj, fhat_t, "locals")

    # (2) online branch; the clean and masked captions share one batched encode
    b = batch.captions.shape[0]
    v_set = vision_encode(batch.view_a, state.params, enc, source="online")
    if cfg.use_mlm:
        both = text_encode(
            np.concatenate([batch.captions, batch.masked_ids]),
            state.params,
            enc,
            dropout_seed=derive_seed(cfg.seed, STREAM_DROPOUT, step, 1),
            dropout_rate=cfg.dropout,
        )
        t_set = _select_rows(both, np.arange(b))
        t_msk = _select_rows(both, np.arange(b, 2 * b))
    else:
        t_set = text_encode(
            batch.captions,
            state.params,
            enc,
            dropout_seed=derive_seed(cfg.seed, STREAM_DROPOUT, step, 1),
            dropout_rate=cfg.dropout,
        )
        t_msk = None
    f_v = ProjectionHead(state.params["proj.v.w"], "f_v")
    f_t = ProjectionHead(state.params["proj.t.w"], "f_t")
    img_anchor = project(v_set, f_v, "cls")
    txt_anchor = project(t_set, f_t, "cls")

    terms: dict[str, Tensor | None] = {"cma": None, "imc": None, "lmi": None, "itm": None, "mlm": None}
    if cfg.use_cma:
        terms["cma"] = cma_loss(
            img_anchor, txt_target, txt_anchor, img_target,
            state.text_queue, state.image_queue, cfg.tau, bool(cfg.include_positive),
        )
    if cfg.use_imc:
        terms["imc"] = imc_loss(
            img_anchor, img_target, txt_anchor, txt_target,
            state.text_queue, state.image_queue, cfg.tau, bool(cfg.include_positive),
        )
    if cfg.use_lmi:
        terms["lmi"] = lmi_loss(
            img_anchor, img_local_targets, txt_anchor, txt_local_targets, cfg.tau,
            txt_pad_mask=t_hat.pad_mask,
        )

    # matching and masked-prediction heads share one batched fusion forward
    img_blocks: list[EmbeddingSet] = []
    txt_blocks: list[EmbeddingSet] = []
    id_blocks: list[np.ndarray] = []
    itm_rows = 0
    if cfg.use_itm:
        sim_i2t = img_anchor.data @ txt_anchor.data.T  # detached: sampling is not differentiated
        neg_txt, neg_img = sample_itm_negatives(
            sim_i2t, sim_i2t.T, cfg.tau, derive_seed(cfg.seed, STREAM_ITM, step), hard=bool(cfg.itm_hard_negatives)
        )
        img_blocks.append(v_set)
        txt_blocks.append(t_set)
        id_blocks.append(batch.captions)
        if neg_txt.size:
            img_blocks += [v_set, _select_rows_vision(v_set, neg_img)]
            txt_blocks += [_select_rows(t_set, neg_txt), t_set]
            id_blocks += [batch.captions[neg_txt], batch.captions]
            itm_labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(2 * b, dtype=np.int64)])
        else:
            itm_labels = np.ones(b, dtype=np.int64)
        itm_rows = sum(blk.cls.shape[0] for blk in img_blocks)
    mlm_positions = None
    if cfg.use_mlm:
        img_blocks.append(v_set)
        txt_blocks.append(t_msk)
        id_blocks.append(batch.masked_ids)
        rows, cols = np.nonzero(batch.mlm_labels != IGNORE_ID)
        mlm_positions = (rows + itm_rows, cols)
    if img_blocks:
        img_in = _concat_sets(img_blocks)
        txt_in = _concat_sets(txt_blocks)
        fused = fuse(
            img_in, txt_in, state.params, enc,
            text_ids=np.concatenate(id_blocks),
            mlm_positions=mlm_positions,
            dropout_seed=derive_seed(cfg.seed, STREAM_DROPOUT, step, 2),
            dropout_rate=cfg.dropout,
        )
        if cfg.use_itm:
            terms["itm"] = itm_loss(fused.itm_logits[0:itm_rows], itm_labels)
        if cfg.use_mlm:
            labels = batch.mlm_labels[batch.mlm_labels != IGNORE_ID]
            terms["mlm"] = mlm_loss(fused.mlm_logits, labels)
    return terms, img_target, txt_target


def train_step(state: TrainState, batch: StepBatch) -> LossReport:
    """One optimization step: losses, gradient update, EMA, queue pushes."""
    terms, img_target, txt_target = compute_losses(state, batch)
    total, report = total_loss(**terms)

    state.params.zero_grads()
    if total.requires_grad:
        total.backward()
    shadow_ids = state.shadow_ids()
    for t in state.optimizer.params.tensors():
        if id(t) in shadow_ids:
            raise ContractViolation("shadow parameter found in the optimizer update set")
    state.optimizer.step(lr_schedule(state.step, state.cfg))

    ema_update(state.vision_pair)
    ema_update(state.text_pair)
    state.text_queue.enqueue(txt_target.data)
    state.image_queue.enqueue(img_target.data)
    state.step += 1
    return report


# -- run loop -------------------------------------------------------------------------


def run(cfg: TrainConfig, out_dir: str, log=print) -> dict:
    """Train per config, write metrics.jsonl + checkpoints + eval.json under out_dir."""
    from . import evaluation  # local import: evaluation also serves the CLI alone

    os.makedirs(out_dir, exist_ok=True)
    if cfg.resume:
        state = load_state(cfg.resume)
        requested = {**cfg.to_dict(), "resume": ""}
        if state.cfg.to_dict() != requested:
            log("note: resuming with the checkpoint's own config")
        cfg = state.cfg  # the stored config governs the continued trace
        mode = "a"
    else:
        state = new_state(cfg)
        mode = "w"

    dataset = generate_dataset(
        cfg.train_count + cfg.eval_count, cfg.seed, cfg.grid, cfg.image_size, bool(cfg.synonyms)
    )
    train_pairs = dataset[: cfg.train_count]
    held_out = dataset[cfg.train_count :]

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    last_good = None
    steps_per_epoch = cfg.steps_per_epoch()
    total_steps = cfg.total_steps()
    perm, perm_epoch = None, -1
    with open(metrics_path, mode) as metrics:
        while state.step < total_steps:
            epoch, batch_idx = divmod(state.step, steps_per_epoch)
            if epoch != perm_epoch:
                perm = np.random.default_rng(
                    [abs(cfg.seed), STREAM_SHUFFLE, epoch]
                ).permutation(cfg.train_count)
                perm_epoch = epoch
            indices = perm[batch_idx * cfg.batch_size : (batch_idx + 1) * cfg.batch_size]
            batch = assemble_batch(train_pairs, indices, cfg, epoch)
            lr = lr_schedule(state.step, cfg)
            try:
                report = train_step(state, batch)
            except TrainingAbort as abort:
                abort.last_good_checkpoint = last_good
                raise
            row = {"step": state.step - 1, **report.as_dict(), "lr": lr, "tau": cfg.tau}
            metrics.write(json.dumps(row, sort_keys=True) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                last_good = os.path.join(out_dir, f"ckpt_{state.step:06d}.bin")
                save_state(state, last_good)
    final_path = os.path.join(out_dir, "ckpt_final.bin")
    save_state(state, final_path)

    result = evaluation.evaluate_retrieval_from_state(state, held_out)
    eval_doc = {
        "config": cfg.to_dict(),
        "build_id": evaluation.build_id(),
        "n_queries": result.n_queries,
        "tr_recall": result.tr_recall,
        "ir_recall": result.ir_recall,
        "mean_recall": result.mean_recall,
    }
    with open(os.path.join(out_dir, "eval.json"), "w") as f:
        json.dump(eval_doc, f, indent=2, sort_keys=True)
    log(
        f"finished {total_steps} steps; mean recall {result.mean_recall:.4f} "
        f"(TR R@1 {result.tr_recall[1]:.4f}, IR R@1 {result.ir_recall[1]:.4f})"
    )
    return {"checkpoint": final_path, "metrics": metrics_path, "eval": eval_doc}


def embed_pairs(state: TrainState, pairs: list[SyntheticPair]) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm online projections for clean (un-augmented) pairs."""
    images = np.stack([p.image for p in pairs])
    captions = np.stack([p.caption for p in pairs])
    with ad.no_grad():
        v = vision_encode(images, state.params, state.enc, source="online")
        t = text_encode(captions, state.params, state.enc)
        img = project(v, ProjectionHead(state.params["proj.v.w"], "f_v"), "cls").data
        txt = project(t, ProjectionHead(state.params["proj.t.w"], "f_t"), "cls").data
    return img, txt
