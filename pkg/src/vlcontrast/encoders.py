"""Toy-scale vision, text and fusion transformers with projection and task heads.

All forwards are pure functions of (params, input, seeds). Parameters live in a
ParamSet (ordered name -> Tensor) so the optimizer, the EMA shadow and the
checkpoint format all agree on one stable ordering.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .common import ConfigurationError, ContractViolation, STREAM_DROPOUT, STREAM_INIT, rng_from
from .synthdata import N_MAX, PAD_ID, VOCAB_SIZE


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    fusion_layers: int = 2
    d_proj: int = 32
    mlp_ratio: int = 4
    image_size: int = 64
    patch: int = 8
    vocab_size: int = VOCAB_SIZE
    n_max: int = N_MAX
    dropout: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02
    tap_layer: int = 0  # 0 = default: ceil(3L/4) clamped below the last layer

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def resolved_tap(self) -> int:
        if self.tap_layer:
            return self.tap_layer
        return min(max(1, math.ceil(3 * self.n_layers / 4)), max(1, self.n_layers - 1))


# -- parameter container --------------------------------------------------------


class ParamSet:
    """Ordered named parameter tensors with a stable save/load ordering."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def subset(self, *prefixes: str) -> "ParamSet":
        """View sharing the same Tensor objects (for EMA pairing)."""
        out = ParamSet()
        for name, t in self._params.items():
            if name.startswith(prefixes):
                out._params[name] = t
        return out

    def copy(self, requires_grad: bool = False) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), requires_grad=requires_grad)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, t in self._params.items():
            src = state[name]
            if src.shape != t.data.shape:
                raise ContractViolation(f"shape mismatch loading {name}: {src.shape} vs {t.data.shape}")
            t.data = np.asarray(src, dtype=np.float64).copy()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None


def _init_block(p: ParamSet, prefix: str, d: int, mlp: int, rng, std: float, cross: bool = False):
    p.add(f"{prefix}.ln1.g", np.ones(d))
    p.add(f"{prefix}.ln1.b", np.zeros(d))
    p.add(f"{prefix}.attn.wqkv", rng.normal(0, std, (d, 3 * d)))
    p.add(f"{prefix}.attn.bqkv", np.zeros(3 * d))
    p.add(f"{prefix}.attn.wo", rng.normal(0, std, (d, d)))
    p.add(f"{prefix}.attn.bo", np.zeros(d))
    if cross:
        p.add(f"{prefix}.lnc.g", np.ones(d))
        p.add(f"{prefix}.lnc.b", np.zeros(d))
        p.add(f"{prefix}.cross.wq", rng.normal(0, std, (d, d)))
        p.add(f"{prefix}.cross.bq", np.zeros(d))
        p.add(f"{prefix}.cross.wkv", rng.normal(0, std, (d, 2 * d)))
        p.add(f"{prefix}.cross.bkv", np.zeros(2 * d))
        p.add(f"{prefix}.cross.wo", rng.normal(0, std, (d, d)))
        p.add(f"{prefix}.cross.bo", np.zeros(d))
    p.add(f"{prefix}.ln2.g", np.ones(d))
    p.add(f"{prefix}.ln2.b", np.zeros(d))
    p.add(f"{prefix}.mlp.w1", rng.normal(0, std, (d, mlp)))
    p.add(f"{prefix}.mlp.b1", np.zeros(mlp))
    p.add(f"{prefix}.mlp.w2", rng.normal(0, std, (mlp, d)))
    p.add(f"{prefix}.mlp.b2", np.zeros(d))


def build_params(cfg: EncoderConfig, seed: int) -> ParamSet:
    """All trainable parameters for the full model, deterministically initialized."""
    if cfg.image_size % cfg.patch != 0:
        raise ConfigurationError(f"image_size {cfg.image_size} not divisible by patch {cfg.patch}")
    if cfg.d_model % cfg.n_heads != 0:
        raise ConfigurationError("d_model must be divisible by n_heads")
    rng = rng_from(seed, STREAM_INIT)
    d, std, mlp = cfg.d_model, cfg.init_std, cfg.mlp_ratio * cfg.d_model
    p = ParamSet()
    patch_dim = 3 * cfg.patch * cfg.patch
    p.add("vision.patch_embed.w", rng.normal(0, std, (patch_dim, d)))
    p.add("vision.patch_embed.b", np.zeros(d))
    p.add("vision.cls", rng.normal(0, std, (d,)))
    p.add("vision.pos", rng.normal(0, std, (1 + cfg.n_patches, d)))
    for i in range(cfg.n_layers):
        _init_block(p, f"vision.blocks.{i}", d, mlp, rng, std)
    p.add("vision.lnf.g", np.ones(d))
    p.add("vision.lnf.b", np.zeros(d))
    p.add("text.tok", rng.normal(0, std, (cfg.vocab_size, d)))
    p.add("text.pos", rng.normal(0, std, (cfg.n_max, d)))
    for i in range(cfg.n_layers):
        _init_block(p, f"text.blocks.{i}", d, mlp, rng, std)
    p.add("text.lnf.g", np.ones(d))
    p.add("text.lnf.b", np.zeros(d))
    for i in range(cfg.fusion_layers):
        _init_block(p, f"fusion.blocks.{i}", d, mlp, rng, std, cross=True)
    p.add("fusion.lnf.g", np.ones(d))
    p.add("fusion.lnf.b", np.zeros(d))
    # projection heads are bias-free linear maps followed by L2 normalization
    p.add("proj.v.w", rng.normal(0, std, (d, cfg.d_proj)))
    p.add("proj.t.w", rng.normal(0, std, (d, cfg.d_proj)))
    p.add("head.itm.w", rng.normal(0, std, (d, 2)))
    p.add("head.itm.b", np.zeros(2))
    p.add("head.mlm.w", rng.normal(0, std, (d, cfg.vocab_size)))
    p.add("head.mlm.b", np.zeros(cfg.vocab_size))
    return p


# -- domain types -----------------------------------------------------------------


@dataclass
class EmbeddingSet:
    cls: Tensor  # (B, d)
    locals: Tensor  # (B, M or N-1, d)
    modality: str  # vision | text
    source: str  # online | momentum
    pad_mask: np.ndarray | None = None  # text: True where locals are [PAD]
    intermediate_locals: Tensor | None = None  # tap for the local-MI ablation


@dataclass
class ProjectionHead:
    weight: Tensor
    role: str  # f_v | f_t | fhat_v | fhat_t


@dataclass
class FusionOutput:
    joint_cls: Tensor  # (B, d)
    token_states: Tensor  # (B, N, d)
    itm_logits: Tensor  # (B, 2), pre-softmax
    mlm_logits: Tensor | None  # (n_masked, vocab) at masked positions only


# -- building blocks ----------------------------------------------------------------


def _dropout(x: Tensor, rng, rate: float) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float) -> Tensor:
    return ad.layer_norm_affine(x, g, b, eps)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return ad.transpose(x.reshape((b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return ad.transpose(x, (0, 2, 1, 3)).reshape((b, s, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = ad.mul(q @ ad.transpose(k, (0, 1, 3, 2)), scale)
    if key_mask is not None:
        scores = ad.add(scores, key_mask)  # -1e9 at masked keys
    return ad.softmax(scores, axis=-1) @ v


def _self_attention(x: Tensor, p: ParamSet, prefix: str, n_heads: int, key_mask=None) -> Tensor:
    qkv = ad.add(x @ p[f"{prefix}.wqkv"], p[f"{prefix}.bqkv"])
    d = x.shape[-1]
    q = _split_heads(qkv[:, :, 0:d], n_heads)
    k = _split_heads(qkv[:, :, d : 2 * d], n_heads)
    v = _split_heads(qkv[:, :, 2 * d : 3 * d], n_heads)
    ctx = _merge_heads(_attend(q, k, v, key_mask))
    return ad.add(ctx @ p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _cross_attention(x: Tensor, memory: Tensor, p: ParamSet, prefix: str, n_heads: int) -> Tensor:
    d = x.shape[-1]
    q = _split_heads(ad.add(x @ p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    kv = ad.add(memory @ p[f"{prefix}.wkv"], p[f"{prefix}.bkv"])
    k = _split_heads(kv[:, :, 0:d], n_heads)
    v = _split_heads(kv[:, :, d : 2 * d], n_heads)
    ctx = _merge_heads(_attend(q, k, v, None))
    return ad.add(ctx @ p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _block(x: Tensor, p: ParamSet, prefix: str, cfg: EncoderConfig, rng, rate, key_mask=None, memory=None) -> Tensor:
    h = layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], cfg.ln_eps)
    x = ad.add(x, _dropout(_self_attention(h, p, f"{prefix}.attn", cfg.n_heads, key_mask), rng, rate))
    if memory is not None:
        h = layer_norm(x, p[f"{prefix}.lnc.g"], p[f"{prefix}.lnc.b"], cfg.ln_eps)
        x = ad.add(x, _dropout(_cross_attention(h, memory, p, f"{prefix}.cross", cfg.n_heads), rng, rate))
    h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], cfg.ln_eps)
    h = ad.add(ad.gelu(ad.add(h @ p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])) @ p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return ad.add(x, _dropout(h, rng, rate))


# -- operations ---------------------------------------------------------------------


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patches in row-major order, flattened to (..., M, 3*patch*patch)."""
    single = image.ndim == 3
    if single:
        image = image[None]
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image dims ({h},{w}) not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    out = (
        image.reshape(b, c, gh, patch, gw, patch)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, gh * gw, c * patch * patch)
    )
    return out[0] if single else out


def vision_embed(images: np.ndarray, params: ParamSet, cfg: EncoderConfig) -> Tensor:
    """Patch projection + [CLS] + positional table: the pre-attention states."""
    patches = patchify(np.asarray(images, dtype=np.float64), cfg.patch)
    if patches.ndim == 2:
        patches = patches[None]
    x = ad.add(Tensor(patches) @ params["vision.patch_embed.w"], params["vision.patch_embed.b"])
    b = x.shape[0]
    cls = ad.broadcast_to(params["vision.cls"].reshape((1, 1, cfg.d_model)), (b, 1, cfg.d_model))
    return ad.add(ad.concat([cls, x], axis=1), params["vision.pos"])


def vision_encode(
    images: np.ndarray,
    params: ParamSet,
    cfg: EncoderConfig,
    source: str = "online",
    dropout_seed: int | None = None,
    dropout_rate: float = 0.0,
    want_intermediate: bool = False,
) -> EmbeddingSet:
    x = vision_embed(images, params, cfg)
    rng = rng_from(dropout_seed, STREAM_DROPOUT, 0) if dropout_seed is not None and dropout_rate > 0 else None
    x = _dropout(x, rng, dropout_rate)
    tap = cfg.resolved_tap()
    intermediate = None
    for i in range(cfg.n_layers):
        x = _block(x, params, f"vision.blocks.{i}", cfg, rng, dropout_rate)
        if want_intermediate and (i + 1) == tap:
            intermediate = x[:, 1:, :]
    x = layer_norm(x, params["vision.lnf.g"], params["vision.lnf.b"], cfg.ln_eps)
    return EmbeddingSet(
        cls=x[:, 0, :], locals=x[:, 1:, :], modality="vision", source=source, intermediate_locals=intermediate
    )


def _pad_key_mask(ids: np.ndarray) -> np.ndarray:
    mask = np.zeros((ids.shape[0], 1, 1, ids.shape[1]))
    mask[:, 0, 0, :][ids == PAD_ID] = -1e9
    return mask


def text_encode(
    token_ids: np.ndarray,
    params: ParamSet,
    cfg: EncoderConfig,
    dropout_seed: int | None = None,
    dropout_rate: float | None = None,
    source: str = "online",
    want_intermediate: bool = False,
) -> EmbeddingSet:
    """Encode token ids; a dropout_seed activates dropout (the self-augmentation path)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ContractViolation(f"token id out of range (vocab {cfg.vocab_size})")
    rate = cfg.dropout if dropout_rate is None else dropout_rate
    rng = rng_from(dropout_seed, STREAM_DROPOUT, 1) if dropout_seed is not None and rate > 0 else None
    x = ad.add(params["text.tok"][ids], params["text.pos"][: ids.shape[1]])
    x = _dropout(x, rng, rate)
    key_mask = _pad_key_mask(ids)
    tap = cfg.resolved_tap()
    intermediate = None
    for i in range(cfg.n_layers):
        x = _block(x, params, f"text.blocks.{i}", cfg, rng, rate, key_mask=key_mask)
        if want_intermediate and (i + 1) == tap:
            intermediate = x[:, 1:, :]
    x = layer_norm(x, params["text.lnf.g"], params["text.lnf.b"], cfg.ln_eps)
    return EmbeddingSet(
        cls=x[:, 0, :],
        locals=x[:, 1:, :],
        modality="text",
        source=source,
        pad_mask=(ids[:, 1:] == PAD_ID),
        intermediate_locals=intermediate,
    )


def fuse(
    image_set: EmbeddingSet,
    text_set: EmbeddingSet,
    params: ParamSet,
    cfg: EncoderConfig,
    text_ids: np.ndarray | None = None,
    mlm_positions: tuple[np.ndarray, np.ndarray] | None = None,
    dropout_seed: int | None = None,
    dropout_rate: float = 0.0,
) -> FusionOutput:
    """Cross-attention fusion: text states query image states; heads on top.

    mlm_positions is (batch_idx, seq_idx) into the full text sequence; the
    vocabulary head is evaluated only there.
    """
    if image_set.modality != "vision" or text_set.modality != "text":
        raise ContractViolation("fuse expects (vision, text) embedding sets")
    if image_set.source != "online" or text_set.source != "online":
        raise ContractViolation("momentum embeddings never enter fusion")
    x = ad.concat([text_set.cls.reshape((text_set.cls.shape[0], 1, -1)), text_set.locals], axis=1)
    memory = ad.concat([image_set.cls.reshape((image_set.cls.shape[0], 1, -1)), image_set.locals], axis=1)
    key_mask = _pad_key_mask(text_ids) if text_ids is not None else None
    rng = rng_from(dropout_seed, STREAM_DROPOUT, 2) if dropout_seed is not None and dropout_rate > 0 else None
    for i in range(cfg.fusion_layers):
        x = _block(x, params, f"fusion.blocks.{i}", cfg, rng, dropout_rate, key_mask=key_mask, memory=memory)
    x = layer_norm(x, params["fusion.lnf.g"], params["fusion.lnf.b"], cfg.ln_eps)
    joint_cls = x[:, 0, :]
    itm_logits = ad.add(joint_cls @ params["head.itm.w"], params["head.itm.b"])
    mlm_logits = None
    if mlm_positions is not None and mlm_positions[0].size:
        states = x[(mlm_positions[0], mlm_positions[1])]
        mlm_logits = ad.add(states @ params["head.mlm.w"], params["head.mlm.b"])
    return FusionOutput(joint_cls=joint_cls, token_states=x, itm_logits=itm_logits, mlm_logits=mlm_logits)


_ROLE_EXPECTS = {
    "f_v": ("vision", "online"),
    "f_t": ("text", "online"),
    "fhat_v": ("vision", "momentum"),
    "fhat_t": ("text", "momentum"),
}


def project(embedding_set: EmbeddingSet, head: ProjectionHead, which: str = "cls", pool_target: int | None = None) -> Tensor:
    """Linear map + L2 normalization into the shared contrastive space."""
    expected = _ROLE_EXPECTS.get(head.role)
    if expected is None:
        raise ContractViolation(f"unknown projection role {head.role!r}")
    if (embedding_set.modality, embedding_set.source) != expected:
        raise ContractViolation(
            f"projection role {head.role} expects {expected}, got "
            f"({embedding_set.modality}, {embedding_set.source})"
        )
    if which == "cls":
        x = embedding_set.cls
    elif which == "locals":
        x = embedding_set.locals
    elif which == "pooled_locals":
        from .objectives import pool_patches

        x = pool_patches(embedding_set.locals, pool_target)
    else:
        raise ContractViolation(f"unknown projection input {which!r}")
    return ad.l2_normalize(x @ head.weight, axis=-1)
