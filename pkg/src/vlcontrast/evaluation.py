"""Retrieval metrics, exact-MI oracle, contrastive-bound check, gradient checks.

Everything here is read-only over model state: these are the verification
surfaces the training artifact is judged by.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import math
import os
import struct
import subprocess

import numpy as np

from . import autodiff as ad
from .common import ConfigurationError, ContractViolation, STREAM_CRITIC, STREAM_GRADCHECK, rng_from
from .encoders import ParamSet, build_params
from .objectives import TERM_NAMES, infonce_from_logits, total_loss
from .training import AdamW, TrainConfig, TrainState, assemble_batch, compute_losses, embed_pairs, new_state
from .synthdata import generate_dataset

RECALL_KS = (1, 5, 10)


# -- retrieval ---------------------------------------------------------------------


@dataclass
class RetrievalResult:
    tr_recall: dict  # text retrieval (image query): k -> recall
    ir_recall: dict  # image retrieval (text query)
    mean_recall: float
    n_queries: int


def _recalls(sims: np.ndarray, gt: np.ndarray) -> dict:
    order = np.argsort(-sims, axis=1, kind="stable")  # stable: ties break by index
    ranks = np.argmax(order == gt[:, None], axis=1)
    return {k: float(np.mean(ranks < k)) for k in RECALL_KS}


def retrieval_eval(image_embeddings: np.ndarray, text_embeddings: np.ndarray, ground_truth_pairs) -> RetrievalResult:
    """Recall@k over the full cosine-similarity matrix, both directions.

    ground_truth_pairs: iterable of (image_index, text_index) matches, one per
    image and one per text.
    """
    imgs = np.asarray(image_embeddings, dtype=np.float64)
    txts = np.asarray(text_embeddings, dtype=np.float64)
    if imgs.ndim != 2 or txts.ndim != 2 or imgs.shape[1] != txts.shape[1]:
        raise ContractViolation(f"embedding shapes {imgs.shape} and {txts.shape} are incompatible")
    pairs = list(ground_truth_pairs)
    img2txt = np.full(imgs.shape[0], -1, dtype=np.int64)
    txt2img = np.full(txts.shape[0], -1, dtype=np.int64)
    for i, j in pairs:
        img2txt[i] = j
        txt2img[j] = i
    if np.any(img2txt < 0) or np.any(txt2img < 0):
        raise ContractViolation("ground truth must cover every image and every text")
    sims = imgs @ txts.T
    tr = _recalls(sims, img2txt)
    ir = _recalls(sims.T, txt2img)
    mean = float(np.mean([tr[k] for k in RECALL_KS] + [ir[k] for k in RECALL_KS]))
    return RetrievalResult(tr_recall=tr, ir_recall=ir, mean_recall=mean, n_queries=imgs.shape[0])


def evaluate_retrieval_from_state(state: TrainState, pairs) -> RetrievalResult:
    img, txt = embed_pairs(state, pairs)
    return retrieval_eval(img, txt, [(i, i) for i in range(len(pairs))])


def null_recall_stats(n_queries: int, dim: int = 32, resamples: int = 100, seed: int = 0):
    """Monte-Carlo chance baseline: mean and std of R@k for random unit embeddings."""
    rng = rng_from(seed, 999)
    samples = {k: [] for k in RECALL_KS}
    for _ in range(resamples):
        a = rng.normal(size=(n_queries, dim))
        b = rng.normal(size=(n_queries, dim))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        r = retrieval_eval(a, b, [(i, i) for i in range(n_queries)])
        for k in RECALL_KS:
            samples[k].append(r.tr_recall[k])
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in samples.items()}


# -- exact mutual information --------------------------------------------------------


@dataclass
class DiscreteJoint:
    table: np.ndarray  # p(x, y) over finite supports

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or np.any(self.table < 0) or abs(self.table.sum() - 1.0) > 1e-9:
            raise ContractViolation("joint table must be a nonnegative matrix summing to 1")

    @property
    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.table.sum(axis=0)


def exact_mi(joint: DiscreteJoint) -> float:
    """Sum of p(x,y) ln(p(x,y) / (p(x) p(y))), with 0 ln 0 = 0."""
    p = joint.table
    outer = np.outer(joint.px, joint.py)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))


def independent_joint(nx: int = 8, ny: int = 8, seed: int = 0) -> DiscreteJoint:
    rng = rng_from(seed, 101)
    px = rng.random(nx) + 0.2
    py = rng.random(ny) + 0.2
    return DiscreteJoint(np.outer(px / px.sum(), py / py.sum()))


def correlated_joint(n: int = 8) -> DiscreteJoint:
    return DiscreteJoint(np.eye(n) / n)


def mixture_joint(alpha: float, n: int = 8, seed: int = 0) -> DiscreteJoint:
    """alpha of a permutation diagonal blended into a random independent table."""
    rng = rng_from(seed, 102)
    perm = rng.permutation(n)
    diag = np.zeros((n, n))
    diag[np.arange(n), perm] = 1.0 / n
    px = rng.random(n) + 0.2
    py = rng.random(n) + 0.2
    indep = np.outer(px / px.sum(), py / py.sum())
    return DiscreteJoint(alpha * diag + (1 - alpha) * indep)


def regression_joints() -> list[tuple[str, DiscreteJoint]]:
    """The fixed 10-joint suite used by the bound regression."""
    joints = [("independent", independent_joint(seed=0)), ("correlated", correlated_joint())]
    for i, alpha in enumerate((0.1, 0.2, 0.35, 0.5, 0.65, 0.8, 0.9, 0.95)):
        joints.append((f"mixture_{alpha}", mixture_joint(alpha, seed=i)))
    return joints


# -- contrastive lower-bound check ------------------------------------------------------


@dataclass
class BoundCheck:
    bound: float  # ln(K+1) - L at convergence
    exact: float
    margin: float  # exact - bound
    converged: bool
    losses: list


def nce_bound_check(
    joint: DiscreteJoint,
    K: int = 63,
    steps: int = 600,
    batch: int = 256,
    critic_dim: int = 16,
    lr: float = 0.05,
    seed: int = 0,
    eval_samples: int = 16384,
    var_threshold: float = 0.05,
) -> BoundCheck:
    """Train a bilinear critic on (x, y) pairs; negatives come from the product
    of marginals. Reports ln(K+1) - L_nce against the exact MI."""
    exact = exact_mi(joint)
    nx, ny = joint.table.shape
    flat = joint.table.reshape(-1)
    py = joint.py

    params = ParamSet()
    init = rng_from(seed, STREAM_CRITIC, 0)
    ex = params.add("critic.x", init.normal(0, 0.1, (nx, critic_dim)))
    ey = params.add("critic.y", init.normal(0, 0.1, (ny, critic_dim)))
    opt = AdamW(params, weight_decay=0.0)

    def score_batch(rng, n):
        xy = rng.choice(nx * ny, size=n, p=flat)
        xs, ys = np.divmod(xy, ny)
        negs = rng.choice(ny, size=(n, K), p=py) if K > 0 else np.zeros((n, 0), dtype=np.int64)
        ax = ex[xs]  # (n, d)
        pos = ad.tsum(ad.mul(ax, ey[ys]), axis=-1)
        neg = None
        if K > 0:
            neg = (ax.reshape((n, 1, critic_dim)) @ ad.transpose(ey[negs], (0, 2, 1))).reshape((n, K))
        return infonce_from_logits(pos, neg)

    train_rng = rng_from(seed, STREAM_CRITIC, 1)
    losses = []
    for _ in range(steps):
        loss = score_batch(train_rng, batch)
        params.zero_grads()
        loss.backward()
        opt.step(lr)
        losses.append(float(loss.item()))
    converged = bool(np.var(losses[-100:]) <= var_threshold)
    with ad.no_grad():
        eval_loss = float(score_batch(rng_from(seed, STREAM_CRITIC, 2), eval_samples).item())
    bound = math.log(K + 1) - eval_loss
    return BoundCheck(bound=bound, exact=exact, margin=exact - bound, converged=converged, losses=losses)


# -- gradient checks -----------------------------------------------------------------


@dataclass
class GradcheckReport:
    term: str
    max_rel_error: float
    worst_param: str
    n_coordinates: int
    passed: bool
    per_param: dict


def micro_config(seed: int = 0) -> TrainConfig:
    """Smallest configuration that still exercises every differentiated path."""
    return TrainConfig(
        train_count=3,
        eval_count=1,
        grid=2,
        image_size=32,
        d_model=8,
        n_heads=2,
        n_layers=1,
        fusion_layers=1,
        d_proj=4,
        patch=8,
        lmi_pool_target=4,
        queue_size=8,
        batch_size=3,
        epochs=1,
        itm_hard_negatives=0,  # keeps sampled indices independent of the perturbation
        seed=seed,
    )


def _gradcheck_setup(term: str, cfg: TrainConfig):
    gates = {f"use_{name}": int(term in (name, "total")) for name in TERM_NAMES}
    cfg = replace(cfg, **gates)
    state = new_state(cfg)
    # shadow parameters differ from the online ones so stop-gradient paths are exercised
    alt = build_params(state.enc, cfg.seed + 1000)
    for pair in (state.vision_pair, state.text_pair):
        for name, t in pair.shadow.items():
            t.data = alt[name].data.copy()
    pairs = generate_dataset(cfg.batch_size, cfg.seed + 2000, cfg.grid, cfg.image_size)
    batch = assemble_batch(pairs, np.arange(cfg.batch_size), cfg, epoch=0)

    def loss_value() -> float:
        terms, _, _ = compute_losses(state, batch)
        total, _ = total_loss(**terms)
        return float(total.item())

    def loss_tensor():
        terms, _, _ = compute_losses(state, batch)
        total, _ = total_loss(**terms)
        return total

    return state, loss_value, loss_tensor


def gradcheck(
    term: str = "total",
    seed: int = 0,
    coords_per_tensor: int = 5,
    step: float = 1e-5,
    threshold: float = 1e-3,
    config: TrainConfig | None = None,
) -> GradcheckReport:
    """Central finite differences against analytic gradients, end to end.

    Checks a deterministic random subset of coordinates in every parameter
    tensor and reports the worst relative error (denominator floored at 1e-6).
    """
    if term not in TERM_NAMES + ("total",):
        raise ConfigurationError(f"term must be one of {TERM_NAMES + ('total',)}")
    cfg = config if config is not None else micro_config(seed)
    state, loss_value, loss_tensor = _gradcheck_setup(term, cfg)

    state.params.zero_grads()
    loss_tensor().backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in state.params.items()}

    per_param: dict[str, float] = {}
    worst, worst_param, n_checked = 0.0, "", 0
    for tensor_index, (name, t) in enumerate(state.params.items()):
        flat = t.data.reshape(-1)
        size = flat.size
        rng = rng_from(seed, STREAM_GRADCHECK, tensor_index)
        coords = rng.choice(size, size=min(coords_per_tensor, size), replace=False)
        worst_here = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = loss_value()
            flat[c] = orig - step
            lo = loss_value()
            flat[c] = orig
            fd = (hi - lo) / (2 * step)
            an = float(analytic[name].reshape(-1)[c])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst_here = max(worst_here, rel)
            n_checked += 1
        per_param[name] = worst_here
        if worst_here >= worst:
            worst, worst_param = worst_here, name
    return GradcheckReport(
        term=term,
        max_rel_error=worst,
        worst_param=worst_param,
        n_coordinates=n_checked,
        passed=worst < threshold,
        per_param=per_param,
    )


# -- misc artifacts -----------------------------------------------------------------


def build_id() -> str:
    """git-describe-style identifier of the code that produced a result."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "vlcontrast-0.1.0"


def save_similarity_matrix(path: str, sims: np.ndarray):
    """Binary f32 row-major dump with a small header (magic TCLS, version, rows, cols)."""
    sims = np.asarray(sims)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", b"TCLS", 1, sims.shape[0], sims.shape[1]))
        f.write(np.ascontiguousarray(sims, dtype="<f4").tobytes())


def load_similarity_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, version, rows, cols = struct.unpack("<4sIII", f.read(16))
        if magic != b"TCLS" or version != 1:
            raise ConfigurationError("not a similarity matrix file")
        return np.frombuffer(f.read(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float64)
