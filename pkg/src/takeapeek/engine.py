"""Test-time adaptation on the support set, plus the vanilla and Decoder-FT baselines.

Every support pair in turn plays the query ("pseudo-query"): prototypes come
from a selection of the *other* supports, the pseudo-query mask supervises a
focal loss, and one Adam step updates the trainable set.  One adaptation
iteration visits all N*K supports in index order; ``iterations`` such sweeps
are run.  The trainable set is the LoRA adapters (``tap``), the decoder
(``decoder_ft``), every learned weight (``full_ft``, profiling only) or empty
(``vanilla``).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .episodes import Episode
from .errors import ConfigError, EmptyContextError
from .lora import attach, count_trainable
from .losses import FocalConfig, background_iou, focal_loss_last, miou
from .optim import OptimizerState, adam_step, zero_grads
from .refnet import (ModelState, downsample_mask, encode_frontend, frontend, prototype_matrix,
                     segment_logits)

METHODS = ("vanilla", "tap", "decoder_ft", "full_ft")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "tap"
    iterations: int = 8
    rank: int = 16
    alpha: float = 1.0
    learning_rate: float = 1e-3
    select: str = "identity"
    select_j: int = 1
    gamma: float = 2.0
    weight_mode: str = "inverse_log_frequency"
    support_grad: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    track_query: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.select not in ("identity", "random_k"):
            raise ConfigError(f"unknown select strategy {self.select!r}")
        if self.select == "random_k" and self.select_j < 1:
            raise ConfigError("random_k needs j >= 1")

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(self.gamma, self.weight_mode)

    @property
    def policy_for(self):
        return {"conv": "pointwise_convs", "attention": "attention_projections"}


class SelectionStrategy:
    """Chooses the context supports for pseudo-query ``i``; never returns ``i``."""

    def __init__(self, tag: str = "identity", j: int = 1, seed: int = 0):
        self.tag = tag
        self.j = j
        self.rng = np.random.default_rng(seed)

    def __call__(self, i: int, n_support: int) -> list[int]:
        rest = [k for k in range(n_support) if k != i]
        if self.tag == "identity":
            return rest
        if not 1 <= self.j <= n_support - 1:
            raise ConfigError(f"random_k needs 1 <= j <= {n_support - 1}, got {self.j}")
        return sorted(int(k) for k in self.rng.choice(rest, self.j, replace=False))


@dataclass
class AdaptTrace:
    episode_id: str
    method: str
    rank: int
    iterations: int
    losses: list[float] = field(default_factory=list)
    query_miou: list[float] = field(default_factory=list)
    pass_seconds: list[float] = field(default_factory=list)
    replicated: int = 1

    @property
    def passes(self) -> int:
        return len(self.losses)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["T"] = rec.pop("iterations")
        rec["per_pass_loss"] = rec.pop("losses")
        rec["per_iteration_query_miou"] = rec.pop("query_miou")
        rec["wall_clock_per_pass"] = rec.pop("pass_seconds")
        return rec


def _episode_seed(cfg: AdaptConfig, episode: Episode) -> int:
    return int(np.random.SeedSequence([cfg.seed, episode.seed]).generate_state(1)[0])


def trainable_set(model: ModelState, method: str) -> list[tuple[str, Tensor]]:
    if method == "tap":
        return model.adapters.parameters() if model.adapters is not None else []
    if method == "decoder_ft":
        return model.decoder_params()
    if method == "full_ft":
        return list(model.params.items())
    return []


def prepare(model: ModelState, cfg: AdaptConfig, seed: int = 0) -> ModelState:
    """Fresh per-episode copy with the method's trainable set switched on."""
    m = model.clone()
    m.adapters = None
    m.freeze_all()
    if cfg.method == "tap":
        attach(m, cfg.policy_for[m.config.variant], cfg.rank, cfg.alpha, seed)
    for _, p in trainable_set(m, cfg.method):
        p.requires_grad = True
    return m


def predict_query(model: ModelState, episode: Episode) -> tuple[np.ndarray, Tensor]:
    """Segment the query against prototypes from the full support set.

    Returns the argmax mask ``(H, W)`` and logits ``(N+1, H, W)``.
    """
    with ag.no_grad():
        front = frontend(model, np.concatenate([episode.support_images, episode.query_image[None]]))
        feats = encode_frontend(model, front)
        S = len(episode.support_images)
        s_feats = ag.take(feats, np.arange(S), axis=0)
        q_feats = ag.take(feats, [S], axis=0)
        masks = downsample_mask(episode.support_masks, model.config.stride)
        protos = prototype_matrix(s_feats, masks, list(range(episode.num_classes)))
        logits = segment_logits(model, q_feats, protos)
    logits = ag.transpose(ag.reshape(logits, logits.shape[1:]), (2, 0, 1))
    pred = np.argmax(logits.data, axis=0).astype(np.float64)
    return pred, logits


def query_miou(model: ModelState, episode: Episode) -> float:
    pred, _ = predict_query(model, episode)
    return miou(pred, episode.query_mask, list(range(1, episode.num_classes)))


def _pass_loss(model: ModelState, front: np.ndarray, cached: Tensor | None, masks_lo: np.ndarray,
               truth: np.ndarray, i: int, ctx: list[int], num_classes: int, focal: FocalConfig,
               support_grad: bool = True) -> Tensor:
    if cached is not None:
        q_feats = ag.take(cached, [i], axis=0)
        c_feats = ag.take(cached, ctx, axis=0)
    elif support_grad:
        feats = encode_frontend(model, front[[i] + ctx])
        q_feats = ag.take(feats, [0], axis=0)
        c_feats = ag.take(feats, np.arange(1, len(ctx) + 1), axis=0)
    else:
        q_feats = encode_frontend(model, front[[i]])
        with ag.no_grad():
            c_feats = encode_frontend(model, front[ctx])
    # classes missing from a reduced context get no prototype; their
    # pseudo-query pixels are left out of the loss
    present = [c for c in range(num_classes) if np.any(masks_lo[ctx] == c)]
    protos = prototype_matrix(c_feats, masks_lo[ctx], present)
    logits = segment_logits(model, q_feats, protos)
    lookup = np.full(num_classes, -1)
    lookup[present] = np.arange(len(present))
    target = lookup[np.asarray(truth).astype(np.intp)]
    valid = target >= 0
    return focal_loss_last(ag.reshape(logits, logits.shape[1:]), np.where(valid, target, 0), focal, valid)


def pseudo_query_loss(model: ModelState, episode: Episode, i: int, ctx: Sequence[int] | None = None,
                      focal: FocalConfig = FocalConfig(), support_grad: bool = True) -> Tensor:
    """Focal loss of support ``i`` segmented against prototypes from ``ctx``.

    ``ctx`` defaults to every other support.  This is the quantity one
    adaptation pass differentiates.
    """
    n = len(episode.support_images)
    ctx = [k for k in range(n) if k != i] if ctx is None else list(ctx)
    if not ctx or i in ctx:
        raise EmptyContextError(f"context {ctx} is empty or contains the pseudo-query {i}")
    front = frontend(model, episode.support_images)
    masks_lo = downsample_mask(episode.support_masks, model.config.stride)
    return _pass_loss(model, front, None, masks_lo, episode.support_masks[i], i, ctx,
                      episode.num_classes, focal, support_grad)


def _finetune(model: ModelState, episode: Episode, cfg: AdaptConfig, trace: AdaptTrace,
              seed: int) -> None:
    n_support = len(episode.support_images)
    if n_support == 1 and cfg.select == "identity":
        raise EmptyContextError(
            "a single support pair leaves no context for the pseudo-query; "
            "enlarge the support set with replicate_support(episode, copies)")
    params = trainable_set(model, cfg.method)
    opt = OptimizerState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    select = SelectionStrategy(cfg.select, cfg.select_j, seed)
    focal = cfg.focal
    stride = model.config.stride
    front = frontend(model, episode.support_images)
    masks_lo = downsample_mask(episode.support_masks, stride)
    encoder_trains = cfg.method in ("tap", "full_ft")
    cached = None
    if not encoder_trains:
        with ag.no_grad():
            cached = encode_frontend(model, front)

    if cfg.track_query:
        trace.query_miou.append(query_miou(model, episode))
    for _ in range(cfg.iterations):
        for i in range(n_support):
            t0 = time.perf_counter()
            ctx = select(i, n_support)
            loss = _pass_loss(model, front, cached, masks_lo, episode.support_masks[i], i, ctx,
                              episode.num_classes, focal, cfg.support_grad)
            zero_grads(params)
            ag.backward(loss)
            adam_step(opt, params)
            trace.losses.append(loss.item())
            trace.pass_seconds.append(time.perf_counter() - t0)
        if cfg.track_query:
            trace.query_miou.append(query_miou(model, episode))
    zero_grads(params)


def adapt(model: ModelState, episode: Episode, cfg: AdaptConfig) -> tuple[ModelState, AdaptTrace]:
    """Run the configured method on one episode.

    The input model is never modified; a fresh copy carries the adaptation.
    With ``select="identity"`` exactly ``iterations * N * K`` forward-backward
    passes are made.
    """
    seed = _episode_seed(cfg, episode)
    adapted = prepare(model, cfg, seed)
    trace = AdaptTrace(episode.episode_id, cfg.method, cfg.rank if cfg.method == "tap" else 0,
                       cfg.iterations, replicated=episode.replicated)
    if cfg.method == "vanilla":
        if cfg.track_query:
            trace.query_miou = [query_miou(adapted, episode)] * (cfg.iterations + 1)
        return adapted, trace
    _finetune(adapted, episode, cfg, trace, seed)
    adapted.freeze_all()
    return adapted, trace


def decoder_ft(model: ModelState, episode: Episode, cfg: AdaptConfig) -> ModelState:
    """Decoder-only fine-tuning baseline (projection and temperature)."""
    if cfg.method != "decoder_ft":
        cfg = AdaptConfig(**{**asdict(cfg), "method": "decoder_ft"})
    return adapt(model, episode, cfg)[0]


def count_method_trainable(model: ModelState, cfg: AdaptConfig) -> int:
    if cfg.method == "vanilla":
        return 0
    if cfg.method == "tap":
        m = prepare(model, cfg)
        return count_trainable(m.adapters)
    return sum(p.data.size for _, p in trainable_set(model, cfg.method))


@dataclass
class EpisodeResult:
    index: int
    episode_id: str
    method: str
    miou: float
    background_iou: float
    seconds: float
    trace: AdaptTrace


def run_episode(model: ModelState, episode: Episode, cfg: AdaptConfig, index: int = 0) -> EpisodeResult:
    t0 = time.perf_counter()
    adapted, trace = adapt(model, episode, cfg)
    pred, _ = predict_query(adapted, episode)
    score = miou(pred, episode.query_mask, list(range(1, episode.num_classes)))
    return EpisodeResult(index, episode.episode_id, cfg.method, score,
                         background_iou(pred, episode.query_mask), time.perf_counter() - t0, trace)


def evaluate(model: ModelState, episodes: Sequence[Episode], cfg: AdaptConfig,
             workers: int = 1) -> list[EpisodeResult]:
    """Per-episode results in episode order; each episode starts from ``model``."""
    if workers <= 1:
        return [run_episode(model, ep, cfg, i) for i, ep in enumerate(episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda a: run_episode(model, a[1], cfg, a[0]), enumerate(episodes)))
    return sorted(results, key=lambda r: r.index)
