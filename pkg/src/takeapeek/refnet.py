"""Tiny encoder-decoder used as the few-shot segmentation model.

Feature maps are kept channel-last, ``(B, h, w, D)``, so every projection is a
row-vector product ``x @ W`` with ``W`` stored ``in x out``.  The public
``encode``/``decode`` helpers convert to the channel-first layout used at the
API boundary.

Two encoder variants:

* ``conv``: frozen stride-2 3x3 stem, then ``blocks`` residual blocks of frozen
  depthwise 3x3 mixing, a 1x1 projection and ReLU, then a 1x1 head.  The four
  1x1 layers are the adapter targets.
* ``attention``: linear patch embedding plus learned positions, then
  ``blocks`` single-head attention blocks (Q/K/V/O projections are the adapter
  targets) each followed by a pointwise feed-forward.

The decoder is a learned ``D x D`` projection and a temperature applied to
cosine similarity against masked-average prototypes.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (ConfigError, ContractError, DataError, DimensionError, MissingClassError,
                     TrainingError)
from .lora import AdapterSet, adapted_forward
from .losses import FocalConfig, focal_loss_last
from .optim import OptimizerState, adam_step, zero_grads


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "conv"
    channels: int = 32
    dim: int = 32
    blocks: int = 3
    patch: int = 4
    image_size: int = 32
    tau: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("conv", "attention"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        for key in ("channels", "dim", "blocks", "patch", "image_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key} must be positive")
        if self.image_size % self.stride:
            raise ConfigError(f"image size {self.image_size} not divisible by stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 if self.variant == "conv" else self.patch


@dataclass
class Prototype:
    class_id: int
    vector: Tensor


@dataclass
class DecoderState:
    projection: Tensor
    tau: Tensor


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    frozen: dict[str, np.ndarray]
    kinds: dict[str, str]
    adapters: AdapterSet | None = None
    meta: dict = field(default_factory=dict)

    # -- parameter bookkeeping ---------------------------------------------
    def layers_of_kind(self, kind: str) -> list[str]:
        return [name for name, k in self.kinds.items() if k == kind]

    def encoder_params(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if k.startswith("encoder.")]

    def decoder_params(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if k.startswith("decoder.")]

    def all_tensors(self) -> list[tuple[str, Tensor]]:
        items = list(self.params.items())
        items += [(k, Tensor(v)) for k, v in self.frozen.items()]
        if self.adapters is not None:
            items += self.adapters.parameters()
        return items

    def num_parameters(self) -> int:
        """Base model size: learned weights plus the fixed stem/depthwise kernels."""
        return sum(p.data.size for p in self.params.values()) + \
            sum(a.size for a in self.frozen.values())

    def freeze_all(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for k, p in self.params.items():
            p.requires_grad = k in names

    @property
    def decoder(self) -> DecoderState:
        return DecoderState(self.params["decoder.proj"], self.params["decoder.tau"])

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


# ----------------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------------

def build_model(config: ModelConfig = ModelConfig()) -> ModelState:
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    frozen: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    C, D = config.channels, config.dim

    def linear(name, m, n, kind, bias=True, scale=1.0):
        params[f"{name}.weight"] = rng.normal(0.0, scale / math.sqrt(m), size=(m, n))
        if bias:
            params[f"{name}.bias"] = np.zeros(n)
        kinds[name] = kind

    if config.variant == "conv":
        frozen["encoder.stem.weight"] = rng.normal(0.0, math.sqrt(2.0 / 27), size=(3, 3, 3, C))
        frozen["encoder.stem.bias"] = rng.normal(0.0, 0.1, size=C)
        for i in range(config.blocks):
            frozen[f"encoder.block{i}.dw"] = rng.normal(0.0, 1.0 / 3, size=(3, 3, C))
            linear(f"encoder.block{i}.pw", C, C, "pointwise", scale=math.sqrt(2.0))
        linear("encoder.head", C, D, "pointwise")
    else:
        P = config.patch
        tokens = (config.image_size // P) ** 2
        linear("encoder.embed", 3 * P * P, D, "embedding")
        params["encoder.pos"] = rng.normal(0.0, 0.1, size=(tokens, D))
        for i in range(config.blocks):
            for proj in ("q", "k", "v"):
                linear(f"encoder.block{i}.{proj}", D, D, "attention", bias=False)
            linear(f"encoder.block{i}.o", D, D, "attention", bias=False, scale=0.5)
            linear(f"encoder.block{i}.ff1", D, D, "feedforward", scale=math.sqrt(2.0))
            linear(f"encoder.block{i}.ff2", D, D, "feedforward", scale=0.5)
    params["decoder.proj"] = np.eye(D) + rng.normal(0.0, 0.01, size=(D, D))
    params["decoder.tau"] = np.array(config.tau)
    return ModelState(
        config=config,
        params={k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()},
        frozen=frozen,
        kinds=kinds,
        meta={"seed": config.seed, "meta_train_steps": 0},
    )


# ----------------------------------------------------------------------------
# encoder
# ----------------------------------------------------------------------------

def _stem(images: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2, same-padded 3x3 conv + ReLU on ``(B, 3, H, W)``; returns ``(B, H/2, W/2, C)``."""
    x = np.pad(np.transpose(images, (0, 2, 3, 1)), ((0, 0), (1, 1), (1, 1), (0, 0)))
    h, w = images.shape[2] // 2, images.shape[3] // 2
    out = np.zeros((images.shape[0], h, w, weight.shape[-1]))
    for ky in range(3):
        for kx in range(3):
            out += x[:, ky:ky + 2 * h:2, kx:kx + 2 * w:2, :] @ weight[ky, kx]
    return np.maximum(out + bias, 0.0)


def _linear(model: ModelState, name: str, x: Tensor) -> Tensor:
    adapter = model.adapters.get(name) if model.adapters is not None else None
    y = adapted_forward(x, model.params[f"{name}.weight"], adapter)
    bias = model.params.get(f"{name}.bias")
    return ag.add_bias(y, bias) if bias is not None else y


def _patchify(images: np.ndarray, P: int) -> np.ndarray:
    B, c, H, W = images.shape
    x = images.reshape(B, c, H // P, P, W // P, P)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // P) * (W // P), c * P * P)


def frontend(model: ModelState, images) -> np.ndarray:
    """The fixed, parameter-free-for-adaptation input stage.

    Conv: the frozen stem output ``(B, H/2, W/2, C)``.  Attention: flattened
    patches ``(B, T, 3*P*P)``.  Depends only on the images, so callers that
    re-encode the same images may compute it once.
    """
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    cfg = model.config
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected a (B, 3, H, W) image batch, got {images.shape}")
    s = cfg.stride
    if images.shape[2] % s or images.shape[3] % s:
        raise DimensionError(f"image size {images.shape[2]}x{images.shape[3]} not divisible by stride {s}")
    if cfg.variant == "conv":
        return _stem(images, model.frozen["encoder.stem.weight"], model.frozen["encoder.stem.bias"])
    return _patchify(images, cfg.patch)


def encode_frontend(model: ModelState, front: np.ndarray) -> Tensor:
    """Differentiable part of the encoder, from ``frontend`` output to ``(B, h, w, D)``."""
    cfg = model.config
    if cfg.variant == "conv":
        B, h, w, C = front.shape
        x = Tensor(front)
        for i in range(cfg.blocks):
            y = ag.depthwise3x3(x, model.frozen[f"encoder.block{i}.dw"])
            y = _linear(model, f"encoder.block{i}.pw", ag.reshape(y, (B * h * w, C)))
            x = x + ag.reshape(ag.relu(y), (B, h, w, C))
        feats = _linear(model, "encoder.head", ag.reshape(x, (B * h * w, C)))
        return ag.reshape(feats, (B, h, w, cfg.dim))

    D = cfg.dim
    B, T, _ = front.shape
    h = w = int(round(math.sqrt(T)))
    x = _linear(model, "encoder.embed", Tensor(front.reshape(B * T, -1)))
    x = ag.reshape(ag.add_bias(ag.reshape(x, (B, T, D)), model.params["encoder.pos"]), (B * T, D))
    scale = 1.0 / math.sqrt(D)
    for i in range(cfg.blocks):
        pre = f"encoder.block{i}"
        q = ag.reshape(_linear(model, f"{pre}.q", x), (B, T, D))
        k = ag.reshape(_linear(model, f"{pre}.k", x), (B, T, D))
        v = ag.reshape(_linear(model, f"{pre}.v", x), (B, T, D))
        att = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 2, 1))) * scale, axis=-1)
        mixed = ag.reshape(ag.matmul(att, v), (B * T, D))
        x = x + _linear(model, f"{pre}.o", mixed)
        x = x + _linear(model, f"{pre}.ff2", ag.relu(_linear(model, f"{pre}.ff1", x)))
    return ag.reshape(x, (B, h, w, D))


def encode_batch(model: ModelState, images) -> Tensor:
    """Encode ``(B, 3, H, W)`` images to channel-last features ``(B, H/s, W/s, D)``."""
    return encode_frontend(model, frontend(model, images))


def encode(model: ModelState, x) -> Tensor:
    """Encode one ``3 x H x W`` image to a ``D x H/s x W/s`` feature map."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim != 3:
        raise DimensionError(f"expected a 3 x H x W image, got {arr.shape}")
    feats = encode_batch(model, arr[None])
    return ag.transpose(ag.reshape(feats, feats.shape[1:]), (2, 0, 1))


# ----------------------------------------------------------------------------
# prototypes and decoder
# ----------------------------------------------------------------------------

def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour subsampling; keeps class indices exact."""
    off = stride // 2
    return np.asarray(mask)[..., off::stride, off::stride]


def prototype_matrix(feats: Tensor, masks: np.ndarray, classes: Sequence[int]) -> Tensor:
    """Masked average pooling of channel-last ``feats`` ``(B, h, w, D)`` per class.

    ``masks`` are already at feature resolution.  Returns ``(len(classes), D)``.
    """
    masks = np.asarray(masks)
    if feats.shape[:-1] != masks.shape:
        raise DimensionError(f"features {feats.shape} and masks {masks.shape} are misaligned")
    flat_mask = masks.reshape(-1)
    onehot = (flat_mask[:, None] == np.asarray(classes)[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    for c, n in zip(classes, counts):
        if n == 0:
            raise MissingClassError(c)
    D = feats.shape[-1]
    sums = ag.matmul(Tensor(onehot.T), ag.reshape(feats, (-1, D)))
    return sums * Tensor(np.repeat((1.0 / counts)[:, None], D, axis=1))


def build_prototypes(support_feats: Sequence[Tensor], support_masks: Sequence, classes: Sequence[int]
                     ) -> list[Prototype]:
    """Prototypes from ``D x h x w`` support features and ``h x w`` masks."""
    if len(support_feats) != len(support_masks) or not support_feats:
        raise ContractError("need one mask per support feature map")
    stacked = ag.concat([ag.reshape(ag.transpose(f, (1, 2, 0)), (1,) + f.shape[1:] + f.shape[:1])
                         for f in support_feats], axis=0)
    masks = np.stack([np.asarray(m.data if isinstance(m, Tensor) else m) for m in support_masks])
    protos = prototype_matrix(stacked, masks, classes)
    return [Prototype(c, ag.take(protos, [j], axis=0)) for j, c in enumerate(classes)]


def decode_logits(model: ModelState, feats: Tensor, protos: Tensor) -> Tensor:
    """Cosine-with-temperature logits ``(P, C)`` for ``(P, D)`` features and ``(C, D)`` prototypes."""
    proj = model.params["decoder.proj"]
    f = ag.normalize_rows(ag.matmul(feats, proj))
    p = ag.normalize_rows(ag.matmul(protos, proj))
    return ag.matmul(f, ag.transpose(p)) * model.params["decoder.tau"]


def decode(query_feats: Tensor, prototypes: Sequence[Prototype], decoder: DecoderState) -> Tensor:
    """``(N+1) x h x w`` logits for one ``D x h x w`` query feature map."""
    if not prototypes:
        raise ContractError("decode needs at least one prototype")
    D, h, w = query_feats.shape
    feats = ag.reshape(ag.transpose(query_feats, (1, 2, 0)), (h * w, D))
    protos = ag.concat([ag.reshape(p.vector, (1, D)) for p in prototypes], axis=0)
    stub = ModelState(ModelConfig(), {"decoder.proj": decoder.projection, "decoder.tau": decoder.tau},
                      {}, {})
    logits = decode_logits(stub, feats, protos)
    return ag.reshape(ag.transpose(logits), (len(prototypes), h, w))


def segment_logits(model: ModelState, query_feats: Tensor, protos: Tensor) -> Tensor:
    """Channel-last query features ``(Q, h, w, D)`` to upsampled logits ``(Q, H, W, C)``."""
    Q, h, w, D = query_feats.shape
    logits = decode_logits(model, ag.reshape(query_feats, (Q * h * w, D)), protos)
    logits = ag.reshape(logits, (Q, h, w, protos.shape[0]))
    return ag.upsample_nearest(logits, model.config.stride, axes=(1, 2))


def episode_logits(model: ModelState, support_images: np.ndarray, support_masks: np.ndarray,
                   query_images: np.ndarray, num_classes: int) -> Tensor:
    """Encode supports and queries together, pool prototypes, decode the queries."""
    S = len(support_images)
    feats = encode_batch(model, np.concatenate([support_images, query_images]))
    s_feats = ag.take(feats, np.arange(S), axis=0)
    q_feats = ag.take(feats, np.arange(S, feats.shape[0]), axis=0)
    masks = downsample_mask(support_masks, model.config.stride)
    protos = prototype_matrix(s_feats, masks, list(range(num_classes)))
    return segment_logits(model, q_feats, protos)


# ----------------------------------------------------------------------------
# meta-training
# ----------------------------------------------------------------------------

def meta_train(model: ModelState, base_episodes: Iterator, steps: int, lr: float = 1e-3,
               seed: int = 0, focal: FocalConfig = FocalConfig(), log_every: int = 0,
               on_step=None) -> ModelState:
    """Episodic end-to-end training of the encoder's learned layers and the decoder.

    ``base_episodes`` yields ``Episode`` objects built from base classes only.
    ``on_step(step, loss)`` is called after each update.  Returns the model
    (updated in place) with ``meta["loss_curve"]`` holding per-step losses.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    del seed  # episode order already fixes every random choice
    names = list(model.params)
    model.adapters = None
    model.set_trainable(names)
    trainable = [(k, model.params[k]) for k in names]
    opt = OptimizerState(lr=lr)
    curve: list[float] = model.meta.setdefault("loss_curve", [])
    for step in range(steps):
        ep = next(base_episodes)
        zero_grads(trainable)
        logits = episode_logits(model, ep.support_images, ep.support_masks,
                                ep.query_image[None], ep.num_classes)
        loss = focal_loss_last(ag.reshape(logits, logits.shape[1:]), ep.query_mask, focal)
        if not math.isfinite(loss.item()):
            raise TrainingError(step)
        ag.backward(loss)
        adam_step(opt, trainable)
        curve.append(loss.item())
        if on_step is not None:
            on_step(step, loss.item())
    model.freeze_all()
    model.meta["meta_train_steps"] = model.meta.get("meta_train_steps", 0) + steps
    return model


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(model: ModelState, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, t in list(model.params.items()) + [(k, Tensor(v)) for k, v in model.frozen.items()]:
        fname = f"{name}.tapt"
        ag.save_tensor(d / fname, t)
        layers.append({"name": name, "file": fname, "shape": list(t.shape),
                       "frozen": name in model.frozen, "kind": model.kinds.get(name.rsplit(".", 1)[0])})
    meta = {k: v for k, v in model.meta.items() if k != "loss_curve"}
    manifest = {"variant": model.config.variant, "dims": asdict(model.config), "layers": layers,
                "seed": model.config.seed, "meta_train_steps": model.meta.get("meta_train_steps", 0),
                "meta": meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | Path) -> ModelState:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise DataError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    config = ModelConfig(**manifest["dims"])
    params, frozen, kinds = {}, {}, {}
    for rec in manifest["layers"]:
        arr = ag.load_tensor(d / rec["file"])
        if list(arr.shape) != rec["shape"]:
            raise DataError(f"tensor {rec['name']} has shape {arr.shape}, manifest says {rec['shape']}")
        if rec["frozen"]:
            frozen[rec["name"]] = arr
        else:
            params[rec["name"]] = Tensor(arr, name=rec["name"])
        if rec.get("kind"):
            kinds[rec["name"].rsplit(".", 1)[0]] = rec["kind"]
    meta = dict(manifest.get("meta", {}))
    meta["meta_train_steps"] = manifest["meta_train_steps"]
    return ModelState(config, params, frozen, kinds, meta=meta)
