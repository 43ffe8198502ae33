"""Gated CRNN with attention-weighted localisation pooling.

Layout of a forward pass for one batch ``(N, T, F)`` of feature chunks::

    3 x [ (W*X + b) * sigmoid(V*X + c)  ->  max-pool (pt, pf) ]
    flatten (F' x filters) per frame
    bidirectional GRU  ->  (N, T', 2H)
    O(t)     = sigmoid(cls head)          frame classification
    Z_loc(t) = softmax over classes (loc head)
    O'(t)    = O(t) * Z_loc(t)
    O''      = sum_t O'(t) / sum_t Z_loc(t)      (per class)

Tagging mode pools 2x2 in every block, so 240 frames become 30; SED mode
pools 1x2 and keeps the full frame rate.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DimensionError, Tensor

TASK_POOLING = {"tagging": (2, 2), "sed": (1, 2)}
POOLING_MODES = ("attention", "mean")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 17
    n_frames: int = 240
    n_freq: int = 64
    n_blocks: int = 3
    filters: int = 64
    kernel: int = 3
    hidden: int = 128
    task_mode: str = "tagging"
    pool: str = "attention"

    def __post_init__(self):
        if self.task_mode not in TASK_POOLING:
            raise ValueError(f"task_mode must be one of {sorted(TASK_POOLING)}, got {self.task_mode!r}")
        if self.pool not in POOLING_MODES:
            raise ValueError(f"pool must be one of {POOLING_MODES}, got {self.pool!r}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def pooling(self) -> tuple[int, int]:
        return TASK_POOLING[self.task_mode]

    @property
    def out_frames(self) -> int:
        return self.n_frames // self.pooling[0] ** self.n_blocks

    @property
    def out_freq(self) -> int:
        return self.n_freq // self.pooling[1] ** self.n_blocks

    @property
    def rnn_input(self) -> int:
        return self.out_freq * self.filters

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        # pool only changes how O'' is read out, not the weights
        arch = {k: v for k, v in asdict(self).items() if k != "pool"}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


@dataclass
class GatedConvBlock:
    W: Tensor
    b: Tensor
    V: Tensor
    c: Tensor
    pool: tuple[int, int] = (2, 2)


@dataclass
class BiGruLayer:
    forward: tuple[Tensor, Tensor, Tensor]
    backward: tuple[Tensor, Tensor, Tensor]

    @property
    def hidden(self) -> int:
        return self.forward[1].shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def blocks(self) -> list[GatedConvBlock]:
        t = self.tensors
        return [GatedConvBlock(t[f"block{i}.W"], t[f"block{i}.b"], t[f"block{i}.V"],
                               t[f"block{i}.c"], self.config.pooling)
                for i in range(self.config.n_blocks)]

    @property
    def rnn(self) -> BiGruLayer:
        t = self.tensors
        cell = lambda d: (t[f"gru.{d}.w_in"], t[f"gru.{d}.w_rec"], t[f"gru.{d}.bias"])
        return BiGruLayer(cell("fwd"), cell("bwd"))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: ad.parameter(v.data.copy())
                                         for k, v in self.tensors.items()})

    def with_pool(self, pool: str) -> "ModelParams":
        cfg = ModelConfig(**{**asdict(self.config), "pool": pool})
        return ModelParams(cfg, self.tensors)


@dataclass
class FramePosteriors:
    """Batched model outputs; time-resolved fields are ``(N, T', C)``."""

    o: Tensor
    z_loc: Tensor
    o_prime: Tensor
    clip: Tensor


class ModelRuntimeError(RuntimeError):
    pass


# ------------------------------------------------------------------ init

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}
    k, cin = config.kernel, 1
    for i in range(config.n_blocks):
        cout = config.filters
        shape = (k, k, cin, cout)
        for w, bias in (("W", "b"), ("V", "c")):
            t[f"block{i}.{w}"] = ad.parameter(_glorot(rng, shape, k * k * cin, k * k * cout))
            t[f"block{i}.{bias}"] = ad.parameter(np.zeros(cout))
        cin = cout
    d, h = config.rnn_input, config.hidden
    for direction in ("fwd", "bwd"):
        t[f"gru.{direction}.w_in"] = ad.parameter(
            np.concatenate([_glorot(rng, (d, h), d, h) for _ in range(3)], axis=1))
        t[f"gru.{direction}.w_rec"] = ad.parameter(
            np.concatenate([_glorot(rng, (h, h), h, h) for _ in range(3)], axis=1))
        t[f"gru.{direction}.bias"] = ad.parameter(np.zeros(3 * h))
    for head in ("cls", "loc"):
        t[f"{head}.w"] = ad.parameter(_glorot(rng, (2 * h, config.n_classes), 2 * h,
                                              config.n_classes))
        t[f"{head}.b"] = ad.parameter(np.zeros(config.n_classes))
    return ModelParams(config, t)


# --------------------------------------------------------------- forward

def _check_finite(x: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ModelRuntimeError(f"non-finite activation in layer '{layer}'")
    return x


def glu_block_forward(x: Tensor, block: GatedConvBlock) -> Tensor:
    """Gated linear unit conv block followed by max pooling.

    Both convolutions share one pass over the input: the linear and gate
    filters are stacked along the output-channel axis and split afterwards.
    """
    x = ad.as_tensor(x)
    if block.W.shape != block.V.shape:
        raise DimensionError(f"linear filters {block.W.shape} and gate filters "
                             f"{block.V.shape} differ")
    cout = block.W.shape[-1]
    both = ad.conv2d(x, ad.concat([block.W, block.V], axis=-1),
                     ad.concat([block.b, block.c], axis=-1))
    linear_out, gate_in = ad.split_last(both, [cout, cout])
    y = ad.mul(linear_out, ad.sigmoid(gate_in))
    return ad.max_pool2d(y, *block.pool)


def bigru_forward(x: Tensor, rnn: BiGruLayer) -> Tensor:
    """Left-to-right and right-to-left GRU states concatenated: ``(N, T, 2H)``."""
    x = ad.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    fwd = ad.gru_sequence(x, *rnn.forward)
    bwd = ad.gru_sequence(x, *rnn.backward, reverse=True)
    out = ad.concat([fwd, bwd], axis=-1)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def attention_pool(o: Tensor, z_loc: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(O', O'')``: the gated frame track and its attention-weighted mean."""
    o_prime = ad.mul(o, z_loc)
    clip = ad.div(ad.sum(o_prime, axis=-2), ad.sum(z_loc, axis=-2))
    return o_prime, clip


def _as_batch(chunks) -> np.ndarray:
    if hasattr(chunks, "values"):
        chunks = chunks.values
    if isinstance(chunks, (list, tuple)):
        chunks = np.stack([c.values if hasattr(c, "values") else c for c in chunks])
    x = np.asarray(chunks.data if isinstance(chunks, Tensor) else chunks, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


def forward(chunks, params: ModelParams) -> FramePosteriors:
    """Run the model on one chunk ``(T, F)`` or a batch ``(N, T, F)``."""
    cfg = params.config
    x = _as_batch(chunks)
    if x.shape[1:] != (cfg.n_frames, cfg.n_freq):
        raise DimensionError(f"input frames x bins {x.shape[1:]} do not match model "
                             f"({cfg.n_frames}, {cfg.n_freq})")
    h = Tensor(x[..., None])
    for i, block in enumerate(params.blocks):
        h = _check_finite(glu_block_forward(h, block), f"block{i}")
    n, t_out, f_out, ch = h.shape
    h = ad.reshape(h, (n, t_out, f_out * ch))
    r = _check_finite(bigru_forward(h, params.rnn), "gru")
    tensors = params.tensors
    o = _check_finite(ad.sigmoid(ad.linear(r, tensors["cls.w"], tensors["cls.b"])), "cls")
    z = _check_finite(ad.softmax_over_classes(ad.linear(r, tensors["loc.w"], tensors["loc.b"])),
                      "loc")
    o_prime, clip = attention_pool(o, z)
    if cfg.pool == "mean":
        clip = ad.mean_over_time(o)
    return FramePosteriors(o, z, o_prime, _check_finite(clip, "pool"))


def predict(chunks, params: ModelParams, batch_size: int = 16) -> FramePosteriors:
    """Inference in batches without building a graph; fields hold plain arrays."""
    x = _as_batch(chunks)
    parts = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            parts.append(forward(x[start:start + batch_size], params))
    cat = lambda name: Tensor(np.concatenate([getattr(p, name).data for p in parts]))
    return FramePosteriors(cat("o"), cat("z_loc"), cat("o_prime"), cat("clip"))


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"GCRNNCKPT\x00\x00\x00"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, params: ModelParams, adam: AdamState | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (and optionally optimizer state / extras) as float32."""
    named: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in params.tensors.items()]
    for k, v in (extra or {}).items():
        named.append((f"extra/{k}", np.asarray(v)))
    if adam is not None:
        named.append(("adam/hyper", np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])))
        named.append(("adam/step", np.array([adam.step])))
        named += [(f"adam/m/{k}", v) for k, v in adam.m.items()]
        named += [(f"adam/v/{k}", v) for k, v in adam.v.items()]
    cfg = params.config.to_json().encode()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC + struct.pack("<I", _CKPT_VERSION))
    buf.write(params.config.digest())
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode()
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:12] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 12)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[16:48]
    (clen,) = struct.unpack_from("<I", raw, 48)
    pos = 52 + clen
    config = ModelConfig(**json.loads(raw[52:pos].decode()))
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config hash does not match stored config")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors, extra, adam_m, adam_v, adam_meta = {}, {}, {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + nlen].decode()
        pos += 4 + nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
        arr = arr.astype(np.float64)
        pos += 4 * size
        if name.startswith("extra/"):
            extra[name[6:]] = arr
        elif name.startswith("adam/m/"):
            adam_m[name[7:]] = arr
        elif name.startswith("adam/v/"):
            adam_v[name[7:]] = arr
        elif name.startswith("adam/"):
            adam_meta[name[5:]] = arr
        else:
            tensors[name] = ad.parameter(arr)
    adam = None
    if adam_meta:
        lr, b1, b2, eps = adam_meta["hyper"].tolist()
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(adam_meta["step"][0]),
                         m=adam_m, v=adam_v)
    return Checkpoint(ModelParams(config, tensors), adam, extra)
