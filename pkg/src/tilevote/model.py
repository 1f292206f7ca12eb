"""Compact residual network: 1-channel input, 128-d embedding, 4-class head.

Topology: 3x3 stem conv (stride 2) -> BN -> ReLU, then one stack of basic
residual blocks per stage (later stages halve resolution and widen), global
average pooling, a dense embedding layer, and a dense class head. The head is
purely affine: logits are an affine function of the embedding, and the
embedding of the pooled features.

``forward`` returns an :class:`ActivationTape` that retains the final
convolutional feature maps, so class-score gradients w.r.t. those maps (used
by saliency) and full parameter gradients (used by training) both come from
the same hand-written backward pass.

Checkpoints are a small versioned binary container (magic, version, config
JSON, named tensors, metadata JSON); see ``docs/checkpoint_format.md``.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError, StateError
from .layers import (
    EVAL,
    TRAIN,
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    ReLU,
    ResidualBlock,
    softmax,
)

EMBEDDING_DIM = 128
NUM_CLASSES = 4
FINAL_CONV = "final_conv"


@dataclass
class ModelConfig:
    input_size: int = 224
    stage_widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    embedding_dim: int = EMBEDDING_DIM
    num_classes: int = NUM_CLASSES
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.embedding_dim != EMBEDDING_DIM:
            raise ConfigError(f"embedding_dim is fixed at {EMBEDDING_DIM}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.input_size < 8:
            raise ConfigError("input_size must be at least 8")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage_widths must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None


@dataclass
class ActivationTape:
    """One forward pass: logits, embedding, and retained activations."""

    logits: np.ndarray              # (num_classes,)
    embedding: np.ndarray           # (embedding_dim,)
    activations: Dict[str, np.ndarray]  # FINAL_CONV -> (K, U, V)
    mode: str
    _caches: Optional[tuple] = field(default=None, repr=False)
    _model: Optional["TileNet"] = field(default=None, repr=False)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


class TileNet:
    """The compact residual classifier. Single-writer during training."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        widths = config.stage_widths
        self.stem_conv = Conv2d("stem.conv", 1, widths[0], 3, stride=2, rng=rng, dtype=dt)
        self.stem_bn = BatchNorm2d("stem.bn", widths[0], dtype=dt)
        self.stem_relu = ReLU()
        self.blocks: List[ResidualBlock] = []
        in_ch = widths[0]
        for si, width in enumerate(widths):
            for bi in range(config.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(
                    ResidualBlock(f"stage{si}.block{bi}", in_ch, width, stride, rng=rng, dtype=dt)
                )
                in_ch = width
        self.pool = GlobalAvgPool()
        self.fc_embed = Dense("head.embed", in_ch, config.embedding_dim, rng=rng, dtype=dt)
        self.fc_out = Dense("head.out", config.embedding_dim, config.num_classes, rng=rng, dtype=dt)

    # -- parameter plumbing --------------------------------------------------

    def _param_layers(self):
        layers = [self.stem_conv, self.stem_bn]
        for blk in self.blocks:
            layers.extend(blk.sublayers())
        layers.extend([self.fc_embed, self.fc_out])
        return layers

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self._param_layers():
            out.update(layer.params())
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self._param_layers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers())
        return out

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.parameters())
        out.update(self.buffers())
        return out

    def decayable_names(self):
        names = set()
        for layer in self._param_layers():
            names |= layer.decayable()
        return names

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        state = self.state_tensors()
        if set(tensors) != set(state):
            missing = set(state) - set(tensors)
            extra = set(tensors) - set(state)
            raise CheckpointError(f"tensor name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in tensors.items():
            dst = state[name]
            if dst.shape != arr.shape:
                raise CheckpointError(f"tensor {name}: shape {arr.shape} != expected {dst.shape}")
            np.copyto(dst, arr.astype(dst.dtype, copy=False))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- forward / backward --------------------------------------------------

    def forward_batch(self, x: np.ndarray, mode: str = EVAL):
        """x: (N, 1, S, S) normalized input. Returns (logits, embeddings, conv_maps, caches)."""
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"expected input of shape (N, 1, {s}, {s}), got {x.shape}")
        x = x.astype(self.config.np_dtype, copy=False)
        caches = []
        y, c = self.stem_conv.forward(x, mode)
        caches.append(c)
        y, c = self.stem_bn.forward(y, mode)
        caches.append(c)
        y, c = self.stem_relu.forward(y, mode)
        caches.append(c)
        for blk in self.blocks:
            y, c = blk.forward(y, mode)
            caches.append(c)
        conv_maps = y  # (N, K, U, V): final conv feature maps, post-activation
        pooled, c = self.pool.forward(y, mode)
        caches.append(c)
        emb, c = self.fc_embed.forward(pooled, mode)
        caches.append(c)
        logits, c = self.fc_out.forward(emb, mode)
        caches.append(c)
        return logits, emb, conv_maps, tuple(caches)

    def forward(self, img: np.ndarray, mode: str = EVAL) -> ActivationTape:
        """Single normalized image (S, S) -> tape with retained final conv maps."""
        img = np.asarray(img)
        if img.ndim != 2:
            raise ShapeError(f"expected a 2-D input image, got shape {img.shape}")
        logits, emb, conv_maps, caches = self.forward_batch(img[None, None], mode)
        return ActivationTape(
            logits=logits[0],
            embedding=emb[0],
            activations={FINAL_CONV: conv_maps[0]},
            mode=mode,
            _caches=caches,
            _model=self,
        )

    def backward_batch(self, dlogits: np.ndarray, caches):
        """Full backward from logit gradients; returns (param grads, grad w.r.t. conv maps)."""
        grads: Dict[str, np.ndarray] = {}
        d, g = self.fc_out.backward(dlogits, caches[-1])
        grads.update(g)
        d, g = self.fc_embed.backward(d, caches[-2])
        grads.update(g)
        d, _ = self.pool.backward(d, caches[-3])
        d_conv = d
        for blk, cache in zip(reversed(self.blocks), reversed(caches[3:-3])):
            d, g = blk.backward(d, cache)
            grads.update(g)
        d, _ = self.stem_relu.backward(d, caches[2])
        d, g = self.stem_bn.backward(d, caches[1])
        grads.update(g)
        d, g = self.stem_conv.backward(d, caches[0])
        grads.update(g)
        return grads, d_conv

    def head_backward(self, dlogits: np.ndarray, caches) -> np.ndarray:
        """Backward through head only: gradient w.r.t. the final conv maps."""
        d, _ = self.fc_out.backward(dlogits, caches[-1])
        d, _ = self.fc_embed.backward(d, caches[-2])
        d, _ = self.pool.backward(d, caches[-3])
        return d


def grad_wrt_activation(tape: ActivationTape, class_id: int) -> np.ndarray:
    """Gradient of ``logits[class_id]`` w.r.t. the retained final conv maps.

    Shape (K, U, V). Requires a tape produced by :meth:`TileNet.forward`
    (which retains activations); raises StateError otherwise.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id {class_id} out of range 0..{NUM_CLASSES - 1}")
    if tape._caches is None or tape._model is None:
        raise StateError("tape was produced without activation retention")
    dlogits = np.zeros((1, NUM_CLASSES), dtype=tape.logits.dtype)
    dlogits[0, class_id] = 1.0
    return tape._model.head_backward(dlogits, tape._caches)[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"TILEVCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    metadata: dict

    @classmethod
    def of(cls, model: TileNet, metadata: dict) -> "Checkpoint":
        tensors = {k: v.copy() for k, v in model.state_tensors().items()}
        return cls(config=model.config, tensors=tensors, metadata=dict(metadata))

    def to_model(self, seed: int = 0) -> TileNet:
        model = TileNet(self.config, seed=seed)
        model.load_tensors(self.tensors)
        return model


def _write_json_block(f, obj):
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_json_block(f):
    (n,) = struct.unpack("<I", f.read(4))
    return json.loads(f.read(n).decode("utf-8"))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_json_block(f, ckpt.config.to_dict())
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            name_b = name.encode("utf-8")
            dtype_b = le.dtype.str.encode("ascii")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", len(dtype_b)))
            f.write(dtype_b)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<Q", le.nbytes))
            f.write(le.tobytes())
        _write_json_block(f, ckpt.metadata)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
            (version,) = struct.unpack("<I", f.read(4))
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            try:
                config = ModelConfig.from_dict(_read_json_block(f))
            except ConfigError as e:
                raise CheckpointError(f"{path}: {e}") from None
            (n_tensors,) = struct.unpack("<I", f.read(4))
            tensors = {}
            for _ in range(n_tensors):
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode("utf-8")
                (dt_len,) = struct.unpack("<B", f.read(1))
                dtype = np.dtype(f.read(dt_len).decode("ascii"))
                (ndim,) = struct.unpack("<B", f.read(1))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
                (nbytes,) = struct.unpack("<Q", f.read(8))
                arr = np.frombuffer(f.read(nbytes), dtype=dtype).reshape(shape)
                tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
            metadata = _read_json_block(f)
    except FileNotFoundError:
        raise
    except (struct.error, ValueError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    return Checkpoint(config=config, tensors=tensors, metadata=metadata)
