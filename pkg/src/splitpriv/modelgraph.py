"""Layered feed-forward models: description, parameters, evaluation and cost profiling.

A model is a :class:`ModelGraph` (an ordered list of :class:`LayerSpec`) plus a
:class:`ParamStore` holding named numpy arrays.  Parameters live in numpy so they
can be checkpointed, hashed and updated by the package's own optimizer; the
numerical kernels (convolution, pooling, autograd) are delegated to torch.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError, SplitPrivError
from .losses import LossSpec, torch_loss

DTYPES = ("float32", "float64", "uint8")
LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool2d", "batchnorm2d", "flatten", "residual_block")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_REQUIRED = {
    "conv2d": ("in_channels", "out_channels", "kernel_size"),
    "linear": ("in_features", "out_features"),
    "relu": (),
    "maxpool2d": ("pool_size",),
    "batchnorm2d": ("num_features",),
    "flatten": (),
    "residual_block": (),
}


@dataclass(frozen=True)
class TensorSpec:
    """Shape (without the batch axis) and element type of a tensor."""

    shape: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.shape or any(s < 1 for s in self.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {self.shape}")
        if self.dtype not in DTYPES:
            raise ShapeError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSpec":
        return cls(tuple(d["shape"]), d.get("dtype", "float32"))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    hyperparams: dict = field(default_factory=dict)
    body: tuple["LayerSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r} ({self.name})")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.hyperparams]
        if missing:
            raise ShapeError(f"layer {self.name!r} ({self.kind}) missing hyperparams {missing}")
        if self.kind == "residual_block" and not self.body:
            raise ShapeError(f"residual block {self.name!r} has an empty body")
        object.__setattr__(self, "body", tuple(self.body))

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "linear", "batchnorm2d") or any(b.has_params for b in self.body)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "hyperparams": dict(self.hyperparams)}
        if self.body:
            d["body"] = [b.to_dict() for b in self.body]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        body = tuple(cls.from_dict(b) for b in d.get("body", ()))
        return cls(d["kind"], d["name"], dict(d.get("hyperparams", {})), body)


# Small constructors keep architecture definitions readable.
def conv2d(name, in_channels, out_channels, kernel_size=3, stride=1, padding=1):
    return LayerSpec("conv2d", name, dict(in_channels=in_channels, out_channels=out_channels,
                                          kernel_size=kernel_size, stride=stride, padding=padding))


def linear(name, in_features, out_features):
    return LayerSpec("linear", name, dict(in_features=in_features, out_features=out_features))


def relu(name):
    return LayerSpec("relu", name)


def maxpool2d(name, pool_size=2, stride=None):
    return LayerSpec("maxpool2d", name, dict(pool_size=pool_size, stride=stride or pool_size))


def batchnorm2d(name, num_features):
    return LayerSpec("batchnorm2d", name, dict(num_features=num_features))


def flatten(name="flatten"):
    return LayerSpec("flatten", name)


def residual_block(name, body: Sequence[LayerSpec]):
    return LayerSpec("residual_block", name, {}, tuple(body))


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    hp = layer.hyperparams
    k = layer.kind
    if k == "conv2d":
        if len(shape) != 3 or shape[0] != hp["in_channels"]:
            raise ShapeError(f"layer {layer.name!r}: expects {hp['in_channels']} input channels, got shape {shape}")
        s, p, ks = hp.get("stride", 1), hp.get("padding", 0), hp["kernel_size"]
        h = (shape[1] + 2 * p - ks) // s + 1
        w = (shape[2] + 2 * p - ks) // s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"layer {layer.name!r}: spatial size collapses for input {shape}")
        return (hp["out_channels"], h, w)
    if k == "maxpool2d":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.name!r}: pooling needs a (C, H, W) input, got {shape}")
        ps, st = hp["pool_size"], hp.get("stride") or hp["pool_size"]
        h, w = (shape[1] - ps) // st + 1, (shape[2] - ps) // st + 1
        if h < 1 or w < 1:
            raise ShapeError(f"layer {layer.name!r}: spatial size collapses for input {shape}")
        return (shape[0], h, w)
    if k == "batchnorm2d":
        if len(shape) != 3 or shape[0] != hp["num_features"]:
            raise ShapeError(f"layer {layer.name!r}: expects {hp['num_features']} channels, got shape {shape}")
        return shape
    if k == "relu":
        return shape
    if k == "flatten":
        return (math.prod(shape),)
    if k == "linear":
        if len(shape) != 1 or shape[0] != hp["in_features"]:
            raise ShapeError(f"layer {layer.name!r}: expects {hp['in_features']} features, got shape {shape}")
        return (hp["out_features"],)
    # residual_block
    out = shape
    for sub in layer.body:
        out = _out_shape(sub, out)
    if out != shape:
        raise ShapeError(f"residual block {layer.name!r}: body maps {shape} to {out}")
    return shape


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Output shape (batchless) of every top-level layer; raises ShapeError naming the culprit."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = _out_shape(layer, shape)
        shapes.append(shape)
    return shapes


def _walk(layers: Iterable[LayerSpec], prefix: str = ""):
    for layer in layers:
        qual = prefix + layer.name
        yield qual, layer
        if layer.body:
            yield from _walk(layer.body, qual + ".")


@dataclass(frozen=True)
class ModelGraph:
    """Validated layer list.  ``num_classes`` is None for partial graphs (split halves)."""

    layers: tuple[LayerSpec, ...]
    input_spec: TensorSpec
    num_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [q for q, _ in _walk(self.layers)]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ShapeError(f"duplicate layer names: {sorted(dup)}")
        shapes = infer_shapes(self.layers, self.input_spec.shape)
        if self.num_classes is not None:
            if self.num_classes < 1:
                raise ShapeError("num_classes must be positive")
            if not shapes or shapes[-1] != (self.num_classes,):
                raise ShapeError(f"final output {shapes[-1] if shapes else None} != ({self.num_classes},)")

    @property
    def output_shapes(self) -> list[tuple[int, ...]]:
        return infer_shapes(self.layers, self.input_spec.shape)

    @property
    def output_spec(self) -> TensorSpec:
        shapes = self.output_shapes
        return TensorSpec(shapes[-1] if shapes else self.input_spec.shape, "float32")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Required ParamStore entries (trainable tensors and batchnorm buffers)."""
        out = {}
        for qual, layer in _walk(self.layers):
            hp = layer.hyperparams
            if layer.kind == "conv2d":
                ks = hp["kernel_size"]
                out[qual + ".weight"] = (hp["out_channels"], hp["in_channels"], ks, ks)
                out[qual + ".bias"] = (hp["out_channels"],)
            elif layer.kind == "linear":
                out[qual + ".weight"] = (hp["out_features"], hp["in_features"])
                out[qual + ".bias"] = (hp["out_features"],)
            elif layer.kind == "batchnorm2d":
                c = hp["num_features"]
                for p in ("weight", "bias", "running_mean", "running_var"):
                    out[f"{qual}.{p}"] = (c,)
        return out

    def trainable_names(self) -> list[str]:
        return [n for n in self.param_shapes() if not n.endswith(("running_mean", "running_var"))]

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "input_spec": self.input_spec.to_dict(),
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        return cls(tuple(LayerSpec.from_dict(l) for l in d["layers"]), TensorSpec.from_dict(d["input_spec"]),
                   d.get("num_classes"))


@dataclass
class ParamStore:
    tensors: dict[str, np.ndarray]
    version: int = 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype if self.tensors else np.dtype("float32")

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.version)

    def subset(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(p + "." for p in prefixes)
        return ParamStore({k: v.copy() for k, v in self.tensors.items() if k.startswith(prefixes)}, self.version)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            h.update(f"{name}|{arr.dtype.str}|{arr.shape}|".encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other: "ParamStore") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(self.tensors[k].dtype == other.tensors[k].dtype
                   and np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    def validate(self, graph: ModelGraph) -> None:
        want = graph.param_shapes()
        if set(want) != set(self.tensors):
            missing = sorted(set(want) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(want))
            raise ShapeError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in want.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(f"parameter {name}: shape {self.tensors[name].shape} != {shape}")


def init_params(graph: ModelGraph, seed: int = 0, dtype: str = "float32") -> ParamStore:
    """Fan-in scaled uniform init for conv/linear; batchnorm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(("running_var",)) or (name.endswith(".weight") and len(shape) == 1):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("running_mean") or (name.endswith(".bias") and _is_bn(graph, name)):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            weight_shape = graph.param_shapes()[name[: -len("bias")] + "weight"]
            bound = 1.0 / math.sqrt(math.prod(weight_shape[1:]))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamStore(tensors)


def _is_bn(graph: ModelGraph, param_name: str) -> bool:
    layer_name = param_name.rsplit(".", 1)[0]
    return any(q == layer_name and l.kind == "batchnorm2d" for q, l in _walk(graph.layers))


# --- reference architectures -------------------------------------------------

def _mini5(input_spec: TensorSpec, num_classes: int) -> list[LayerSpec]:
    c = input_spec.shape[0]
    trunk = [
        conv2d("conv1", c, 16), relu("relu1"), maxpool2d("pool1"),
        conv2d("conv2", 16, 32), relu("relu2"), maxpool2d("pool2"),
        conv2d("conv3", 32, 64), relu("relu3"),
        conv2d("conv4", 64, 64), relu("relu4"),
        # stride-1 pool keeps a wide classifier input so the linears hold most parameters
        conv2d("conv5", 64, 64), relu("relu5"), maxpool2d("pool5", 2, 1),
        flatten("flatten"),
    ]
    feat = infer_shapes(trunk, input_spec.shape)[-1][0]
    return trunk + [linear("fc1", feat, 128), relu("relu6"), linear("fc2", 128, num_classes)]


def _basic_block(name: str, ch: int) -> LayerSpec:
    return residual_block(name, [
        conv2d("conv_a", ch, ch), batchnorm2d("bn_a", ch), relu("relu_a"),
        conv2d("conv_b", ch, ch), batchnorm2d("bn_b", ch),
    ])


def _mini_res(input_spec: TensorSpec, num_classes: int) -> list[LayerSpec]:
    c = input_spec.shape[0]
    trunk = [
        conv2d("stem", c, 16), batchnorm2d("stem_bn", 16), relu("stem_relu"), maxpool2d("stem_pool"),
        _basic_block("block1", 16), _basic_block("block2", 16), _basic_block("block3", 16),
        maxpool2d("pool"), flatten("flatten"),
    ]
    feat = infer_shapes(trunk, input_spec.shape)[-1][0]
    return trunk + [linear("fc1", feat, 64), relu("relu_fc"), linear("fc2", 64, num_classes)]


def _mlp(input_spec: TensorSpec, num_classes: int) -> list[LayerSpec]:
    return [flatten("flatten"), linear("fc1", input_spec.size, 128), relu("relu1"),
            linear("fc2", 128, num_classes)]


ARCHITECTURES: dict[str, Callable[[TensorSpec, int], list[LayerSpec]]] = {
    "mini5": _mini5,
    "mini-res": _mini_res,
    "mlp": _mlp,
}


def build_model(arch: str | Sequence[LayerSpec], input_spec: TensorSpec, num_classes: int,
                seed: int = 0, dtype: str = "float32") -> tuple[ModelGraph, ParamStore]:
    """Build a registered architecture (or an explicit layer list) with fresh parameters."""
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise SplitPrivError(f"unknown architecture {arch!r}; registered: {sorted(ARCHITECTURES)}")
        layers = ARCHITECTURES[arch](input_spec, num_classes)
    else:
        layers = list(arch)
    graph = ModelGraph(tuple(layers), input_spec, num_classes)
    return graph, init_params(graph, seed, dtype)


# --- evaluation ----------------------------------------------------------------

@dataclass
class ForwardResult:
    activations: list[np.ndarray]
    logits: np.ndarray


def _apply(layer: LayerSpec, h: torch.Tensor, t: dict[str, torch.Tensor], qual: str,
           bn_train: Callable[[str], bool]) -> torch.Tensor:
    hp = layer.hyperparams
    k = layer.kind
    if k == "conv2d":
        return F.conv2d(h, t[qual + ".weight"], t[qual + ".bias"], stride=hp.get("stride", 1),
                        padding=hp.get("padding", 0))
    if k == "linear":
        return F.linear(h, t[qual + ".weight"], t[qual + ".bias"])
    if k == "relu":
        return F.relu(h)
    if k == "maxpool2d":
        return F.max_pool2d(h, hp["pool_size"], hp.get("stride") or hp["pool_size"])
    if k == "batchnorm2d":
        return F.batch_norm(h, t[qual + ".running_mean"], t[qual + ".running_var"], t[qual + ".weight"],
                            t[qual + ".bias"], training=bn_train(qual), momentum=BN_MOMENTUM, eps=BN_EPS)
    if k == "flatten":
        return h.reshape(h.shape[0], -1)
    out = h
    for sub in layer.body:
        out = _apply(sub, out, t, f"{qual}.{sub.name}", bn_train)
    return F.relu(out + h)


def run_torch(graph: ModelGraph, tensors: dict[str, torch.Tensor], x: torch.Tensor, mode: str = "eval",
              trainable: set[str] | None = None, check_finite: bool = True) -> list[torch.Tensor]:
    """Torch-level forward pass returning the output of every top-level layer.

    In train mode batchnorm uses batch statistics and updates its running
    buffers, but only for layers whose scale is trainable; frozen layers always
    behave as in eval mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    def bn_train(qual):
        return mode == "train" and (trainable is None or qual + ".weight" in trainable)

    outs = []
    h = x
    for layer in graph.layers:
        h = _apply(layer, h, tensors, layer.name, bn_train)
        if check_finite and not bool(torch.isfinite(h).all()):
            raise NumericError(f"non-finite activation at layer {layer.name!r}")
        outs.append(h)
    return outs


def _check_input(graph: ModelGraph, x: np.ndarray) -> None:
    if x.ndim != len(graph.input_spec.shape) + 1 or tuple(x.shape[1:]) != graph.input_spec.shape:
        raise ShapeError(f"input batch shape {x.shape} does not match {graph.input_spec.shape}")


def _as_torch(params: ParamStore) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(v) for k, v in params.tensors.items()}


def forward(graph: ModelGraph, params: ParamStore, x: np.ndarray, mode: str = "eval") -> ForwardResult:
    """Evaluate the model, returning all top-level activations and the final output."""
    _check_input(graph, x)
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=params.dtype))
    with torch.no_grad():
        outs = run_torch(graph, _as_torch(params), xt, mode)
    acts = [o.numpy() for o in outs]
    return ForwardResult(acts, acts[-1] if acts else np.asarray(x, dtype=params.dtype))


def predict(graph: ModelGraph, params: ParamStore, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Final outputs in eval mode, batched to bound memory."""
    _check_input(graph, x)
    t = _as_torch(params)
    chunks = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size], dtype=params.dtype))
            outs = run_torch(graph, t, xb, "eval")
            chunks.append(outs[-1].numpy() if outs else xb.numpy())
    if not chunks:
        return np.zeros((0,) + graph.output_spec.shape, dtype=params.dtype)
    return np.concatenate(chunks)


def loss_and_grads(graph: ModelGraph, params: ParamStore, batch: tuple[np.ndarray, np.ndarray],
                   loss_spec: LossSpec, trainable_mask: Iterable[str], mode: str = "train"
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss on one batch and gradients for exactly the masked parameters."""
    mask = set(trainable_mask)
    if not mask:
        raise ValueError("empty trainable mask: nothing to train")
    unknown = mask - set(params.tensors)
    if unknown:
        raise KeyError(f"mask names not in params: {sorted(unknown)}")
    buffers = {n for n in mask if n.endswith(("running_mean", "running_var"))}
    if buffers:
        raise ValueError(f"batchnorm buffers are not trainable: {sorted(buffers)}")
    x, y = batch
    _check_input(graph, x)
    t = {}
    for name, arr in params.tensors.items():
        tt = torch.from_numpy(arr)
        t[name] = tt.detach().clone().requires_grad_(True) if name in mask else tt
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=params.dtype))
    outs = run_torch(graph, t, xt, mode, trainable=mask)
    loss = torch_loss(outs[-1], y, loss_spec)
    if not bool(torch.isfinite(loss)):
        raise NumericError("non-finite loss")
    names = sorted(mask)
    grads = torch.autograd.grad(loss, [t[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = np.zeros_like(params[n]) if g is None else g.numpy()
    return float(loss.detach()), out


# --- profiling -----------------------------------------------------------------

@dataclass(frozen=True)
class LayerProfile:
    name: str
    params: int
    flops: int
    output_spec: TensorSpec


def _cost(layer: LayerSpec, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> tuple[int, int]:
    hp = layer.hyperparams
    k = layer.kind
    if k == "conv2d":
        ks = hp["kernel_size"]
        cin, cout = hp["in_channels"], hp["out_channels"]
        params = cout * cin * ks * ks + cout
        flops = 2 * ks * ks * cin * cout * out_shape[1] * out_shape[2]
        return params, flops
    if k == "linear":
        fin, fout = hp["in_features"], hp["out_features"]
        return fin * fout + fout, 2 * fin * fout
    if k in ("relu", "maxpool2d"):
        return 0, math.prod(out_shape)
    if k == "batchnorm2d":
        # affine scale + shift per element; running statistics are buffers, not parameters
        return 2 * hp["num_features"], 2 * math.prod(out_shape)
    if k == "flatten":
        return 0, 0
    params = flops = 0
    shape = in_shape
    for sub in layer.body:
        nxt = _out_shape(sub, shape)
        p, f = _cost(sub, shape, nxt)
        params, flops = params + p, flops + f
        shape = nxt
    # skip-connection add and the closing relu
    return params, flops + 2 * math.prod(out_shape)


def profile(graph: ModelGraph, input_spec: TensorSpec | None = None) -> list[LayerProfile]:
    """Per top-level layer parameter and FLOP counts (multiply-accumulate = 2 FLOPs)."""
    spec = input_spec or graph.input_spec
    shapes = infer_shapes(graph.layers, spec.shape)
    out = []
    prev = spec.shape
    for layer, shape in zip(graph.layers, shapes):
        p, f = _cost(layer, prev, shape)
        out.append(LayerProfile(layer.name, p, f, TensorSpec(shape)))
        prev = shape
    return out
