"""Feature extractor with per-block taps, classifier head and clustering projectors."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import BatchSizeError, ContractError, StructureError
from .tensor import BNState, Parameter, Tensor


@dataclass
class ModelSpec:
    in_channels: int = 1
    image_size: int = 16
    num_classes: int = 8
    channels: tuple = (16, 32, 64, 64)
    projector_layers: tuple = (1, 2)
    heads: int = 15
    clusters: int = 10
    projector_kind: str = "normal"
    # scales the Kaiming bound of the projector output map; sharper initial
    # partitions leave fewer clusters that starve during early training
    projector_init_gain: float = 2.0
    dtype: str = "f32"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.projector_layers = tuple(sorted(set(self.projector_layers)))
        if len(self.channels) != 4:
            raise ContractError("the extractor has exactly 4 blocks")
        if any(l < 1 or l > 4 for l in self.projector_layers):
            raise ContractError(f"projector layers must lie in 1..4, got {self.projector_layers}")
        if self.projector_kind not in ("normal", "large"):
            raise ContractError(f"unknown projector kind {self.projector_kind!r}")
        if self.projector_init_gain <= 0:
            raise ContractError("projector_init_gain must be positive")
        if self.clusters < 2:
            raise ContractError("need at least 2 clusters")
        if self.image_size % 16:
            raise ContractError("image size must be divisible by 16 (four 2x2 pools)")


def kaiming_uniform(rng, shape, fan_in, dtype, gain=1.0):
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Block:
    """conv3x3 -> batchnorm -> ReLU -> 2x2 average pool."""

    def __init__(self, name, c_in, c_out, rng, dtype):
        self.name = name
        self.conv = Parameter(kaiming_uniform(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype), f"{name}.conv.weight")
        self.gamma = Parameter(np.ones(c_out, dtype=dtype), f"{name}.bn.gamma")
        self.beta = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.bn.beta")
        self.bn = BNState(c_out, dtype=dtype)

    def parameters(self):
        return [self.conv, self.gamma, self.beta]

    def forward(self, x, bn_mode):
        h = T.conv2d(x, self.conv, stride=1, pad=1)
        h = T.batchnorm(h, self.gamma, self.beta, self.bn, bn_mode)
        return T.avg_pool2d(T.relu(h), 2)


class FeatureExtractor:
    def __init__(self, in_channels, channels, rng, dtype):
        widths = (in_channels,) + tuple(channels)
        self.blocks = [
            Block(f"extractor.block{i + 1}", widths[i], widths[i + 1], rng, dtype)
            for i in range(len(channels))
        ]

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def forward(self, x, bn_mode):
        taps = []
        for block in self.blocks:
            x = block.forward(x, bn_mode)
            taps.append(x)
        return taps


class Classifier:
    """Global average pool followed by one linear map to class logits."""

    def __init__(self, c_in, num_classes, rng, dtype):
        self.weight = Parameter(kaiming_uniform(rng, (c_in, num_classes), c_in, dtype), "classifier.linear.weight")
        self.bias = Parameter(np.zeros(num_classes, dtype=dtype), "classifier.linear.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, feat):
        pooled = T.mean(feat, axis=(2, 3))
        return T.matmul(pooled, self.weight) + self.bias


def flatten_tap(tap: Tensor) -> Tensor:
    """``B×C×H×W`` -> ``(B·H·W)×C``, one row per spatial location."""
    B, C, H, W = tap.shape
    return T.reshape(T.transpose(tap, (0, 2, 3, 1)), (B * H * W, C))


class Projector:
    """Soft K-way clustering head on one extractor tap.

    ``normal``: a single channel-wise linear map C -> K.
    ``large``: C -> C//2 -> K with a ReLU in between.
    Both end in a row softmax over the flattened ``N×K`` matrix.
    """

    def __init__(self, layer, head, c_in, clusters, kind, rng, dtype, gain=1.0):
        self.layer, self.head, self.clusters, self.kind = layer, head, clusters, kind
        prefix = f"projectors.layer{layer}.head{head}"
        self.prefix = prefix
        if kind == "large":
            hidden = max(c_in // 2, 1)
            self.hidden_w = Parameter(kaiming_uniform(rng, (c_in, hidden), c_in, dtype), f"{prefix}.hidden.weight")
            self.hidden_b = Parameter(np.zeros(hidden, dtype=dtype), f"{prefix}.hidden.bias")
            c_in = hidden
        self.weight = Parameter(kaiming_uniform(rng, (c_in, clusters), c_in, dtype, gain), f"{prefix}.out.weight")
        self.bias = Parameter(np.zeros(clusters, dtype=dtype), f"{prefix}.out.bias")

    def parameters(self):
        if self.kind == "large":
            return [self.hidden_w, self.hidden_b, self.weight, self.bias]
        return [self.weight, self.bias]

    def forward(self, tap):
        h = flatten_tap(tap)
        if self.kind == "large":
            h = T.relu(T.matmul(h, self.hidden_w) + self.hidden_b)
        return T.softmax_rows(T.matmul(h, self.weight) + self.bias)


def project_layer(projectors, tap: Tensor) -> Tensor:
    """Run every projector of one layer at once; returns ``N×H×K``.

    Each head keeps its own parameters; they are only concatenated for the
    matrix products.
    """
    h = flatten_tap(tap)
    n, heads = h.shape[0], len(projectors)
    k = projectors[0].clusters
    if projectors[0].kind == "large":
        hidden = projectors[0].hidden_w.shape[1]
        wh = T.concat([p.hidden_w for p in projectors], axis=1)
        bh = T.concat([p.hidden_b for p in projectors], axis=0)
        a = T.reshape(T.relu(T.matmul(h, wh) + bh), (n, heads, hidden))
        wo = T.stack([p.weight for p in projectors], axis=0)
        bo = T.stack([p.bias for p in projectors], axis=0)
        logits = T.head_matmul(a, wo) + bo
    else:
        w = T.concat([p.weight for p in projectors], axis=1)
        b = T.concat([p.bias for p in projectors], axis=0)
        logits = T.reshape(T.matmul(h, w) + b, (n, heads, k))
    return T.softmax_rows(logits)


@dataclass
class ForwardResult:
    taps: list
    logits: Tensor
    z: dict = field(default_factory=dict)  # layer -> N×H×K assignments, one slab per head

    def assignment(self, layer, head) -> Tensor:
        """The ``N×K`` soft assignment of a single projector."""
        return T.select(self.z[layer], head, axis=1)


class ModelBundle:
    """Extractor, classifier and projector set sharing one parameter namespace."""

    def __init__(self, spec: ModelSpec = None, seed=0, use_projectors=True):
        self.spec = spec = spec or ModelSpec()
        dtype = T.DTYPES[spec.dtype]
        rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(spec.in_channels, spec.channels, rng, dtype)
        self.classifier = Classifier(spec.channels[-1], spec.num_classes, rng, dtype)
        self.projectors = []
        if use_projectors:
            for layer in spec.projector_layers:
                for head in range(spec.heads):
                    self.projectors.append(
                        Projector(layer, head, spec.channels[layer - 1], spec.clusters, spec.projector_kind, rng, dtype,
                                  spec.projector_init_gain)
                    )
        self.source_snapshot = None

    @property
    def J(self):
        return max((p.layer for p in self.projectors), default=0)

    def parameters(self) -> dict:
        params = self.extractor.parameters() + self.classifier.parameters()
        for proj in self.projectors:
            params += proj.parameters()
        return {p.name: p for p in params}

    def bn_states(self) -> dict:
        return {b.name + ".bn": b.bn for b in self.extractor.blocks}

    def buffers(self) -> dict:
        out = {}
        for name, st in self.bn_states().items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    def set_trainable(self, paths):
        paths = set(paths)
        for name, p in self.parameters().items():
            p.requires_grad = name in paths
            p.grad = None

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def forward(self, x, bn_mode="eval", with_projectors=True) -> ForwardResult:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.spec.dtype)
        if bn_mode != "eval" and x.shape[0] < 2:
            raise BatchSizeError(f"batch-statistics forward needs B >= 2, got {x.shape[0]}")
        taps = self.extractor.forward(x, bn_mode)
        logits = self.classifier.forward(taps[-1])
        z = {}
        if with_projectors:
            for layer, projs in self.projectors_by_layer().items():
                z[layer] = project_layer(projs, taps[layer - 1])
        return ForwardResult(taps, logits, z)

    def projectors_by_layer(self) -> dict:
        out = {}
        for proj in self.projectors:
            out.setdefault(proj.layer, []).append(proj)
        return out

    def clone(self):
        return copy.deepcopy(self)

    def state_arrays(self) -> dict:
        out = {name: p.data for name, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state_arrays(self, arrays, strict=True):
        params, states = self.parameters(), self.bn_states()
        expected = set(params) | set(self.buffers())
        if strict and set(arrays) - expected:
            raise StructureError(f"unexpected entries: {sorted(set(arrays) - expected)[:3]}")
        missing = expected - set(arrays)
        if missing:
            raise StructureError(f"missing entries: {sorted(missing)[:3]}")
        for name, p in params.items():
            src = np.asarray(arrays[name])
            if src.shape != p.shape:
                raise StructureError(f"{name}: shape {src.shape} != {p.shape}")
            np.copyto(p.data, src.astype(p.dtype, copy=False))
        for name, st in states.items():
            for attr in ("running_mean", "running_var"):
                src = np.asarray(arrays[f"{name}.{attr}"])
                if src.shape != getattr(st, attr).shape:
                    raise StructureError(f"{name}.{attr}: shape mismatch")
                setattr(st, attr, src.astype(getattr(st, attr).dtype, copy=True))

    def save(self, path, extra=None):
        arrays = dict(self.state_arrays())
        if extra:
            arrays.update(extra)
        checkpoint.save(path, arrays)

    def load(self, path):
        arrays = checkpoint.load(path)
        own = {k: v for k, v in arrays.items() if not k.startswith("optimizer.") and not k.startswith("train.")}
        self.load_state_arrays(own)
        return arrays


def select_trainable(model: ModelBundle, mode="adapt", J=None):
    """Parameter paths that receive gradient updates.

    ``joint``: everything. ``adapt``: extractor blocks ``1..J`` only.
    """
    names = list(model.parameters())
    if mode == "joint":
        return set(names)
    if mode != "adapt":
        raise ContractError(f"unknown mode {mode!r}")
    J = model.J if J is None else J
    if not 1 <= J <= 4:
        raise ContractError(f"J must lie in 1..4, got {J}")
    prefixes = tuple(f"extractor.block{i}." for i in range(1, J + 1))
    return {n for n in names if n.startswith(prefixes)}


def bn_affine_paths(model: ModelBundle):
    return {n for n in model.parameters() if ".bn." in n}


@dataclass
class Snapshot:
    arrays: dict
    optimizer_state: dict = None


def snapshot(model: ModelBundle, optimizer=None) -> Snapshot:
    arrays = {k: v.copy() for k, v in model.state_arrays().items()}
    opt_state = copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None
    return Snapshot(arrays, opt_state)


def restore(model: ModelBundle, snap: Snapshot, optimizer=None):
    model.load_state_arrays(snap.arrays)
    if optimizer is not None:
        if snap.optimizer_state is None:
            raise StructureError("snapshot holds no optimizer state")
        optimizer.load_state_dict(copy.deepcopy(snap.optimizer_state))
