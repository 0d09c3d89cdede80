"""CNN / LSTM base models and the four fusion topologies built from them.

A base model is split into a feature extractor (part A) and a decision head
(part B).  The topologies wire those parts together:

* SIM    one channel -> part A -> part B
* MIM    all channels stacked on the channel axis -> part A -> part B
* BFM    one part A per channel -> concat -> part B
* BFM_SC BFM plus an extra part B on every branch output (shortcut heads)
"""
from __future__ import annotations

import json
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import DataFormatError, DimensionError, ParameterError, TopologyError

CHANNELS = ("abdores", "thorres", "hr", "sao2")
CHECKPOINT_SCHEMA = 1


class BaseKind(str, Enum):
    CNN = "CNN"
    LSTM = "LSTM"


class TopologyKind(str, Enum):
    SIM = "SIM"
    MIM = "MIM"
    BFM = "BFM"
    BFM_SC = "BFM_SC"


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind
    channels: tuple = CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "kind", TopologyKind(self.kind))
        object.__setattr__(self, "channels", tuple(self.channels))
        unknown = [c for c in self.channels if c not in CHANNELS]
        if unknown:
            raise TopologyError(f"unknown channels {unknown}; expected a subset of {CHANNELS}")
        if len(set(self.channels)) != len(self.channels):
            raise TopologyError(f"duplicate channels in {self.channels}")
        if list(self.channels) != [c for c in CHANNELS if c in self.channels]:
            raise TopologyError(f"channel order must follow {CHANNELS}, got {self.channels}")
        if self.kind is TopologyKind.SIM and len(self.channels) != 1:
            raise TopologyError(f"SIM takes exactly one channel, got {len(self.channels)}")
        if self.kind is not TopologyKind.SIM and len(self.channels) < 2:
            raise TopologyError(f"{self.kind.value} needs at least two channels")

    @property
    def config_id(self):
        if self.kind is TopologyKind.SIM:
            return f"SIM-{self.channels[0]}"
        return self.kind.value

    @classmethod
    def parse(cls, config_id, channels=CHANNELS):
        """``"SIM-hr"`` -> SIM on hr; ``"BFM_SC"`` -> BFM_SC on ``channels``."""
        if config_id.startswith("SIM-"):
            return cls(TopologyKind.SIM, (config_id[4:],))
        return cls(TopologyKind(config_id.replace("-", "_")), channels)


@dataclass(frozen=True)
class ArchParams:
    nf1: int = 100
    nf2: int = 100
    nf3: int = 160
    nf4: int = 160
    nk1: int = 10
    nk2: int = 10
    nk3: int = 10
    nk4: int = 10
    np1: int = 3
    cnn_dropout: float = 0.5
    cnn_hidden: int = 32
    lstm_units: int = 50
    lstm_dense1: int = 25
    lstm_dense2: int = 25
    lstm_dropouts: tuple = (0.2, 0.2, 0.2)
    window: int = 150

    def __post_init__(self):
        object.__setattr__(self, "lstm_dropouts", tuple(self.lstm_dropouts))
        ints = ("nf1", "nf2", "nf3", "nf4", "nk1", "nk2", "nk3", "nk4", "np1",
                "cnn_hidden", "lstm_units", "lstm_dense1", "lstm_dense2", "window")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"ArchParams.{name} must be positive")
        if len(self.lstm_dropouts) != 3:
            raise ParameterError("lstm_dropouts needs three probabilities")
        for p in (self.cnn_dropout, *self.lstm_dropouts):
            if not 0.0 <= p < 1.0:
                raise ParameterError(f"dropout probability {p} outside [0, 1)")

    @classmethod
    def desk(cls):
        """Narrow variant for desk-scale sweeps on a single CPU core.

        Kernel sizes, pooling, dropout rates and depth are unchanged; only
        the filter / unit counts shrink.
        """
        return cls(nf1=16, nf2=16, nf3=24, nf4=24, cnn_hidden=16,
                   lstm_units=16, lstm_dense1=16, lstm_dense2=16)

    def to_dict(self):
        d = asdict(self)
        d["lstm_dropouts"] = list(self.lstm_dropouts)
        return d


def _stream(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------
# layers


class Conv1D:
    def __init__(self, name, cin, cout, kernel):
        self.name, self.cin, self.cout, self.kernel = name, cin, cout, kernel

    def param_shapes(self):
        return {"W": (self.kernel, self.cin, self.cout), "b": (self.cout,)}

    def init(self, full, shape, rng):
        if full.endswith("/b"):
            return np.zeros(shape)
        return _glorot(rng, shape, self.kernel * self.cin, self.kernel * self.cout)

    def out_length(self, t):
        return t - self.kernel + 1

    def __call__(self, x, p, train, rng, trace):
        z = ad.conv1d(x, p["W"], p["b"])
        trace[self.name + ":pre"] = z
        return ad.relu(z)


class MaxPool1D:
    def __init__(self, name, pool):
        self.name, self.pool = name, pool

    def param_shapes(self):
        return {}

    def out_length(self, t):
        return t // self.pool

    def __call__(self, x, p, train, rng, trace):
        return ad.maxpool1d(x, self.pool)


class GlobalAvgPool:
    name = "gap"

    def param_shapes(self):
        return {}

    def out_length(self, t):
        return 1 if t >= 1 else 0

    def __call__(self, x, p, train, rng, trace):
        return ad.global_avg_pool(x)


class Dropout:
    def __init__(self, name, p):
        self.name, self.p = name, p

    def param_shapes(self):
        return {}

    def __call__(self, x, p, train, rng, trace):
        return ad.dropout(x, self.p, train, rng)


class Dense:
    def __init__(self, name, nin, nout, activation):
        self.name, self.nin, self.nout, self.activation = name, nin, nout, activation

    def param_shapes(self):
        return {"W": (self.nin, self.nout), "b": (self.nout,)}

    def init(self, full, shape, rng):
        if full.endswith("/b"):
            return np.zeros(shape)
        return _glorot(rng, shape, self.nin, self.nout)

    def __call__(self, x, p, train, rng, trace):
        z = ad.dense(x, p["W"], p["b"], "linear", name=self.name)
        trace[self.name + ":pre"] = z
        return ad.ACTIVATIONS[self.activation](z)


class LSTMLayer:
    def __init__(self, name, cin, units):
        self.name, self.cin, self.units = name, cin, units

    def param_shapes(self):
        n = self.units
        return {"Wx": (self.cin, 4 * n), "Wh": (n, 4 * n), "b": (4 * n,)}

    def init(self, full, shape, rng):
        n = self.units
        if full.endswith("/b"):
            b = np.zeros(shape)
            b[n:2 * n] = 1.0  # forget gate
            return b
        return _glorot(rng, shape, shape[0], shape[1])

    def out_length(self, t):
        return 1 if t >= 1 else 0

    def __call__(self, x, p, train, rng, trace):
        return ad.lstm_sequence(x, p["Wx"], p["Wh"], p["b"])


class Subgraph:
    """Ordered chain of layers whose parameters live under ``name/``."""

    def __init__(self, name, layers, out_width):
        self.name = name
        self.layers = layers
        self.out_width = out_width

    def param_names(self):
        return [f"{self.name}/{layer.name}/{k}" for layer in self.layers for k in layer.param_shapes()]

    def init_params(self, seed):
        out = {}
        for layer in self.layers:
            for key, shape in layer.param_shapes().items():
                full = f"{self.name}/{layer.name}/{key}"
                out[full] = Tensor(layer.init(full, shape, _stream(seed, full)), requires_grad=True, name=full)
        return out

    def time_lengths(self, window):
        lengths, t = [], window
        for layer in self.layers:
            if hasattr(layer, "out_length"):
                t = layer.out_length(t)
                lengths.append(t)
        return lengths

    def __call__(self, x, params, train=False, rng=None, trace=None):
        trace = {} if trace is None else trace
        for layer in self.layers:
            local = {k: params[f"{self.name}/{layer.name}/{k}"] for k in layer.param_shapes()}
            inner = {}
            x = layer(x, local, train, rng, inner)
            for key, value in inner.items():
                trace[f"{self.name}/{key}"] = value
            trace[f"{self.name}/{layer.name}"] = x
        return x


def build_part_a(kind, in_channels, arch=ArchParams(), name="branch0"):
    """Feature extractor ending at GAP (CNN) or the LSTM's final hidden state."""
    kind = BaseKind(kind)
    if in_channels < 1:
        raise DimensionError("part A needs at least one input channel")
    if kind is BaseKind.CNN:
        layers = [
            Conv1D("conv1", in_channels, arch.nf1, arch.nk1),
            Conv1D("conv2", arch.nf1, arch.nf2, arch.nk2),
            MaxPool1D("pool1", arch.np1),
            Conv1D("conv3", arch.nf2, arch.nf3, arch.nk3),
            Conv1D("conv4", arch.nf3, arch.nf4, arch.nk4),
            GlobalAvgPool(),
        ]
        sub = Subgraph(name, layers, arch.nf4)
    else:
        sub = Subgraph(name, [LSTMLayer("lstm", in_channels, arch.lstm_units)], arch.lstm_units)
    lengths = sub.time_lengths(arch.window)
    if min(lengths) < 1:
        raise DimensionError(
            f"window of {arch.window} samples leaves an empty intermediate (time lengths {lengths})")
    return sub


def build_part_b(kind, in_width, arch=ArchParams(), name="fusion"):
    kind = BaseKind(kind)
    if in_width < 1:
        raise DimensionError("part B needs a positive input width")
    if kind is BaseKind.CNN:
        layers = [
            Dropout("drop1", arch.cnn_dropout),
            Dense("dense1", in_width, arch.cnn_hidden, "relu"),
            Dense("out", arch.cnn_hidden, 1, "sigmoid"),
        ]
    else:
        p1, p2, p3 = arch.lstm_dropouts
        layers = [
            Dropout("drop1", p1),
            Dense("dense1", in_width, arch.lstm_dense1, "relu"),
            Dropout("drop2", p2),
            Dense("dense2", arch.lstm_dense1, arch.lstm_dense2, "relu"),
            Dropout("drop3", p3),
            Dense("out", arch.lstm_dense2, 1, "sigmoid"),
        ]
    return Subgraph(name, layers, 1)


# --------------------------------------------------------------------------
# parameter store and model graph


class ParamStore(dict):
    """Named parameter tensors; insertion order is the canonical order."""

    def count(self):
        return int(sum(t.size for t in self.values()))

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def grads(self):
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def snapshot(self):
        return {k: t.data.copy() for k, t in self.items()}

    def load(self, arrays):
        for k, t in self.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {a.shape} != {t.shape}")
            t.data = a.copy()


@dataclass
class ModelOutput:
    fusion: Tensor
    shortcuts: list
    features: list
    trace: dict = field(default_factory=dict)


class ModelGraph:
    def __init__(self, topology, kind, arch, seed, branches, fusion_head, shortcut_heads, params):
        self.topology = topology
        self.kind = BaseKind(kind)
        self.arch = arch
        self.seed = seed
        self.branches = branches
        self.fusion_head = fusion_head
        self.shortcut_heads = shortcut_heads
        self.params = params

    @property
    def channels(self):
        return self.topology.channels

    @property
    def n_heads(self):
        return 1 + len(self.shortcut_heads)

    def _branch_inputs(self, x):
        if x.shape[-1] != len(self.channels):
            raise DimensionError(f"model expects {len(self.channels)} channels, got {x.shape[-1]}")
        if self.topology.kind in (TopologyKind.SIM, TopologyKind.MIM):
            return [Tensor(x)]
        return [Tensor(x[..., i:i + 1]) for i in range(len(self.channels))]

    def forward(self, x, train=False, rng=None):
        """Forward pass on ``(T, C)`` or ``(B, T, C)`` windows."""
        x = np.asarray(x, dtype=np.float64)
        trace = {}
        feats = [branch(xi, self.params, train, rng, trace)
                 for branch, xi in zip(self.branches, self._branch_inputs(x))]
        fused = ad.concat(feats)
        trace["fusion/input"] = fused
        fusion = self.fusion_head(fused, self.params, train, rng, trace)
        shortcuts = [head(f, self.params, train, rng, trace)
                     for head, f in zip(self.shortcut_heads, feats)]
        squeeze = lambda t: ad.reshape(t, t.shape[:-1])
        return ModelOutput(squeeze(fusion), [squeeze(s) for s in shortcuts], feats, trace)

    def predict(self, x, batch_size=512, heads=False):
        """Eval-mode probabilities for a stack of windows.

        Returns the fusion scores, or ``(fusion, shortcuts)`` with shortcuts
        shaped ``(B, n_shortcut_heads)`` when ``heads`` is set.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        fus, sc = [], []
        with no_grad():
            for start in range(0, len(x), batch_size):
                out = self.forward(x[start:start + batch_size])
                fus.append(out.fusion.data)
                sc.append(np.stack([s.data for s in out.shortcuts], axis=-1) if out.shortcuts
                          else np.zeros((len(out.fusion.data), 0)))
        fus = np.concatenate(fus) if fus else np.zeros(0)
        sc = np.concatenate(sc) if sc else np.zeros((0, len(self.shortcut_heads)))
        if single:
            fus, sc = fus[0], sc[0]
        return (fus, sc) if heads else fus

    def head_param_count(self):
        return sum(self.params[n].size for n in self.fusion_head.param_names())

    def __repr__(self):
        return (f"ModelGraph({self.kind.value}-{self.topology.config_id}, branches={len(self.branches)}, "
                f"heads={self.n_heads}, params={self.params.count()})")

    # checkpoint archive: manifest.json + raw little-endian float64 blobs
    def save(self, path):
        entries = []
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, t in self.params.items():
                blob = f"params/{name}.f64"
                zf.writestr(blob, np.ascontiguousarray(t.data, dtype="<f8").tobytes())
                entries.append({"name": name, "shape": list(t.shape), "file": blob})
            manifest = {
                "schema_version": CHECKPOINT_SCHEMA,
                "kind": self.kind.value,
                "topology": self.topology.kind.value,
                "channels": list(self.channels),
                "arch": self.arch.to_dict(),
                "seed": self.seed,
                "params": entries,
            }
            zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            try:
                manifest = json.loads(zf.read("manifest.json"))
            except KeyError:
                raise DataFormatError("checkpoint has no manifest.json", path) from None
            if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
                raise DataFormatError(f"unsupported schema {manifest.get('schema_version')}", path)
            topo = Topology(manifest["topology"], manifest["channels"])
            model = assemble(topo, manifest["kind"], ArchParams(**manifest["arch"]), manifest["seed"])
            arrays = {}
            for entry in manifest["params"]:
                raw = np.frombuffer(zf.read(entry["file"]), dtype="<f8")
                arrays[entry["name"]] = raw.reshape(entry["shape"]).astype(np.float64)
        missing = set(model.params) - set(arrays)
        if missing:
            raise DataFormatError(f"checkpoint lacks parameters {sorted(missing)}", path)
        model.params.load(arrays)
        return model


def assemble(topology, kind, arch=ArchParams(), seed=0):
    """Build a :class:`ModelGraph` with freshly initialized parameters.

    Every parameter is drawn from its own stream keyed on ``(seed, name)``, so
    BFM and BFM_SC built with the same seed share branch and fusion weights.
    """
    if not isinstance(topology, Topology):
        topology = Topology(*topology) if isinstance(topology, tuple) else Topology(topology)
    kind = BaseKind(kind)
    n_ch = len(topology.channels)
    if topology.kind in (TopologyKind.SIM, TopologyKind.MIM):
        branches = [build_part_a(kind, n_ch, arch, "branch0")]
    else:
        branches = [build_part_a(kind, 1, arch, f"branch{i}") for i in range(n_ch)]
    width = sum(b.out_width for b in branches)
    fusion = build_part_b(kind, width, arch, "fusion")
    shortcuts = []
    if topology.kind is TopologyKind.BFM_SC:
        shortcuts = [build_part_b(kind, b.out_width, arch, f"shortcut{i}") for i, b in enumerate(branches)]
    params = ParamStore()
    for sub in (*branches, fusion, *shortcuts):
        params.update(sub.init_params(seed))
    return ModelGraph(topology, kind, arch, seed, branches, fusion, shortcuts, params)


def strip_shortcuts(model):
    """Drop the shortcut heads of a BFM_SC model, leaving a plain BFM.

    The returned graph references the very same branch and fusion tensors.
    """
    if model.topology.kind is not TopologyKind.BFM_SC:
        raise TopologyError(f"strip_shortcuts needs a BFM_SC model, got {model.topology.kind.value}")
    keep = set()
    for sub in (*model.branches, model.fusion_head):
        keep.update(sub.param_names())
    params = ParamStore((k, t) for k, t in model.params.items() if k in keep)
    topo = Topology(TopologyKind.BFM, model.channels)
    return ModelGraph(topo, model.kind, model.arch, model.seed, model.branches, model.fusion_head, [], params)


def branch_predictions(model, x):
    """Per-channel shortcut probabilities followed by the fusion probability.

    Output has ``C + 1`` entries on the last axis, computed in one eval pass.
    """
    if model.topology.kind is not TopologyKind.BFM_SC:
        raise TopologyError("branch predictions need a BFM_SC model")
    fusion, shortcuts = model.predict(x, heads=True)
    return np.concatenate([shortcuts, np.asarray(fusion)[..., None]], axis=-1)
