"""RCDGCN, its TAB-free ablation and the fully connected baseline.

Layer order of the graph variants::

    x -> [gated TCN x len(dilations[0])] -> graph conv (ReLU)
      -> [gated TCN x len(dilations[1])] -> graph conv (ReLU)
      -> last time step -> linear head -> T steps per node

``rcdgcn`` builds the propagation matrices with the Traffic Attention Block
from the last input step (or every step with ``attention_step = "each"``);
``rcdgcn_r`` uses the uniform ring matrices instead; ``fcn`` flattens the
window into a two-layer perceptron.

Parameter counts (``C`` channels, ``G = max_hops + 1``, ``taps`` kernel
taps, ``P`` state channels, ``L'`` expanded feature width)::

    TAB   2 * (P + L') * d_e  (+ d_e projection when d_e > 1)
    TCN   sum over layers of 2 * taps * C_in * C   (C_in = P for the first)
    GCN   blocks * G * C * C
    head  C * T * P + T * P
    FCN   Q*N*P*H + H + H*T*N*P + T*N*P

Weights start uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` where
``fan_in`` is the product of all but the last dimension of the weight
(biases use their weight's fan-in). Each tensor draws from its own
SplitMix64 stream seeded with ``derive_seed(derive_seed(seed, "init"), name)``,
so ``rcdgcn`` and ``rcdgcn_r`` built from one seed share every non-TAB weight.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .layers import GcnLayerParams, TcnLayerParams, gated_tcn, graph_conv
from .rng import SplitMix64, derive_seed
from .tab import ATTENTION_MODES, TabParams, fixed_attention, tab_forward
from .tensor import DimensionError, Tensor

VARIANTS = ("rcdgcn", "rcdgcn_r", "fcn")
MAGIC = b"RCDG"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    n_nodes: int
    history: int = 12
    horizon: int = 3
    n_states: int = 1
    n_features: int = 2  # expanded width L'
    max_hops: int = 3
    embed_dim: int = 8
    channels: int = 32
    dilations: tuple[tuple[int, ...], ...] = ((1, 2), (1, 2))
    taps: int = 2
    fcn_hidden: int = 256
    attention_mode: str = "ring"
    attention_step: str = "last"
    feature_layout: str = ""  # "I:0;O:1", factor name -> expanded columns
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_nodes", "history", "horizon", "n_states", "channels", "taps", "fcn_hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_hops < 0 or self.n_features < 0:
            raise ConfigError("max_hops and n_features must be >= 0")
        if not self.dilations or any(d < 1 for block in self.dilations for d in block) \
                or any(len(block) == 0 for block in self.dilations):
            raise ConfigError(f"bad dilations {self.dilations}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.attention_step not in ("last", "each"):
            raise ConfigError("attention_step must be 'last' or 'each'")

    def factor_layout(self) -> list[tuple[str, list[int]]]:
        if not self.feature_layout:
            return []
        out = []
        for item in self.feature_layout.split(";"):
            name, cols = item.split(":")
            out.append((name, [int(c) for c in cols.split(",")]))
        return out

    # key=value text used in checkpoints
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dilations":
                v = ";".join(",".join(str(d) for d in block) for block in v)
            lines.append(f"hyper.{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "Hyper":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                raise CheckpointError(f"checkpoint manifest lacks hyper.{f.name}")
            raw = items[f.name]
            if f.name == "dilations":
                kw[f.name] = tuple(tuple(int(d) for d in b.split(",")) for b in raw.split(";"))
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


@dataclass
class ModelParams:
    variant: str
    hyper: Hyper
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")

    @property
    def tab(self) -> TabParams | None:
        t = self.tensors
        if "tab.w_state_src" not in t:
            return None
        return TabParams(t["tab.w_state_src"], t.get("tab.w_feat_src"), t["tab.w_state_dst"],
                         t.get("tab.w_feat_dst"), t.get("tab.proj"))

    @property
    def tcn_stack(self) -> list[list[TcnLayerParams]]:
        out = []
        for b, block in enumerate(self.hyper.dilations):
            out.append([TcnLayerParams(self.tensors[f"tcn{b}.{k}.w1"], self.tensors[f"tcn{b}.{k}.w2"], d)
                        for k, d in enumerate(block)])
        return out

    @property
    def gcn_stack(self) -> list[GcnLayerParams]:
        return [GcnLayerParams(self.tensors[f"gcn{b}.w"]) for b in range(len(self.hyper.dilations))]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.hyper,
                           {k: Tensor(t.data, requires_grad=True) for k, t in self.tensors.items()})


def _shapes(variant: str, h: Hyper) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor, in manifest order."""
    out = []
    if variant == "fcn":
        n_in = h.history * h.n_nodes * h.n_states
        n_out = h.horizon * h.n_nodes * h.n_states
        return [("fc1.w", (n_in, h.fcn_hidden), n_in), ("fc1.b", (h.fcn_hidden,), n_in),
                ("fc2.w", (h.fcn_hidden, n_out), h.fcn_hidden), ("fc2.b", (n_out,), h.fcn_hidden)]
    if variant == "rcdgcn":
        d = h.embed_dim
        for side in ("src", "dst"):
            out.append((f"tab.w_state_{side}", (h.n_states, d), h.n_states))
            if h.n_features:
                out.append((f"tab.w_feat_{side}", (h.n_features, d), h.n_features))
        if d > 1:
            out.append(("tab.proj", (d, 1), d))
    c = h.channels
    c_in = h.n_states
    hops = h.max_hops + 1
    for b, block in enumerate(h.dilations):
        for k, _ in enumerate(block):
            for w in ("w1", "w2"):
                out.append((f"tcn{b}.{k}.{w}", (h.taps, c_in, c), h.taps * c_in))
            c_in = c
        out.append((f"gcn{b}.w", (hops, c, c), hops * c))
    out.append(("head.w", (c, h.horizon * h.n_states), c))
    out.append(("head.b", (h.horizon * h.n_states,), c))
    return out


def parameter_count(variant: str, h: Hyper) -> int:
    """Closed form of the table in the module docstring."""
    q, n, p, t, hid = h.history, h.n_nodes, h.n_states, h.horizon, h.fcn_hidden
    if variant == "fcn":
        return q * n * p * hid + hid + hid * t * n * p + t * n * p
    c, g = h.channels, h.max_hops + 1
    layers = [d for block in h.dilations for d in block]
    total = 2 * h.taps * p * c + (len(layers) - 1) * 2 * h.taps * c * c
    total += len(h.dilations) * g * c * c + c * t * p + t * p
    if variant == "rcdgcn":
        total += 2 * (p + h.n_features) * h.embed_dim + (h.embed_dim if h.embed_dim > 1 else 0)
    return total


def init(variant: str, hyper: Hyper, seed: int | None = None) -> ModelParams:
    hyper.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if seed is not None and seed != hyper.seed:
        hyper = replace(hyper, seed=seed)
    base = derive_seed(hyper.seed, "init")
    tensors = {}
    for name, shape, fan_in in _shapes(variant, hyper):
        bound = 1.0 / np.sqrt(fan_in)
        vals = SplitMix64(derive_seed(base, name)).uniform(int(np.prod(shape)), -bound, bound).reshape(shape)
        tensors[name] = Tensor(vals, requires_grad=True)
    return ModelParams(variant, hyper, tensors)


def check_inputs(params: ModelParams, x: np.ndarray, z: np.ndarray | None) -> None:
    h = params.hyper
    want = (h.history, h.n_nodes, h.n_states)
    if x.ndim != 4 or x.shape[1:] != want:
        raise DimensionError(f"window states {x.shape} do not match [B, {want[0]}, {want[1]}, {want[2]}]")
    if params.variant == "rcdgcn" and h.n_features:
        if z is None or z.shape != x.shape[:3] + (h.n_features,):
            raise DimensionError(f"window features {None if z is None else z.shape} "
                                 f"do not match [B, Q, N, {h.n_features}]")


def attention(params: ModelParams, x: np.ndarray, z: np.ndarray | None, rings: np.ndarray) -> list[Tensor]:
    """Propagation matrices used by the graph layers for a batch of windows."""
    h = params.hyper
    if rings.shape != (h.max_hops + 1, h.n_nodes, h.n_nodes):
        raise DimensionError(f"ring masks {rings.shape} do not match hyper (hops={h.max_hops}, N={h.n_nodes})")
    each = h.attention_step == "each"
    if params.variant == "rcdgcn":
        xs = x if each else x[:, -1]
        zs = None if z is None or not h.n_features else (z if each else z[:, -1])
        return tab_forward(Tensor._wrap(xs), None if zs is None else Tensor._wrap(zs),
                           params.tab, rings, h.attention_mode)
    lead = x.shape[:2] if each else x.shape[:1]
    return fixed_attention(rings, lead, h.attention_mode)


def _lookback(kind: str, layer, taps: int) -> int:
    return (taps - 1) * layer.dilation if kind == "tcn" else 0


def _suffix_lengths(seq, taps: int, history: int) -> list[int]:
    """Trailing output steps each layer must produce for the head's last step."""
    need, out = 1, []
    for kind, layer in reversed(seq):
        out.append(min(need, history))
        need += _lookback(kind, layer, taps)
    return out[::-1]


def _input_need(seq, taps: int) -> int:
    return 1 + sum(_lookback(kind, layer, taps) for kind, layer in seq)


def forward(params: ModelParams, x: np.ndarray, z: np.ndarray | None, rings: np.ndarray | None = None,
            trim: bool = True) -> Tensor:
    """Normalized predictions ``[B, T, N, P]`` for windows ``x [B, Q, N, P]``.

    Only the last step of the final graph layer reaches the head, and every
    layer is causal, so with ``trim`` each layer is evaluated on just the
    trailing steps its consumers read (the receptive field). The result is
    identical to the full-length evaluation (``trim=False``).
    """
    h = params.hyper
    x = np.asarray(x, dtype=np.float64)
    check_inputs(params, x, z)
    b = x.shape[0]
    t = params.tensors
    if params.variant == "fcn":
        flat = Tensor._wrap(x.reshape(b, -1))
        hid = tn.relu(tn.add_bias(tn.linear(flat, t["fc1.w"]), t["fc1.b"]))
        out = tn.add_bias(tn.linear(hid, t["fc2.w"]), t["fc2.b"])
        return tn.reshape(out, (b, h.horizon, h.n_nodes, h.n_states))
    if rings is None:
        raise ValueError("graph variants need hop ring masks")
    atts = attention(params, x, z, rings)
    seq = []
    for block, gcn in zip(params.tcn_stack, params.gcn_stack):
        seq += [("tcn", layer) for layer in block] + [("gcn", gcn)]
    keep = _suffix_lengths(seq, h.taps, h.history) if trim else [h.history] * len(seq)
    start = h.history - (_input_need(seq, h.taps) if trim else h.history)
    hcur = Tensor._wrap(x[:, max(0, start):])
    for (kind, layer), k in zip(seq, keep):
        if kind == "tcn":
            hcur = gated_tcn(hcur, layer, time_axis=1)
        else:
            step_atts = atts
            if h.attention_step == "each" and hcur.shape[1] < h.history:
                step_atts = [a[:, h.history - hcur.shape[1]:] for a in atts]
            hcur = graph_conv(hcur, step_atts, layer, "relu")
        if hcur.shape[1] > k:
            hcur = hcur[:, hcur.shape[1] - k:]
    last = hcur[:, -1]
    out = tn.add_bias(tn.linear(last, t["head.w"]), t["head.b"])  # [B, N, T*P]
    out = tn.reshape(out, (b, h.n_nodes, h.horizon, h.n_states))
    return tn.transpose(out, (0, 2, 1, 3))


def predict(params: ModelParams, x, z, rings=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with tn.no_grad():
        for k in range(0, len(x), batch_size):
            zb = None if z is None else z[k:k + batch_size]
            out.append(forward(params, x[k:k + batch_size], zb, rings).data)
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------- checkpoint


def _manifest(params: ModelParams) -> str:
    lines = [f"variant={params.variant}", params.hyper.to_text()]
    for name, t in params.tensors.items():
        lines.append(f"tensor={name}:{','.join(str(d) for d in t.shape)}")
    return "\n".join(lines) + "\n"


def to_bytes(params: ModelParams) -> bytes:
    man = _manifest(params).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(man)), man]
    parts += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors.values()]
    return b"".join(parts)


def from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError("not an RCDG checkpoint (bad magic)")
    version, man_len = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 10 + man_len:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        text = blob[10:10 + man_len].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("corrupt checkpoint manifest") from None
    variant, hyper_items, specs = None, {}, []
    for line in text.splitlines():
        key, _, val = line.partition("=")
        if key == "variant":
            variant = val
        elif key.startswith("hyper."):
            hyper_items[key[len("hyper."):]] = val
        elif key == "tensor":
            name, _, dims = val.rpartition(":")
            specs.append((name, tuple(int(d) for d in dims.split(",") if d)))
        else:
            raise CheckpointError(f"unknown manifest entry {line!r}")
    if variant not in VARIANTS:
        raise CheckpointError(f"unknown variant {variant!r}")
    hyper = Hyper.from_items(hyper_items)
    pos = 10 + man_len
    tensors = {}
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"truncated checkpoint data at tensor {name}")
        tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape), requires_grad=True)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError("trailing bytes after tensor data")
    expected = [(n, s) for n, s, _ in _shapes(variant, hyper)]
    if [(n, s) for n, s in specs] != expected:
        raise CheckpointError("tensor manifest does not match the variant's layout")
    return ModelParams(variant, hyper, tensors)


def save(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load(path: str | Path) -> ModelParams:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    return from_bytes(blob)


def hyper_dict(h: Hyper) -> dict:
    return asdict(h)
