"""Model configs: parsing, depth/width scaling, graph building and execution.

Config format (one statement per line, ``#`` starts a comment)::

    nc: 80
    depth_multiple: 1.0
    width_multiple: 1.0
    backbone:
      [-1, 1, Conv, [64, 6, 2, 2]]
      [-1, 3, DCFS, [128]]
    head:
      [[17, 20, 23], 1, ADH, [nc, 256, [256, 128, 64]]]

Each layer line is ``[from, repeats, Module, [args...]]``. ``from`` is ``-1``
(previous layer), an absolute earlier index, or a list of those.
"""

import ast
from dataclasses import dataclass, field
import math
from pathlib import Path

import numpy as np

from yolocs.errors import ConfigError, DimensionMismatchError, InternalError
from yolocs.nn import (
    C3, CBS, DCFS, DEFAULT_ANCHORS, SPPF, Bottleneck, Concat, HeadADH, HeadConfig, HeadCoupled,
    HeadDH, Module, Sequential, Upsample,
)

MODULE_ALIASES = {
    "Conv": "CBS", "CBS": "CBS",
    "Bottleneck": "Bottleneck", "BottleneckV5": "Bottleneck",
    "C3": "C3", "CSP_C3": "C3",
    "DCFS": "DCFS",
    "SPPF": "SPPF",
    "Concat": "Concat",
    "Upsample": "Upsample", "nn.Upsample": "Upsample",
    "Detect": "Detect", "HeadCoupled": "Detect",
    "DH": "DH", "HeadDH": "DH",
    "ADH": "ADH", "HeadADH": "ADH",
}
HEAD_MODULES = ("Detect", "DH", "ADH")
REPEATED_BLOCKS = ("C3", "DCFS")
SCALED_CHANNELS = ("CBS", "Bottleneck", "C3", "DCFS", "SPPF")
MAX_STRIDE = 32
# decoupled-head widths shrink with sqrt(width_multiple), not linearly; calibrated
# against the published S/M/L parameter and GFLOP totals
HEAD_WIDTH_EXPONENT = 0.5


@dataclass
class LayerSpec:
    sources: list
    repeats: int
    module: str
    args: list
    section: str = "backbone"
    line: int | None = None


@dataclass
class ModelConfig:
    nc: int = 80
    depth_multiple: float = 1.0
    width_multiple: float = 1.0
    layers: list = field(default_factory=list)
    anchors: tuple = DEFAULT_ANCHORS
    name: str = ""


def _literal(node, line):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        return node.id
    if isinstance(node, ast.Attribute):
        return f"{_literal(node.value, line)}.{node.attr}"
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_literal(node.operand, line)
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_literal(e, line) for e in node.elts]
    raise ConfigError(f"unsupported token {ast.dump(node)[:40]}", line)


def _parse_value(text, line):
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse {text.strip()!r}: {exc.msg}", line) from None
    return _literal(tree.body, line)


def parse_config(text: str, name: str = "") -> ModelConfig:
    cfg = ModelConfig(name=name)
    section = None
    seen_keys = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("- "):
            line = line[2:].strip()
        if line.startswith("["):
            if section is None:
                raise ConfigError("layer line before any 'backbone:' or 'head:' section", lineno)
            value = _parse_value(line.rstrip(","), lineno)
            if not isinstance(value, list) or len(value) != 4:
                raise ConfigError("layer must be [from, repeats, Module, [args]]", lineno)
            src, reps, module, args = value
            sources = src if isinstance(src, list) else [src]
            if not all(isinstance(s, int) for s in sources):
                raise ConfigError(f"'from' must be integers, got {src!r}", lineno)
            if not isinstance(reps, int) or reps < 1:
                raise ConfigError(f"repeats must be a positive integer, got {reps!r}", lineno)
            if module not in MODULE_ALIASES:
                raise ConfigError(f"unknown module {module!r}", lineno)
            if not isinstance(args, list):
                raise ConfigError("args must be a list", lineno)
            cfg.layers.append(LayerSpec(sources, reps, MODULE_ALIASES[module], args, section, lineno))
            continue
        if ":" not in line:
            raise ConfigError(f"expected 'key: value' or a layer line, got {line!r}", lineno)
        key, _, rest = line.partition(":")
        key, rest = key.strip(), rest.strip()
        if key in ("backbone", "head"):
            if rest:
                raise ConfigError(f"section header '{key}:' takes no value", lineno)
            section = key
            continue
        if key in seen_keys:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        seen_keys.add(key)
        value = _parse_value(rest, lineno)
        if key == "nc":
            if not isinstance(value, int) or value < 1:
                raise ConfigError("nc must be a positive integer", lineno)
            cfg.nc = value
        elif key in ("depth_multiple", "width_multiple"):
            if not isinstance(value, (int, float)) or not 0 < value <= 1.5:
                raise ConfigError(f"{key} must lie in (0, 1.5]", lineno)
            setattr(cfg, key, float(value))
        elif key == "anchors":
            if not isinstance(value, list) or not all(isinstance(a, list) and len(a) % 2 == 0 for a in value):
                raise ConfigError("anchors must be a list of [w, h, w, h, ...] lists", lineno)
            cfg.anchors = tuple(tuple(a) for a in value)
        else:
            raise ConfigError(f"unknown header key {key!r}", lineno)
    _validate(cfg)
    return cfg


def _validate(cfg: ModelConfig) -> None:
    if not cfg.layers:
        raise ConfigError("config defines no layers")
    for i, layer in enumerate(cfg.layers):
        for s in layer.sources:
            if s == -1:
                if i == 0:
                    continue
            elif s < 0 or s >= i:
                raise ConfigError(f"layer {i} references undefined layer {s}", layer.line)
        if layer.module == "Concat" and len(layer.sources) < 2:
            raise ConfigError("Concat needs at least two sources", layer.line)
        if layer.module in HEAD_MODULES and i != len(cfg.layers) - 1:
            raise ConfigError("head modules must be the last layer", layer.line)
        if layer.module not in ("Concat",) + HEAD_MODULES and len(layer.sources) != 1:
            raise ConfigError(f"{layer.module} takes exactly one source", layer.line)


def load_config(path) -> ModelConfig:
    path = Path(path)
    return parse_config(path.read_text(), name=path.stem)


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


def scale_repeats(n: int, depth_multiple: float) -> int:
    return max(round(n * depth_multiple), 1) if n > 1 else n


@dataclass
class ResolvedLayer:
    index: int
    module: str
    sources: list
    section: str
    c_in: list
    c_out: int
    repeats: int
    kwargs: dict
    line: int | None = None


def apply_multipliers(cfg: ModelConfig, input_channels: int = 3) -> list:
    """Resolve per-layer channels and repeat counts under the config's multipliers."""
    gd, gw = cfg.depth_multiple, cfg.width_multiple
    ch = []
    resolved = []
    for i, layer in enumerate(cfg.layers):
        src = [i - 1 if s == -1 else s for s in layer.sources]
        c_in = [ch[s] if s >= 0 else input_channels for s in src]
        args = [cfg.nc if a == "nc" else a for a in layer.args]
        n = scale_repeats(layer.repeats, gd)
        kw = {}
        mod = layer.module
        try:
            if mod in SCALED_CHANNELS:
                c_out = make_divisible(args[0] * gw)
                if mod == "CBS":
                    kw = {"k": args[1] if len(args) > 1 else 1, "s": args[2] if len(args) > 2 else 1,
                          "p": args[3] if len(args) > 3 else None}
                elif mod == "C3":
                    kw = {"n": n, "shortcut": bool(args[1]) if len(args) > 1 else True}
                elif mod == "DCFS":
                    kw = {"n": n, "shortcut": bool(args[1]) if len(args) > 1 else layer.section == "backbone",
                          "variant": args[2] if len(args) > 2 else "OCJ"}
                    if c_out % 4:
                        raise ConfigError(f"DCFS width {c_out} does not split into quarter-width taps", layer.line)
                elif mod == "SPPF":
                    kw = {"k": args[1] if len(args) > 1 else 5}
                elif mod == "Bottleneck":
                    kw = {"shortcut": bool(args[1]) if len(args) > 1 else True}
                    if c_out != c_in[0]:
                        raise ConfigError("Bottleneck must preserve width", layer.line)
                if mod in REPEATED_BLOCKS:
                    n_seq = 1
                else:
                    n_seq = n
            elif mod == "Concat":
                c_out, n_seq = sum(c_in), 1
            elif mod == "Upsample":
                c_out, n_seq = c_in[0], 1
            else:
                nc = args[0] if args else cfg.nc
                na = len(cfg.anchors[0]) // 2
                kw = {"nc": nc, "na": na}
                hw = gw ** HEAD_WIDTH_EXPONENT
                if mod in ("DH", "ADH"):
                    kw["stem_width"] = make_divisible((args[1] if len(args) > 1 else 256) * hw)
                if mod == "ADH":
                    sched = args[2] if len(args) > 2 else [256, 128, 64]
                    kw["obj_schedule"] = [make_divisible(v * hw) for v in sched]
                c_out, n_seq = na * (5 + nc), 1
        except (IndexError, TypeError) as exc:
            raise ConfigError(f"bad arguments {layer.args!r} for {mod}: {exc}", layer.line) from None
        if c_out % 2 and mod in SCALED_CHANNELS:
            raise ConfigError(f"odd channel count {c_out} after width scaling", layer.line)
        kw["repeat"] = n_seq
        ch.append(c_out)
        resolved.append(ResolvedLayer(i, mod, src, layer.section, c_in, c_out, n if mod in REPEATED_BLOCKS else n_seq,
                                      kw, layer.line))
    return resolved


def _make_module(r: ResolvedLayer, rng, dtype) -> Module:
    kw = dict(r.kwargs)
    repeat = kw.pop("repeat")
    c1 = r.c_in[0]

    def one(c_in):
        if r.module == "CBS":
            return CBS(c_in, r.c_out, kw["k"], kw["s"], kw["p"], rng=rng, dtype=dtype)
        if r.module == "C3":
            return C3(c_in, r.c_out, kw["n"], kw["shortcut"], rng=rng, dtype=dtype)
        if r.module == "DCFS":
            return DCFS(c_in, r.c_out, kw["n"], kw["shortcut"], kw["variant"], rng=rng, dtype=dtype)
        if r.module == "SPPF":
            return SPPF(c_in, r.c_out, kw["k"], rng=rng, dtype=dtype)
        if r.module == "Bottleneck":
            return Bottleneck(c_in, kw["shortcut"], rng=rng, dtype=dtype)
        if r.module == "Upsample":
            return Upsample()
        if r.module == "Concat":
            return Concat()
        if r.module == "Detect":
            return HeadCoupled(r.c_in, kw["nc"], kw["na"], rng=rng, dtype=dtype)
        if r.module == "DH":
            return HeadDH(r.c_in, kw["nc"], kw["na"], kw["stem_width"], rng=rng, dtype=dtype)
        if r.module == "ADH":
            hc = HeadConfig(kw["nc"], kw["na"], list(r.c_in), kw["stem_width"], kw["obj_schedule"])
            return HeadADH(hc, rng=rng, dtype=dtype)
        raise ConfigError(f"unknown module {r.module!r}", r.line)

    if repeat == 1:
        return one(c1)
    return Sequential(one(c1), *(one(r.c_out) for _ in range(repeat - 1)))


@dataclass
class Node:
    index: int
    module: Module
    sources: list
    kind: str
    section: str
    resolved: ResolvedLayer
    out_shape: tuple | list | None = None


class Graph(Module):
    """Executable layer DAG with statically inferred shapes."""

    kind = "Graph"

    def __init__(self, nodes, config: ModelConfig, input_channels=3, img_size=640):
        super().__init__()
        self.nodes = nodes
        self.config = config
        self.input_channels = input_channels
        for node in nodes:
            setattr(self, str(node.index), node.module)
        self._shape_cache = {}
        if nodes:
            shapes = self.infer_shapes((1, input_channels, img_size, img_size))
            for node, s in zip(nodes, shapes):
                node.out_shape = s
        self.img_size = img_size

    @property
    def head(self):
        return self.nodes[-1].module if self.nodes else None

    @property
    def strides(self) -> list:
        last = self.nodes[-1].out_shape
        if not isinstance(last, list):
            return []
        return [self.img_size // s[2] for s in last]

    def anchors_grid(self) -> list:
        """Per-level anchors (na, 2) in grid-cell units."""
        return [np.asarray(a, dtype=np.float64).reshape(-1, 2) / s
                for a, s in zip(self.config.anchors, self.strides)]

    def _inputs(self, node, outs, x):
        vals = [x if s < 0 else outs[s] for s in node.sources]
        return vals if node.kind in ("Concat",) + HEAD_MODULES else vals[0]

    def infer_shapes(self, input_shape) -> list:
        input_shape = tuple(input_shape)
        if input_shape in self._shape_cache:
            return self._shape_cache[input_shape]
        from yolocs.nn.module import FlopCounter, Meta

        counter = FlopCounter()
        outs = []
        for node in self.nodes:
            try:
                out = node.module(self._inputs(node, outs, Meta(input_shape, counter)))
            except (DimensionMismatchError, ValueError) as exc:
                raise DimensionMismatchError(f"shape inference failed: {exc}", f"layer {node.index} ({node.kind})") from None
            outs.append(out)
        shapes = [[o.shape for o in out] if isinstance(out, list) else out.shape for out in outs]
        self._shape_cache[input_shape] = shapes
        return shapes

    def forward(self, x):
        if not isinstance(x, np.ndarray) or x.ndim != 4:
            raise DimensionMismatchError("input must be an (n, c, h, w) array")
        if x.shape[1] != self.input_channels or x.shape[2] % MAX_STRIDE or x.shape[3] % MAX_STRIDE:
            raise DimensionMismatchError(
                f"input must have {self.input_channels} channels and spatial dims divisible by {MAX_STRIDE}, got {x.shape}")
        expected = self.infer_shapes(x.shape)
        outs = []
        for node, exp in zip(self.nodes, expected):
            out = node.module(self._inputs(node, outs, x))
            got = [o.shape for o in out] if isinstance(out, list) else out.shape
            if got != exp:
                raise InternalError(f"layer {node.index} produced {got}, static inference said {exp}")
            outs.append(out)
        self._needed = outs
        return outs[-1]

    def backward(self, output_grads) -> dict:
        """Backpropagate head-output gradients; returns ``{param_name: grad}``."""
        buffers = {len(self.nodes) - 1: output_grads}
        input_grad = None
        for node in reversed(self.nodes):
            g = buffers.pop(node.index, None)
            if g is None:
                continue
            gin = node.module.backward(g)
            gins = gin if node.kind in ("Concat",) + HEAD_MODULES else [gin]
            for s, gs in zip(node.sources, gins):
                if s < 0:
                    input_grad = gs if input_grad is None else input_grad + gs
                elif s in buffers:
                    buffers[s] = buffers[s] + gs
                else:
                    buffers[s] = gs
        self.input_grad = input_grad
        return dict(self.named_grads())


def build(cfg: ModelConfig, nc: int | None = None, na: int | None = None, *, seed: int | None = 0,
          dtype=np.float32, img_size: int = 640, input_channels: int = 3) -> Graph:
    """Compile a config into a :class:`Graph`.

    ``seed=None`` allocates zero weights (cheap; enough for cost analysis).
    ``na`` overrides anchors-per-level by truncating each anchor list.
    """
    if nc is not None:
        cfg = ModelConfig(nc, cfg.depth_multiple, cfg.width_multiple,
                          [LayerSpec(l.sources, l.repeats, l.module,
                                     [nc if (l.module in HEAD_MODULES and j == 0) else a for j, a in enumerate(l.args)],
                                     l.section, l.line) for l in cfg.layers],
                          cfg.anchors, cfg.name)
    if na is not None:
        cfg = ModelConfig(cfg.nc, cfg.depth_multiple, cfg.width_multiple, cfg.layers,
                          tuple(tuple(a[: 2 * na]) for a in cfg.anchors), cfg.name)
    if img_size % MAX_STRIDE:
        raise DimensionMismatchError(f"image size must be divisible by {MAX_STRIDE}, got {img_size}")
    rng = np.random.default_rng(seed) if seed is not None else None
    nodes = []
    for r in apply_multipliers(cfg, input_channels):
        module = _make_module(r, rng, dtype)
        nodes.append(Node(r.index, module, r.sources, r.module, r.section, r))
    return Graph(nodes, cfg, input_channels, img_size)
