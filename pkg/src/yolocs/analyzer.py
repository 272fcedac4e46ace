"""Static parameter and FLOP accounting over a built graph.

FLOP convention: a convolution costs ``2 * k*k * c_in * c_out * h_out * w_out``
(two FLOPs per multiply-accumulate) plus one add per output element when it
has a bias; BatchNorm and SiLU cost two FLOPs per element; max-pool,
upsample and residual add cost one FLOP per output element; concat is free.
Counting stops at the head's raw prediction maps.
"""

from dataclasses import dataclass, field

from yolocs.errors import DimensionMismatchError
from yolocs.graph import HEAD_MODULES, MAX_STRIDE, Graph
from yolocs.nn.module import FlopCounter, Meta, Module


@dataclass
class LayerRow:
    index: int
    kind: str
    sources: list
    repeats: int
    out_shape: tuple | list
    params: int
    flops: int


@dataclass
class ProfileReport:
    name: str
    input_size: int
    rows: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9


def _check_size(input_size):
    if input_size % MAX_STRIDE:
        raise DimensionMismatchError(f"input size must be divisible by {MAX_STRIDE}, got {input_size}")


def _trace_nodes(graph: Graph, input_size: int):
    shapes = graph.infer_shapes((1, graph.input_channels, input_size, input_size))
    in_shape = (1, graph.input_channels, input_size, input_size)
    flops = []
    for node in graph.nodes:
        counter = FlopCounter()
        vals = [Meta(in_shape if s < 0 else shapes[s], counter) for s in node.sources]
        node.module(vals if node.kind in ("Concat",) + HEAD_MODULES else vals[0])
        flops.append(counter.total)
    return shapes, flops


def count_params(graph: Graph):
    """Learnable scalars per layer (conv weights/bias, BN gamma/beta) and the total."""
    per_layer = [node.module.num_params() for node in graph.nodes]
    return per_layer, sum(per_layer)


def count_flops(graph: Graph, input_size: int = 640):
    """FLOPs per layer at a square ``input_size`` and the total."""
    _check_size(input_size)
    _, flops = _trace_nodes(graph, input_size)
    return flops, sum(flops)


def profile(graph: Graph, input_size: int = 640, name: str | None = None) -> ProfileReport:
    _check_size(input_size)
    outs, flops = _trace_nodes(graph, input_size)
    params, _ = count_params(graph)
    report = ProfileReport(name or graph.config.name or "model", input_size)
    for node, shape, fl, p in zip(graph.nodes, outs, flops, params):
        report.rows.append(LayerRow(node.index, node.kind, list(node.resolved.sources),
                                    node.resolved.repeats, shape, p, fl))
    return report


def module_cost(module: Module, in_shape) -> tuple:
    """``(params, flops)`` of a standalone module for one input shape."""
    _, flops = module.trace(in_shape)
    return module.num_params(), flops


def path_costs(head, level: int, in_shape) -> dict:
    """Per-task ``(params, flops)`` for one head level, costed from the stem output."""
    stem = getattr(head.m[level], "stem", None)
    if stem is not None:
        start, _ = stem.trace(in_shape)
    else:
        start = tuple(in_shape)
    costs = {}
    for task, mods in head.paths(level).items():
        shape, p, f = start, 0, 0
        for m in mods:
            counter = FlopCounter()
            out = m(Meta(tuple(shape), counter))
            shape, f, p = out.shape, f + counter.total, p + m.num_params()
        costs[task] = (p, f)
    return costs


def _fmt_shape(shape) -> str:
    if isinstance(shape, list):
        return ",".join("x".join(map(str, s)) for s in shape)
    return "x".join(map(str, shape))


def format_table(report: ProfileReport) -> str:
    lines = [f"{report.name} @ {report.input_size}x{report.input_size}",
             f"{'idx':>4} {'from':>12} {'n':>3} {'module':<12} {'params':>12} {'GFLOPs':>9}  output"]
    for r in report.rows:
        src = str(r.sources[0]) if len(r.sources) == 1 else "[" + ",".join(map(str, r.sources)) + "]"
        lines.append(f"{r.index:>4} {src:>12} {r.repeats:>3} {r.kind:<12} {r.params:>12,} "
                     f"{r.flops / 1e9:>9.2f}  {_fmt_shape(r.out_shape)}")
    lines.append(f"total: {report.total_params:,} params ({report.params_m:.2f}M), "
                 f"{report.gflops:.1f} GFLOPs")
    return "\n".join(lines)


def format_kv(report: ProfileReport) -> str:
    lines = []
    for r in report.rows:
        src = ",".join(map(str, r.sources))
        lines.append(f"layer={r.index} kind={r.kind} from={src} n={r.repeats} params={r.params} "
                     f"flops={r.flops} out={_fmt_shape(r.out_shape)}")
    lines.append(f"total name={report.name} img_size={report.input_size} params={report.total_params} "
                 f"params_m={report.params_m:.2f} flops={report.total_flops} gflops={report.gflops:.1f}")
    return "\n".join(lines)


@dataclass
class CompareRow:
    name: str
    params: int
    flops: int
    d_params: int
    d_flops: int


def compare(reports: list) -> list:
    """Signed parameter/FLOP deltas of every report against the first."""
    if not reports:
        return []
    ref = reports[0]
    return [CompareRow(r.name, r.total_params, r.total_flops,
                       r.total_params - ref.total_params, r.total_flops - ref.total_flops)
            for r in reports]


def format_compare(rows: list, kv: bool = False) -> str:
    if kv:
        return "\n".join(
            f"model={r.name} params={r.params} params_m={r.params / 1e6:.2f} gflops={r.flops / 1e9:.1f} "
            f"d_params={r.d_params} d_params_m={r.d_params / 1e6:+.2f} d_gflops={r.d_flops / 1e9:+.1f}"
            for r in rows)
    width = max([len(r.name) for r in rows] + [6])
    lines = [f"{'model':<{width}} {'Params(M)':>16} {'GFLOPs':>16}"]
    for i, r in enumerate(rows):
        if i == 0:
            lines.append(f"{r.name:<{width}} {r.params / 1e6:>16.1f} {r.flops / 1e9:>16.1f}")
        else:
            p = f"{r.params / 1e6:.1f} ({r.d_params / 1e6:+.1f})"
            f = f"{r.flops / 1e9:.1f} ({r.d_flops / 1e9:+.1f})"
            lines.append(f"{r.name:<{width}} {p:>16} {f:>16}")
    return "\n".join(lines)
