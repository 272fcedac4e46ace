"""Detection heads.

Every head returns, per level, one map shaped ``(n, na * (5 + nc), h, w)``
where anchor ``a`` owns channels ``a*(5+nc) .. a*(5+nc)+4+nc`` laid out as
``[x, y, w, h, obj, cls_0 .. cls_{nc-1}]``. Decoupled heads compute their
task branches separately and permute the concatenation into that layout.
"""

from dataclasses import dataclass, field

import numpy as np

from yolocs.nn.blocks import CBS, BlockDescriptor
from yolocs.nn.module import Concat, Conv2d, Meta, Module, Sequential

DEFAULT_ANCHORS = (
    (10, 13, 16, 30, 33, 23),
    (30, 61, 62, 45, 59, 119),
    (116, 90, 156, 198, 373, 326),
)


@dataclass
class HeadConfig:
    num_classes: int
    anchors_per_level: int
    levels: list
    stem_width: int = 256
    obj_schedule: list = field(default_factory=lambda: [256, 128, 64])

    def __post_init__(self):
        if self.num_classes < 1 or self.anchors_per_level < 1:
            raise ValueError("num_classes and anchors_per_level must be positive")
        if not self.obj_schedule:
            raise ValueError("obj_schedule must not be empty")
        if any(b >= a for a, b in zip(self.obj_schedule, self.obj_schedule[1:])):
            raise ValueError(f"obj_schedule must be strictly decreasing, got {self.obj_schedule}")


def task_permutation(na: int, nc: int) -> np.ndarray:
    """Index map from ``[box(na*4), obj(na), cls(na*nc)]`` into the per-anchor layout."""
    no = 5 + nc
    perm = np.empty(na * no, dtype=np.int64)
    for a in range(na):
        for j in range(no):
            if j < 4:
                perm[a * no + j] = a * 4 + j
            elif j == 4:
                perm[a * no + j] = na * 4 + a
            else:
                perm[a * no + j] = na * 5 + a * nc + (j - 5)
    return perm


class Head(Module):
    """Shared plumbing for multi-level heads."""

    def __init__(self, levels, nc, na):
        super().__init__()
        self.levels = list(levels)
        self.nc, self.na = nc, na
        self.no = 5 + nc

    @property
    def out_channels(self) -> int:
        return self.na * self.no

    def branch_channels(self) -> dict:
        return {"obj": self.na, "cls": self.na * self.nc, "box": self.na * 4}

    def forward(self, xs):
        if len(xs) != len(self.levels):
            raise ValueError(f"head expects {len(self.levels)} inputs, got {len(xs)}")
        return [self.forward_level(i, x) for i, x in enumerate(xs)]

    def backward(self, grads):
        return [self.backward_level(i, g) for i, g in enumerate(grads)]

    def descriptor(self):
        return BlockDescriptor(self.kind, sum(self.levels), self.out_channels * len(self.levels))


class HeadCoupled(Head):
    """One 1x1 prediction conv per level."""

    kind = "HeadCoupled"

    def __init__(self, levels, nc=80, na=3, *, rng=None, dtype=np.float32):
        super().__init__(levels, nc, na)
        self.m = Sequential(*(Conv2d(c, na * self.no, 1, bias=True, rng=rng, dtype=dtype) for c in levels))

    def forward_level(self, i, x):
        return self.m[i](x)

    def backward_level(self, i, g):
        return self.m[i].backward(g)

    def paths(self, i) -> dict:
        return {"all": [self.m[i]]}


class _DecoupledLevel(Module):
    """Holds the per-level layers of a decoupled head and the output permutation."""

    def __init__(self, na, nc):
        super().__init__()
        self.perm = task_permutation(na, nc)
        self.cat = Concat()

    def merge(self, box, obj, cls):
        out = self.cat([box, obj, cls])
        if isinstance(out, Meta):
            return out
        return np.ascontiguousarray(out[:, self.perm])

    def unmerge(self, g):
        gc = np.empty_like(g)
        gc[:, self.perm] = g
        return self.cat.backward(gc)


class HeadDH(Head):
    """Symmetric decoupled head: 1x1 stem, two 3x3 CBS per task branch.

    Box and objectness predictions share the regression branch.
    """

    kind = "HeadDH"

    def __init__(self, levels, nc=80, na=3, stem_width=256, *, rng=None, dtype=np.float32):
        super().__init__(levels, nc, na)
        self.stem_width = stem_width
        sw = stem_width
        lv = []
        for c in levels:
            m = _DecoupledLevel(na, nc)
            m.stem = CBS(c, sw, 1, rng=rng, dtype=dtype)
            m.cls_branch = Sequential(CBS(sw, sw, 3, rng=rng, dtype=dtype), CBS(sw, sw, 3, rng=rng, dtype=dtype))
            m.reg_branch = Sequential(CBS(sw, sw, 3, rng=rng, dtype=dtype), CBS(sw, sw, 3, rng=rng, dtype=dtype))
            m.cls_pred = Conv2d(sw, na * nc, 1, bias=True, rng=rng, dtype=dtype)
            m.box_pred = Conv2d(sw, na * 4, 1, bias=True, rng=rng, dtype=dtype)
            m.obj_pred = Conv2d(sw, na, 1, bias=True, rng=rng, dtype=dtype)
            lv.append(m)
        self.m = Sequential(*lv)

    def forward_level(self, i, x):
        m = self.m[i]
        s = m.stem(x)
        c = m.cls_branch(s)
        r = m.reg_branch(s)
        return m.merge(m.box_pred(r), m.obj_pred(r), m.cls_pred(c))

    def backward_level(self, i, g):
        m = self.m[i]
        gbox, gobj, gcls = m.unmerge(g)
        gr = m.box_pred.backward(gbox) + m.obj_pred.backward(gobj)
        gs = m.reg_branch.backward(gr) + m.cls_branch.backward(m.cls_pred.backward(gcls))
        return m.stem.backward(gs)

    def paths(self, i) -> dict:
        m = self.m[i]
        return {"cls": [m.cls_branch, m.cls_pred], "box": [m.reg_branch, m.box_pred], "obj": [m.obj_pred]}


class HeadADH(Head):
    """Asymmetric decoupled head.

    Per level: 1x1 CBS stem, then three task paths off the stem. Objectness
    runs through successive 3x3 CBS layers whose widths follow
    ``obj_schedule`` before a 1x1 prediction conv; classification and box are
    single 1x1 convs.
    """

    kind = "HeadADH"

    def __init__(self, config: HeadConfig, *, rng=None, dtype=np.float32):
        super().__init__(config.levels, config.num_classes, config.anchors_per_level)
        self.config = config
        sw, na, nc = config.stem_width, self.na, self.nc
        lv = []
        for c in config.levels:
            m = _DecoupledLevel(na, nc)
            m.stem = CBS(c, sw, 1, rng=rng, dtype=dtype)
            widths = [sw] + list(config.obj_schedule)
            m.obj_path = Sequential(*(CBS(a, b, 3, rng=rng, dtype=dtype) for a, b in zip(widths, widths[1:])))
            m.obj_pred = Conv2d(widths[-1], na, 1, bias=True, rng=rng, dtype=dtype)
            m.cls_pred = Conv2d(sw, na * nc, 1, bias=True, rng=rng, dtype=dtype)
            m.box_pred = Conv2d(sw, na * 4, 1, bias=True, rng=rng, dtype=dtype)
            lv.append(m)
        self.m = Sequential(*lv)

    def forward_level(self, i, x):
        m = self.m[i]
        s = m.stem(x)
        return m.merge(m.box_pred(s), m.obj_pred(m.obj_path(s)), m.cls_pred(s))

    def backward_level(self, i, g):
        m = self.m[i]
        gbox, gobj, gcls = m.unmerge(g)
        gs = m.box_pred.backward(gbox) + m.obj_path.backward(m.obj_pred.backward(gobj)) + m.cls_pred.backward(gcls)
        return m.stem.backward(gs)

    def paths(self, i) -> dict:
        m = self.m[i]
        return {"obj": [m.obj_path, m.obj_pred], "cls": [m.cls_pred], "box": [m.box_pred]}
