"""Declarative search space for the staged multi-branch keypoint networks.

The space covers three weight-shared sub-modules (``bodynet``, ``facehead``,
``handhead``).  Each sub-module has an elastic input height, per-stage elastic
depth, per-branch elastic channel and group counts, and -- for the two heads --
two connection dimensions (feature stage and RoI expansion).

All dimensions are discrete grids ``[start, end; stride]``.  Group counts are
conditional on the chosen channel ``C``: the legal groups are
``C / 2**i`` for ``i = 0..max_exponent`` whenever that quotient is a positive
integer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
import yaml

OPERATOR_KINDS = ("plain-conv", "bottleneck", "basic-block")

_INT64_MAX = 2**63 - 1


class SpaceError(ValueError):
    """Raised for malformed space definitions or impossible requests."""


class CountOverflowError(SpaceError):
    """Raised when an enumeration count does not fit in 64 bits."""


@dataclass(frozen=True)
class DimensionRange:
    """Discrete grid [start, end; stride], optionally scaled (RoI tenths)."""

    start: int
    end: int
    stride: int
    scale: float = 1.0

    def __post_init__(self):
        if self.stride <= 0:
            raise SpaceError(f"stride must be positive, got {self.stride}")
        if self.start > self.end:
            raise SpaceError(f"start {self.start} > end {self.end}")
        if (self.end - self.start) % self.stride != 0:
            raise SpaceError(
                f"(end - start) = {self.end - self.start} not divisible by stride {self.stride}"
            )

    def grid(self) -> list[int]:
        return list(range(self.start, self.end + 1, self.stride))

    def values(self) -> list:
        if self.scale == 1.0:
            return self.grid()
        return [round(v * self.scale, 10) for v in self.grid()]

    def contains(self, value) -> bool:
        if self.scale == 1.0:
            if not isinstance(value, (int, np.integer)):
                return False
            v = int(value)
        else:
            raw = value / self.scale
            v = round(raw)
            if abs(raw - v) > 1e-9:
                return False
        return self.start <= v <= self.end and (v - self.start) % self.stride == 0

    def __len__(self) -> int:
        return (self.end - self.start) // self.stride + 1


def group_choices(channel: int, max_exponent: int) -> list[int]:
    """Legal group counts for a channel width, descending.

    Returns ``{channel / 2**i : 0 <= i <= max_exponent}`` restricted to
    positive integers, so the full-width grouping (G == C) is always present.
    """
    if channel < 1:
        raise SpaceError(f"channel must be >= 1, got {channel}")
    out = []
    for i in range(max_exponent + 1):
        d = 2**i
        if channel % d == 0:
            out.append(channel // d)
    return out


@dataclass(frozen=True)
class BranchSpace:
    channel: DimensionRange
    group_exponent_max: int
    resolution_divisor: int
    fixed_group: Optional[int] = None  # stem convs pin the group count to 1

    def __post_init__(self):
        if self.group_exponent_max < 0:
            raise SpaceError("group_exponent_max must be >= 0")
        d = self.resolution_divisor
        if d < 1 or (d & (d - 1)) != 0:
            raise SpaceError(f"resolution_divisor must be a power of two, got {d}")

    def legal_groups(self, channel: int) -> list[int]:
        if self.fixed_group is not None:
            return [self.fixed_group]
        return group_choices(channel, self.group_exponent_max)


@dataclass(frozen=True)
class StageSpace:
    index: int
    operator: str
    depth: DimensionRange
    branches: tuple[BranchSpace, ...]

    def __post_init__(self):
        if self.operator not in OPERATOR_KINDS:
            raise SpaceError(f"unknown operator kind {self.operator!r}")
        expected = 1 if self.index == 0 else self.index
        if len(self.branches) != expected:
            raise SpaceError(
                f"stage {self.index} must have {expected} branches, got {len(self.branches)}"
            )


@dataclass(frozen=True)
class ConnectionSpace:
    feature_stages: tuple[int, ...] = (0, 1, 2, 3, 4)
    roi_expansion: DimensionRange = DimensionRange(10, 13, 1, scale=0.1)

    def __post_init__(self):
        if min(self.roi_expansion.values()) < 1.0:
            raise SpaceError("RoI expansion values must be >= 1.0")


@dataclass(frozen=True)
class ModuleSpace:
    name: str
    height: DimensionRange
    aspect: tuple[int, int]  # width = height * aspect[0] / aspect[1]
    stages: tuple[StageSpace, ...]
    connection: Optional[ConnectionSpace] = None

    def __post_init__(self):
        if self.name == "bodynet" and self.connection is not None:
            raise SpaceError("bodynet has no connection dimensions")
        if self.name != "bodynet" and self.connection is None:
            raise SpaceError(f"head module {self.name!r} requires a connection space")

    def width_for(self, height: int) -> int:
        num, den = self.aspect
        w = height * num / den
        if w != int(w):
            raise SpaceError(f"height {height} gives non-integer width with aspect {self.aspect}")
        return int(w)

    def stage(self, index: int) -> StageSpace:
        for s in self.stages:
            if s.index == index:
                return s
        raise SpaceError(f"module {self.name!r} has no stage {index}")


@dataclass(frozen=True)
class SearchSpace:
    name: str
    modules: tuple[ModuleSpace, ...]

    def module(self, name: str) -> ModuleSpace:
        for m in self.modules:
            if m.name == name:
                return m
        raise SpaceError(f"no module named {name!r}")

    def module_names(self) -> list[str]:
        return [m.name for m in self.modules]


# --------------------------------------------------------------------------
# Concrete architecture choices
# --------------------------------------------------------------------------


@dataclass
class BranchChoice:
    channel: int
    group: int

    def to_dict(self):
        return {"channel": self.channel, "group": self.group}


@dataclass
class StageChoice:
    depth: int
    branches: list[BranchChoice]

    def to_dict(self):
        return {"depth": self.depth, "branches": [b.to_dict() for b in self.branches]}


@dataclass
class ModuleChoice:
    height: int
    stages: list[StageChoice]
    feature_stage: Optional[int] = None
    roi_expansion: Optional[float] = None

    def to_dict(self):
        d = {"height": self.height, "stages": [s.to_dict() for s in self.stages]}
        if self.feature_stage is not None:
            d["feature_stage"] = self.feature_stage
        if self.roi_expansion is not None:
            d["roi_expansion"] = self.roi_expansion
        return d


@dataclass
class SubNetworkSpec:
    modules: dict[str, ModuleChoice]

    def to_dict(self):
        return {name: m.to_dict() for name, m in self.modules.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SubNetworkSpec":
        mods = {}
        for name, md in d.items():
            stages = [
                StageChoice(
                    depth=int(sd["depth"]),
                    branches=[
                        BranchChoice(channel=int(b["channel"]), group=int(b["group"]))
                        for b in sd["branches"]
                    ],
                )
                for sd in md["stages"]
            ]
            mods[name] = ModuleChoice(
                height=int(md["height"]),
                stages=stages,
                feature_stage=md.get("feature_stage"),
                roi_expansion=md.get("roi_expansion"),
            )
        return cls(modules=mods)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def validate(spec: SubNetworkSpec, space: SearchSpace) -> list[str]:
    """Check a concrete spec against the space; returns a list of violations.

    An empty list means the spec is valid.  Violations are descriptive
    strings, never exceptions: an out-of-grid choice is data, not a failure.
    """
    violations: list[str] = []
    for mod_space in space.modules:
        name = mod_space.name
        choice = spec.modules.get(name)
        if choice is None:
            violations.append(f"{name}: missing from spec")
            continue
        if not mod_space.height.contains(choice.height):
            r = mod_space.height
            violations.append(
                f"{name}.height: {choice.height} not on [{r.start},{r.end};{r.stride}] grid"
            )
        if len(choice.stages) != len(mod_space.stages):
            violations.append(
                f"{name}: expected {len(mod_space.stages)} stages, got {len(choice.stages)}"
            )
            continue
        for st_space, st_choice in zip(mod_space.stages, choice.stages):
            prefix = f"{name}.stage{st_space.index}"
            if not st_space.depth.contains(st_choice.depth):
                r = st_space.depth
                violations.append(
                    f"{prefix}.depth: {st_choice.depth} not on [{r.start},{r.end};{r.stride}] grid"
                )
            if len(st_choice.branches) != len(st_space.branches):
                violations.append(
                    f"{prefix}: expected {len(st_space.branches)} branches, "
                    f"got {len(st_choice.branches)}"
                )
                continue
            for bi, (br_space, br_choice) in enumerate(
                zip(st_space.branches, st_choice.branches), start=1
            ):
                bprefix = f"{prefix}.branch{bi}"
                c, g = br_choice.channel, br_choice.group
                if not br_space.channel.contains(c):
                    r = br_space.channel
                    violations.append(
                        f"{bprefix}.channel: {c} not on [{r.start},{r.end};{r.stride}] grid"
                    )
                    continue
                legal = br_space.legal_groups(c)
                if g not in legal:
                    violations.append(
                        f"{bprefix}.group: {g} != 2^-i*{c} for any i <= "
                        f"{br_space.group_exponent_max}"
                    )
        if mod_space.connection is not None:
            conn = mod_space.connection
            if choice.feature_stage is None:
                violations.append(f"{name}.feature_stage: missing")
            elif choice.feature_stage not in conn.feature_stages:
                violations.append(
                    f"{name}.feature_stage: {choice.feature_stage} not in "
                    f"{sorted(conn.feature_stages)}"
                )
            if choice.roi_expansion is None:
                violations.append(f"{name}.roi_expansion: missing")
            elif not conn.roi_expansion.contains(choice.roi_expansion):
                violations.append(
                    f"{name}.roi_expansion: {choice.roi_expansion} not in "
                    f"{conn.roi_expansion.values()}"
                )
        else:
            if choice.feature_stage is not None or choice.roi_expansion is not None:
                violations.append(f"{name}: connection choices set on a module without one")
    return violations


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def sample_random(space: SearchSpace, rng_seed) -> SubNetworkSpec:
    """Uniform independent choice per dimension; deterministic under the seed.

    ``rng_seed`` may be anything ``numpy.random.default_rng`` accepts,
    including a ``SeedSequence``.
    """
    rng = np.random.default_rng(rng_seed)

    def pick(values):
        return values[int(rng.integers(len(values)))]

    mods = {}
    for mod_space in space.modules:
        stages = []
        for st_space in mod_space.stages:
            branches = []
            for br_space in st_space.branches:
                c = pick(br_space.channel.values())
                g = pick(br_space.legal_groups(c))
                branches.append(BranchChoice(channel=c, group=g))
            stages.append(StageChoice(depth=pick(st_space.depth.values()), branches=branches))
        choice = ModuleChoice(height=pick(mod_space.height.values()), stages=stages)
        if mod_space.connection is not None:
            choice.feature_stage = pick(list(mod_space.connection.feature_stages))
            choice.roi_expansion = pick(mod_space.connection.roi_expansion.values())
        mods[mod_space.name] = choice
    return SubNetworkSpec(modules=mods)


def sample_extreme(space: SearchSpace, which: str) -> SubNetworkSpec:
    """The capacity extremes used by the sandwich rule.

    ``biggest`` takes the maximum of every elastic dimension with G = C (the
    least-constrained grouping, i.e. most parameters); ``smallest`` takes the
    minimum of everything with the smallest legal group.  Connection
    dimensions are not monotone in capacity, so both extremes pin them to the
    defaults (feature stage 0, expansion 1.0).
    """
    if which not in ("biggest", "smallest"):
        raise SpaceError(f"which must be 'biggest' or 'smallest', got {which!r}")
    big = which == "biggest"

    mods = {}
    for mod_space in space.modules:
        stages = []
        for st_space in mod_space.stages:
            branches = []
            for br_space in st_space.branches:
                c = br_space.channel.end if big else br_space.channel.start
                legal = br_space.legal_groups(c)
                g = legal[0] if big else legal[-1]
                branches.append(BranchChoice(channel=c, group=g))
            depth = st_space.depth.end if big else st_space.depth.start
            stages.append(StageChoice(depth=depth, branches=branches))
        h = mod_space.height.end if big else mod_space.height.start
        choice = ModuleChoice(height=h, stages=stages)
        if mod_space.connection is not None:
            choice.feature_stage = min(mod_space.connection.feature_stages)
            choice.roi_expansion = min(mod_space.connection.roi_expansion.values())
        mods[mod_space.name] = choice
    return SubNetworkSpec(modules=mods)


def reference_spec(space: SearchSpace) -> SubNetworkSpec:
    """Hand-designed-baseline shape: maximum dims with ordinary (ungrouped,
    where legal) convolutions, feature stage 0, expansion 1.0.

    This is what a conventional manually built network in the same space
    looks like, so it anchors cost comparisons.
    """
    mods = {}
    for mod_space in space.modules:
        stages = []
        for st_space in mod_space.stages:
            branches = []
            for br_space in st_space.branches:
                c = br_space.channel.end
                branches.append(BranchChoice(channel=c, group=br_space.legal_groups(c)[-1]))
            stages.append(StageChoice(depth=st_space.depth.end, branches=branches))
        choice = ModuleChoice(height=mod_space.height.end, stages=stages)
        if mod_space.connection is not None:
            choice.feature_stage = min(mod_space.connection.feature_stages)
            choice.roi_expansion = min(mod_space.connection.roi_expansion.values())
        mods[mod_space.name] = choice
    return SubNetworkSpec(modules=mods)


# --------------------------------------------------------------------------
# Dimension naming, counting and enumeration
# --------------------------------------------------------------------------


def dimension_names(space: SearchSpace) -> list[str]:
    """All dimension names, in the fixed traversal order the sampler uses."""
    names = []
    for mod in space.modules:
        names.append(f"{mod.name}.height")
        for st in mod.stages:
            names.append(f"{mod.name}.stage{st.index}.depth")
            for bi in range(1, len(st.branches) + 1):
                names.append(f"{mod.name}.stage{st.index}.branch{bi}.channel")
                names.append(f"{mod.name}.stage{st.index}.branch{bi}.group")
        if mod.connection is not None:
            names.append(f"{mod.name}.feature_stage")
            names.append(f"{mod.name}.roi_expansion")
    return names


def _dim_count(space: SearchSpace, name: str, requested: set[str]) -> int:
    """Choice count contributed by one dimension.

    Group dimensions are conditional on their channel; requesting a group
    dimension counts the joint (channel, group) cardinality and absorbs the
    channel dimension, whether or not the channel was requested explicitly.
    """
    parts = name.split(".")
    mod = space.module(parts[0])
    if parts[1] == "height":
        return len(mod.height)
    if parts[1] == "feature_stage":
        if mod.connection is None:
            raise SpaceError(f"{parts[0]} has no connection dimensions")
        return len(mod.connection.feature_stages)
    if parts[1] == "roi_expansion":
        if mod.connection is None:
            raise SpaceError(f"{parts[0]} has no connection dimensions")
        return len(mod.connection.roi_expansion)
    stage = mod.stage(int(parts[1].removeprefix("stage")))
    if parts[2] == "depth":
        return len(stage.depth)
    bi = int(parts[2].removeprefix("branch"))
    branch = stage.branches[bi - 1]
    channel_name = f"{parts[0]}.{parts[1]}.branch{bi}.channel"
    if parts[3] == "channel":
        group_name = f"{parts[0]}.{parts[1]}.branch{bi}.group"
        if group_name in requested:
            return 1  # counted jointly by the group dimension
        return len(branch.channel)
    if parts[3] == "group":
        del channel_name
        return sum(
            len(branch.legal_groups(c)) for c in branch.channel.values()
        )
    raise SpaceError(f"unknown dimension {name!r}")


def enumerate_count(space: SearchSpace, dimensions: Optional[Sequence[str]] = None) -> int:
    """Exact cardinality of the product space restricted to ``dimensions``.

    ``None`` means all dimensions; an empty sequence is the empty product (1).
    Raises :class:`CountOverflowError` if the count exceeds 64 bits.
    """
    if dimensions is None:
        dimensions = dimension_names(space)
    known = set(dimension_names(space))
    requested = set(dimensions)
    for name in requested:
        if name not in known:
            raise SpaceError(f"unknown dimension {name!r}")
    total = 1
    for name in sorted(requested):
        total *= _dim_count(space, name, requested)
        if total > _INT64_MAX:
            raise CountOverflowError(
                f"count exceeds 64 bits after dimension {name!r}"
            )
    return total


def enumerate_specs(space: SearchSpace, limit: int = 10**6) -> Iterator[SubNetworkSpec]:
    """Yield every spec in the space, in a fixed lexicographic order.

    Intended for micro-spaces; refuses spaces larger than ``limit``.
    """
    n = enumerate_count(space)
    if n > limit:
        raise SpaceError(f"space has {n} configurations, above the enumeration limit {limit}")

    def module_choices(mod: ModuleSpace) -> Iterator[ModuleChoice]:
        def stage_choices(st: StageSpace) -> Iterator[StageChoice]:
            def branch_choices(br: BranchSpace) -> Iterator[BranchChoice]:
                for c in br.channel.values():
                    for g in br.legal_groups(c):
                        yield BranchChoice(channel=c, group=g)

            branch_lists = [list(branch_choices(br)) for br in st.branches]
            for depth in st.depth.values():
                for combo in _product(branch_lists):
                    yield StageChoice(depth=depth, branches=list(combo))

        stage_lists = [list(stage_choices(st)) for st in mod.stages]
        conn_fs = [None]
        conn_roi = [None]
        if mod.connection is not None:
            conn_fs = list(mod.connection.feature_stages)
            conn_roi = mod.connection.roi_expansion.values()
        for h in mod.height.values():
            for stages in _product(stage_lists):
                for fs in conn_fs:
                    for roi in conn_roi:
                        yield ModuleChoice(
                            height=h,
                            stages=[
                                StageChoice(depth=s.depth, branches=list(s.branches))
                                for s in stages
                            ],
                            feature_stage=fs,
                            roi_expansion=roi,
                        )

    mod_lists = [list(module_choices(m)) for m in space.modules]
    names = space.module_names()
    for combo in _product(mod_lists):
        yield SubNetworkSpec(modules=dict(zip(names, combo)))


def _product(lists):
    import itertools

    return itertools.product(*lists)


# --------------------------------------------------------------------------
# Presets and config files
# --------------------------------------------------------------------------


def _head_stages(divisors: Sequence[int]) -> tuple[StageSpace, ...]:
    d1, d2, d3, d4 = divisors
    return (
        StageSpace(
            index=1,
            operator="bottleneck",
            depth=DimensionRange(2, 4, 1),
            branches=(BranchSpace(DimensionRange(16, 64, 16), 6, d1),),
        ),
        StageSpace(
            index=2,
            operator="basic-block",
            depth=DimensionRange(4, 4, 4),
            branches=(
                BranchSpace(DimensionRange(8, 32, 8), 5, d1),
                BranchSpace(DimensionRange(16, 64, 16), 6, d2),
            ),
        ),
        StageSpace(
            index=3,
            operator="basic-block",
            depth=DimensionRange(8, 16, 4),
            branches=(
                BranchSpace(DimensionRange(8, 32, 8), 5, d1),
                BranchSpace(DimensionRange(16, 64, 16), 6, d2),
                BranchSpace(DimensionRange(32, 128, 32), 7, d3),
            ),
        ),
        StageSpace(
            index=4,
            operator="basic-block",
            depth=DimensionRange(8, 12, 4),
            branches=(
                BranchSpace(DimensionRange(8, 32, 8), 5, d1),
                BranchSpace(DimensionRange(16, 64, 16), 6, d2),
                BranchSpace(DimensionRange(32, 128, 32), 7, d3),
                BranchSpace(DimensionRange(64, 256, 64), 8, d4),
            ),
        ),
    )


def _table_defaults() -> SearchSpace:
    body_stages = (
        StageSpace(
            index=0,
            operator="plain-conv",
            depth=DimensionRange(2, 2, 1),
            branches=(BranchSpace(DimensionRange(16, 64, 16), 0, 4, fixed_group=1),),
        ),
    ) + tuple(
        StageSpace(
            index=s.index,
            operator=s.operator,
            depth=s.depth,
            branches=tuple(
                BranchSpace(b.channel, b.group_exponent_max, b.resolution_divisor * 4)
                for b in s.branches
            ),
        )
        for s in _head_stages((1, 2, 4, 8))
    )
    bodynet = ModuleSpace(
        name="bodynet",
        height=DimensionRange(256, 384, 32),
        aspect=(3, 4),
        stages=body_stages,
    )
    conn = ConnectionSpace()
    facehead = ModuleSpace(
        name="facehead",
        height=DimensionRange(32, 96, 16),
        aspect=(1, 1),
        stages=_head_stages((1, 2, 4, 8)),
        connection=conn,
    )
    handhead = ModuleSpace(
        name="handhead",
        height=DimensionRange(32, 96, 16),
        aspect=(1, 1),
        stages=_head_stages((1, 2, 4, 8)),
        connection=conn,
    )
    return SearchSpace(name="table-defaults", modules=(bodynet, facehead, handhead))


def _toy() -> SearchSpace:
    """Desk-scale space: identical topology, channels capped so the supernet
    trains in seconds.  Bodynet heights keep width = 3H/4 integral."""

    def toy_stage(index, operator, depth, chans, divs):
        return StageSpace(
            index=index,
            operator=operator,
            depth=depth,
            branches=tuple(
                BranchSpace(DimensionRange(c, 2 * c, c), 2, d) for c, d in zip(chans, divs)
            ),
        )

    body_stages = (
        StageSpace(
            index=0,
            operator="plain-conv",
            depth=DimensionRange(2, 2, 1),
            branches=(BranchSpace(DimensionRange(4, 8, 4), 0, 4, fixed_group=1),),
        ),
        toy_stage(1, "bottleneck", DimensionRange(1, 2, 1), (4,), (4,)),
        toy_stage(2, "basic-block", DimensionRange(1, 1, 1), (4, 4), (4, 8)),
        toy_stage(3, "basic-block", DimensionRange(1, 2, 1), (4, 4, 8), (4, 8, 16)),
        toy_stage(4, "basic-block", DimensionRange(1, 1, 1), (4, 4, 8, 8), (4, 8, 16, 32)),
    )
    bodynet = ModuleSpace(
        name="bodynet",
        height=DimensionRange(64, 96, 32),
        aspect=(3, 4),
        stages=body_stages,
    )
    head_stages = (
        toy_stage(1, "bottleneck", DimensionRange(1, 2, 1), (4,), (1,)),
        toy_stage(2, "basic-block", DimensionRange(1, 1, 1), (4, 4), (1, 2)),
        toy_stage(3, "basic-block", DimensionRange(1, 2, 1), (4, 4, 8), (1, 2, 4)),
        toy_stage(4, "basic-block", DimensionRange(1, 1, 1), (4, 4, 8, 8), (1, 2, 4, 8)),
    )
    conn = ConnectionSpace()
    facehead = ModuleSpace(
        name="facehead",
        height=DimensionRange(8, 16, 8),
        aspect=(1, 1),
        stages=head_stages,
        connection=conn,
    )
    handhead = ModuleSpace(
        name="handhead",
        height=DimensionRange(8, 16, 8),
        aspect=(1, 1),
        stages=head_stages,
        connection=conn,
    )
    return SearchSpace(name="toy", modules=(bodynet, facehead, handhead))


def _micro() -> SearchSpace:
    """Tiny enumerable space (8 configurations, 3 elastic dimensions) for
    exhaustive search and brute-force cross-checks."""

    def one_stage_module(name, height, divisor, connection=None):
        stages = []
        if name == "bodynet":
            stages.append(
                StageSpace(
                    index=0,
                    operator="plain-conv",
                    depth=DimensionRange(2, 2, 1),
                    branches=(BranchSpace(DimensionRange(4, 4, 1), 0, divisor, fixed_group=1),),
                )
            )
        stages.append(
            StageSpace(
                index=1,
                operator="bottleneck",
                depth=DimensionRange(1, 1, 1),
                branches=(BranchSpace(DimensionRange(4, 8, 4), 0, divisor),),
            )
        )
        return ModuleSpace(
            name=name,
            height=DimensionRange(height, height, 1),
            aspect=(1, 1),
            stages=tuple(stages),
            connection=connection,
        )

    conn = ConnectionSpace(feature_stages=(0,), roi_expansion=DimensionRange(10, 10, 1, scale=0.1))
    return SearchSpace(
        name="micro",
        modules=(
            one_stage_module("bodynet", 32, 4),
            one_stage_module("facehead", 8, 1, conn),
            one_stage_module("handhead", 8, 1, conn),
        ),
    )


_PRESET_BUILDERS = {"table-defaults": _table_defaults, "toy": _toy, "micro": _micro}


def get_preset(name: str) -> SearchSpace:
    try:
        builder = _PRESET_BUILDERS[name]
    except KeyError:
        raise SpaceError(
            f"unknown preset {name!r}; available: {sorted(_PRESET_BUILDERS)}"
        ) from None
    return builder()


def preset_names() -> list[str]:
    return sorted(_PRESET_BUILDERS)


# ---- YAML schema -----------------------------------------------------------


def _range_from_cfg(cfg, scale=1.0) -> DimensionRange:
    start, end, stride = cfg
    if scale != 1.0:
        return DimensionRange(
            round(start / scale), round(end / scale), round(stride / scale), scale=scale
        )
    return DimensionRange(int(start), int(end), int(stride))


def space_from_dict(cfg: dict) -> SearchSpace:
    modules = []
    for name, mcfg in cfg["modules"].items():
        stages = []
        for scfg in mcfg["stages"]:
            branches = tuple(
                BranchSpace(
                    channel=_range_from_cfg(bcfg["channel"]),
                    group_exponent_max=int(bcfg["group_exponent_max"]),
                    resolution_divisor=int(bcfg["resolution_divisor"]),
                    fixed_group=(
                        int(bcfg["fixed_group"]) if bcfg.get("fixed_group") is not None else None
                    ),
                )
                for bcfg in scfg["branches"]
            )
            stages.append(
                StageSpace(
                    index=int(scfg["index"]),
                    operator=scfg["operator"],
                    depth=_range_from_cfg(scfg["depth"]),
                    branches=branches,
                )
            )
        connection = None
        if "connection" in mcfg:
            ccfg = mcfg["connection"]
            connection = ConnectionSpace(
                feature_stages=tuple(int(v) for v in ccfg["feature_stages"]),
                roi_expansion=_range_from_cfg(ccfg["roi_expansion"], scale=0.1),
            )
        modules.append(
            ModuleSpace(
                name=name,
                height=_range_from_cfg(mcfg["height"]),
                aspect=tuple(int(v) for v in mcfg["aspect"]),
                stages=tuple(stages),
                connection=connection,
            )
        )
    return SearchSpace(name=cfg.get("name", "custom"), modules=tuple(modules))


def space_to_dict(space: SearchSpace) -> dict:
    def rng(r: DimensionRange):
        if r.scale == 1.0:
            return [r.start, r.end, r.stride]
        return [round(r.start * r.scale, 10), round(r.end * r.scale, 10), round(r.stride * r.scale, 10)]

    out = {"name": space.name, "modules": {}}
    for mod in space.modules:
        mcfg = {
            "height": rng(mod.height),
            "aspect": list(mod.aspect),
            "stages": [
                {
                    "index": st.index,
                    "operator": st.operator,
                    "depth": rng(st.depth),
                    "branches": [
                        {
                            "channel": rng(br.channel),
                            "group_exponent_max": br.group_exponent_max,
                            "resolution_divisor": br.resolution_divisor,
                            **(
                                {"fixed_group": br.fixed_group}
                                if br.fixed_group is not None
                                else {}
                            ),
                        }
                        for br in st.branches
                    ],
                }
                for st in mod.stages
            ],
        }
        if mod.connection is not None:
            mcfg["connection"] = {
                "feature_stages": list(mod.connection.feature_stages),
                "roi_expansion": rng(mod.connection.roi_expansion),
            }
        out["modules"][mod.name] = mcfg
    return out


def load_space(path) -> SearchSpace:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    return space_from_dict(cfg)


def save_space(space: SearchSpace, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(space_to_dict(space), fh, sort_keys=False)
