"""Analytic multiply-accumulate (MAC) and parameter counts for sub-networks.

Conventions (logged in every report):
  * one MAC = one FLOP unit, which puts a full-size HRNet-W32-shaped body
    backbone at 384x288 near 16 GMACs;
  * normalization, activation, bilinear resize and RoI cropping are excluded
    (negligible next to the convolutions);
  * feature sizes halve with ceil rounding per octave, matching stride-2
    convolutions with same padding;
  * exchange (fusion) units between branches run once per 4 blocks of a
    multi-branch stage: upsample paths are a 1x1 conv at the source
    resolution, downsample paths are one stride-2 3x3 conv per octave;
  * residual blocks: basic-block is two grouped 3x3 convs, bottleneck is
    1x1 reduce to C/4, grouped 3x3, 1x1 expand, both with a 1x1 projection
    on the residual path when the input width differs;
  * grouping applies to the 3x3 convs; when the nominal group count does not
    divide a conv's channel counts, the effective count is the gcd;
  * parameter counts use the same closed forms with the spatial term dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .space import ModuleSpace, SearchSpace, SubNetworkSpec, validate

COST_CONVENTION = "1 MAC = 1 FLOP unit; norm/act/resize/crop excluded"

DEFAULT_OUTPUT_CHANNELS = {"bodynet": 38, "facehead": 68, "handhead": 21}
BLOCKS_PER_EXCHANGE = 4


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    kernel: tuple[int, int]
    in_channels: int
    out_channels: int
    groups: int
    out_spatial: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        h, w = self.out_spatial
        if min(kh, kw, self.in_channels, self.out_channels, self.groups, h, w, self.stride) < 1:
            raise CostError(f"all layer shape fields must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise CostError(
                f"groups {self.groups} must divide in {self.in_channels} "
                f"and out {self.out_channels} channels"
            )


def conv_cost(shape: LayerShape) -> int:
    """MACs of one convolution: kh*kw*(Cin/G)*Cout*H*W."""
    kh, kw = shape.kernel
    h, w = shape.out_spatial
    return kh * kw * (shape.in_channels // shape.groups) * shape.out_channels * h * w


def conv_params(shape: LayerShape) -> int:
    kh, kw = shape.kernel
    return kh * kw * (shape.in_channels // shape.groups) * shape.out_channels


def effective_groups(nominal: int, *channel_counts: int) -> int:
    """Largest group count dividing every involved width, capped by nominal."""
    g = nominal
    for c in channel_counts:
        g = math.gcd(g, c)
    return max(g, 1)


@dataclass
class CostReport:
    macs: dict[str, float]
    params: dict[str, float]
    hand_multiplicity: int = 2
    convention: str = COST_CONVENTION

    @property
    def total_macs(self) -> float:
        return (
            self.macs.get("bodynet", 0)
            + self.macs.get("facehead", 0)
            + self.hand_multiplicity * self.macs.get("handhead", 0)
        )

    @property
    def total_params(self) -> float:
        # HandHead weights are shared between the two hands: counted once.
        return sum(self.params.values())

    def to_dict(self) -> dict:
        return {
            "macs": dict(self.macs),
            "params": dict(self.params),
            "hand_multiplicity": self.hand_multiplicity,
            "total_macs": self.total_macs,
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(
            macs=dict(d["macs"]),
            params=dict(d["params"]),
            hand_multiplicity=int(d["hand_multiplicity"]),
            convention=d.get("convention", COST_CONVENTION),
        )

    def to_lines(self) -> list[str]:
        """Line-oriented text record, one sub-module per line plus the total."""
        lines = []
        for name in ("bodynet", "facehead", "handhead"):
            if name not in self.macs:
                continue
            mult = f" x{self.hand_multiplicity}" if name == "handhead" else ""
            lines.append(
                f"{name:<10} macs={self.macs[name]:.6g}{mult} params={self.params[name]:.6g}"
            )
        lines.append(f"{'total':<10} macs={self.total_macs:.6g}")
        lines.append(f"# {self.convention}")
        return lines


def allocation_report(report: CostReport) -> dict[str, float]:
    """Per-sub-module share of total MACs (hand counted with multiplicity)."""
    total = report.total_macs
    if total <= 0:
        raise CostError("allocation undefined for zero total cost")
    fractions = {
        "bodynet": report.macs.get("bodynet", 0) / total,
        "facehead": report.macs.get("facehead", 0) / total,
        "handhead": report.hand_multiplicity * report.macs.get("handhead", 0) / total,
    }
    assert abs(sum(fractions.values()) - 1.0) < 1e-12
    return fractions


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------


def _block_convs(kind, in_channels, channels, groups, spatial, first_stride=1):
    """Conv shapes of a single residual block (or plain conv layer)."""
    h, w = spatial
    if kind == "plain-conv":
        return [
            LayerShape((3, 3), in_channels, channels, 1, spatial, stride=first_stride)
        ]
    convs = []
    if kind == "basic-block":
        g1 = effective_groups(groups, in_channels, channels)
        g2 = effective_groups(groups, channels)
        convs.append(LayerShape((3, 3), in_channels, channels, g1, spatial, stride=first_stride))
        convs.append(LayerShape((3, 3), channels, channels, g2, spatial))
    elif kind == "bottleneck":
        mid = max(channels // 4, 1)
        gm = effective_groups(groups, mid)
        convs.append(LayerShape((1, 1), in_channels, mid, 1, spatial, stride=first_stride))
        convs.append(LayerShape((3, 3), mid, mid, gm, spatial))
        convs.append(LayerShape((1, 1), mid, channels, 1, spatial))
    else:
        raise CostError(f"unknown block kind {kind!r}")
    if in_channels != channels or first_stride != 1:
        convs.append(LayerShape((1, 1), in_channels, channels, 1, spatial, stride=first_stride))
    return convs


def block_cost(kind, channels, groups, spatial, depth, in_channels=None) -> int:
    """MACs of a chain of ``depth`` blocks at one resolution.

    The first block takes ``in_channels`` (defaults to ``channels``) and
    projects the residual when the width changes; the rest are C -> C.
    """
    if depth < 1:
        raise CostError(f"depth must be >= 1, got {depth}")
    if in_channels is None:
        in_channels = channels
    total = sum(conv_cost(s) for s in _block_convs(kind, in_channels, channels, groups, spatial))
    total += (depth - 1) * sum(
        conv_cost(s) for s in _block_convs(kind, channels, channels, groups, spatial)
    )
    return total


def _block_params(kind, channels, groups, spatial, depth, in_channels=None) -> int:
    if in_channels is None:
        in_channels = channels
    total = sum(conv_params(s) for s in _block_convs(kind, in_channels, channels, groups, spatial))
    total += (depth - 1) * sum(
        conv_params(s) for s in _block_convs(kind, channels, channels, groups, spatial)
    )
    return total


# --------------------------------------------------------------------------
# Whole sub-network
# --------------------------------------------------------------------------


def _halve(size: int) -> int:
    return (size + 1) // 2


def _spatial_at(height: int, width: int, divisor: int) -> tuple[int, int]:
    h, w = height, width
    d = divisor
    while d > 1:
        h, w = _halve(h), _halve(w)
        d //= 2
    return h, w


def _exchange_shapes(mod_space: ModuleSpace, stage_choice, stage_space, hw):
    """Conv shapes of one exchange (fusion) unit across a stage's branches."""
    shapes = []
    n = len(stage_space.branches)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ci = stage_choice.branches[i].channel
            cj = stage_choice.branches[j].channel
            di = stage_space.branches[i].resolution_divisor
            dj = stage_space.branches[j].resolution_divisor
            if di < dj:
                # downsample path: one stride-2 3x3 per octave
                octaves = int(math.log2(dj // di))
                d = di
                cin = ci
                for t in range(octaves):
                    d *= 2
                    cout = cj if t == octaves - 1 else ci
                    shapes.append(
                        LayerShape((3, 3), cin, cout, 1, _spatial_at(*hw, d), stride=2)
                    )
                    cin = cout
            else:
                # upsample path: 1x1 channel match at the source resolution
                shapes.append(LayerShape((1, 1), ci, cj, 1, _spatial_at(*hw, di)))
    return shapes


def _module_layer_shapes(
    space: SearchSpace,
    spec: SubNetworkSpec,
    name: str,
    output_channels: int,
    image_channels: int,
) -> list[LayerShape]:
    mod_space = space.module(name)
    choice = spec.modules[name]
    height = choice.height
    width = mod_space.width_for(height)
    hw = (height, width)
    shapes: list[LayerShape] = []

    if name == "bodynet":
        in_channels = image_channels
    else:
        # head input: bodynet's highest-resolution branch at the chosen stage
        body_space = space.module("bodynet")
        body_choice = spec.modules["bodynet"]
        fs = choice.feature_stage
        in_channels = body_choice.stages[
            [s.index for s in body_space.stages].index(fs)
        ].branches[0].channel

    for st_space, st_choice in zip(mod_space.stages, choice.stages):
        if st_space.index == 0:
            # stem: stride-2 convs down to the stage-0 divisor, then stride 1
            c0 = st_choice.branches[0].channel
            octaves = int(math.log2(st_space.branches[0].resolution_divisor))
            cin = in_channels
            d = 1
            for layer in range(st_choice.depth):
                stride = 2 if layer < octaves else 1
                if stride == 2:
                    d *= 2
                shapes.append(
                    LayerShape((3, 3), cin, c0, 1, _spatial_at(*hw, d), stride=stride)
                )
                cin = c0
            in_channels = c0
            continue
        # transition into this stage: the new branch is spawned from the
        # previous stage's lowest-resolution branch by a stride-2 3x3 conv.
        if st_space.index >= 2:
            prev_space = mod_space.stage(st_space.index - 1)
            prev_choice = choice.stages[
                [s.index for s in mod_space.stages].index(st_space.index - 1)
            ]
            src_c = prev_choice.branches[-1].channel
            new_br = st_space.branches[-1]
            new_c = st_choice.branches[-1].channel
            shapes.append(
                LayerShape(
                    (3, 3),
                    src_c,
                    new_c,
                    1,
                    _spatial_at(*hw, new_br.resolution_divisor),
                    stride=2,
                )
            )
            del prev_space
        # branch block chains
        branch_inputs = []
        if st_space.index == 1:
            branch_inputs = [in_channels]
        else:
            prev_choice = choice.stages[
                [s.index for s in mod_space.stages].index(st_space.index - 1)
            ]
            branch_inputs = [b.channel for b in prev_choice.branches]
            branch_inputs.append(st_choice.branches[-1].channel)
        for br_space, br_choice, cin in zip(st_space.branches, st_choice.branches, branch_inputs):
            spatial = _spatial_at(*hw, br_space.resolution_divisor)
            for s in _block_convs(
                st_space.operator, cin, br_choice.channel, br_choice.group, spatial
            ):
                shapes.append(s)
            for _ in range(st_choice.depth - 1):
                for s in _block_convs(
                    st_space.operator,
                    br_choice.channel,
                    br_choice.channel,
                    br_choice.group,
                    spatial,
                ):
                    shapes.append(s)
        # exchange units: one per BLOCKS_PER_EXCHANGE blocks on multi-branch stages
        if len(st_space.branches) > 1:
            n_ex = max(1, math.ceil(st_choice.depth / BLOCKS_PER_EXCHANGE))
            ex = _exchange_shapes(mod_space, st_choice, st_space, hw)
            shapes.extend(ex * n_ex)

    # output head: 1x1 conv from the highest-resolution branch
    last_space = mod_space.stages[-1]
    last_choice = choice.stages[-1]
    out_spatial = _spatial_at(*hw, last_space.branches[0].resolution_divisor)
    shapes.append(
        LayerShape((1, 1), last_choice.branches[0].channel, output_channels, 1, out_spatial)
    )
    return shapes


def subnetwork_cost(
    space: SearchSpace,
    spec: SubNetworkSpec,
    output_channels: dict[str, int] | None = None,
    image_channels: int = 3,
    hand_multiplicity: int = 2,
) -> CostReport:
    """Full MAC/parameter report for one sub-network.

    HandHead is costed once in its own field and ``hand_multiplicity`` times
    in the total (both hands run through the same head).
    """
    violations = validate(spec, space)
    if violations:
        raise CostError("invalid spec: " + "; ".join(violations))
    out_ch = dict(DEFAULT_OUTPUT_CHANNELS)
    if output_channels:
        out_ch.update(output_channels)
    macs = {}
    params = {}
    for name in space.module_names():
        shapes = _module_layer_shapes(space, spec, name, out_ch[name], image_channels)
        macs[name] = sum(conv_cost(s) for s in shapes)
        params[name] = sum(conv_params(s) for s in shapes)
    return CostReport(macs=macs, params=params, hand_multiplicity=hand_multiplicity)
