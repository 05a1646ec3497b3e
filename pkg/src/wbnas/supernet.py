"""Desk-scale weight-shared super-network with elastic slicing.

The super-network stores maximal weight arrays; a sub-network uses the first
C output / input channels of each conv, the first D blocks of each stage, and
the block-diagonal taps implied by its group choice.  Gradients are
hand-coded (see :mod:`wbnas.nnops`); weights outside the active slice receive
exactly zero gradient.

Training follows the sandwich rule: per step the biggest sub-network, the
smallest one, and N random ones are evaluated.  The biggest is supervised by
the ground truth; the rest by the biggest's predicted heatmaps, resized to
each student's output resolution (in-place distillation).  Updates are plain
gradient descent so the hand-coded math stays auditable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops as O
from .geometry import HeatmapStack, encode_gaussian
from .space import (
    SearchSpace,
    SubNetworkSpec,
    get_preset,
    sample_extreme,
    sample_random,
    validate,
)

PARTS = ("body", "face", "hand")
PART_TO_MODULE = {"body": "bodynet", "face": "facehead", "hand": "handhead"}

CHECKPOINT_META_KEY = "__meta__"


class SupernetError(ValueError):
    pass


@dataclass
class SupernetConfig:
    image_channels: int = 3
    output_channels: dict = field(
        default_factory=lambda: {"bodynet": 5, "facehead": 3, "handhead": 3}
    )
    target_sigma: float = 1.25  # heatmap-Gaussian sigma in output pixels

    def to_dict(self):
        return {
            "image_channels": self.image_channels,
            "output_channels": dict(self.output_channels),
            "target_sigma": self.target_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image_channels=int(d["image_channels"]),
            output_channels={k: int(v) for k, v in d["output_channels"].items()},
            target_sigma=float(d["target_sigma"]),
        )


@dataclass
class LossBreakdown:
    body: float
    face: float
    hand: float

    @property
    def total(self) -> float:
        return self.body + self.face + self.hand


@dataclass
class TrainBatch:
    """Images plus normalized keypoint annotations for the three parts.

    ``keypoints[part]`` is (N, K, 2) in [0, 1] coordinates of the full frame;
    ``visibility[part]`` is (N, K) with 0 marking keypoints that must not
    contribute to the loss.
    """

    images: np.ndarray  # (N, C, H, W)
    keypoints: dict
    visibility: dict


# --------------------------------------------------------------------------
# Layer bookkeeping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _LayerDef:
    max_out: int
    max_in: int
    kernel: int
    stride: int


def _bottleneck_mid(channels: int) -> int:
    return max(channels // 4, 1)


def _eff_groups(nominal: int, *counts: int) -> int:
    g = nominal
    for c in counts:
        g = math.gcd(g, c)
    return max(g, 1)


def _stage0_octaves(st_space) -> int:
    return int(math.log2(st_space.branches[0].resolution_divisor))


def _max_channel(br_space) -> int:
    return br_space.channel.end


def _head_input_max(space: SearchSpace) -> int:
    body = space.module("bodynet")
    return max(_max_channel(st.branches[0]) for st in body.stages)


def _block_layer_defs(kind, name, max_in, max_c):
    defs = {}
    if kind == "basic-block":
        defs[f"{name}.c1"] = _LayerDef(max_c, max_in, 3, 1)
        defs[f"{name}.c2"] = _LayerDef(max_c, max_c, 3, 1)
    elif kind == "bottleneck":
        mid = _bottleneck_mid(max_c)
        defs[f"{name}.c1"] = _LayerDef(mid, max_in, 1, 1)
        defs[f"{name}.c2"] = _LayerDef(mid, mid, 3, 1)
        defs[f"{name}.c3"] = _LayerDef(max_c, mid, 1, 1)
    else:
        raise SupernetError(f"unsupported block kind {kind!r}")
    defs[f"{name}.proj"] = _LayerDef(max_c, max_in, 1, 1)
    return defs


def _layer_defs(space: SearchSpace, config: SupernetConfig) -> dict[str, _LayerDef]:
    defs: dict[str, _LayerDef] = {}
    for mod in space.modules:
        m = mod.name
        if m == "bodynet":
            in_max = config.image_channels
        else:
            in_max = _head_input_max(space)
        for st in mod.stages:
            if st.index == 0:
                c0 = _max_channel(st.branches[0])
                octaves = _stage0_octaves(st)
                cin = in_max
                for j in range(st.depth.end):
                    stride = 2 if j < octaves else 1
                    defs[f"{m}.stem{j}"] = _LayerDef(c0, cin, 3, stride)
                    cin = c0
                in_max = c0
                continue
            # block chains per branch
            if st.index == 1:
                prev_max = [in_max]
            else:
                prev_st = mod.stage(st.index - 1)
                prev_max = [_max_channel(b) for b in prev_st.branches]
                prev_max.append(_max_channel(st.branches[-1]))  # via transition conv
                defs[f"{m}.t{st.index}.new"] = _LayerDef(
                    _max_channel(st.branches[-1]),
                    _max_channel(prev_st.branches[-1]),
                    3,
                    2,
                )
            for bi, br in enumerate(st.branches, start=1):
                cmax = _max_channel(br)
                for d in range(st.depth.end):
                    block_in = prev_max[bi - 1] if d == 0 else cmax
                    defs.update(
                        _block_layer_defs(
                            st.operator, f"{m}.s{st.index}.b{bi}.d{d}", block_in, cmax
                        )
                    )
            # exchange unit at stage end (multi-branch stages only)
            if len(st.branches) > 1:
                for i, bri in enumerate(st.branches, start=1):
                    for j, brj in enumerate(st.branches, start=1):
                        if i == j:
                            continue
                        ci, cj = _max_channel(bri), _max_channel(brj)
                        if bri.resolution_divisor < brj.resolution_divisor:
                            octaves = int(
                                math.log2(brj.resolution_divisor // bri.resolution_divisor)
                            )
                            cin = ci
                            for t in range(octaves):
                                cout = cj if t == octaves - 1 else ci
                                defs[f"{m}.ex{st.index}.{i}to{j}.k{t}"] = _LayerDef(
                                    cout, cin, 3, 2
                                )
                                cin = cout
                        else:
                            defs[f"{m}.ex{st.index}.{i}to{j}"] = _LayerDef(cj, ci, 1, 1)
        out_in = _max_channel(mod.stages[-1].branches[0])
        defs[f"{m}.out"] = _LayerDef(config.output_channels[m], out_in, 1, 1)
    return defs


@dataclass
class SupernetParams:
    space_name: str
    config: SupernetConfig
    arrays: dict  # name -> {"<layer>.w": ..., "<layer>.b": ...} flattened

    def copy(self) -> "SupernetParams":
        return SupernetParams(
            space_name=self.space_name,
            config=SupernetConfig.from_dict(self.config.to_dict()),
            arrays={k: v.copy() for k, v in self.arrays.items()},
        )


def init_params(space: SearchSpace, rng_seed, config: SupernetConfig | None = None) -> SupernetParams:
    config = config or SupernetConfig()
    rng = np.random.default_rng(rng_seed)
    arrays = {}
    for name, d in sorted(_layer_defs(space, config).items()):
        fan_in = d.max_in * d.kernel * d.kernel
        arrays[f"{name}.w"] = rng.normal(
            0.0, 1.0 / math.sqrt(fan_in), size=(d.max_out, d.max_in, d.kernel, d.kernel)
        )
        arrays[f"{name}.b"] = np.zeros(d.max_out)
    return SupernetParams(space_name=space.name, config=config, arrays=arrays)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


class _Graph:
    """One forward trace: wraps parameter arrays into nodes on first use."""

    def __init__(self, params: SupernetParams):
        self.params = params
        self.nodes: dict[str, O.Node] = {}

    def param(self, key: str) -> O.Node:
        if key not in self.nodes:
            self.nodes[key] = O.Node(self.params.arrays[key])
        return self.nodes[key]

    def conv(self, name, x, cout, cin, groups=1, stride=1, act=True):
        w_full = self.param(f"{name}.w")
        kernel = w_full.shape[2]
        w = O.slice_weight(w_full, cout, cin)
        b = O.slice_oc(self.param(f"{name}.b"), cout)
        y = O.conv2d(x, w, b, stride=stride, pad=kernel // 2, groups=groups)
        return O.relu(y) if act else y

    def grads(self) -> dict:
        out = {}
        for key, arr in self.params.arrays.items():
            node = self.nodes.get(key)
            if node is not None and node.grad is not None:
                out[key] = node.grad
            else:
                out[key] = np.zeros_like(arr)
        return out


def _run_block(g: _Graph, kind, name, x, cin, channels, groups):
    if kind == "basic-block":
        g1 = _eff_groups(groups, cin, channels)
        y = g.conv(f"{name}.c1", x, channels, cin, groups=g1)
        y = g.conv(f"{name}.c2", y, channels, channels, groups=groups, act=False)
    elif kind == "bottleneck":
        mid = _bottleneck_mid(channels)
        gm = _eff_groups(groups, mid)
        y = g.conv(f"{name}.c1", x, mid, cin)
        y = g.conv(f"{name}.c2", y, mid, mid, groups=gm)
        y = g.conv(f"{name}.c3", y, channels, mid, act=False)
    else:
        raise SupernetError(f"unsupported block kind {kind!r}")
    if cin != channels:
        res = g.conv(f"{name}.proj", x, channels, cin, act=False)
    else:
        res = x
    return O.relu(O.add(y, res))


def _run_module(g: _Graph, space: SearchSpace, spec: SubNetworkSpec, name, x, stage_taps=None):
    """Run one sub-module; returns (output node, per-stage branch-1 taps)."""
    mod = space.module(name)
    choice = spec.modules[name]
    taps = {}
    branches: list[O.Node] = []
    branch_channels: list[int] = []
    for st_space, st_choice in zip(mod.stages, choice.stages):
        if st_space.index == 0:
            c0 = st_choice.branches[0].channel
            octaves = _stage0_octaves(st_space)
            cin = x.shape[1]
            for j in range(st_choice.depth):
                stride = 2 if j < octaves else 1
                x = g.conv(f"{name}.stem{j}", x, c0, cin, stride=stride)
                cin = c0
            branches = [x]
            branch_channels = [c0]
            taps[0] = (x, c0)
            continue
        if st_space.index >= 2:
            new_c = st_choice.branches[-1].channel
            new_in = branch_channels[-1]
            branches.append(
                g.conv(f"{name}.t{st_space.index}.new", branches[-1], new_c, new_in, stride=2)
            )
            branch_channels.append(new_c)
        elif not branches:
            # heads have no stem; stage 1 consumes the cropped body features
            branches = [x]
            branch_channels = [x.shape[1]]
        outs = []
        out_channels = []
        for bi, (br_choice, inp, cin) in enumerate(
            zip(st_choice.branches, branches, branch_channels), start=1
        ):
            y = inp
            for d in range(st_choice.depth):
                y = _run_block(
                    g,
                    st_space.operator,
                    f"{name}.s{st_space.index}.b{bi}.d{d}",
                    y,
                    cin if d == 0 else br_choice.channel,
                    br_choice.channel,
                    br_choice.group,
                )
            outs.append(y)
            out_channels.append(br_choice.channel)
        # exchange: every branch sums contributions from every other branch
        if len(outs) > 1:
            fused = []
            for j in range(len(outs)):
                contributions = [outs[j]]
                for i in range(len(outs)):
                    if i == j:
                        continue
                    di = st_space.branches[i].resolution_divisor
                    dj = st_space.branches[j].resolution_divisor
                    ci, cj = out_channels[i], out_channels[j]
                    if di < dj:
                        z = outs[i]
                        cin = ci
                        octaves = int(math.log2(dj // di))
                        for t in range(octaves):
                            cout = cj if t == octaves - 1 else ci
                            z = g.conv(
                                f"{name}.ex{st_space.index}.{i + 1}to{j + 1}.k{t}",
                                z,
                                cout,
                                cin,
                                stride=2,
                                act=t < octaves - 1,
                            )
                            cin = cout
                    else:
                        z = g.conv(
                            f"{name}.ex{st_space.index}.{i + 1}to{j + 1}",
                            outs[i],
                            cj,
                            ci,
                            act=False,
                        )
                        z = O.bilinear_resize(z, outs[j].shape[-2:])
                    contributions.append(z)
                acc = contributions[0]
                for c in contributions[1:]:
                    acc = O.add(acc, c)
                fused.append(O.relu(acc))
            outs = fused
        branches = outs
        branch_channels = out_channels
        taps[st_space.index] = (branches[0], branch_channels[0])
    out = g.conv(
        f"{name}.out",
        branches[0],
        g.params.config.output_channels[name],
        branch_channels[0],
        act=False,
    )
    return out, taps


def forward_subnet(params: SupernetParams, space: SearchSpace, spec: SubNetworkSpec, images):
    """Predicted heatmaps per sub-module for a batch of images.

    ``images`` is (N, C, H0, W0); it is bilinearly resized to each module's
    chosen input resolution.  Returns (outputs, graph) where outputs maps
    module name to its output node; strides are implied by the space's
    branch-1 resolution divisors.
    """
    violations = validate(spec, space)
    if violations:
        raise SupernetError("invalid spec: " + "; ".join(violations))
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != params.config.image_channels:
        raise SupernetError(
            f"images must be (N, {params.config.image_channels}, H, W), got {images.shape}"
        )
    g = _Graph(params)
    body_mod = space.module("bodynet")
    body_choice = spec.modules["bodynet"]
    h = body_choice.height
    w = body_mod.width_for(h)
    x = O.constant(O.bilinear_resize_array(images, (h, w)))
    outputs = {}
    outputs["bodynet"], taps = _run_module(g, space, spec, "bodynet", x)
    for name in space.module_names():
        if name == "bodynet":
            continue
        mod = space.module(name)
        choice = spec.modules[name]
        feat, _ = taps[choice.feature_stage]
        hh = choice.height
        ww = mod.width_for(hh)
        head_in = O.bilinear_resize(feat, (hh, ww))
        outputs[name], _ = _run_module(g, space, spec, name, head_in)
    return outputs, g


def output_strides(space: SearchSpace) -> dict[str, int]:
    """Output stride per module relative to its input (branch-1 divisor)."""
    return {m.name: m.stages[-1].branches[0].resolution_divisor for m in space.modules}


# --------------------------------------------------------------------------
# Losses, targets and distillation
# --------------------------------------------------------------------------


def mse_loss(pred: O.Node, target, mask=None) -> O.Node:
    """Pixel-wise MSE, masked channels excluded from sum and normalizer."""
    return O.masked_mse(pred, target, mask)


def render_targets(keypoints_norm, visibility, out_hw, sigma) -> np.ndarray:
    """Ground-truth Gaussian heatmaps from normalized keypoints.

    Normalized coordinate 0 maps to pixel 0 and 1 to the last pixel, matching
    the align-corners resize used for the inputs.
    """
    n, k, _ = keypoints_norm.shape
    h, w = out_hw
    out = np.zeros((n, k, h, w))
    for s in range(n):
        px = np.stack(
            [keypoints_norm[s, :, 0] * (w - 1), keypoints_norm[s, :, 1] * (h - 1)], axis=1
        )
        stack, _ = encode_gaussian(px, visibility[s], (h, w), sigma)
        out[s] = stack.values
    return out


def distill_targets(teacher_pred: np.ndarray, student_hw) -> np.ndarray:
    """Teacher heatmaps resized to the student's output resolution."""
    teacher_pred = np.asarray(teacher_pred, dtype=np.float64)
    if teacher_pred.shape[-2:] == tuple(student_hw):
        return teacher_pred.copy()
    return O.bilinear_resize_array(teacher_pred, tuple(student_hw))


def _module_output_hw(space, spec, name):
    mod = space.module(name)
    choice = spec.modules[name]
    h, w = choice.height, mod.width_for(choice.height)
    d = mod.stages[-1].branches[0].resolution_divisor
    if any(s.index == 0 for s in mod.stages):
        d *= 1  # divisors are absolute, stage-0 included
    while d > 1:
        h, w = (h + 1) // 2, (w + 1) // 2
        d //= 2
    return h, w


def subnet_loss(params, space, spec, batch: TrainBatch, targets=None):
    """Forward plus the three-part loss; returns (loss node, breakdown, graph, preds).

    ``targets`` overrides the ground-truth heatmaps (used for distillation);
    it maps module name to (target array, mask or None).
    """
    outputs, g = forward_subnet(params, space, spec, batch.images)
    terms = []
    values = {}
    for part in PARTS:
        name = PART_TO_MODULE[part]
        pred = outputs[name]
        if targets is not None:
            tgt, mask = targets[name]
            if tgt.shape[-2:] != pred.shape[-2:]:
                raise SupernetError(
                    f"{name}: target spatial {tgt.shape[-2:]} != prediction {pred.shape[-2:]}"
                )
        else:
            tgt = render_targets(
                batch.keypoints[part],
                batch.visibility[part],
                pred.shape[-2:],
                params.config.target_sigma,
            )
            mask = batch.visibility[part]
        term = mse_loss(pred, tgt, mask)
        terms.append(term)
        values[part] = float(term.value)
    total = O.add_scalars(terms)
    breakdown = LossBreakdown(body=values["body"], face=values["face"], hand=values["hand"])
    return total, breakdown, g, outputs


def backward_subnet(params, space, spec, batch: TrainBatch):
    """Gradients of the three-part loss for every weight array.

    Weights outside the active slice (or in skipped layers) get exactly zero.
    """
    total, breakdown, g, _ = subnet_loss(params, space, spec, batch)
    O.backward(total)
    return g.grads(), breakdown


def train_step_sandwich(
    params: SupernetParams,
    space: SearchSpace,
    batch: TrainBatch,
    rng_seed,
    lr: float,
    n_random: int = 2,
):
    """One sandwich-rule step: biggest + smallest + N random sub-networks.

    The biggest sub-network is supervised by the ground truth; the others by
    the biggest's predictions resized to their output resolutions.
    Accumulated gradients are applied once with plain gradient descent.
    Returns the per-sub-network loss breakdowns, biggest first.
    """
    rng = np.random.default_rng(rng_seed)
    accum = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    results = []

    biggest = sample_extreme(space, "biggest")
    total, breakdown, g, outputs = subnet_loss(params, space, biggest, batch)
    O.backward(total)
    for k, v in g.grads().items():
        accum[k] += v
    results.append(("biggest", breakdown))
    teacher = {name: node.value.copy() for name, node in outputs.items()}

    students = [("smallest", sample_extreme(space, "smallest"))]
    for i in range(n_random):
        students.append((f"random{i}", sample_random(space, int(rng.integers(2**63)))))
    for label, spec in students:
        targets = {
            name: (
                distill_targets(teacher[name], _module_output_hw(space, spec, name)),
                None,
            )
            for name in teacher
        }
        total, breakdown, g, _ = subnet_loss(params, space, spec, batch, targets=targets)
        O.backward(total)
        for k, v in g.grads().items():
            accum[k] += v
        results.append((label, breakdown))

    for k in params.arrays:
        params.arrays[k] -= lr * accum[k]
    return params, results


# --------------------------------------------------------------------------
# Synthetic task
# --------------------------------------------------------------------------


def make_synthetic_task(
    rng_seed,
    n_samples: int,
    space: SearchSpace | None = None,
    layout=(5, 3, 3),
    batch_size: int = 2,
    image_sigma: float = 2.0,
) -> list[TrainBatch]:
    """Batches of blob images with matching keypoint annotations.

    Each part's keypoints are rendered into a dedicated image channel as
    amplitude-1 Gaussians, so the mapping from image to target heatmaps is
    learnable by a small convolutional network.  Deterministic per seed.
    """
    space = space or get_preset("toy")
    rng = np.random.default_rng(rng_seed)
    body_mod = space.module("bodynet")
    h = body_mod.height.end
    w = body_mod.width_for(h)
    counts = dict(zip(PARTS, layout))
    batches = []
    remaining = n_samples
    while remaining > 0:
        n = min(batch_size, remaining)
        remaining -= n
        images = np.zeros((n, 3, h, w))
        keypoints = {p: np.empty((n, counts[p], 2)) for p in PARTS}
        visibility = {p: np.ones((n, counts[p])) for p in PARTS}
        for s in range(n):
            for ci, part in enumerate(PARTS):
                kn = rng.uniform(0.1, 0.9, size=(counts[part], 2))
                keypoints[part][s] = kn
                px = np.stack([kn[:, 0] * (w - 1), kn[:, 1] * (h - 1)], axis=1)
                stack, _ = encode_gaussian(
                    px, np.ones(counts[part]), (h, w), image_sigma
                )
                images[s, ci] = stack.values.max(axis=0)
        batches.append(TrainBatch(images=images, keypoints=keypoints, visibility=visibility))
    return batches


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: SupernetParams, path, extra: dict | None = None) -> None:
    meta = json.dumps(
        {
            "space_name": params.space_name,
            "config": params.config.to_dict(),
            "format": "wbnas-checkpoint/1",
            "extra": extra or {},
        },
        sort_keys=True,
    )
    np.savez(path, **{CHECKPOINT_META_KEY: np.frombuffer(meta.encode(), dtype=np.uint8)}, **params.arrays)


def _read_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data[CHECKPOINT_META_KEY]).decode())
        arrays = {k: data[k] for k in data.files if k != CHECKPOINT_META_KEY}
    return meta, arrays


def load_checkpoint(path) -> SupernetParams:
    meta, arrays = _read_checkpoint(path)
    return SupernetParams(
        space_name=meta["space_name"],
        config=SupernetConfig.from_dict(meta["config"]),
        arrays=arrays,
    )


def checkpoint_meta(path) -> dict:
    """The free-form metadata stored alongside the weights."""
    meta, _ = _read_checkpoint(path)
    return meta.get("extra", {})
