import math

import pytest

from wbnas import cost as C
from wbnas import space as S


def mac_loop(kernel, cin, cout, groups, out_hw, stride=1):
    """Literal multiply counting: every kernel tap of every output element."""
    kh, kw = kernel
    h, w = out_hw
    total = 0
    ig = cin // groups
    for _oc in range(cout):
        for _y in range(h):
            for _x in range(w):
                for _ic in range(ig):
                    for _ky in range(kh):
                        for _kx in range(kw):
                            total += 1
    return total


def test_conv_cost_matches_counting_loop():
    channel_pairs = [
        (cin, cout)
        for cin in (1, 2, 4, 6, 8)
        for cout in (1, 2, 4, 8)
    ]
    for groups in (1, 2, 4):
        for cin, cout in channel_pairs:
            if cin % groups or cout % groups:
                continue
            for kernel in ((1, 1), (3, 3), (1, 3)):
                for out_hw in ((1, 1), (2, 3), (5, 5), (8, 8)):
                    for stride in (1, 2):
                        shape = C.LayerShape(kernel, cin, cout, groups, out_hw, stride)
                        assert C.conv_cost(shape) == mac_loop(
                            kernel, cin, cout, groups, out_hw, stride
                        )


def test_grouped_conv_one_over_g():
    base = C.conv_cost(C.LayerShape((3, 3), 8, 8, 1, (8, 8)))
    for g in (2, 4, 8):
        assert C.conv_cost(C.LayerShape((3, 3), 8, 8, g, (8, 8))) * g == base
        assert C.conv_params(C.LayerShape((3, 3), 8, 8, g, (8, 8))) * g == \
            C.conv_params(C.LayerShape((3, 3), 8, 8, 1, (8, 8)))


def test_conv_cost_examples():
    # 3x3, 16->16, 8x8, ungrouped
    assert C.conv_cost(C.LayerShape((3, 3), 16, 16, 1, (8, 8))) == 147_456
    # fully grouped (depthwise-like): 1/16 of the above
    assert C.conv_cost(C.LayerShape((3, 3), 16, 16, 16, (8, 8))) == 9_216
    # 1x1 projection
    assert C.conv_cost(C.LayerShape((1, 1), 16, 64, 1, (8, 8))) == 65_536


def test_layer_shape_validation():
    with pytest.raises(C.CostError):
        C.LayerShape((3, 3), 6, 8, 4, (8, 8))
    with pytest.raises(C.CostError):
        C.LayerShape((3, 3), 0, 8, 1, (8, 8))


def test_effective_groups_gcd():
    assert C.effective_groups(4, 8, 8) == 4
    assert C.effective_groups(4, 6, 8) == 2
    assert C.effective_groups(4, 3, 8) == 1
    assert C.effective_groups(48, 48) == 48
    assert C.effective_groups(7, 3) == 1


def test_block_cost_basic_block():
    # two grouped 3x3 convs, no projection when widths match
    one = C.block_cost("basic-block", 16, 1, (8, 8), 1)
    assert one == 2 * 147_456
    grouped = C.block_cost("basic-block", 16, 16, (8, 8), 1)
    assert grouped == 2 * 9_216
    # projection appears when the input width differs
    proj = C.block_cost("basic-block", 16, 1, (8, 8), 1, in_channels=8)
    assert proj == C.conv_cost(C.LayerShape((3, 3), 8, 16, 1, (8, 8))) + 147_456 + \
        C.conv_cost(C.LayerShape((1, 1), 8, 16, 1, (8, 8)))


def test_block_cost_bottleneck():
    # 1x1 16->4, grouped 3x3 4->4, 1x1 4->16
    cost = C.block_cost("bottleneck", 16, 1, (8, 8), 1)
    expected = (
        C.conv_cost(C.LayerShape((1, 1), 16, 4, 1, (8, 8)))
        + C.conv_cost(C.LayerShape((3, 3), 4, 4, 1, (8, 8)))
        + C.conv_cost(C.LayerShape((1, 1), 4, 16, 1, (8, 8)))
    )
    assert cost == expected
    # depth stacks identical blocks after the first
    assert C.block_cost("bottleneck", 16, 1, (8, 8), 3) == 3 * expected


def test_block_cost_depth_validation():
    with pytest.raises(C.CostError):
        C.block_cost("basic-block", 16, 1, (8, 8), 0)
    with pytest.raises(C.CostError):
        C.block_cost("unknown", 16, 1, (8, 8), 1)


def test_spatial_ceil_halving():
    assert C._spatial_at(65, 33, 2) == (33, 17)
    assert C._spatial_at(64, 48, 4) == (16, 12)
    assert C._spatial_at(5, 5, 4) == (2, 2)


def test_report_total_and_multiplicity():
    r = C.CostReport(macs={"bodynet": 10.0, "facehead": 2.0, "handhead": 3.0},
                     params={"bodynet": 1.0, "facehead": 1.0, "handhead": 1.0})
    assert r.total_macs == 10.0 + 2.0 + 2 * 3.0
    assert r.total_params == 3.0
    assert any("x2" in line for line in r.to_lines())
    again = C.CostReport.from_dict(r.to_dict())
    assert again.total_macs == r.total_macs


def test_allocation_fractions_sum_to_one():
    space = S.get_preset("toy")
    for seed in range(10):
        report = C.subnetwork_cost(space, S.sample_random(space, seed))
        f = C.allocation_report(report)
        assert abs(sum(f.values()) - 1.0) < 1e-12
        assert all(v >= 0 for v in f.values())


def test_table5_row_arithmetic():
    hand_designed = C.CostReport(
        macs={"bodynet": 16.02e9, "facehead": 4.19e9, "handhead": 4.14e9},
        params={"bodynet": 0, "facehead": 0, "handhead": 0},
    )
    assert abs(hand_designed.total_macs - 28.49e9) < 0.005e9
    f = C.allocation_report(hand_designed)
    assert abs(f["bodynet"] - 0.562) < 0.001

    searched = C.CostReport(
        macs={"bodynet": 12.71e9, "facehead": 0.57e9, "handhead": 2.37e9},
        params={"bodynet": 0, "facehead": 0, "handhead": 0},
    )
    assert abs(searched.total_macs - 18.02e9) < 0.005e9
    f = C.allocation_report(searched)
    assert abs(f["bodynet"] - 0.705) < 0.001


def test_subnetwork_cost_validates_spec():
    space = S.get_preset("toy")
    spec = S.sample_extreme(space, "biggest")
    spec.modules["bodynet"].height = 1000
    with pytest.raises(C.CostError):
        C.subnetwork_cost(space, spec)


def test_cost_monotone_in_channels_and_depth():
    space = S.get_preset("toy")
    small = S.sample_extreme(space, "smallest")
    big = S.sample_extreme(space, "biggest")
    # compare at identical grouping structure: set every group to 1 analog
    assert C.subnetwork_cost(space, big).total_macs > 0
    base = C.subnetwork_cost(space, small).total_macs
    taller = S.SubNetworkSpec.from_dict(small.to_dict())
    taller.modules["bodynet"].height = space.module("bodynet").height.end
    assert C.subnetwork_cost(space, taller).total_macs > base
    deeper = S.SubNetworkSpec.from_dict(small.to_dict())
    deeper.modules["bodynet"].stages[1].depth = space.module("bodynet").stage(1).depth.end
    assert C.subnetwork_cost(space, deeper).total_macs > base


def test_doubling_resolution_scales_macs_by_four():
    def stage(index, op, c, div):
        return S.StageSpace(
            index=index,
            operator=op,
            depth=S.DimensionRange(1, 1, 1),
            branches=(S.BranchSpace(S.DimensionRange(c, c, 1), 0, div,
                                    fixed_group=1 if index == 0 else None),),
        )

    def make(h):
        body = S.ModuleSpace(
            name="bodynet",
            height=S.DimensionRange(h, h, 1),
            aspect=(1, 1),
            stages=(stage(0, "plain-conv", 4, 1), stage(1, "basic-block", 4, 1)),
        )
        conn = S.ConnectionSpace(feature_stages=(1,),
                                 roi_expansion=S.DimensionRange(10, 10, 1, scale=0.1))
        heads = [
            S.ModuleSpace(
                name=n,
                height=S.DimensionRange(h, h, 1),
                aspect=(1, 1),
                stages=(stage(1, "basic-block", 4, 1),),
                connection=conn,
            )
            for n in ("facehead", "handhead")
        ]
        return S.SearchSpace(name=f"flat{h}", modules=(body, *heads))

    def total(h):
        space = make(h)
        return C.subnetwork_cost(space, S.sample_extreme(space, "biggest")).total_macs

    # all branches at stride 1, so doubling the input exactly quadruples MACs
    assert total(128) == 4 * total(64)


def hrnet_like_spec(space):
    """Max dims with ordinary convolutions: the hand-designed baseline."""
    return S.reference_spec(space)


def test_full_size_body_backbone_anchor():
    space = S.get_preset("table-defaults")
    spec = hrnet_like_spec(space)
    body = C.subnetwork_cost(space, spec).macs["bodynet"]
    assert 16.04e9 * 0.8 <= body <= 16.04e9 * 1.2
