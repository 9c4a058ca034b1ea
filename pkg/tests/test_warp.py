import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flostream.flow import translation_flow
from flostream.warp import (BorderRing, EnlargedFeature, backward_warp, forward_warp_enlarged,
                            merge_border, split_border, warp_back)

from oracles import backward_warp_ref, forward_splat_ref

D = torch.float64


def const_flow(h, w, dx, dy):
    return translation_flow((h, w), dx, dy, dtype=D).data.unsqueeze(0)


# -- backward_warp -----------------------------------------------------------

def test_backward_zero_flow_is_identity():
    feat = torch.rand(2, 3, 9, 7, dtype=D)
    out = backward_warp(feat, const_flow(9, 7, 0, 0).expand(2, -1, -1, -1))
    assert torch.equal(out, feat)


def test_backward_ramp_shift():
    w = 8
    ramp = torch.arange(w, dtype=D).view(1, 1, 1, w).expand(1, 1, 5, w)
    out = backward_warp(ramp, const_flow(5, w, 1, 0))
    expected = ramp + 1
    expected[..., -1] = 0
    assert torch.equal(out, expected)


def test_backward_half_pixel_impulse():
    img = torch.zeros(1, 1, 5, 5, dtype=D)
    img[0, 0, 2, 2] = 1.0
    out = backward_warp(img, const_flow(5, 5, 0.5, 0))
    # out(x) = 0.5 img(x) + 0.5 img(x + 1)
    expected = torch.zeros_like(img)
    expected[0, 0, 2, 1] = 0.5
    expected[0, 0, 2, 2] = 0.5
    assert torch.equal(out, expected)


def test_backward_with_sample_offset_reads_canvas():
    canvas = torch.rand(1, 2, 10, 12, dtype=D)
    out = backward_warp(canvas, const_flow(6, 8, 0, 0), sample_offset=2)
    assert torch.equal(out, canvas[..., 2:8, 2:10])


def test_backward_rejects_bad_inputs():
    feat = torch.rand(1, 1, 4, 4, dtype=D)
    bad = const_flow(4, 4, 0, 0).clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        backward_warp(feat, bad)
    with pytest.raises(ValueError):
        backward_warp(feat, const_flow(4, 4, 0, 0), sample_offset=1)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    feat = torch.rand(1, 2, 7, 9, generator=g, dtype=D)
    flow = (torch.rand(1, 2, 7, 9, generator=g, dtype=D) - 0.5) * 6
    out = backward_warp(feat, flow)
    ref = backward_warp_ref(feat[0].numpy(), flow[0].numpy())
    np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-12)


# -- forward_warp_enlarged ---------------------------------------------------

def test_forward_zero_flow_interior_and_empty_ring():
    feat = torch.rand(1, 3, 6, 5, dtype=D)
    e = forward_warp_enlarged(feat, const_flow(6, 5, 0, 0), 2)
    assert e.canvas.shape == (1, 3, 10, 9)
    assert torch.equal(e.interior, feat)
    ring, h = split_border(e)
    assert torch.equal(h, feat)
    assert torch.count_nonzero(ring.canvas) == 0


def test_forward_edge_impulse_lands_in_ring():
    h, w, m = 6, 6, 2
    feat = torch.zeros(1, 1, h, w, dtype=D)
    feat[0, 0, 3, w - 1] = 5.0
    e = forward_warp_enlarged(feat, const_flow(h, w, 2, 0), m)
    assert e.canvas[0, 0, 3 + m, w - 1 + 2 + m] == 5.0
    assert e.canvas.sum() == 5.0
    ring, interior = split_border(e)
    assert torch.count_nonzero(interior) == 0
    assert ring.canvas[0, 0, 3 + m, w - 1 + 2 + m] == 5.0


def test_forward_average_splat_conflict():
    feat = torch.zeros(1, 1, 1, 4, dtype=D)
    feat[0, 0, 0, 0] = 1.0
    feat[0, 0, 0, 1] = 3.0
    flow = torch.zeros(1, 2, 1, 4, dtype=D)
    flow[0, 0, 0, 0] = 2.0   # x=0 -> 2
    flow[0, 0, 0, 1] = 1.0   # x=1 -> 2
    flow[0, 0, 0, 2] = 1.0   # x=2 -> 3
    flow[0, 0, 0, 3] = 0.0   # x=3 -> 3
    e = forward_warp_enlarged(feat, flow, 0)
    assert e.canvas[0, 0, 0, 2] == 2.0
    summed = forward_warp_enlarged(feat, flow, 0, mode="sum")
    assert summed.canvas[0, 0, 0, 2] == 4.0
    # targets 0 and 1 receive nothing: holes are zero
    assert e.canvas[0, 0, 0, 0] == 0 and e.canvas[0, 0, 0, 1] == 0


def test_forward_drops_splats_beyond_canvas():
    feat = torch.ones(1, 1, 4, 4, dtype=D)
    e = forward_warp_enlarged(feat, const_flow(4, 4, 3, 0), 1)
    # canvas is 6 wide; sources x=2,3 land at 6,7 -> dropped
    assert e.canvas.sum() == 8.0


@settings(max_examples=30, deadline=None)
@given(dx=st.integers(-3, 3), dy=st.integers(-3, 3), seed=st.integers(0, 2**16))
def test_forward_integer_flow_is_permutation(dx, dy, seed):
    g = torch.Generator().manual_seed(seed)
    feat = torch.rand(1, 2, 6, 7, generator=g, dtype=D)
    e = forward_warp_enlarged(feat, const_flow(6, 7, dx, dy), 3)
    torch.testing.assert_close(e.canvas.sum(dim=(2, 3)), feat.sum(dim=(2, 3)), rtol=0, atol=1e-12)
    moved = np.sort(e.canvas[e.canvas != 0].numpy())
    np.testing.assert_array_equal(moved, np.sort(feat[feat != 0].numpy()))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["average", "sum"])
def test_forward_matches_oracle(seed, mode):
    g = torch.Generator().manual_seed(seed)
    feat = torch.rand(1, 2, 6, 8, generator=g, dtype=D)
    flow = (torch.rand(1, 2, 6, 8, generator=g, dtype=D) - 0.5) * 5
    e = forward_warp_enlarged(feat, flow, 2, mode=mode)
    ref = forward_splat_ref(feat[0].numpy(), flow[0].numpy(), 2, mode=mode)
    np.testing.assert_allclose(e.canvas[0].numpy(), ref, atol=1e-12)


# -- split / merge -----------------------------------------------------------

def test_split_merge_round_trip():
    canvas = torch.rand(2, 3, 11, 13, dtype=D)
    e = EnlargedFeature(canvas, 3)
    ring, h = split_border(e)
    assert h.shape == (2, 3, 5, 7)
    assert ring.ring_pixels() == 11 * 13 - 5 * 7
    assert torch.equal(merge_border(h, ring).canvas, canvas)


def test_merge_margin_mismatch():
    ring = BorderRing(torch.zeros(1, 1, 8, 8, dtype=D), 2)
    with pytest.raises(ValueError):
        merge_border(torch.zeros(1, 1, 5, 5, dtype=D), ring)


# -- warp_back ---------------------------------------------------------------

def forward_chain(feat, steps, margin):
    """Propagate ``feat`` through translations, keeping rings (no network)."""
    h, w = feat.shape[-2:]
    rings, flows = [], []
    cur = feat
    for dx, dy in steps:
        flow = const_flow(h, w, dx, dy)
        ring, cur = split_border(forward_warp_enlarged(cur, flow, margin))
        rings.append(ring)
        flows.append(flow)
    return cur, rings, flows


def test_warp_back_k0_is_identity():
    feat = torch.rand(1, 2, 5, 5, dtype=D)
    assert torch.equal(warp_back(feat, [], []), feat)


@pytest.mark.parametrize("sign", [1, -1])
def test_warp_back_restores_border_with_enlargement(sign):
    feat = torch.rand(1, 3, 8, 9, dtype=D)
    far, rings, flows = forward_chain(feat, [(sign, 0), (sign, 0)], margin=2)
    assert torch.equal(warp_back(far, rings, flows), feat)


def test_warp_back_without_enlargement_loses_strip():
    feat = torch.rand(1, 3, 8, 9, dtype=D) + 0.5
    far, rings, flows = forward_chain(feat, [(1, 0), (1, 0)], margin=0)
    out = warp_back(far, rings, flows)
    assert torch.equal(out[..., :-2], feat[..., :-2])
    assert torch.count_nonzero(out[..., -2:]) == 0


def test_warp_back_with_zero_rings_is_plain_backward_chain():
    g = torch.Generator().manual_seed(3)
    feat = torch.rand(1, 2, 7, 7, generator=g, dtype=D)
    flows = [(torch.rand(1, 2, 7, 7, generator=g, dtype=D) - 0.5) * 3 for _ in range(3)]
    rings = [BorderRing(torch.zeros(1, 2, 11, 11, dtype=D), 2) for _ in flows]
    expected = feat
    for f in reversed(flows):
        expected = backward_warp(expected, f)
    torch.testing.assert_close(warp_back(feat, rings, flows), expected, rtol=0, atol=1e-12)


def test_warp_back_length_and_margin_checks():
    feat = torch.rand(1, 1, 6, 6, dtype=D)
    flow = const_flow(6, 6, 0, 0)
    with pytest.raises(ValueError):
        warp_back(feat, [None], [])
    rings = [BorderRing(torch.zeros(1, 1, 8, 8, dtype=D), 1), BorderRing(torch.zeros(1, 1, 10, 10, dtype=D), 2)]
    with pytest.raises(ValueError):
        warp_back(feat, rings, [flow, flow])


# -- gradients ---------------------------------------------------------------

def test_backward_warp_gradcheck():
    g = torch.Generator().manual_seed(0)
    feat = torch.rand(1, 2, 5, 6, generator=g, dtype=D, requires_grad=True)
    flow = (torch.rand(1, 2, 5, 6, generator=g, dtype=D) - 0.5) * 3 + 0.37
    assert torch.autograd.gradcheck(lambda f: backward_warp(f, flow), (feat,), eps=1e-5, atol=1e-8, rtol=1e-3)


def test_forward_warp_gradcheck():
    g = torch.Generator().manual_seed(1)
    feat = torch.rand(1, 2, 5, 6, generator=g, dtype=D, requires_grad=True)
    flow = (torch.rand(1, 2, 5, 6, generator=g, dtype=D) - 0.5) * 3 + 0.29
    assert torch.autograd.gradcheck(lambda f: forward_warp_enlarged(f, flow, 2).canvas, (feat,),
                                    eps=1e-5, atol=1e-8, rtol=1e-3)


def test_flow_receives_no_gradient():
    feat = torch.rand(1, 1, 4, 4, dtype=D, requires_grad=True)
    flow = torch.full((1, 2, 4, 4), 0.3, dtype=D, requires_grad=True)
    backward_warp(feat, flow).sum().backward()
    assert flow.grad is None
