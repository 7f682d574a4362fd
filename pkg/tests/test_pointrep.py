import numpy as np
import pytest
import torch

from semocc import pointrep as pr
from semocc.camera import FrustumBounds, Intrinsics, encoding_width
from semocc.encoders import FeatureMap, SegmentationMap, TextEmbeddingTable

K = Intrinsics(fx=8.0, fy=8.0, cx=4.0, cy=3.0, width=8, height=6)
POSE = np.eye(4)
BOUNDS = FrustumBounds.for_intrinsics(K)


def _ramp_map(stride=1):
    H, W = 6 // stride, 8 // stride
    j, i = torch.meshgrid(torch.arange(W, dtype=torch.float64), torch.arange(H, dtype=torch.float64),
                          indexing="xy")
    return FeatureMap(torch.stack([j, i], -1), stride)


def test_bilinear_exact_at_cell_centres():
    f = _ramp_map()
    px = torch.tensor([[0.5, 0.5], [3.5, 2.5], [7.5, 5.5]], dtype=torch.float64)
    assert torch.allclose(pr.bilinear_sample(f, px), px - 0.5)


def test_bilinear_interpolates_between_centres():
    f = _ramp_map()
    px = torch.tensor([[2.0, 1.25]], dtype=torch.float64)
    assert torch.allclose(pr.bilinear_sample(f, px), torch.tensor([[1.5, 0.75]], dtype=torch.float64))


def test_bilinear_on_strided_map():
    f = _ramp_map(stride=2)
    px = torch.tensor([[1.0, 1.0], [5.0, 3.0]], dtype=torch.float64)
    assert torch.allclose(pr.bilinear_sample(f, px), torch.tensor([[0.0, 0.0], [2.0, 1.0]],
                                                                  dtype=torch.float64))


def test_sample_point_features_layout_and_frustum():
    f = _ramp_map()
    pts = torch.tensor([[0.0, 0.0, 10.0], [0.0, 0.0, -5.0], [100.0, 0.0, 10.0]],
                       dtype=torch.float64)
    b = pr.sample_point_features(pts, f, K, POSE, BOUNDS, n_freq=2)
    assert b.vis_feat.shape == (3, 2 + encoding_width(2))
    assert b.in_frustum.tolist() == [True, False, False]
    assert torch.allclose(b.pixels[0], torch.tensor([4.0, 3.0], dtype=torch.float64))
    assert torch.allclose(b.vis_feat[0, :2], torch.tensor([3.5, 2.5], dtype=torch.float64))
    assert torch.all(b.vis_feat[1:, :2] == 0)
    assert b.ndc_clamped.tolist() == [False, True, True]
    assert torch.isfinite(b.vis_feat).all()


def test_text_lookup_and_sky_fallback():
    table = TextEmbeddingTable(torch.eye(3, dtype=torch.float64), ("road", "car", "sky"))
    labels = torch.zeros(6, 8, dtype=torch.int64)
    labels[:, 4:] = 1
    seg = SegmentationMap(labels)
    pts = torch.tensor([[-1.0, 0.0, 10.0], [1.0, 0.0, 10.0], [0.0, 0.0, -1.0]],
                       dtype=torch.float64)
    b = pr.sample_point_features(pts, _ramp_map(), K, POSE, BOUNDS, 1)
    b = pr.lookup_text_features(b, seg, table)
    assert b.category.tolist() == [0, 1, 2]
    assert torch.equal(b.text_feat, table.rows[[0, 1, 2]])
    assert not b.text_feat.requires_grad


def test_vl_modulation_shapes_and_skip():
    m = pr.VLModulation(10, 4, hidden=16, n_layers=4)
    assert m.skip_at == 2
    out, inter = m(torch.randn(7, 10), torch.randn(7, 4), return_intermediates=True)
    assert out.shape == (7, 16)
    assert len(inter) == 5
    assert pr.VLModulation(10, 4, 16, n_layers=5).skip_at == 3


def test_vl_modulation_zero_text_gives_zero_after_first_layer():
    m = pr.VLModulation(6, 4, 8, n_layers=1)
    with torch.no_grad():
        m.fc_t.bias.zero_()
    _, inter = m(torch.randn(5, 6), torch.zeros(5, 4), return_intermediates=True)
    assert torch.all(inter[0] == 0)


def test_vl_modulation_without_text_is_mlp():
    m = pr.VLModulation(6, 4, 8, n_layers=2, use_text=False)
    assert m.fc_t is None
    v = torch.randn(3, 6)
    h = torch.relu(m.fc_v[0](v))
    h = torch.relu(m.fc_v[1](m.fc_skip(torch.cat([h, v], -1))))
    assert torch.allclose(m(v, None), h)


def test_vl_modulation_nonfinite_raises():
    m = pr.VLModulation(6, 4, 8, n_layers=2)
    with pytest.raises(FloatingPointError):
        m(torch.full((2, 6), float("inf")), torch.ones(2, 4))


def test_vl_modulation_golden():
    torch.manual_seed(99)
    m = pr.VLModulation(6, 4, 8, 4).double()
    g = torch.Generator().manual_seed(7)
    v = torch.randn(3, 6, generator=g, dtype=torch.float64)
    t = torch.randn(3, 4, generator=g, dtype=torch.float64)
    o = m(v, t).detach()
    golden = [0.0, 0.0, 0.016632529394319376, 0.039016825105558844, 0.034997284135663116,
              0.019160218558441126, 0.0, 0.0]
    assert np.allclose(o[0].numpy(), golden, atol=1e-12)
    assert abs(float(o.sum()) - 1.0023730674379705) < 1e-10
