from fractions import Fraction

import numpy as np
import pytest

from semocc import occupancy_eval as oe
from semocc import scenegen as sg
from semocc.oracles import scene_occupied


@pytest.fixture(scope="module")
def grid7(views7):
    v = views7[0]
    return oe.build_eval_grid(oe.RangeBand(4, 20), intrinsics=v.intrinsics, pose=v.pose)


def test_band_parse_and_validation():
    b = oe.RangeBand.parse("4:20")
    assert (b.d_min, b.d_max, b.name) == (4.0, 20.0, "4-20m")
    with pytest.raises(ValueError):
        oe.RangeBand(5, 5)


def test_grid_geometry(grid7, views7):
    g = grid7
    pose = np.asarray(views7[0].pose)
    assert g.slice_heights == (0.5, 1.0, 1.5) and g.spacing == (0.2, 0.2)
    assert np.isclose(g.forward_axis[2], 0) and np.isclose(np.linalg.norm(g.forward_axis), 1)
    assert np.allclose(np.cross(g.forward_axis, [0, 0, 1]), g.lateral_axis)
    assert np.all(g.forward_distance >= 4 - 1e-9) and np.all(g.forward_distance <= 20 + 1e-9)
    assert len(g) == 3 * g.footprint.sum()
    assert set(np.round(g.points[:, 2], 9)) == {0.5, 1.0, 1.5}
    # every point projects inside the horizontal field of view
    K = views7[0].intrinsics
    pc = (g.points - pose[:3, 3]) @ pose[:3, :3]
    u = K.fx * pc[:, 0] / pc[:, 2] + K.cx
    assert np.all(u >= -1e-6) and np.all(u <= K.width + 1e-6)
    # lattice spacing
    lat = g.lattice_points()
    assert np.allclose(np.linalg.norm(lat[0, 1, 0] - lat[0, 0, 0]), 0.2)
    assert np.allclose(np.linalg.norm(lat[0, 0, 1] - lat[0, 0, 0]), 0.2)


def test_grid_fixed_half_width_and_errors(views7):
    v = views7[0]
    g = oe.build_eval_grid(oe.RangeBand(4, 6), intrinsics=v.intrinsics, pose=v.pose,
                           half_width=1.0, spacing=0.5)
    assert g.dims == (3, 5, 5) and g.footprint.all()
    with pytest.raises(ValueError):
        oe.build_eval_grid(oe.RangeBand(4, 6), pose=v.pose, half_width=1, spacing=0)


def test_scatter_roundtrip(grid7):
    vals = np.arange(len(grid7))
    lat = grid7.scatter(vals, fill=-1)
    assert lat.shape == grid7.dims
    assert np.array_equal(lat[:, grid7.footprint].reshape(-1), vals)
    assert np.all(lat[:, ~grid7.footprint] == -1)


def test_metrics_hand_example():
    pred = [1, 0, 0, 1, 0, 1]
    gt = [1, 0, 1, 0, 0, 0]
    vis = [1, 1, 0, 0, 0, 1]
    m = oe.compute_metrics(pred, gt, vis)
    # correct: idx 0, 1, 4 -> 3/6; invisible: 2, 3, 4 -> correct only 4 -> 1/3
    # invisible empty: 3, 4 -> predicted empty: 4 -> 1/2
    assert m.exact() == (Fraction(1, 2), Fraction(1, 3), Fraction(1, 2))
    assert (m.o_acc, m.ie_acc, m.ie_rec) == (0.5, 1 / 3, 0.5)
    c = m.counts
    assert (c["tp"], c["fp"], c["tn"], c["fn"]) == (1, 2, 2, 1)


def test_metrics_not_applicable_and_masks():
    m = oe.compute_metrics([0, 1], [0, 1], [1, 1])
    assert m.o_acc == 1.0 and m.ie_acc is None and m.ie_rec is None
    m2 = oe.compute_metrics([1, 0, 1], [1, 1, 1], [0, 0, 0], band_mask=[1, 0, 1])
    assert m2.counts["total"] == 2 and m2.ie_acc == 1.0 and m2.ie_rec is None
    with pytest.raises(ValueError):
        oe.compute_metrics([0], [0, 1], [0, 1])


def test_aggregate_is_count_weighted():
    a = oe.MetricReport({"b": oe.compute_metrics([1], [1], [0], band_name="b")})
    b = oe.MetricReport({"b": oe.compute_metrics([0, 0, 0], [1, 1, 1], [0, 0, 0], band_name="b")})
    agg = oe.aggregate_reports([a, b])
    assert agg.bands["b"].o_acc == 0.25
    back = oe.MetricReport.from_dict(agg.to_dict())
    assert back.bands["b"].counts == agg.bands["b"].counts


def test_exact_gt_agrees_with_point_oracle(scene7, grid7):
    occ = sg.gt_occupancy(scene7, grid7)
    rng = np.random.default_rng(0)
    idx = np.concatenate([rng.choice(len(grid7), 300, replace=False), np.flatnonzero(occ)[:100]])
    ref = np.array([scene_occupied(grid7.points[i], scene7) for i in idx])
    assert np.array_equal(occ[idx], ref)


def test_carving_consistent_with_exact_gt(scene7, views7, grid7):
    exact = sg.gt_occupancy(scene7, grid7)
    carved = oe.gt_from_depth_surfaces(views7, grid7, eps=0.1)
    # only silhouette points, where a pixel-centre ray grazes past the object, are lost
    assert np.sum(exact & ~carved) <= 0.01 * exact.sum()
    vis = sg.visibility_mask(scene7, views7[0].intrinsics, views7[0].pose, grid7, 0.1)
    # points the reference camera sees in front of surfaces are carved to empty
    assert np.mean(carved[vis & ~exact]) < 0.05
    with pytest.raises(ValueError):
        oe.gt_from_depth_surfaces([], grid7, 0.1)


def test_grid_file_roundtrip(tmp_path, grid7):
    occ = np.random.default_rng(1).random(len(grid7)) < 0.3
    oe.save_grid(tmp_path / "g.bin", grid7, occ)
    header, lat, foot = oe.load_grid(tmp_path / "g.bin")
    assert tuple(header["dims"]) == grid7.dims and header["spacing"] == [0.2, 0.2]
    assert np.array_equal(foot, grid7.footprint)
    assert np.array_equal(lat[:, foot].reshape(-1), occ)
    assert not lat[:, ~foot].any()
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        oe.load_grid(tmp_path / "bad.bin")


def test_point_cloud_export(tmp_path, grid7):
    occ = np.zeros(len(grid7), bool)
    occ[:5] = True
    oe.save_point_cloud(tmp_path / "p.xyz", grid7, occ)
    rows = np.loadtxt(tmp_path / "p.xyz")
    assert rows.shape == (5, 3) and np.allclose(rows, grid7.points[:5], atol=1e-4)


def test_predict_occupancy_threshold(views7, grid7):
    from semocc.model import DensityField, ModelConfig
    import torch
    torch.manual_seed(0)
    model = DensityField(ModelConfig(c_app=8, c_fused=8, hidden=16, attn_dim=16, n_layers=2,
                                     encoder_width=8), sg.DEFAULT_CATEGORIES)
    sigma = oe.predict_density(model, views7[0], grid7)
    occ = oe.predict_occupancy(model, views7[0], grid7, tau=0.5)
    assert np.array_equal(occ, sigma > 0.5)
    assert np.array_equal(sigma, oe.predict_density(model, views7[0], grid7))
    with pytest.raises(ValueError):
        oe.predict_occupancy(model, views7[0], grid7, tau=0)
