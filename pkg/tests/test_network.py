import struct

import numpy as np
import pytest

from geomattn import tensor as T
from geomattn.data import FormatError, ShapeSpec, UnsupportedVersionError, generate_patch
from geomattn.network import (
    ModelConfig,
    PreconditionError,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    forward,
    init_weights,
    layer_shapes,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from geomattn.training import bce_loss, normals_objective

SMALL = dict(k=6, widths=(8, 8), semantic_width=8, global_width=16, head_widths=(16,))


def oracle_count(arch, widths, sw, gw, heads, out):
    """Independent shape accounting: weights + biases of every affine map."""
    def affine(i, o):
        return i * o + o

    total = 0
    d = 3
    for layer, w in enumerate(widths):
        if arch == "ga":
            sem_in = 3 if layer == 0 else d + sw
            total += affine(sem_in, sw) + affine(sw, sw)  # semantic MLP
            total += 2 * (affine(sw, sw) + affine(sw, sw))  # query and key MLPs
        total += affine(2 * d, w) + affine(w, w)  # edge MLP
        d = w
    cat = sum(widths) if widths else 3
    total += affine(cat, gw)
    dims = [cat + gw, *heads, out]
    total += sum(affine(a, b) for a, b in zip(dims[:-1], dims[1:]))
    return total


def unit_ball_points(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    pts -= pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


class TestParameters:
    @pytest.mark.parametrize("arch", ["dgcnn", "ga"])
    @pytest.mark.parametrize("widths", [(8, 8), (16, 16), (64, 64, 64), ()])
    def test_count_oracle(self, arch, widths):
        cfg = ModelConfig(arch=arch, widths=widths)
        assert parameter_count(cfg) == oracle_count(arch, widths, 64, 256, (256, 128), 3)
        weights = init_weights(cfg)
        assert sum(w.size for w in weights.values()) == parameter_count(cfg)

    def test_widths_change_count(self):
        assert parameter_count(ModelConfig(widths=(8, 8))) != parameter_count(ModelConfig(widths=(16, 16)))

    def test_ga_overhead(self):
        ga, dg = parameter_count(ModelConfig(arch="ga")), parameter_count(ModelConfig(arch="dgcnn"))
        assert dg < ga < 1.5 * dg

    def test_zero_layers_has_no_graph_parameters(self):
        names = layer_shapes(ModelConfig(arch="ga", widths=()))
        assert list(names) == ["global", "head"]

    def test_init_deterministic_and_zero_bias(self):
        a, b = init_weights(ModelConfig(seed=3)), init_weights(ModelConfig(seed=3))
        assert list(a) == list(b)
        for name in a:
            assert a[name].tobytes() == b[name].tobytes()
            if ".b" in name:
                assert not a[name].any()
        c = init_weights(ModelConfig(seed=4))
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    @pytest.mark.parametrize("bad", [dict(k=0), dict(arch="pointnet"), dict(task="curvature"),
                                     dict(widths=(8, 0)), dict(leaky_slope=0.0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_config_dict_round_trip(self):
        cfg = ModelConfig(arch="dgcnn", task="sharp", widths=(4, 5), head_widths=(7,), seed=9)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    @pytest.mark.parametrize("arch", ["dgcnn", "ga"])
    def test_normals_unit_rows(self, arch):
        cfg = ModelConfig(arch=arch, **SMALL)
        out = forward(unit_ball_points(50, 0), init_weights(cfg), cfg).output.data
        assert out.shape == (50, 3)
        np.testing.assert_allclose(np.linalg.norm(out.astype(np.float64), axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("arch", ["dgcnn", "ga"])
    def test_smallest_patch(self, arch):
        cfg = ModelConfig(arch=arch, task="sharp", **SMALL)
        pred = forward(unit_ball_points(cfg.k + 1, 1), init_weights(cfg), cfg)
        assert pred.output.shape == (cfg.k + 1,)
        assert np.isfinite(pred.output.data).all()
        for g in pred.graphs:
            for i, row in enumerate(g.neighbors):
                assert sorted(row.tolist()) == [j for j in range(cfg.k + 1) if j != i]

    def test_too_few_points(self):
        cfg = ModelConfig(**SMALL)
        with pytest.raises(PreconditionError):
            forward(unit_ball_points(cfg.k, 0), init_weights(cfg), cfg)

    def test_not_normalized(self):
        cfg = ModelConfig(**SMALL)
        with pytest.raises(PreconditionError):
            forward(unit_ball_points(20, 0) * 1.01, init_weights(cfg), cfg)

    @pytest.mark.parametrize("arch", ["dgcnn", "ga"])
    def test_deterministic(self, arch):
        cfg = ModelConfig(arch=arch, **SMALL)
        w = init_weights(cfg)
        pts = unit_ball_points(40, 2)
        assert forward(pts, w, cfg).output.data.tobytes() == forward(pts, w, cfg).output.data.tobytes()

    @pytest.mark.parametrize("arch", ["dgcnn", "ga"])
    @pytest.mark.parametrize("task", ["normals", "sharp"])
    def test_permutation_equivariance(self, arch, task):
        cfg = ModelConfig(arch=arch, task=task, **SMALL)
        w = init_weights(cfg)
        pts = unit_ball_points(48, 3)
        perm = np.random.default_rng(4).permutation(48)
        out = forward(pts, w, cfg).output.data
        out_p = forward(pts[perm], w, cfg).output.data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-5)

    def test_uniform_semantics_reduce_to_dgcnn_graph(self):
        ga_cfg = ModelConfig(arch="ga", **SMALL)
        dg_cfg = ModelConfig(arch="dgcnn", **SMALL)
        w = init_weights(ga_cfg)
        for name in w:
            if name.startswith(("query", "key")):
                w[name] = np.zeros_like(w[name])
        dg_w = {k: v for k, v in w.items() if not k.startswith(("sem", "query", "key"))}
        pts = unit_ball_points(60, 5)
        ga_pred, dg_pred = forward(pts, w, ga_cfg, trace=True), forward(pts, dg_w, dg_cfg)
        for a, b in zip(ga_pred.graphs, dg_pred.graphs):
            np.testing.assert_array_equal(a.neighbors, b.neighbors)
        np.testing.assert_array_equal(ga_pred.output.data, dg_pred.output.data)
        np.testing.assert_array_equal(ga_pred.attention[0].sa, 0.0)

    def test_trace_states(self):
        cfg = ModelConfig(arch="ga", **SMALL)
        pred = forward(unit_ball_points(30, 6), init_weights(cfg), cfg, trace=True)
        assert [s.layer_index for s in pred.attention] == [0, 1]
        for s in pred.attention:
            np.testing.assert_allclose(s.ga.sum(axis=1), 1.0, atol=1e-5)
            assert (s.ga >= 0).all()
            np.testing.assert_array_equal(s.pm, s.pm.T)

    def test_weighted_aggregation_reaches_semantic_weights(self):
        cfg = ModelConfig(arch="ga", ga_weighted_aggregation=True, **SMALL)
        params = {k: T.Tensor(v, requires_grad=True) for k, v in init_weights(cfg, np.float64).items()}
        patch = generate_patch(ShapeSpec("wedge", n_points=64), 0)
        T.backward(normals_objective(forward(patch.points, params, cfg).output, patch.normals))
        assert np.abs(params["query0.w0"].grad).max() > 0
        plain = ModelConfig(arch="ga", **SMALL)
        params = {k: T.Tensor(v, requires_grad=True) for k, v in init_weights(plain, np.float64).items()}
        T.backward(normals_objective(forward(patch.points, params, plain).output, patch.normals))
        assert params["query0.w0"].grad is None or not params["query0.w0"].grad.any()


def pipeline_error(arch, task, weighted=False, per_tensor=3, seed=0):
    cfg = ModelConfig(arch=arch, task=task, ga_weighted_aggregation=weighted, **SMALL)
    weights = init_weights(cfg, np.float64)
    patch = generate_patch(ShapeSpec("wedge", n_points=64), seed)
    pts = patch.points.astype(np.float64)

    def loss(params):
        out = forward(pts, params, cfg).output
        if task == "normals":
            return normals_objective(out, patch.normals.astype(np.float64), 0.01)
        return bce_loss(out, patch.sharp)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, w in weights.items():
        coords = rng.choice(w.size, size=min(per_tensor, w.size), replace=False)

        def build(t, name=name):
            return loss({**weights, name: t})

        worst = max(worst, T.gradcheck(build, w, h=1e-5, coords=coords))
    return worst


@pytest.mark.parametrize("arch", ["dgcnn", "ga"])
@pytest.mark.parametrize("task", ["normals", "sharp"])
def test_pipeline_gradcheck(arch, task):
    assert pipeline_error(arch, task) < 1e-4


def test_pipeline_gradcheck_weighted_aggregation():
    assert pipeline_error("ga", "normals", weighted=True) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        w = init_weights(cfg)
        path = tmp_path / "c.gack"
        save_checkpoint(path, w, {"model": cfg.to_dict()})
        back, blob = load_checkpoint(path)
        assert list(back) == list(w)
        for k in w:
            assert back[k].tobytes() == w[k].tobytes()
        assert ModelConfig.from_dict(blob["model"]) == cfg
        assert checkpoint_to_bytes(back, blob) == path.read_bytes()

    def test_scalar_record(self):
        back, _ = checkpoint_from_bytes(checkpoint_to_bytes({"s": np.float32(2.5)}, {}))
        assert back["s"].shape == () and back["s"] == 2.5

    def test_bad_magic(self):
        buf = b"GACX" + checkpoint_to_bytes({}, {})[4:]
        with pytest.raises(FormatError) as info:
            checkpoint_from_bytes(buf)
        assert info.value.offset == 0

    def test_bad_version(self):
        buf = bytearray(checkpoint_to_bytes({}, {}))
        buf[4:8] = struct.pack("<I", 7)
        with pytest.raises(UnsupportedVersionError) as info:
            checkpoint_from_bytes(bytes(buf))
        assert info.value.offset == 4

    def test_truncated_record(self):
        buf = checkpoint_to_bytes({"w": np.ones((2, 2), np.float32)}, {"a": 1})
        with pytest.raises(FormatError) as info:
            checkpoint_from_bytes(buf[:-3])
        assert info.value.offset == len(buf) - 16
