import struct

import numpy as np
import pytest

from sceneflow.data import ScenePair, generate_scene
from sceneflow.errors import CheckpointError, ContractError
from sceneflow.model import (
    MAGIC,
    ModelConfig,
    checkpoint_bytes,
    forward,
    init_params,
    load_checkpoint,
    params_from_entries,
    parse_checkpoint,
    prepare_inputs,
    save_checkpoint,
)
from sceneflow.numerics import backward
from sceneflow.training import masked_l1_loss

SMALL = ModelConfig(knn=4)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3, n_points=32, max_t=0.5, max_deg=5.0)


def test_init_is_seed_deterministic():
    a, b = init_params(7, SMALL), init_params(7, SMALL)
    assert a.names() == b.names()
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.names())
    c = init_params(8, SMALL)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.names())


def test_init_ot_values_and_zero_head():
    p = init_params(0, SMALL)
    eps, lam, rho = p.ot().values()
    assert eps == pytest.approx(1.03, abs=1e-15) and lam == pytest.approx(1.03, abs=1e-15)
    assert rho == 0.5
    w, b = p.refine_head()
    assert not w.data.any() and not b.data.any()


def test_init_weight_bounds():
    p = init_params(0, SMALL)
    for name in p.names():
        if name.endswith(".weight"):
            w = p[name].data
            fan_in = int(np.prod(w.shape[:-1]))
            assert np.abs(w).max() <= np.sqrt(1.0 / fan_in)
        elif name.endswith(".bias"):
            assert not p[name].data.any()


def test_paper_config_parameter_count():
    n = init_params(0, ModelConfig.paper()).count_parameters()
    assert abs(n - 480_000) / 480_000 < 0.10
    assert n == 469_077


@pytest.mark.parametrize("fusion", ["late", "early", "none"])
def test_forward_shapes_and_identity_head(scene, fusion):
    p = init_params(1, ModelConfig(knn=4, fusion=fusion))
    flow, plan = forward(scene, p)
    assert flow.flow.shape == scene.pc_t.shape and flow.unmatched.shape == (len(scene.pc_t),)
    assert np.isfinite(flow.flow.data).all()
    # zero refinement head: output is exactly the transport flow
    assert np.array_equal(flow.flow.data, flow.initial.data)


def test_forward_deterministic(scene):
    p = init_params(2, SMALL)
    a, _ = forward(scene, p)
    b, _ = forward(scene, p)
    assert a.flow.data.tobytes() == b.flow.data.tobytes()


def test_permuting_points_permutes_flow(scene):
    p = init_params(2, SMALL)
    # a nonzero head so the refinement stage is exercised too
    w, _ = p.refine_head()
    w.data[:] = np.random.default_rng(0).normal(scale=0.1, size=w.shape)
    perm = np.random.default_rng(1).permutation(len(scene.pc_t))
    moved = ScenePair(scene.pc_t[perm], scene.pc_t1, scene.img_t, scene.img_t1, scene.cam,
                      scene.gt_flow[perm], scene.mask[perm])
    a, _ = forward(scene, p)
    b, _ = forward(moved, p)
    assert np.allclose(b.flow.data, a.flow.data[perm], rtol=0, atol=1e-10)


def test_identical_frames_self_match(scene):
    # a sharp pinned epsilon and a distance gate make the self-match dominate
    p = init_params(4, ModelConfig(knn=4, pin_epsilon=0.031, pin_lambda=100.0, d_max=1e9))
    twin = ScenePair(scene.pc_t, scene.pc_t.copy(), scene.img_t, scene.img_t.copy(), scene.cam,
                     np.zeros_like(scene.gt_flow), np.ones(len(scene.pc_t), dtype=bool))
    flow, _ = forward(twin, p)
    d = np.linalg.norm(scene.pc_t[:, None] - scene.pc_t[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert np.linalg.norm(flow.flow.data, axis=1).mean() < d.min(axis=1).mean()


def test_every_parameter_group_gets_gradient(scene):
    p = init_params(5, SMALL)
    w, _ = p.refine_head()
    w.data[:] = 0.01  # otherwise the refinement blocks sit behind a zero head
    flow, _ = forward(scene, p)
    backward(masked_l1_loss(flow, scene.gt_flow, scene.mask))
    for group in ("point_features", "fpn", "fusion", "refine", "ot"):
        grads = [t.grad for t in p.group(group).values()]
        assert all(g is not None for g in grads), group
        assert any(np.abs(g).max() > 0 for g in grads), group


def test_prepare_inputs_matches_uncached(scene):
    p = init_params(6, SMALL)
    a, _ = forward(scene, p)
    b, _ = forward(scene, p, prepare_inputs(scene, SMALL))
    assert a.flow.data.tobytes() == b.flow.data.tobytes()


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(fusion="middle")
    with pytest.raises(ContractError):
        ModelConfig(mlps=3)
    with pytest.raises(ContractError):
        ModelConfig(pin_epsilon=0.02)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    p = init_params(9, ModelConfig(knn=8, fusion="late", mlps=2))
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(p, first)
    q = load_checkpoint(first)
    save_checkpoint(q, second)
    assert first.read_bytes() == second.read_bytes()
    assert q.config == p.config
    for name in p.names():
        assert np.array_equal(q[name].data, p[name].data.astype(np.float32))


def test_checkpoint_layout_header():
    raw = checkpoint_bytes(init_params(0, SMALL))
    assert raw[:4] == MAGIC
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert count == len(init_params(0, SMALL).names()) + len(SMALL.encode())


def test_checkpoint_size_of_paper_config():
    raw = checkpoint_bytes(init_params(0, ModelConfig.paper()))
    assert len(raw) < 5 * 2**20


def test_corrupted_magic_names_expected(tmp_path):
    path = tmp_path / "bad.ckpt"
    raw = bytearray(checkpoint_bytes(init_params(0, SMALL)))
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="SFCK"):
        load_checkpoint(path)


@pytest.mark.parametrize("mutate, message", [
    (lambda r: r[:-3], "truncated"),
    (lambda r: r + b"\0", "trailing"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
])
def test_structural_checkpoint_errors(mutate, message):
    raw = checkpoint_bytes(init_params(0, SMALL))
    with pytest.raises(CheckpointError, match=message):
        parse_checkpoint(mutate(raw))


def test_duplicate_entry_rejected():
    entry = struct.pack("<H", 1) + b"x" + struct.pack("<B", 0) + struct.pack("<f", 1.0)
    raw = MAGIC + struct.pack("<II", 1, 2) + entry + entry
    with pytest.raises(CheckpointError, match="duplicate"):
        parse_checkpoint(raw)


def test_shape_and_name_mismatch_rejected():
    entries = parse_checkpoint(checkpoint_bytes(init_params(0, SMALL)))
    bad = dict(entries)
    bad["refine.head.bias"] = np.zeros(4)
    with pytest.raises(CheckpointError, match="refine.head.bias"):
        params_from_entries(bad)
    bad = dict(entries)
    del bad["ot.log_lambda"]
    with pytest.raises(CheckpointError, match="missing"):
        params_from_entries(bad)


def test_unrepresentable_config_rejected():
    with pytest.raises(CheckpointError, match="d_max"):
        checkpoint_bytes(init_params(0, ModelConfig(knn=4, d_max=0.1)))


def test_pins_survive_checkpoint(tmp_path):
    p = init_params(0, ModelConfig(knn=4, pin_epsilon=0.25, pin_lambda=2.0))
    assert not p["ot.log_epsilon"].requires_grad
    save_checkpoint(p, tmp_path / "p.ckpt")
    q = load_checkpoint(tmp_path / "p.ckpt")
    eps, lam, _ = q.ot().values()
    assert eps == pytest.approx(0.25, abs=1e-15) and lam == pytest.approx(2.0, abs=1e-15)
    assert "ot.log_epsilon" not in q.trainable()
