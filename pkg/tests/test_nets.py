import numpy as np
import pytest

from ikmr import autodiff as ad
from ikmr.errors import AdjacencyMismatch, IncompleteMap, SkeletonMismatch, TopologyMismatch, WindowLengthMismatch
from ikmr.nets import (
    BatchError,
    ModelConfig,
    PoolingMap,
    RetargetModel,
    SkeletalConvLayer,
    decode,
    derive_pooling_maps,
    encode,
    load_model,
    retarget,
    retarget_batch,
    retarget_long,
    save_model,
    skeletal_conv,
    skeletal_pool,
    skeletal_unpool,
)
from ikmr.skeleton import MotionClip, SkeletonTopology

from conftest import SMALL_CONFIG, random_clip


def test_pooling_maps_are_homeomorphic(human, robot, g1):
    levels = [derive_pooling_maps(sk) for sk in (human, robot, g1)]
    top = [lv[-1] for lv in levels]
    assert len({m.num_coarse for m in top}) == 1
    assert len({m.coarse_parent for m in top}) == 1


def test_pooling_map_validation():
    parent = (-1, 0, 1)
    with pytest.raises(IncompleteMap):
        PoolingMap(("a",), ((0, 1),), parent)
    with pytest.raises(IncompleteMap):
        PoolingMap(("a", "b"), ((0, 2), (1,)), parent)
    with pytest.raises(IncompleteMap):
        PoolingMap(("a", "b"), ((0, 1), (1, 2)), parent)


def test_pool_matches_oracle(human, rng):
    pm = derive_pooling_maps(human)[0]
    x = rng.standard_normal((2, 8, human.num_joints, 3))
    out = skeletal_pool(x, pm).value
    ref = np.zeros((2, 4, pm.num_coarse, 3))
    for g, members in enumerate(pm.groups):
        m = x[:, :, list(members)].mean(axis=2)
        ref[:, :, g] = 0.5 * (m[:, 0::2] + m[:, 1::2])
    assert np.allclose(out, ref, atol=1e-15)
    with pytest.raises(IncompleteMap):
        skeletal_pool(x[:, :, :3], pm)


def test_unpool_copies(human, rng):
    pm = derive_pooling_maps(human)[0]
    z = rng.standard_normal((4, pm.num_coarse, 2))
    up = skeletal_unpool(z, pm).value
    assert up.shape == (8, human.num_joints, 2)
    for j in range(human.num_joints):
        assert np.array_equal(up[1::2, j], z[:, pm.owner[j]])


def test_conv_layer_blocks_and_adjacency(human, rng):
    layer = SkeletalConvLayer(human.adjacency, 3, 5, 3, rng, "c")
    assert layer.weight.shape == (sum(layer.block_counts()), 5, 3, 3)
    x = rng.standard_normal((6, human.num_joints, 3))
    assert skeletal_conv(layer, x).shape == (6, human.num_joints, 5)
    bad = list(human.adjacency)
    bad[0] = (0,)
    with pytest.raises(AdjacencyMismatch):
        skeletal_conv(layer, x, adjacency=bad)


def test_conv_gradient_through_layer(robot, rng):
    layer = SkeletalConvLayer(robot.adjacency, 2, 3, 3, rng, "c")
    x = ad.Tensor(rng.standard_normal((1, 5, robot.num_joints, 2)))
    g = ad.Tensor(rng.standard_normal((1, 5, robot.num_joints, 3)))
    assert ad.grad_check(lambda w: ad.sum(ad.mul(ad.skeletal_conv_op(x, w, layer.bias, layer.layout), g)),
                         layer.weight) < 1e-7


def test_model_shapes(small_model, human, rng):
    clip = random_clip(rng, human, SMALL_CONFIG.window)
    z = encode(small_model, "A", clip)
    assert z.values.shape == small_model.latent_shape == (4, 5, 8)
    out = decode(small_model, "B", z)
    assert out.rotations.shape == (16, 7, 4)
    assert np.allclose(np.linalg.norm(out.rotations, axis=-1), 1.0)


def test_window_and_skeleton_checked(small_model, human, robot, rng):
    with pytest.raises(SkeletonMismatch):
        retarget(small_model, random_clip(rng, robot, 16))
    with pytest.raises(WindowLengthMismatch):
        retarget(small_model, random_clip(rng, human, 12))
    with pytest.raises(BatchError):
        retarget_batch(small_model, [random_clip(rng, human, 16), random_clip(rng, robot, 16)])


def test_topology_mismatch(human):
    star = SkeletonTopology("star", ("r", "a", "b"), (-1, 0, 0), [[0, 0, 0], [1, 0, 0], [0, 1, 0]], (1, 2))
    with pytest.raises(TopologyMismatch):
        RetargetModel(human, star, SMALL_CONFIG)


def test_parameter_groups(small_model):
    dec = small_model.parameters("decoder_B")
    assert dec and all(k.startswith("decoder_B.") for k in dec)
    assert set(small_model.parameters()) >= set(dec)
    small_model.set_trainable("decoder_B")
    assert all(p.requires_grad == k.startswith("decoder_B.") for k, p in small_model.parameters().items())
    small_model.set_trainable()


def test_retarget_batch_matches_sequential(small_model, human, rng):
    clips = [random_clip(rng, human, 16) for _ in range(5)]
    seq = [retarget(small_model, c) for c in clips]
    for workers in (1, 2, 3):
        par = retarget_batch(small_model, clips, workers)
        assert all(np.array_equal(a.rotations, b.rotations) and np.array_equal(a.root_translation, b.root_translation)
                   for a, b in zip(seq, par))


def test_retarget_long_any_length(small_model, human, rng):
    for T in (5, 16, 41):
        out = retarget_long(small_model, random_clip(rng, human, T))
        assert out.num_frames == T and out.skeleton == "toy-robot"


def test_save_load_model(tmp_path, small_model, human, rng):
    save_model(small_model, tmp_path / "m.ckpt", extra={"optim/step": np.array([3.0])}, meta={"note": "x"})
    back, side, extra = load_model(tmp_path / "m.ckpt")
    assert side["skeleton_B"] == "toy-robot" and side["meta"] == {"note": "x"}
    assert list(extra) == ["optim/step"]
    clip = random_clip(rng, human, 16)
    assert np.array_equal(retarget(back, clip).rotations, retarget(small_model, clip).rotations)


def test_default_config_latent(human, robot):
    m = RetargetModel(human, robot, ModelConfig(), seed=0)
    assert m.latent_shape == (16, 5, 64)


def test_degenerate_decoder_rows_become_identity(small_model):
    from ikmr.nets import raw_to_clip

    raw = np.zeros((2, 7, 4))
    raw[1, 3] = [np.nan, 0, 0, 0]
    clip = raw_to_clip("toy-robot", 30.0, raw, np.zeros((2, 3)))
    assert isinstance(clip, MotionClip)
    assert np.array_equal(clip.rotations[1, 3], [1.0, 0, 0, 0])


def test_single_joint_identity_conv(rng):
    layer = SkeletalConvLayer(((0,),), 3, 3, 1, rng, "id")
    layer.weight.value = np.eye(3).reshape(1, 3, 3, 1)
    x = rng.standard_normal((5, 1, 3))
    assert np.array_equal(skeletal_conv(layer, x).value, x)


def test_two_joint_identity_weights_average_neighbourhood(rng):
    adj = ((0, 1), (0, 1))
    layer = SkeletalConvLayer(adj, 2, 2, 3, rng, "avg")
    w = np.zeros((4, 2, 2, 3))
    w[:, :, :, 1] = np.eye(2)
    layer.weight.value = w
    x = rng.standard_normal((6, 2, 2))
    out = skeletal_conv(layer, x).value
    assert np.allclose(out[:, 0], x.mean(axis=1)) and np.allclose(out[:, 1], x.mean(axis=1))


def test_pool_of_unpool_is_identity(human, rng):
    for pm in derive_pooling_maps(human):
        z = rng.standard_normal((2, 4, pm.num_coarse, 3))
        assert np.allclose(skeletal_pool(skeletal_unpool(z, pm), pm).value, z, atol=1e-15)
        const = np.ones((2, 8, pm.num_fine, 3)) * 0.7
        assert np.allclose(skeletal_unpool(skeletal_pool(const, pm), pm).value, const)


def test_decoder_output_is_row_normalized_raw(small_model, rng):
    from ikmr.nets import decode_tensor

    z = rng.standard_normal((1,) + small_model.latent_shape)
    raw, _ = decode_tensor(small_model, "B", z)
    clip = decode(small_model, "B", z[0])
    unit = raw.value[0] / np.linalg.norm(raw.value[0], axis=-1, keepdims=True)
    unit = np.where(unit[..., :1] < 0, -unit, unit)
    assert np.array_equal(clip.rotations, unit)


def test_every_parameter_gets_gradient(small_model, human, robot):
    from ikmr.training import TrainConfig, generate_synthetic_pairs, loss_pretrain

    ds = generate_synthetic_pairs(human, robot, 2, seed=0, window=16)
    ad.backward(loss_pretrain(small_model, ds.pairs, TrainConfig()))
    dead = [k for k, p in small_model.parameters().items() if p.grad is None or not np.any(p.grad)]
    assert not dead


def test_rest_pose_encodes_to_zero(small_model, human):
    from ikmr.kinematics import standing_height

    root = np.zeros((16, 3))
    root[:, 2] = standing_height(human)
    rest = MotionClip(human.name, 30.0, root, np.tile([1.0, 0, 0, 0], (16, human.num_joints, 1)))
    assert np.array_equal(encode(small_model, "A", rest).values, np.zeros(small_model.latent_shape))


def test_joint_permutation_gives_same_latent(robot, rng):
    """Relabel joints (parents first) and move every per-joint block accordingly."""
    perm = [0, 5, 3, 1, 6, 4, 2]  # new index k holds old joint perm[k]
    inv = np.argsort(perm)
    d = {
        "name": robot.name,
        "joint_names": [robot.joint_names[o] for o in perm],
        "parent": [-1 if robot.parent[o] < 0 else int(inv[robot.parent[o]]) for o in perm],
        "offset": robot.offset[perm],
        "end_effectors": [int(inv[e]) for e in robot.end_effectors],
        "axes": robot.axes[perm],
        "pooling": robot.pooling,
    }
    permuted = SkeletonTopology(d["name"], tuple(d["joint_names"]), tuple(d["parent"]), d["offset"],
                                tuple(d["end_effectors"]), axes=d["axes"], pooling=d["pooling"])
    cfg = ModelConfig(window=8, channels=(4, 5), kernel=3, static_channels=3)
    m1 = RetargetModel(robot, robot, cfg, seed=3)
    m2 = RetargetModel(permuted, permuted, cfg, seed=3)
    for l1, l2 in zip(m1.encoders["A"].layers, m2.encoders["A"].layers):
        adj1, adj2 = l1.adjacency, l2.adjacency
        ptr1 = np.cumsum([0] + [len(a) for a in adj1])
        ptr2 = np.cumsum([0] + [len(a) for a in adj2])
        same_level = len(adj1) == robot.num_joints
        w = np.empty_like(l2.weight.value)
        b = np.empty_like(l2.bias.value)
        for i2, nb2 in enumerate(adj2):
            i1 = perm[i2] if same_level else i2
            b[i2] = l1.bias.value[i1]
            for e2, j2 in enumerate(nb2):
                j1 = perm[j2] if same_level else j2
                w[ptr2[i2] + e2] = l1.weight.value[ptr1[i1] + adj1[i1].index(j1)]
        l2.weight.value, l2.bias.value = w, b
    clip = random_clip(rng, robot, 8)
    moved = MotionClip(robot.name, 30.0, clip.root_translation, clip.rotations[:, perm])
    z1 = encode(m1, "A", clip).values
    z2 = encode(m2, "A", moved).values
    assert np.allclose(z1, z2, atol=1e-12)
