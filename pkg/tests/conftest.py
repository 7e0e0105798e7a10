import numpy as np
import pytest

from ikmr.nets import ModelConfig, RetargetModel
from ikmr.resources import builtin_skeleton
from ikmr.skeleton import MotionClip, SkeletonTopology


@pytest.fixture(scope="session")
def human():
    return builtin_skeleton("toy-human")


@pytest.fixture(scope="session")
def robot():
    return builtin_skeleton("toy-robot")


@pytest.fixture(scope="session")
def g1():
    return builtin_skeleton("g1-like")


def two_joint(name, length):
    return SkeletonTopology(name, ("base", "tip"), (-1, 0), [[0, 0, 0], [0, 0, length]], (1,),
                            axes=[[0, 0, 1], [0, 1, 0]])


@pytest.fixture(scope="session")
def tiny_pair():
    return two_joint("two-a", 1.0), two_joint("two-b", 0.8)


TINY_CONFIG = ModelConfig(window=8, channels=(3, 4), kernel=3, static_channels=2, fps=30.0)


@pytest.fixture
def tiny_model(tiny_pair):
    return RetargetModel(*tiny_pair, config=TINY_CONFIG, seed=1)


SMALL_CONFIG = ModelConfig(window=16, channels=(6, 8), kernel=3, static_channels=4, fps=30.0)


@pytest.fixture
def small_model(human, robot):
    return RetargetModel(human, robot, config=SMALL_CONFIG, seed=2)


def random_quats(rng, shape):
    q = rng.standard_normal(tuple(shape) + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def random_clip(rng, skeleton, T, fps=30.0):
    rot = random_quats(rng, (T, skeleton.num_joints))
    return MotionClip(skeleton.name, fps, rng.standard_normal((T, 3)), rot)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
