from pathlib import Path

import numpy as np
import pytest

from alias_forge.graph import LayerKind, LayerSpec, ModelGraph, infer_shapes, init_missing_weights, load

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"


def chain(*specs, shape=(3, 8, 8), name="chain") -> ModelGraph:
    """Input -> specs... -> Output, each spec a dict of LayerSpec fields without id/inputs."""
    c, h, w = shape
    nodes = [LayerSpec(id=0, kind=LayerKind.INPUT, c=c, j=c, in_h=h, in_w=w)]
    for i, kw in enumerate(specs, start=1):
        nodes.append(LayerSpec(id=i, inputs=(i - 1,), **kw))
    nodes.append(LayerSpec(id=len(nodes), kind=LayerKind.OUTPUT, inputs=(len(nodes) - 1,)))
    return infer_shapes(ModelGraph(nodes, 0, len(nodes) - 1, name))


def conv(c, j, k=3, stride=1, **kw):
    return dict(kind=LayerKind.CONV2D, k1=k, k2=k, c=c, j=j, stride=stride, **kw)


def fc(c, j):
    return dict(kind=LayerKind.FULLY_CONNECTED, c=c, j=j)


RELU = dict(kind=LayerKind.RELU)


def bn(c):
    return dict(kind=LayerKind.BATCH_NORM, c=c, j=c)


@pytest.fixture
def small_net():
    """conv-bn-relu-conv-relu-fc with weights."""
    g = chain(conv(3, 6), bn(6), RELU, conv(6, 4), RELU, fc(4 * 8 * 8, 5))
    return init_missing_weights(g, seed=3)


@pytest.fixture(scope="session")
def resnet_fixture():
    return load(FIXTURES / "resnet20-like.json", init_weights=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
