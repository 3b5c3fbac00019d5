"""Shared builders for small test graphs and the trained session fixture."""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from hptq.graph import Activation, Graph, GraphInput, Node


def as_f32(array):
    """Round to float32 so container round-trips are bit-exact."""
    return np.asarray(array).astype(np.float32).astype(np.float64)


def f32(rng, shape, scale=1.0):
    """Random values exactly representable in float32 (containers store f32)."""
    return as_f32(rng.normal(scale=scale, size=shape))


def identity_graph(shape=(2, 2, 1)):
    node = Node(id="ident", kind="activation", inputs=["input"], act=Activation(kind="identity"))
    return Graph(nodes=[node], inputs=[GraphInput("input", shape)], outputs=["ident"]).validate()


def single_dense_graph(weights, bias=None):
    weights = np.asarray(weights, dtype=np.float64)
    node = Node(id="dense1", kind="dense", inputs=["input"], weights=weights,
                bias=None if bias is None else np.asarray(bias, dtype=np.float64))
    return Graph(
        nodes=[node],
        inputs=[GraphInput("input", (weights.shape[0],), layout="c")],
        outputs=["dense1"],
    ).validate()


def conv_bn_relu_graph(rng, in_shape=(6, 6, 2), cout=4, kernel=3, act="relu"):
    conv = Node(id="conv1", kind="conv2d", inputs=["input"],
                weights=f32(rng, (kernel, kernel, in_shape[2], cout), scale=0.5),
                bias=f32(rng, (cout,), scale=0.2), stride=1, padding="same")
    bn = Node(id="bn1", kind="batch_norm", inputs=["conv1"],
              gamma=as_f32(np.abs(f32(rng, (cout,))) + 0.5), beta=f32(rng, (cout,), scale=0.3),
              mean=f32(rng, (cout,), scale=0.2), variance=as_f32(np.abs(f32(rng, (cout,))) + 0.1),
              eps=1e-3)
    relu = Node(id="relu1", kind="activation", inputs=["bn1"], act=Activation(kind=act))
    return Graph(nodes=[conv, bn, relu], inputs=[GraphInput("input", in_shape)],
                 outputs=["relu1"]).validate()


def small_cnn(rng, in_shape=(6, 6, 2), c1=4, classes=3, act="relu", with_bn=True):
    """conv(-bn)-act -> gap -> flatten -> dense -> softmax."""
    nodes = [
        Node(id="conv1", kind="conv2d", inputs=["input"],
             weights=f32(rng, (3, 3, in_shape[2], c1), scale=0.5),
             bias=f32(rng, (c1,), scale=0.2), stride=1, padding="same"),
    ]
    prev = "conv1"
    if with_bn:
        nodes.append(Node(id="bn1", kind="batch_norm", inputs=[prev],
                          gamma=as_f32(np.abs(f32(rng, (c1,))) + 0.5), beta=f32(rng, (c1,), scale=0.3),
                          mean=f32(rng, (c1,), scale=0.2), variance=as_f32(np.abs(f32(rng, (c1,))) + 0.1)))
        prev = "bn1"
    nodes += [
        Node(id="act1", kind="activation", inputs=[prev], act=Activation(kind=act)),
        Node(id="gap", kind="global_avg_pool", inputs=["act1"]),
        Node(id="flat", kind="flatten", inputs=["gap"]),
        Node(id="head", kind="dense", inputs=["flat"],
             weights=f32(rng, (c1, classes), scale=0.6), bias=f32(rng, (classes,), scale=0.1)),
        Node(id="probs", kind="softmax", inputs=["head"]),
    ]
    return Graph(nodes=nodes, inputs=[GraphInput("input", in_shape)], outputs=["probs"]).validate()


def random_inputs(rng, graph, n, scale=1.0):
    shape = graph.inputs[0].shape
    return [rng.normal(scale=scale, size=shape) for _ in range(n)]


@dataclass
class TrainedFixture:
    graph: object
    calib_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    float_accuracy: float
    train_seconds: float

    def calibration_set(self):
        from hptq.container import CalibrationSet
        from hptq.tensor import Tensor

        return CalibrationSet(samples=[Tensor.from_array(s) for s in self.calib_x])


@pytest.fixture(scope="session")
def trained_fixture():
    """Train the conv-bn-relu x2 classifier once per session."""
    from fixture_net import train_fixture

    t0 = time.time()
    graph, calib_x, test_x, test_y, acc = train_fixture()
    return TrainedFixture(
        graph=graph,
        calib_x=calib_x,
        test_x=test_x,
        test_y=test_y,
        float_accuracy=acc,
        train_seconds=time.time() - t0,
    )
