import numpy as np
import pytest

from attr_eval import tensor_core as tc

ACCEPTANCE_LINES = []


def random_cnn(seed, in_shape=(2, 6, 6), classes=3, jitter=0.1):
    """Small conv net with nonzero biases so ReLU patterns are varied."""
    c = in_shape[0]
    layers = [tc.conv2d(c, 3, 3, 1, 1), tc.relu(), tc.maxpool2d(2), tc.conv2d(3, 4, 2), tc.relu(),
              tc.flatten()]
    shape = in_shape
    for i, layer in enumerate(layers):
        shape = layer.output_shape(shape, i)
    layers += [tc.dense(shape[0], 5), tc.relu(), tc.dense(5, classes)]
    model = tc.init_model(layers, classes, seed, in_shape)
    rng = np.random.default_rng([seed, 99])
    for ps in model.weights:
        for p in ps:
            p += rng.normal(0.0, jitter, p.shape)
    return model


def linear_model(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return tc.Model([tc.dense(w.shape[1], w.shape[0])], [[w, b]], w.shape[0], (w.shape[1],))


def linear_image_model(shape, classes, seed):
    """flatten -> dense: a purely linear map on C x H x W images."""
    d = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(classes, d))
    b = rng.normal(size=classes)
    return tc.Model([tc.flatten(), tc.dense(d, classes)], [[], [w, b]], classes, shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
