import numpy as np
import pytest

from tcnet import data, distill, nn

BLOB_CLASSES = 4
BLOB_DIM = 16
DENSE_DIM = 32


def build_teacher(seed=0):
    layers = [nn.dense(BLOB_DIM, 64), nn.relu(64),
              nn.dense(64, DENSE_DIM), nn.relu(DENSE_DIM),
              nn.dense(DENSE_DIM, BLOB_CLASSES), nn.softmax(BLOB_CLASSES)]
    return nn.Network(layers, seed=seed)


@pytest.fixture(scope="session")
def blobs():
    return data.make_blobs(data.BlobSpec(BLOB_CLASSES, BLOB_DIM, 500, 0.15, 0))


@pytest.fixture(scope="session")
def trained_teacher(blobs):
    train, _ = blobs
    teacher = build_teacher()
    cfg = nn.TrainConfig(30, 32, 0.1, "sgd", 0)
    nn.fit(teacher, train.x, distill.one_hot(train.y, BLOB_CLASSES), cfg)
    return teacher


@pytest.fixture(scope="session")
def teacher_dense(trained_teacher, blobs):
    train, _ = blobs
    return distill.extract_dense(trained_teacher, train.x)


def numeric_gradient(loss_fn, net, step=1e-3):
    """Central finite differences of loss_fn() w.r.t. every network param.

    loss_fn takes no arguments and reads net.params; returns a grads list
    shaped like Network.backward's output.
    """
    grads = []
    for i, p in enumerate(net.params):
        if p is None:
            grads.append(None)
            continue
        pair = []
        for j in range(2):
            arr = net.params[i][j]
            g = np.zeros(arr.shape, dtype=np.float64)
            flat = arr.reshape(-1)
            gf = g.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                lp = loss_fn()
                flat[idx] = orig - step
                lm = loss_fn()
                flat[idx] = orig
                gf[idx] = (lp - lm) / (2 * step)
            pair.append(g)
        grads.append(tuple(pair))
    return grads


def max_rel_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a is None:
            continue
        for aj, nj in zip(a, n):
            denom = np.maximum(np.abs(aj) + np.abs(nj), 1e-6)
            worst = max(worst, float(np.max(np.abs(aj - nj) / denom)))
    return worst
