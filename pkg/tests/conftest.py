import numpy as np
import pytest

from flow_align.net import NetworkSpec, VelocityNet


@pytest.fixture
def small_net():
    spec = NetworkSpec.for_data(data_dim=2, hidden_widths=(6, 5), time_embed_dim=4,
                                condition_count=3, condition_embed_dim=2)
    net = VelocityNet(spec)
    return net, net.init_params(11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, theta, direction, h=1e-5):
    return (f(theta + h * direction) - f(theta - h * direction)) / (2.0 * h)
