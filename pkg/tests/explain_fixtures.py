"""Hand-built networks and golden-file inputs for the Grad-CAM tests."""

import numpy as np

from cyclone_alexnet.network import NetworkConfig, build_alexnet

ONE_CHANNEL = NetworkConfig(input_size=32, conv_channels=(1, 1, 1, 1, 1), fc_widths=(1, 1), dropout_rate=0.0)


def constant_activation_net(a_bias=2.0, w1=1.5, w2=0.8, layer=3):
    """Stage ``layer`` outputs a positive constant; later stages pass it through.

    Conv kernels before and at ``layer`` are zero with bias ``a_bias`` at
    ``layer``; later stages use a Dirac kernel so each stage is pool + eval
    batchnorm (a 1/sqrt(1+eps) scale) + relu of a positive constant.
    """
    m = build_alexnet(ONE_CHANNEL, 0, dtype=np.float64)
    for i in range(1, 6):
        k = m.params[f"conv{i}.kernel"].data
        k[...] = 0.0
        if i > layer:
            k[0, 0, 1, 1] = 1.0
        m.params[f"conv{i}.bias"].data[...] = a_bias if i == layer else 0.0
    m.params["fc1.weight"].data[...] = w1
    m.params["fc1.bias"].data[...] = 0.0
    m.params["fc2.weight"].data[...] = w2
    m.params["fc2.bias"].data[...] = 0.0
    return m


def golden_inputs():
    yy, xx = np.mgrid[0:16, 0:16]
    image = (xx + 2 * yy) / 45.0
    heat = np.exp(-((yy - 5.0) ** 2 + (xx - 10.0) ** 2) / 18.0)
    heat = (heat - heat.min()) / (heat.max() - heat.min())
    return image, heat
