"""Small stride-4 convolutional encoder/decoder."""
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _conv_params(rng, cin, cout):
    std = np.sqrt(2.0 / (9 * cin))
    return (Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True),
            Tensor(np.zeros(cout), requires_grad=True))


class SegNet:
    """Encoder: three 3x3 convs (strides 1, 2, 2) to a D-channel token grid.

    Decoder: conv to ``width`` channels at the token grid, then two
    upsample+conv stages back to full resolution.  Stage inputs (token grid
    and the 2x grid) accept additive prior maps.
    """

    def __init__(self, rng, in_channels=1, num_classes=4, dim=32, width=16, enc_channels=(8, 16)):
        c1, c2 = enc_channels
        self.dim = dim
        self.width = width
        self.num_classes = num_classes
        self.params = {}
        for name, cin, cout in (("enc1", in_channels, c1), ("enc2", c1, c2), ("enc3", c2, dim),
                                ("dec0", dim, width), ("dec1", width, width),
                                ("dec2", width, num_classes)):
            w, b = _conv_params(rng, cin, cout)
            self.params[f"net.{name}.w"] = w
            self.params[f"net.{name}.b"] = b

    def _conv(self, name, x, stride=1):
        return ad.conv2d(x, self.params[f"net.{name}.w"], self.params[f"net.{name}.b"], stride)

    def encode_grid(self, x):
        """(B, 1, H, W) -> (B, D, H/4, W/4)."""
        x = ad.as_tensor(x)
        h = ad.relu(self._conv("enc1", x))
        h = ad.relu(self._conv("enc2", h, 2))
        return self._conv("enc3", h, 2)

    @staticmethod
    def grid_to_tokens(grid):
        B, D, gh, gw = grid.shape
        return ad.reshape(ad.transpose(grid, (0, 2, 3, 1)), (B, gh * gw, D))

    def encode(self, x):
        """(B, 1, H, W) -> token batch B x L x D."""
        return self.grid_to_tokens(self.encode_grid(x))

    def stage_shapes(self, height, width):
        gh, gw = height // 4, width // 4
        return [(gh, gw, self.width), (2 * gh, 2 * gw, self.width)]

    def decode(self, grid, injections=None):
        h = ad.relu(self._conv("dec0", grid))
        if injections:
            h = h + injections[0]
        h = ad.relu(self._conv("dec1", ad.upsample_nearest(h, 2)))
        if injections:
            h = h + injections[1]
        return self._conv("dec2", ad.upsample_nearest(h, 2))

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)
            t.zero_grad()
