"""Composite blocks built from the layer vocabulary."""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Dense, GroupNorm, Module, ResidualAdd, SiLU, TimeEmbedInject


class ResBlock(Module):
    """GN-SiLU-conv, optional time injection by addition, GN-SiLU-conv, plus skip.

    When ``cin != cout`` the skip path is a 1x1 convolution.
    """

    kind = "resblock"

    def __init__(self, cin, cout, rng, temb_dim=None, groups=4, dtype=np.float64):
        super().__init__()
        self.norm1 = GroupNorm(cin, groups, dtype=dtype)
        self.act1 = SiLU()
        self.conv1 = Conv2d(cin, cout, rng, dtype=dtype)
        self.sublayers = [self.norm1, self.act1, self.conv1]
        self.temb_dim = temb_dim
        if temb_dim is not None:
            self.temb_act = SiLU()
            self.temb_proj = Dense(temb_dim, cout, rng, dtype=dtype)
            self.inject = TimeEmbedInject()
            self.sublayers += [self.temb_act, self.temb_proj, self.inject]
        self.norm2 = GroupNorm(cout, groups, dtype=dtype)
        self.act2 = SiLU()
        self.conv2 = Conv2d(cout, cout, rng, dtype=dtype)
        self.sublayers += [self.norm2, self.act2, self.conv2]
        self.skip = Conv2d(cin, cout, rng, k=1, dtype=dtype) if cin != cout else None
        if self.skip is not None:
            self.sublayers.append(self.skip)
        self.add = ResidualAdd()
        self.sublayers.append(self.add)

    def forward(self, x, temb=None):
        h = self.conv1(self.act1(self.norm1(x)))
        if self.temb_dim is not None:
            h = self.inject(h, self.temb_proj(self.temb_act(temb)))
        h = self.conv2(self.act2(self.norm2(h)))
        s = self.skip(x) if self.skip is not None else x
        return self.add(h, s)

    def backward(self, dy):
        dh, ds = self.add.backward(dy)
        dx = self.skip.backward(ds) if self.skip is not None else ds
        dh = self.norm2.backward(self.act2.backward(self.conv2.backward(dh)))
        dtemb = None
        if self.temb_dim is not None:
            dh, demb = self.inject.backward(dh)
            dtemb = self.temb_act.backward(self.temb_proj.backward(demb))
        dx = dx + self.norm1.backward(self.act1.backward(self.conv1.backward(dh)))
        return dx, dtemb


class TimeMLP(Module):
    """dense - SiLU - dense projection of the sinusoidal time embedding."""

    kind = "time_mlp"

    def __init__(self, dim, hidden, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Dense(dim, hidden, rng, dtype=dtype)
        self.act = SiLU()
        self.fc2 = Dense(hidden, hidden, rng, dtype=dtype)
        self.sublayers = [self.fc1, self.act, self.fc2]

    def forward(self, emb):
        return self.fc2(self.act(self.fc1(emb)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))
