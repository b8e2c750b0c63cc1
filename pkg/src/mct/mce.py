"""Multiscale convolutional embedding: patch -> token sequence.

Two branches share one output grid:

* the spectral-partition branch splits the band axis into ``groups`` equal
  subbands, runs two valid (kernel ``ks`` x 3 x 3, spectral stride ``ss``)
  grouped 3-D convolutions each followed by batch norm and ReLU, flattens
  each spatial site and projects it to ``d_model``;
* the per-pixel branch crops the patch to the same (w-4) x (w-4) window and
  maps every spectrum through one shared linear layer.

Tokens are the sum of the two branches, flattened row-major.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import EVAL, BatchNorm3d, Context, Linear, Module, _param
from .tensor import ShapeError, Tensor, as_tensor

log = logging.getLogger(__name__)

SPATIAL_KERNEL = 3


def conv_len(n: int, k: int, s: int) -> int:
    """Output length of a valid convolution."""
    return (n - k) // s + 1


@dataclass
class MceConfig:
    bands: int
    patch: int = 9
    groups: int = 4
    ks: int = 7
    ss: int = 2
    c1: int = 8
    c2: int = 16
    d_model: int = 64
    iie_enabled: bool = True

    def __post_init__(self):
        if self.patch % 2 == 0:
            raise ShapeError(f"patch size must be odd, got {self.patch}")
        if self.bands % self.groups:
            raise ShapeError(f"{self.bands} bands do not divide into {self.groups} groups")
        if self.grid < 1:
            raise ShapeError(f"patch {self.patch} too small for two valid 3x3 convolutions")
        if self.spectral_out < 1:
            raise ShapeError(
                f"subband of {self.bands // self.groups} bands collapses under kernel {self.ks}, stride {self.ss}")

    @property
    def subband(self) -> int:
        return self.bands // self.groups

    @property
    def spectral_mid(self) -> int:
        return conv_len(self.subband, self.ks, self.ss)

    @property
    def spectral_out(self) -> int:
        mid = self.spectral_mid
        return conv_len(mid, self.ks, self.ss) if mid >= self.ks else 0

    @property
    def grid(self) -> int:
        return self.patch - 2 * (SPATIAL_KERNEL - 1)

    @property
    def site_features(self) -> int:
        return self.groups * self.c2 * self.spectral_out

    def to_dict(self) -> dict:
        return asdict(self)


def usable_bands(bands: int, groups: int) -> int:
    """Largest band count <= ``bands`` divisible by ``groups`` (trailing bands are dropped)."""
    keep = bands - bands % groups
    if keep != bands:
        log.warning("cropping %d trailing bands so %d bands split into %d groups", bands - keep, bands, groups)
    return keep


def spectral_partition(patch, groups: int) -> list[np.ndarray]:
    """Split the last (band) axis into ``groups`` contiguous equal slabs."""
    values = np.asarray(getattr(patch, "values", patch))
    bands = values.shape[-1]
    if bands % groups:
        raise ShapeError(f"{bands} bands not divisible by {groups} groups; crop bands first")
    return np.split(values, groups, axis=-1)


@dataclass
class TokenSequence:
    tokens: Tensor
    grid: tuple[int, int]

    @property
    def length(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def center_index(self) -> int:
        return (self.grid[0] // 2) * self.grid[1] + self.grid[1] // 2


class MCE(Module):
    def __init__(self, cfg: MceConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        g, k = cfg.groups, SPATIAL_KERNEL
        # no conv bias: the batch norm that follows would cancel it
        self.conv1_weight = _param(rng, (g * cfg.c1, 1, cfg.ks, k, k), fan_in=cfg.ks * k * k)
        self.bn1 = BatchNorm3d(g * cfg.c1)
        self.conv2_weight = _param(rng, (g * cfg.c2, cfg.c1, cfg.ks, k, k), fan_in=cfg.c1 * cfg.ks * k * k)
        self.bn2 = BatchNorm3d(g * cfg.c2)
        self.proj = Linear(cfg.site_features, cfg.d_model, rng)
        if cfg.iie_enabled:
            self.iie = Linear(cfg.bands, cfg.d_model, rng)

    def _batched(self, x) -> Tensor:
        x = as_tensor(x, dtype=self.proj.weight.dtype)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        n, h, w, b = x.shape
        cfg = self.cfg
        if h != cfg.patch or w != cfg.patch or b != cfg.bands:
            raise ShapeError(f"expected patches {cfg.patch}x{cfg.patch}x{cfg.bands}, got {h}x{w}x{b}")
        return x

    def spce(self, x, ctx: Context = EVAL) -> Tensor:
        """Spectral-partition branch: N x w x w x B -> N x L x d_model."""
        x = self._batched(x)
        cfg = self.cfg
        n, w = x.shape[0], cfg.patch
        # N x w x w x B -> N x G x (B/G) x w x w : one input channel per subband
        v = x.transpose(0, 3, 1, 2).reshape(n, cfg.groups, cfg.subband, w, w)
        stride = (cfg.ss, 1, 1)
        v = F.relu(self.bn1(F.conv3d_grouped(v, self.conv1_weight, None, cfg.groups, stride), ctx))
        v = F.relu(self.bn2(F.conv3d_grouped(v, self.conv2_weight, None, cfg.groups, stride), ctx))
        gsz = cfg.grid
        v = v.transpose(0, 3, 4, 1, 2).reshape(n, gsz * gsz, cfg.site_features)
        return self.proj(v)

    def iie_branch(self, x) -> Tensor:
        """Per-pixel branch over the central (w-4) x (w-4) window: N x L x d_model."""
        x = self._batched(x)
        cfg = self.cfg
        lo = SPATIAL_KERNEL - 1
        crop = x[:, lo:lo + cfg.grid, lo:lo + cfg.grid, :]
        return self.iie(crop.reshape(x.shape[0], cfg.grid * cfg.grid, cfg.bands))

    def __call__(self, x, ctx: Context = EVAL) -> TokenSequence:
        tokens = self.spce(x, ctx)
        if self.cfg.iie_enabled:
            tokens = tokens + self.iie_branch(x)
        return TokenSequence(tokens, (self.cfg.grid, self.cfg.grid))
