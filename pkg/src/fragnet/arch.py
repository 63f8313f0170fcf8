"""FragNet-q and WordImgNet forward passes, fragment grids and FLOPs counting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import ConfigError, NetworkConfig
from .nn import CbrBlock, ParameterSet, cbr_forward, fragment_blocks, pyramid_blocks
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    crop_stack,
    global_avg_pool,
    linear,
    softmax_cross_entropy,
)

LEVELS = 4


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True)
class FragmentSpec:
    """Window ``rows x:x+h, cols y:y+w`` on pyramid level ``level`` (0 = input image)."""

    level: int
    x: int
    y: int
    h: int
    w: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.h, self.w


def pools_before(level: int) -> int:
    """Number of 2x2 poolings between the input image and ``level``."""
    return max(level - 1, 0)


def downmap(spec: FragmentSpec) -> FragmentSpec:
    """Map a window to the next level; halves only across a pooling boundary."""
    if spec.level >= LEVELS:
        raise ConfigError(f"level {spec.level} is the last pyramid level")
    nxt = spec.level + 1
    if pools_before(nxt) == pools_before(spec.level):
        return FragmentSpec(nxt, spec.x, spec.y, spec.h, spec.w)
    vals = (spec.x, spec.y, spec.h, spec.w)
    if any(v % 2 for v in vals):
        raise ConfigError(f"cannot halve {spec} to level {nxt}: odd coordinate")
    return FragmentSpec(nxt, *(v // 2 for v in vals))


def spec_chain(spec: FragmentSpec) -> list[FragmentSpec]:
    """The window on every level from ``spec.level`` to the last one."""
    chain = [spec]
    while chain[-1].level < LEVELS:
        chain.append(downmap(chain[-1]))
    return chain


class FragmentGrid(NamedTuple):
    specs: list[FragmentSpec]
    chains: list[list[FragmentSpec]]
    rows: int
    cols: int

    def __len__(self) -> int:
        return len(self.specs)


def make_grid(config: NetworkConfig) -> FragmentGrid:
    """All fully-inside q x q windows at the base stride, row-major."""
    if not config.is_fragnet:
        raise UnsupportedOperation("WordImgNet has no fragment grid")
    H, W, _ = config.input_shape
    q, s = config.fragment_size, config.base_stride
    if q > H or q > W:
        raise ConfigError(f"fragment size {q} exceeds the {H}x{W} input")
    xs = range(0, H - q + 1, s)
    ys = range(0, W - q + 1, s)
    specs = [FragmentSpec(0, x, y, q, q) for x in xs for y in ys]
    return FragmentGrid(specs, [spec_chain(sp) for sp in specs], len(xs), len(ys))


def _check_image(config: NetworkConfig, image: Tensor) -> None:
    if image.ndim != 4 or image.shape[1:] != config.input_shape:
        raise ShapeError(f"expected B x {' x '.join(map(str, config.input_shape))} input, got {image.shape}")


def _run_stage(stage: list[CbrBlock], params: ParameterSet, x: Tensor, mode: str) -> Tensor:
    for blk in stage:
        x = cbr_forward(blk, params, x, mode)
    return x


def pyramid_forward(params: ParameterSet, config: NetworkConfig, image: Tensor,
                    mode: str = "train") -> list[Tensor]:
    """Feature maps G1..G4 of the whole image."""
    _check_image(config, image)
    maps = []
    x = image
    for stage in pyramid_blocks(config):
        x = _run_stage(stage, params, x, mode)
        maps.append(x)
    return maps


def _classify(params: ParameterSet, features: Tensor) -> Tensor:
    pooled = global_avg_pool(features)
    return linear(pooled, params["classifier.weight"], params["classifier.bias"])


def fragment_forward(params: ParameterSet, config: NetworkConfig, pyramid_maps: Sequence[Tensor],
                     image: Tensor, chains: Sequence[Sequence[FragmentSpec]],
                     mode: str = "train") -> Tensor:
    """Fragment-pathway logits for a set of windows.

    Every chain holds one window per level 0..4. All windows share the
    pathway parameters and are stacked on the batch axis, so row ``n * B + b``
    of the result belongs to window ``n`` of image ``b`` and batchnorm sees
    all of them together.
    """
    if not chains:
        raise ShapeError("fragment_forward: no fragments")
    for chain in chains:
        if len(chain) != LEVELS + 1 or [c.level for c in chain] != list(range(LEVELS + 1)):
            raise ConfigError("each chain needs one spec per level 0..4")
        for lo, hi in zip(chain, chain[1:]):
            if downmap(lo) != hi:
                raise ConfigError(f"inconsistent chain: {lo} does not map to {hi}")
    f = crop_stack(image, [c[0] for c in chains])
    for i, stage in enumerate(fragment_blocks(config), start=1):
        m = _run_stage(stage, params, f, mode)
        a = crop_stack(pyramid_maps[i - 1], [c[i] for c in chains])
        if m.shape[1:3] != a.shape[1:3]:
            raise ShapeError(f"fragment alignment broken at level {i}: M{i} {m.shape} vs A{i} {a.shape}")
        f = concat_channels(m, a)
    return _classify(params, f)


def wordimgnet_forward(params: ParameterSet, config: NetworkConfig, image: Tensor,
                       mode: str = "train") -> Tensor:
    """Baseline: the pathway's eight convs on the whole image, no lateral crops."""
    _check_image(config, image)
    x = image
    for stage in fragment_blocks(config):
        x = _run_stage(stage, params, x, mode)
    return _classify(params, x)


def forward_logits(params: ParameterSet, config: NetworkConfig, image: Tensor,
                   mode: str = "train") -> tuple[Tensor, int]:
    """Logits for every prediction unit and the number of units per image.

    FragNet returns ``N * B`` fragment rows (fragment-major); WordImgNet
    returns ``B`` rows and ``N = 1``.
    """
    if not config.is_fragnet:
        return wordimgnet_forward(params, config, image, mode), 1
    grid = make_grid(config)
    maps = pyramid_forward(params, config, image, mode)
    return fragment_forward(params, config, maps, image, grid.chains, mode), len(grid)


def split_fragments(rows: np.ndarray, n: int) -> np.ndarray:
    """Reshape ``N * B`` fragment-major rows to ``N x B x ...``."""
    return rows.reshape(n, rows.shape[0] // n, *rows.shape[1:])


def word_forward(params: ParameterSet, config: NetworkConfig, image: Tensor,
                 mode: str = "eval") -> tuple[np.ndarray, list[np.ndarray]]:
    """Word evidence: softmax per fragment, then the mean over fragments."""
    logits, n = forward_logits(params, config, image, mode)
    _, probs = softmax_cross_entropy(logits.detach(), np.zeros(logits.shape[0], dtype=np.int64))
    per_fragment = split_fragments(probs, n)
    return average_fragments(list(per_fragment)), list(per_fragment)


def average_fragments(per_fragment: Sequence[np.ndarray]) -> np.ndarray:
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in per_fragment])
    return stacked.mean(axis=0)


# ---------------------------------------------------------------------------
# FLOPs


class ConvCost(NamedTuple):
    name: str
    c_in: int
    h: int
    w: int
    k_h: int
    k_w: int
    c_out: int
    repeats: int

    @property
    def flops(self) -> int:
        return self.c_in * self.h * self.w * self.k_h * self.k_w * self.c_out * self.repeats


def conv_flops(c_in: int, h: int, w: int, k_h: int, k_w: int, c_out: int) -> int:
    return c_in * h * w * k_h * k_w * c_out


def _pathway_costs(stages: list[list[CbrBlock]], h: int, w: int, repeats: int) -> list[ConvCost]:
    rows = []
    for stage in stages:
        for blk in stage:
            if blk.leading_pool:
                h, w = h // 2, w // 2
            rows.append(ConvCost(blk.prefix, blk.cin, h, w, 3, 3, blk.cout, repeats))
    return rows


def flops_breakdown(config: NetworkConfig) -> list[ConvCost]:
    """One row per conv layer executed for a single input word."""
    H, W, _ = config.input_shape
    if not config.is_fragnet:
        return _pathway_costs(fragment_blocks(config), H, W, 1)
    q = config.fragment_size
    n = len(make_grid(config))
    return (_pathway_costs(pyramid_blocks(config), H, W, 1)
            + _pathway_costs(fragment_blocks(config), q, q, n))


def estimate_flops(config: NetworkConfig) -> int:
    return sum(row.flops for row in flops_breakdown(config))
