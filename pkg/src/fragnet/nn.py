"""(P)-CBR blocks, the parameter registry and initialisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import NetworkConfig
from .tensor import ShapeError, Tensor, batchnorm, conv2d, get_dtype, maxpool2x2, relu

RUNNING_STATS = ("running_mean", "running_var")


class ParameterSet:
    """Ordered name -> Tensor map holding weights and batchnorm running stats."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.name = name
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._t.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def count(self, trainable_only: bool = True) -> int:
        return sum(t.data.size for t in self._t.values() if t.requires_grad or not trainable_only)

    def clone(self) -> "ParameterSet":
        return ParameterSet({n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                             for n, t in self._t.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                             for n, t in self._t.items()})


def is_running_stat(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in RUNNING_STATS


@dataclass(frozen=True)
class CbrBlock:
    """One conv -> batchnorm -> ReLU unit, optionally preceded by a 2x2 max-pool.

    The block is a view: its tensors live in a :class:`ParameterSet` under
    ``<prefix>.kernel``, ``<prefix>.gamma`` and so on.
    """

    prefix: str
    cin: int
    cout: int
    leading_pool: bool = False

    def names(self) -> list[str]:
        p = self.prefix
        return [f"{p}.kernel", f"{p}.bias", f"{p}.gamma", f"{p}.beta",
                f"{p}.running_mean", f"{p}.running_var"]


def cbr_forward(block: CbrBlock, params: ParameterSet, x: Tensor, mode: str = "train") -> Tensor:
    if x.shape[-1] != block.cin:
        raise ShapeError(f"{block.prefix}: expected {block.cin} input channels, got {x.shape[-1]}")
    p = block.prefix
    if block.leading_pool:
        x = maxpool2x2(x)
    x = conv2d(x, params[f"{p}.kernel"], params[f"{p}.bias"])
    x = batchnorm(x, params[f"{p}.gamma"], params[f"{p}.beta"],
                  params[f"{p}.running_mean"], params[f"{p}.running_var"], mode)
    return relu(x)


def stage_blocks(prefix: str, cin: int, cout: int, pooled: bool) -> list[CbrBlock]:
    """The two stacked CBR units of one pyramid/pathway stage."""
    return [CbrBlock(f"{prefix}.conv1", cin, cout, leading_pool=pooled),
            CbrBlock(f"{prefix}.conv2", cout, cout)]


def pathway_blocks(prefix: str, in_widths: list[int], widths: tuple[int, ...]) -> list[list[CbrBlock]]:
    return [stage_blocks(f"{prefix}.block{i + 1}", cin, cout, pooled=i > 0)
            for i, (cin, cout) in enumerate(zip(in_widths, widths))]


def pyramid_blocks(config: NetworkConfig) -> list[list[CbrBlock]]:
    widths = config.pyramid_widths
    return pathway_blocks("pyramid", [config.input_shape[2]] + list(widths[:-1]), widths)


def fragment_blocks(config: NetworkConfig) -> list[list[CbrBlock]]:
    return pathway_blocks("fragment", config.pathway_in_widths(), config.pyramid_widths)


def architecture_blocks(config: NetworkConfig) -> list[list[CbrBlock]]:
    if config.is_fragnet:
        return pyramid_blocks(config) + fragment_blocks(config)
    return fragment_blocks(config)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_parameters(config: NetworkConfig, seed: int = 0) -> ParameterSet:
    """Fresh parameters: He-normal weights, zero biases/beta, unit gamma."""
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    ps = ParameterSet()
    for stage in architecture_blocks(config):
        for blk in stage:
            k = he_normal(rng, (blk.cin, 3, 3, blk.cout), blk.cin * 9)
            ps.add(f"{blk.prefix}.kernel", Tensor(k.astype(dtype), requires_grad=True))
            ps.add(f"{blk.prefix}.bias", Tensor(np.zeros(blk.cout, dtype), requires_grad=True))
            ps.add(f"{blk.prefix}.gamma", Tensor(np.ones(blk.cout, dtype), requires_grad=True))
            ps.add(f"{blk.prefix}.beta", Tensor(np.zeros(blk.cout, dtype), requires_grad=True))
            ps.add(f"{blk.prefix}.running_mean", Tensor(np.zeros(blk.cout, dtype)))
            ps.add(f"{blk.prefix}.running_var", Tensor(np.ones(blk.cout, dtype)))
    d, m = config.feature_dim, config.writer_count
    ps.add("classifier.weight", Tensor(he_normal(rng, (d, m), d).astype(dtype), requires_grad=True))
    ps.add("classifier.bias", Tensor(np.zeros(m, dtype), requires_grad=True))
    return ps
