"""Architecture hyperparameters shared by the model, trainer and CLI."""

from __future__ import annotations

from dataclasses import dataclass


class ConfigError(ValueError):
    pass


FRAGNET = "fragnet"
WORDIMGNET = "wordimgnet"
FRAGMENT_SIZES = (16, 32, 64)


@dataclass(frozen=True)
class NetworkConfig:
    kind: str = FRAGNET
    fragment_size: int = 64
    base_stride: int = 16
    input_shape: tuple[int, int, int] = (64, 128, 1)
    pyramid_widths: tuple[int, ...] = (64, 128, 256, 512)
    writer_count: int = 10

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "pyramid_widths", tuple(int(v) for v in self.pyramid_widths))
        self.validate()

    def validate(self) -> None:
        H, W, C = self.input_shape
        if self.kind not in (FRAGNET, WORDIMGNET):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if self.writer_count < 2:
            raise ConfigError(f"writer_count must be >= 2, got {self.writer_count}")
        if C != 1:
            raise ConfigError("input images must have exactly one channel")
        if len(self.pyramid_widths) != 4:
            raise ConfigError("exactly four pyramid widths are required")
        if H % 8 or W % 8:
            raise ConfigError(f"input size {H}x{W} must be divisible by 8")
        if self.kind == WORDIMGNET:
            return
        q, s = self.fragment_size, self.base_stride
        if q % 8 or q // 8 < 2:
            raise ConfigError(f"fragment size {q} must be a multiple of 8 with q/8 >= 2")
        if s < 1 or s > q or s % 8:
            raise ConfigError(f"stride {s} must be a multiple of 8 not larger than q={q}")
        if q > H or q > W:
            raise ConfigError(f"fragment size {q} exceeds the {H}x{W} input")
        if (H - q) % s or (W - q) % s:
            raise ConfigError(f"windows of size {q} at stride {s} do not tile the {H}x{W} input exactly")

    @property
    def is_fragnet(self) -> bool:
        return self.kind == FRAGNET

    @property
    def label(self) -> str:
        return f"FragNet-{self.fragment_size}" if self.is_fragnet else "WordImgNet"

    def pathway_in_widths(self) -> list[int]:
        """Input channel count of the first conv in each fragment-pathway stage."""
        w = self.pyramid_widths
        if self.is_fragnet:
            return [self.input_shape[2]] + [2 * c for c in w[:-1]]
        return [self.input_shape[2]] + list(w[:-1])

    @property
    def feature_dim(self) -> int:
        """Length of the pooled vector feeding the classifier."""
        last = self.pyramid_widths[-1]
        return 2 * last if self.is_fragnet else last

    def to_dict(self) -> dict[str, str]:
        return {
            "kind": self.kind,
            "fragment_size": str(self.fragment_size),
            "base_stride": str(self.base_stride),
            "input_shape": ",".join(map(str, self.input_shape)),
            "pyramid_widths": ",".join(map(str, self.pyramid_widths)),
            "writer_count": str(self.writer_count),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "NetworkConfig":
        try:
            return cls(
                kind=d["kind"],
                fragment_size=int(d["fragment_size"]),
                base_stride=int(d["base_stride"]),
                input_shape=tuple(int(v) for v in d["input_shape"].split(",")),
                pyramid_widths=tuple(int(v) for v in d["pyramid_widths"].split(",")),
                writer_count=int(d["writer_count"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad network config: {exc}") from exc


def fragnet(q: int = 64, writers: int = 10, **kw) -> NetworkConfig:
    if q not in FRAGMENT_SIZES:
        raise ConfigError(f"fragment size must be one of {FRAGMENT_SIZES}, got {q}")
    return NetworkConfig(kind=FRAGNET, fragment_size=q, writer_count=writers, **kw)


def wordimgnet(writers: int = 10, **kw) -> NetworkConfig:
    return NetworkConfig(kind=WORDIMGNET, writer_count=writers, **kw)
