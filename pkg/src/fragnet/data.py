"""Word-image manifests, preprocessing to the 64 x 128 input, and a synthetic writer corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .tensor import Tensor

INPUT_HEIGHT = 64
INPUT_WIDTH = 128
WHITE = 255


class ManifestError(ValueError):
    pass


class SplitViolation(ManifestError):
    pass


@dataclass(frozen=True)
class WordSample:
    image: np.ndarray  # uint8, 0 = ink, 255 = paper
    writer_id: int
    page_id: str
    word_text: str | None = None


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    writer_id: int
    page_id: str
    word_text: str | None = None


@dataclass
class Manifest:
    records: list[ManifestRecord]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rec: ManifestRecord) -> Path:
        p = Path(rec.image_path)
        return p if p.is_absolute() else self.root / p

    @property
    def writer_ids(self) -> list[int]:
        return sorted({r.writer_id for r in self.records})

    @property
    def page_ids(self) -> set[str]:
        return {r.page_id for r in self.records}


# ---------------------------------------------------------------------------
# manifests


def parse_manifest(lines: Iterable[str], split: str = "train", root: Path | str = ".",
                   source: str = "<manifest>") -> Manifest:
    records = []
    page_owner: dict[str, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ManifestError(f"{source}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
        path, wid, page = parts[:3]
        try:
            writer = int(wid)
        except ValueError:
            raise ManifestError(f"{source}:{lineno}: writer_id {wid!r} is not an integer") from None
        if writer < 0:
            raise ManifestError(f"{source}:{lineno}: writer_id {writer} is negative")
        if not path or not page:
            raise ManifestError(f"{source}:{lineno}: empty image path or page id")
        if page_owner.setdefault(page, writer) != writer:
            raise ManifestError(f"{source}:{lineno}: page {page!r} is listed under two writers")
        text = parts[3] if len(parts) == 4 and parts[3] != "" else None
        records.append(ManifestRecord(path, writer, page, text))
    return Manifest(records, split, Path(root))


def load_manifest(path: str | Path, split: str | None = None) -> Manifest:
    path = Path(path)
    if split is None:
        split = "test" if "test" in path.stem.lower() else "train"
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh, split, path.parent, str(path))


def check_page_disjoint(train: Manifest, test: Manifest) -> None:
    shared = sorted(train.page_ids & test.page_ids)
    if shared:
        raise SplitViolation(f"page {shared[0]!r} appears in both the training and the testing split")


def load_split(train_path: str | Path, test_path: str | Path) -> tuple[Manifest, Manifest]:
    train = load_manifest(train_path, "train")
    test = load_manifest(test_path, "test")
    check_page_disjoint(train, test)
    return train, test


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fields = [r.image_path, str(r.writer_id), r.page_id]
            if r.word_text is not None:
                fields.append(r.word_text)
            fh.write("\t".join(fields) + "\n")


# ---------------------------------------------------------------------------
# images


def read_image(path: str | Path) -> np.ndarray:
    """8-bit grayscale PNG or PGM (format picked from the extension)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in (".png", ".pgm"):
        raise ManifestError(f"{path}: unsupported image type {ext!r} (expected .png or .pgm)")
    try:
        with Image.open(path, formats=["PNG"] if ext == ".png" else ["PPM"]) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc


def write_png(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PNG")


def fit_scale(h: int, w: int, out_h: int = INPUT_HEIGHT, out_w: int = INPUT_WIDTH) -> float:
    return min(out_h / h, out_w / w)


def fit_size(h: int, w: int, out_h: int = INPUT_HEIGHT, out_w: int = INPUT_WIDTH) -> tuple[int, int]:
    """Pixel extent covered by the scaled image (partial last row/column included)."""
    s = fit_scale(h, w, out_h, out_w)
    return (max(1, min(out_h, math.ceil(h * s - 1e-9))),
            max(1, min(out_w, math.ceil(w * s - 1e-9))))


def resize_pad(image: np.ndarray) -> Tensor:
    """Scale to fit 64 x 128 keeping the aspect ratio, pad white at the
    bottom/right, and map to [0, 1] (1 = paper)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"resize_pad needs a non-empty 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    s = fit_scale(h, w)
    nh, nw = fit_size(h, w)
    # One scale factor for both axes: the output block maps back to a source
    # box of nh/s x nw/s, which may overhang the image by under a pixel, so
    # the source is padded white first. Rounding the output size instead
    # would stretch one axis by up to half a pixel.
    ph, pw = max(h, math.ceil(nh / s)) + 1, max(w, math.ceil(nw / s)) + 1
    padded = np.full((ph, pw), float(WHITE), dtype=np.float32)
    padded[:h, :w] = img
    src = Image.fromarray(padded, mode="F")
    scaled = np.asarray(src.resize((nw, nh), Image.Resampling.BILINEAR, box=(0, 0, nw / s, nh / s)),
                        dtype=np.float32)
    canvas = np.full((INPUT_HEIGHT, INPUT_WIDTH), float(WHITE), dtype=np.float32)
    canvas[:nh, :nw] = np.clip(scaled, 0, WHITE)
    return Tensor((canvas / WHITE)[None, :, :, None])


@dataclass
class WordSet:
    """Preprocessed images stacked for the network, plus their labels."""

    images: np.ndarray  # n x 64 x 128 x 1, float32 in [0, 1]
    labels: np.ndarray
    page_ids: list[str]
    texts: list[str | None]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: Sequence[int]) -> "WordSet":
        idx = list(idx)
        return WordSet(self.images[idx], self.labels[idx],
                       [self.page_ids[i] for i in idx], [self.texts[i] for i in idx])


def load_wordset(manifest: Manifest) -> WordSet:
    images = np.empty((len(manifest), INPUT_HEIGHT, INPUT_WIDTH, 1), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        images[i] = resize_pad(read_image(manifest.resolve(rec))).data[0]
    return WordSet(images,
                   np.array([r.writer_id for r in manifest.records], dtype=np.int64),
                   [r.page_id for r in manifest.records],
                   [r.word_text for r in manifest.records])


# ---------------------------------------------------------------------------
# synthetic handwriting

# Writer style ranges. Writers are spread evenly over each range (with an
# independent shuffle per attribute) so any two differ by at least
# (hi - lo) / (M - 1) in every attribute.
STYLE_RANGES = {
    "slant": (-30.0, 30.0),        # degrees, positive leans right
    "stroke_width": (1.5, 4.5),    # pixels at x-height 26
    "jitter": (0.0, 0.15),         # baseline wobble, fraction of x-height
    "size": (0.75, 1.25),          # glyph scale
    "curvature": (-0.12, 0.12),    # sideways bow of strokes, fraction of x-height
}

X_HEIGHT = 26.0
SUPERSAMPLE = 3


@dataclass(frozen=True)
class WriterStyle:
    writer_id: int
    slant: float
    stroke_width: float
    jitter: float
    size: float
    curvature: float
    seed: int


def _arc(cx, cy, rx, ry, a0, a1, n=10):
    t = np.radians(np.linspace(a0, a1, n))
    return [(cx + rx * math.cos(a), cy + ry * math.sin(a)) for a in t]


# Glyph prototypes in a y-up box: 0 = baseline, 1 = x-height; (strokes, advance).
GLYPHS: dict[str, tuple[list[list[tuple[float, float]]], float]] = {
    "a": ([_arc(0.42, 0.5, 0.38, 0.48, 20, 340, 14), [(0.82, 1.0), (0.82, 0.05), (0.95, 0.0)]], 1.0),
    "b": ([[(0.1, 1.7), (0.1, 0.0)], _arc(0.45, 0.45, 0.35, 0.45, 180, 540, 14)], 0.9),
    "c": ([_arc(0.45, 0.5, 0.4, 0.5, 40, 320, 12)], 0.8),
    "d": ([_arc(0.42, 0.48, 0.36, 0.46, 0, 360, 14), [(0.8, 1.7), (0.8, 0.0)]], 0.95),
    "e": ([[(0.1, 0.5), (0.8, 0.55)] + _arc(0.45, 0.5, 0.38, 0.48, 10, 320, 12)], 0.85),
    "i": ([[(0.25, 1.0), (0.25, 0.0)], [(0.25, 1.4), (0.27, 1.5)]], 0.45),
    "l": ([[(0.1, 0.1), (0.45, 1.2), (0.35, 1.7), (0.2, 1.2), (0.25, 0.0)]], 0.55),
    "m": ([[(0.05, 1.0), (0.05, 0.0)], _arc(0.3, 0.6, 0.25, 0.4, 180, 0, 8) + [(0.55, 0.0)],
           _arc(0.8, 0.6, 0.25, 0.4, 180, 0, 8) + [(1.05, 0.0)]], 1.2),
    "n": ([[(0.05, 1.0), (0.05, 0.0)], _arc(0.4, 0.6, 0.35, 0.4, 180, 0, 10) + [(0.75, 0.0)]], 0.9),
    "o": ([_arc(0.45, 0.5, 0.4, 0.5, 90, 450, 16)], 0.9),
    "p": ([[(0.1, 1.0), (0.1, -0.7)], _arc(0.45, 0.55, 0.35, 0.45, 180, 540, 14)], 0.9),
    "t": ([[(0.3, 1.5), (0.3, 0.1), (0.5, 0.0)], [(0.05, 1.0), (0.6, 1.02)]], 0.65),
    "u": ([[(0.05, 1.0)] + _arc(0.4, 0.4, 0.35, 0.4, 180, 360, 10) + [(0.75, 1.0)], [(0.75, 1.0), (0.75, 0.0)]], 0.9),
    "v": ([[(0.05, 1.0), (0.4, 0.0), (0.8, 1.0)]], 0.85),
}
ALPHABET = "".join(GLYPHS)


def make_writer_styles(writers: int, seed: int) -> list[WriterStyle]:
    if writers < 2:
        raise ValueError(f"need at least 2 writers, got {writers}")
    rng = np.random.default_rng([seed, 0x5717])
    columns = {}
    for name, (lo, hi) in STYLE_RANGES.items():
        columns[name] = rng.permutation(np.linspace(lo, hi, writers))
    seeds = rng.integers(0, 2**31 - 1, size=writers)
    return [WriterStyle(w, *(float(columns[k][w]) for k in STYLE_RANGES), int(seeds[w]))
            for w in range(writers)]


def _allographs(style: WriterStyle) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
    """Per-writer fixed deformation of each glyph: (2x2 matrix, offset, bow)."""
    rng = np.random.default_rng([style.seed, 1])
    out = {}
    for ch in ALPHABET:
        a = np.eye(2) + rng.normal(0, 0.1, (2, 2))
        b = rng.normal(0, 0.05, 2)
        out[ch] = (a, b, float(rng.normal(0, 0.06)))
    return out


def _smooth(points: np.ndarray, per_segment: int = 6) -> np.ndarray:
    # Catmull-Rom through the control points
    if len(points) < 3:
        t = np.linspace(0, 1, per_segment + 1)[:, None]
        return points[0] + t * (points[-1] - points[0])
    p = np.vstack([points[0], points, points[-1]])
    out = []
    t = np.linspace(0, 1, per_segment, endpoint=False)[:, None]
    for i in range(1, len(p) - 2):
        p0, p1, p2, p3 = p[i - 1], p[i], p[i + 1], p[i + 2]
        out.append(0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3))
    out.append(p[-2][None])
    return np.vstack(out)


def render_word(text: str, style: WriterStyle, rng: np.random.Generator) -> np.ndarray:
    """Draw ``text`` (letters from ``ALPHABET``) in ``style``; uint8, dark ink on white."""
    allo = _allographs(style)
    xh = X_HEIGHT * style.size * (1 + rng.normal(0, 0.03))
    slant = math.tan(math.radians(style.slant + rng.normal(0, 1.5)))
    width = style.stroke_width * (1 + rng.normal(0, 0.05))
    strokes = []
    pen_x = 0.0
    for ch in text:
        protos, advance = GLYPHS[ch]
        a, b, bow = allo[ch]
        a = a + rng.normal(0, 0.03, (2, 2))
        lift = rng.normal(0, style.jitter)
        for proto in protos:
            pts = np.asarray(proto, dtype=float)
            pts = pts @ a.T + b + rng.normal(0, 0.012, pts.shape)
            pts[:, 0] += (style.curvature + bow) * np.sin(np.pi * np.clip(pts[:, 1], -0.7, 1.7) / 1.7)
            pts[:, 1] += lift
            pts = _smooth(pts)
            # shear about the baseline, then glyph units -> pixels (y down)
            x = (pen_x + pts[:, 0] + slant * pts[:, 1]) * xh
            y = -pts[:, 1] * xh
            strokes.append(np.column_stack([x, y]))
        pen_x += advance * (1.05 + rng.normal(0, 0.04))
    allpts = np.vstack(strokes)
    margin = width + 4
    x0, y0 = allpts.min(axis=0) - margin
    x1, y1 = allpts.max(axis=0) + margin
    W = int(math.ceil(x1 - x0))
    H = int(math.ceil(y1 - y0))
    k = SUPERSAMPLE
    canvas = Image.new("L", (W * k, H * k), WHITE)
    draw = ImageDraw.Draw(canvas)
    ink = int(np.clip(rng.normal(25, 5), 0, 60))
    lw = max(1, round(width * k))
    for s in strokes:
        pts = [((px - x0) * k, (py - y0) * k) for px, py in s]
        draw.line(pts, fill=ink, width=lw, joint="curve")
        r = lw / 2
        for px, py in (pts[0], pts[-1]):
            draw.ellipse([px - r, py - r, px + r, py + r], fill=ink)
    return np.asarray(canvas.resize((W, H), Image.Resampling.BOX), dtype=np.uint8)


def random_text(rng: np.random.Generator, min_len: int = 2, max_len: int = 7) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(rng.choice(list(ALPHABET), size=n))


def generate_synthetic(out_dir: str | Path, writers: int = 10, words_per_writer_train: int = 40,
                       words_per_writer_test: int = 10, seed: int = 0,
                       words_per_page: int = 5) -> tuple[Manifest, Manifest]:
    """Render a page-disjoint synthetic corpus and write train.tsv / test.tsv.

    Layout: ``writerNNN/pagePP/wordKKKK.png``; training pages come first,
    testing pages continue the page numbering.
    """
    styles = make_writer_styles(writers, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[ManifestRecord]] = {"train": [], "test": []}
    for style in styles:
        rng = np.random.default_rng([seed, style.writer_id, 2])
        page = 0
        word = 0
        for split, count in (("train", words_per_writer_train), ("test", words_per_writer_test)):
            for j in range(count):
                if j % words_per_page == 0:
                    page += 1
                text = random_text(rng)
                img = render_word(text, style, rng)
                rel = Path(f"writer{style.writer_id:03d}") / f"page{page:02d}" / f"word{word:04d}.png"
                write_png(out / rel, img)
                splits[split].append(ManifestRecord(rel.as_posix(), style.writer_id,
                                                    f"w{style.writer_id:03d}-p{page:02d}", text))
                word += 1
    write_manifest(out / "train.tsv", splits["train"])
    write_manifest(out / "test.tsv", splits["test"])
    write_styles(out / "styles.tsv", styles)
    return Manifest(splits["train"], "train", out), Manifest(splits["test"], "test", out)


def write_styles(path: Path, styles: Sequence[WriterStyle]) -> None:
    keys = ["writer_id", *STYLE_RANGES, "seed"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys) + "\n")
        for s in styles:
            fh.write("\t".join(f"{getattr(s, k):.6g}" if isinstance(getattr(s, k), float)
                               else str(getattr(s, k)) for k in keys) + "\n")
