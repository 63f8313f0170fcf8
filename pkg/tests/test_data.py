import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from fragnet import data


# -- resize_pad -----------------------------------------------------------------


def test_matching_aspect_fills_canvas():
    img = np.random.default_rng(0).integers(0, 256, (32, 64)).astype(np.uint8)
    out = data.resize_pad(img)
    assert out.shape == (1, 64, 128, 1)
    # upscaled content reaches the last row and column: no padding band
    assert not np.all(out.data[0, -1, :, 0] == 1.0)
    assert not np.all(out.data[0, :, -1, 0] == 1.0)


def test_square_input_pads_right_half():
    img = np.zeros((64, 64), dtype=np.uint8)
    out = data.resize_pad(img).data[0, :, :, 0]
    assert np.all(out[:, :64] == 0.0)
    assert np.all(out[:, 64:] == 1.0)


def test_all_white_is_all_ones():
    out = data.resize_pad(np.full((17, 93), 255, dtype=np.uint8))
    assert np.all(out.data == 1.0)


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        data.resize_pad(np.zeros((0, 10), dtype=np.uint8))


def ink_extent(darkness):
    """Sub-pixel (height, width) of a solid ink box from second moments: L = sqrt(12 var)."""
    rows, cols = np.indices(darkness.shape)
    m = darkness.sum()
    var = [((a - (a * darkness).sum() / m) ** 2 * darkness).sum() / m for a in (rows, cols)]
    return tuple(math.sqrt(12 * v) for v in var)


@pytest.mark.parametrize("h,w", [(40, 200), (100, 60), (64, 500), (300, 128), (23, 47)])
def test_aspect_ratio_preserved(h, w):
    img = np.full((h, w), 255, dtype=np.uint8)
    r0, r1, c0, c1 = h // 5, h - h // 4, w // 6, w - w // 3
    img[r0:r1, c0:c1] = 0
    bh, bw = ink_extent(1 - img / 255.0)
    ah, aw = ink_extent(1 - data.resize_pad(img).data[0, :, :, 0].astype(np.float64))
    assert abs((aw / ah) / (bw / bh) - 1) < 0.03


def test_fit_size_geometry():
    assert data.fit_size(32, 64) == (64, 128)
    assert data.fit_size(64, 64) == (64, 64)
    assert data.fit_size(10, 1000) == (2, 128)  # 1.28 rows, partial row kept


# -- manifests ------------------------------------------------------------------


def test_empty_manifest(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("")
    assert len(data.load_manifest(p)) == 0


def test_bad_writer_id_reports_line(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("a.png\t0\tp1\n" "b.png\tabc\tp2\n")
    with pytest.raises(data.ManifestError, match=r":2:.*writer_id"):
        data.load_manifest(p)


def test_wrong_field_count(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("a.png\t0\n")
    with pytest.raises(data.ManifestError, match=":1:"):
        data.load_manifest(p)


def test_page_under_two_writers(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("a.png\t0\tp1\nb.png\t1\tp1\n")
    with pytest.raises(data.ManifestError, match="p1"):
        data.load_manifest(p)


def test_split_violation_names_page(tmp_path):
    (tmp_path / "train.tsv").write_text("a.png\t0\tpage-7\n")
    (tmp_path / "test.tsv").write_text("b.png\t0\tpage-7\n")
    with pytest.raises(data.SplitViolation, match="page-7"):
        data.load_split(tmp_path / "train.tsv", tmp_path / "test.tsv")


def test_optional_text_and_roundtrip(tmp_path):
    recs = [data.ManifestRecord("x/a.png", 2, "p1", "hello"), data.ManifestRecord("x/b.png", 0, "p2")]
    p = tmp_path / "m.tsv"
    data.write_manifest(p, recs)
    m = data.load_manifest(p)
    assert m.records == recs
    assert m.resolve(recs[0]) == tmp_path / "x/a.png"


def test_load_is_idempotent(tmp_path):
    p = tmp_path / "train.tsv"
    p.write_text("".join(f"w{i}.png\t{i % 3}\tp{i % 4 + 3 * (i % 3) * 10}\n" for i in range(12)))
    a, b = data.load_manifest(p), data.load_manifest(p)
    assert a.records == b.records
    assert [r.image_path for r in a.records] == [f"w{i}.png" for i in range(12)]


def test_image_formats(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (9, 13)).astype(np.uint8)
    data.write_png(tmp_path / "a.png", img)
    from PIL import Image
    Image.fromarray(img).save(tmp_path / "a.pgm")
    np.testing.assert_array_equal(data.read_image(tmp_path / "a.png"), img)
    np.testing.assert_array_equal(data.read_image(tmp_path / "a.pgm"), img)


# -- synthetic generator ----------------------------------------------------------


def test_synthetic_counts_and_layout(tmp_path):
    train, test = data.generate_synthetic(tmp_path, writers=10, words_per_writer_train=40,
                                          words_per_writer_test=10, seed=0)
    assert len(train) == 400 and len(test) == 100
    assert not (train.page_ids & test.page_ids)
    assert train.writer_ids == test.writer_ids == list(range(10))
    tr, te = data.load_split(tmp_path / "train.tsv", tmp_path / "test.tsv")
    assert tr.records == train.records and te.records == test.records
    assert (tmp_path / "writer003" / "page02" / "word0005.png").exists()
    assert all(2 <= len(r.word_text) <= 7 for r in tr.records)


def test_synthetic_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ma, _ = data.generate_synthetic(a, writers=3, words_per_writer_train=4, words_per_writer_test=2, seed=9)
    mb, _ = data.generate_synthetic(b, writers=3, words_per_writer_train=4, words_per_writer_test=2, seed=9)
    assert ma.records == mb.records
    for r in ma.records:
        assert (a / r.image_path).read_bytes() == (b / r.image_path).read_bytes()


def test_synthetic_needs_two_writers(tmp_path):
    with pytest.raises(ValueError):
        data.generate_synthetic(tmp_path, writers=1)


def test_styles_are_separated():
    styles = data.make_writer_styles(10, 4)
    for i, a in enumerate(styles):
        for b in styles[i + 1:]:
            gaps = [abs(getattr(a, k) - getattr(b, k)) / (hi - lo) for k, (lo, hi) in data.STYLE_RANGES.items()]
            assert max(gaps) >= 1 / 9 - 1e-9


def render_many(style, n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [data.render_word(data.random_text(rng), style, rng) for _ in range(n)]


def dominant_orientation(images):
    """Axial mean of stroke direction (degrees from vertical), gradient-weighted."""
    acc = 0j
    for img in images:
        gy, gx = np.gradient(img.astype(np.float64))
        mag2 = gx ** 2 + gy ** 2
        # the gradient is normal to the stroke; double the angle for axial data
        acc += np.sum(mag2 * np.exp(2j * np.arctan2(gy, gx)))
    normal = math.degrees(np.angle(acc)) / 2
    return normal


def test_slant_visible_in_gradient_orientation():
    base = data.make_writer_styles(2, 0)[0]
    left = dataclasses.replace(base, slant=-30.0)
    right = dataclasses.replace(base, slant=30.0)
    a = dominant_orientation(render_many(left))
    b = dominant_orientation(render_many(right))
    diff = abs((a - b + 90) % 180 - 90)
    assert diff > 20


def stroke_width(img):
    ink = img < 128
    area = ink.sum()
    edges = np.count_nonzero(ink[1:] != ink[:-1]) + np.count_nonzero(ink[:, 1:] != ink[:, :-1])
    return 2 * area / edges  # a long stroke of width w has area L*w and border 2L


def test_stroke_width_recoverable():
    styles = data.make_writer_styles(10, 1)
    measured = [np.mean([stroke_width(i) for i in render_many(s, 20)]) for s in styles]
    rho = stats.spearmanr([s.stroke_width for s in styles], measured).statistic
    assert rho > 0.9
