import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionmt.data import (
    Dataset,
    Sample,
    augment,
    dihedral,
    encode_netpbm,
    hflip,
    load_dataset,
    load_isic_labels,
    make_folds,
    mask_binarize,
    normalize,
    parse_label_rows,
    read_image,
    resize_bilinear,
    resize_nearest,
    rot90,
    save_dataset,
    write_image,
    write_mask,
)
from lesionmt.errors import FormatError, IngestionError, StratificationError
from lesionmt.rng import RngState


def sample(i, cls=0, size=4, seed=0):
    r = RngState(seed, i)
    img = np.floor(r.uniform((3, size, size), 0, 256))
    mask = (r.uniform((1, size, size)) < 0.5).astype(float)
    return Sample(f"S{i:04d}", img, mask, int(cls == 1), int(cls == 2))


class TestNetpbm:
    def test_smallest_rgb(self, tmp_path):
        p = tmp_path / "a.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(range(12)))
        img = read_image(p)
        assert img.shape == (3, 2, 2)
        assert img[:, 0, 0].tolist() == [0, 1, 2] and img[:, 1, 1].tolist() == [9, 10, 11]

    def test_mask_binarize(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5 2 1 255\n" + bytes([0, 255]))
        assert mask_binarize(read_image(p)).ravel().tolist() == [0.0, 1.0]

    def test_comments_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n1 1\n# another\n255\n\x07")
        assert read_image(p).ravel().tolist() == [7.0]

    @pytest.mark.parametrize(
        "data,offset",
        [
            (b"P6\n2 2\n255\n" + bytes(11), 22),  # truncated payload
            (b"P6\n2 2\n65535\n" + bytes(24), 7),  # maxval
            (b"P3\n1 1\n255\n" + bytes(3), 0),  # ascii variant
            (b"P5\n1 x\n255\n\0", 5),  # bad number
            (b"P5\n1 1\n255", 10),  # no whitespace after maxval
            (b"P5\n0 1\n255\n", 3),  # zero width
            (b"P5\n1 1\n255\n\0\0", 12),  # trailing bytes
        ],
    )
    def test_format_errors_carry_offset(self, tmp_path, data, offset):
        p = tmp_path / "bad.pgm"
        p.write_bytes(data)
        with pytest.raises(FormatError) as info:
            read_image(p)
        assert info.value.offset == offset

    @given(st.sampled_from([1, 3]), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_round_trip_bit_exact(self, c, h, w, seed):
        img = np.floor(RngState(seed).uniform((c, h, w), 0, 256))
        buf = encode_netpbm(img)
        from lesionmt.data import _parse_netpbm

        assert np.array_equal(_parse_netpbm(buf), img)
        assert encode_netpbm(_parse_netpbm(buf)) == buf

    def test_write_then_read(self, tmp_path):
        img = np.floor(RngState(3).uniform((3, 5, 7), 0, 256))
        write_image(tmp_path / "x.ppm", img)
        assert np.array_equal(read_image(tmp_path / "x.ppm"), img)
        write_mask(tmp_path / "m.pgm", np.array([[[0, 1], [1, 0]]]))
        assert read_image(tmp_path / "m.pgm").ravel().tolist() == [0, 255, 255, 0]

    def test_png_input(self, tmp_path):
        pil = pytest.importorskip("PIL.Image")
        arr = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
        pil.fromarray(arr).save(tmp_path / "x.png")
        assert np.array_equal(read_image(tmp_path / "x.png"), arr.transpose(2, 0, 1).astype(float))

    def test_rejects_non_integer_pixels(self):
        with pytest.raises(ValueError):
            encode_netpbm(np.full((1, 1, 1), 1.5))


class TestResize:
    def test_pinned_half_pixel_values(self):
        img = np.array([[[0.0, 10.0], [0.0, 10.0]]])
        # centres map to source x = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
        out = resize_bilinear(img, 2, 4)
        assert out[0].tolist() == [[0.0, 2.5, 7.5, 10.0], [0.0, 2.5, 7.5, 10.0]]

    def test_same_size_identity(self):
        img = RngState(0).normal((3, 5, 6))
        assert np.abs(resize_bilinear(img, 5, 6) - img).max() <= 1e-12

    @given(st.integers(1, 12), st.integers(1, 12), st.floats(-100, 300))
    def test_constant_stays_constant(self, h, w, v):
        out = resize_bilinear(np.full((3, 4, 5), v), h, w)
        assert out.shape == (3, h, w)
        assert np.allclose(out, v, rtol=1e-12, atol=1e-12)

    def test_downscale_average(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        # halving picks the midpoint between each 2x2 pair of centres
        assert resize_bilinear(img, 2, 2)[0].tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_nearest_keeps_binary(self):
        m = (RngState(1).uniform((1, 7, 5)) < 0.5).astype(float)
        out = resize_nearest(m, 13, 3)
        assert out.shape == (1, 13, 3) and set(np.unique(out)) <= {0.0, 1.0}
        assert np.array_equal(resize_nearest(resize_nearest(m, 14, 10), 7, 5), m)


class TestNormalize:
    def test_pinned(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]] * 3)
        np.testing.assert_allclose(normalize(img)[0].ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_constant_channel(self):
        img = np.stack([np.full((3, 3), 9.0), np.arange(9.0).reshape(3, 3), np.zeros((3, 3))])
        out = normalize(img)
        assert not out[0].any() and not out[2].any()

    @given(st.integers(0, 2**31), st.integers(2, 10))
    def test_moments_and_idempotence(self, seed, size):
        img = RngState(seed).uniform((3, size, size), 0, 255)
        out = normalize(img)
        assert np.all(np.abs(out.mean(axis=(1, 2))) <= 1e-9)
        assert np.all(np.abs(out.std(axis=(1, 2)) - 1) <= 1e-9)
        assert np.abs(normalize(out) - out).max() <= 1e-9


class TestAugment:
    def test_ccw_convention(self):
        grid = np.array([[[1, 2], [3, 4]]])
        assert dihedral(grid, 1)[0].tolist() == [[2, 4], [1, 3]]
        assert dihedral(grid, 4)[0].tolist() == [[2, 1], [4, 3]]

    def test_group_laws(self):
        s = sample(0, size=5)
        r = s
        for _ in range(4):
            r = rot90(r)
        assert np.array_equal(r.image, s.image) and np.array_equal(r.mask, s.mask)
        f = hflip(hflip(s))
        assert np.array_equal(f.image, s.image) and np.array_equal(f.mask, s.mask)

    @given(st.integers(0, 2**31))
    def test_augment_preserves_labels_and_area(self, seed):
        s = sample(1, cls=2, size=6, seed=seed)
        a = augment(s, RngState(seed))
        assert (a.label_melanoma, a.label_sk, a.id) == (s.label_melanoma, s.label_sk, s.id)
        assert a.mask.sum() == s.mask.sum()
        assert sorted(a.image.ravel()) == sorted(s.image.ravel())

    def test_all_eight_transforms_distinct(self):
        x = np.arange(9).reshape(1, 3, 3)
        assert len({dihedral(x, k).tobytes() for k in range(8)}) == 8

    def test_augment_uses_rng_uniformly(self):
        s = sample(2, size=3)
        seen = {augment(s, RngState(i)).image.tobytes() for i in range(200)}
        assert len(seen) == 8

    def test_same_transform_for_image_and_mask(self):
        img = np.zeros((3, 4, 4))
        img[:, 0, 1] = 200
        s = Sample("x", img, (img[:1] > 0).astype(float), 0, 0)
        for k in range(8):
            from lesionmt.data import _transform_sample

            t = _transform_sample(s, k)
            assert np.array_equal(t.image[0] > 0, t.mask[0] > 0)


class TestLabels:
    def test_isic_row(self):
        t = parse_label_rows("image_id,melanoma,seborrheic_keratosis\nISIC_0012484,1.0,0.0\n")
        assert t == {"ISIC_0012484": (1, 0)}

    def test_crlf_and_column_order(self):
        t = parse_label_rows("seborrheic_keratosis,image_id,melanoma\r\n1.0,A,0.0\r\n0,B,0\r\n")
        assert t == {"A": (0, 1), "B": (0, 0)}

    @pytest.mark.parametrize(
        "text,fragment",
        [
            ("image_id,melanoma,seborrheic_keratosis\nA,1.0,1.0\n", "row 2"),
            ("image_id,melanoma\nA,1.0\n", "missing"),
            ("image_id,melanoma,seborrheic_keratosis\nA,0.5,0\n", "row 2"),
            ("image_id,melanoma,seborrheic_keratosis\nA,0,0\nA,1,0\n", "row 3"),
            ("", "empty"),
            ("image_id,melanoma,seborrheic_keratosis\n", "no data"),
        ],
    )
    def test_errors(self, text, fragment):
        with pytest.raises(IngestionError, match=fragment):
            parse_label_rows(text)

    def test_empty_file(self, tmp_path):
        (tmp_path / "l.csv").write_text("")
        with pytest.raises(IngestionError):
            load_isic_labels(tmp_path / "l.csv")


class TestSample:
    def test_exclusivity(self):
        with pytest.raises(ValueError):
            Sample("x", np.zeros((3, 2, 2)), None, 1, 1)

    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError):
            Sample("x", np.zeros((3, 2, 2)), np.full((1, 2, 2), 0.5), 0, 0)

    def test_unique_ids(self):
        with pytest.raises(IngestionError):
            Dataset([sample(0), sample(0)])


def fold_audit(ds, k):
    folded = make_folds(ds, k, seed=0)
    assert set(folded.folds) == set(ds.ids)
    assert set(folded.folds.values()) <= set(range(k))
    sizes = np.bincount(list(folded.folds.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1
    for cls in range(3):
        members = [s.id for s in ds if s.class_index == cls]
        per_fold = np.bincount([folded.folds[i] for i in members], minlength=k)
        assert per_fold.max() - per_fold.min() <= 1
    return folded


class TestFolds:
    def test_exact_division(self):
        ds = Dataset([sample(i, cls=i % 3) for i in range(30)])
        folded = fold_audit(ds, 5)
        for f in range(5):
            ids = folded.fold_ids(f)
            assert sorted(ds.by_id()[i].class_index for i in ids) == [0, 0, 1, 1, 2, 2]

    def test_deterministic_and_order_independent(self):
        samples = [sample(i, cls=i % 3) for i in range(23)]
        a = make_folds(Dataset(samples), 5, 3).folds
        b = make_folds(Dataset(list(reversed(samples))), 5, 3).folds
        assert a == b
        assert make_folds(Dataset(samples), 5, 4).folds != a

    @given(st.integers(5, 12), st.integers(5, 12), st.integers(5, 12), st.integers(2, 5), st.integers(0, 2**31))
    def test_partition_and_stratification(self, n0, n1, n2, k, seed):
        order = RngState(seed).permutation(n0 + n1 + n2)
        classes = [0] * n0 + [1] * n1 + [2] * n2
        ds = Dataset([sample(int(j), cls=classes[int(j)]) for j in order])
        fold_audit(ds, k)

    def test_too_few_per_class(self):
        ds = Dataset([sample(i, cls=0) for i in range(10)] + [sample(10 + i, cls=1) for i in range(4)] + [sample(20 + i, cls=2) for i in range(5)])
        with pytest.raises(StratificationError):
            make_folds(ds, 5, 0)


class TestDirectories:
    def test_save_load_round_trip(self, tmp_path):
        ds = Dataset([sample(i, cls=i % 3, size=6) for i in range(6)])
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.ids == ds.ids
        for a, b in zip(ds, back):
            assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
            assert (a.label_melanoma, a.label_sk) == (b.label_melanoma, b.label_sk)

    def test_resize_on_load(self, tmp_path):
        save_dataset(Dataset([sample(0, size=6)]), tmp_path)
        s = load_dataset(tmp_path, size=(4, 8)).samples[0]
        assert s.image.shape == (3, 4, 8) and s.mask.shape == (1, 4, 8)

    def test_missing_image(self, tmp_path):
        save_dataset(Dataset([sample(0)]), tmp_path)
        (tmp_path / "images" / "S0000.ppm").unlink()
        with pytest.raises(IngestionError, match="S0000"):
            load_dataset(tmp_path)
