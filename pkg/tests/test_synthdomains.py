import numpy as np
import pytest
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from cdpcl.netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm
from cdpcl.synthdomains import (
    SOURCE_STYLE,
    UNSEEN_STYLES,
    AugmentParams,
    ConfigError,
    DomainStyle,
    adjust_brightness,
    adjust_hue,
    augment,
    augment_many,
    color_jitter,
    generate_scene,
    make_split,
    mean_pixel,
    quantize,
    read_dataset,
    read_split,
    sample_seed,
    SplitConfig,
    write_dataset,
)

NO_AUG = AugmentParams(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, blur_prob=0.0)


def test_scene_deterministic():
    a = generate_scene(SOURCE_STYLE, 1234)
    b = generate_scene(SOURCE_STYLE, 1234)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_scene_shapes_and_ranges():
    s = generate_scene(UNSEEN_STYLES[0], 5, num_classes=4, height=32, width=48)
    assert s.image.shape == (32, 48, 3) and s.labels.shape == (32, 48)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.labels.max() < 4


def test_noise_free_flat_style_gives_constant_regions():
    style = DomainStyle("flat", noise_sigma=0.0, texture_frequency=0.0)
    s = generate_scene(style, 99)
    for c in np.unique(s.labels):
        pixels = s.image[s.labels == c]
        assert np.ptp(pixels, axis=0).max() == 0.0


def test_labels_cover_all_classes():
    counts = np.zeros(6)
    for i in range(100):
        s = generate_scene(SOURCE_STYLE, sample_seed(0, "src_train", i))
        counts += np.bincount(s.labels.ravel(), minlength=6)
    assert (counts / counts.sum() >= 0.01).all()


def test_scene_rejects_small_inputs():
    with pytest.raises(ConfigError):
        generate_scene(SOURCE_STYLE, 0, height=16)
    with pytest.raises(ConfigError):
        generate_scene(SOURCE_STYLE, 0, num_classes=1)


def test_sample_seed_order_independent():
    assert sample_seed(3, "a", 5) == sample_seed(3, "a", 5)
    assert len({sample_seed(3, "a", 5), sample_seed(3, "b", 5), sample_seed(3, "a", 6), sample_seed(4, "a", 5)}) == 4


def test_augment_identity_when_disabled():
    img = np.random.default_rng(0).random((8, 8, 3))
    np.testing.assert_array_equal(augment(img, NO_AUG, 3), img)


def test_brightness_factor():
    out = adjust_brightness(np.full((4, 4, 3), 0.5), 1.4)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)


def test_augment_deterministic_and_seed_dependent():
    img = np.random.default_rng(1).random((16, 16, 3))
    a, b = augment(img, aug_seed=7), augment(img, aug_seed=7)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != augment(img, aug_seed=8).tobytes()
    assert a.shape == img.shape and a.min() >= 0.0 and a.max() <= 1.0


def test_augment_many_matches_single():
    imgs = np.random.default_rng(2).random((3, 8, 8, 3))
    seeds = [[1, 2], [1, 3], [9]]
    batch = augment_many(imgs, AugmentParams(), seeds)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], augment(imgs[i], AugmentParams(), seeds[i]))


def test_hue_rotation_matches_hsv_roundtrip():
    rng = np.random.default_rng(3)
    img = rng.random((32, 32, 3))
    img[0, :4] = [[0.5, 0.5, 0.5], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]]  # grey and ties
    for shift in (-0.1, -0.03, 0.0, 0.07, 0.1):
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
        np.testing.assert_allclose(adjust_hue(img, shift), hsv_to_rgb(hsv), rtol=0, atol=1e-12)


def test_color_jitter_per_image_factors():
    imgs = np.random.default_rng(4).random((2, 4, 4, 3))
    out = color_jitter(imgs, brightness=np.array([1.0, 0.5]))
    np.testing.assert_array_equal(out[0], imgs[0])
    np.testing.assert_allclose(out[1], imgs[1] * 0.5)


def test_ppm_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    rgb = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_netpbm_bad_magic_names_file(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P3\n1 1\n255\n\0\0\0")
    with pytest.raises(NetpbmError, match="bad.ppm") as err:
        read_ppm(path)
    assert err.value.offset == 0


def test_netpbm_short_file(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n\0\0")
    with pytest.raises(NetpbmError, match="short.pgm"):
        read_pgm(path)


def test_dataset_roundtrip(tmp_path):
    samples = [generate_scene(SOURCE_STYLE, s, height=32, width=32, index=i) for i, s in enumerate((10, 20, 30))]
    write_dataset(samples, tmp_path / "d", 6)
    ds = read_dataset(tmp_path / "d")
    assert len(ds) == 3 and ds.num_classes == 6 and ds.domain == "src_train"
    assert len((tmp_path / "d" / "manifest.tsv").read_text().splitlines()) == 3
    for i, s in enumerate(samples):
        np.testing.assert_array_equal(ds.labels[i], s.labels)
        np.testing.assert_array_equal(ds.images[i], quantize(s.image) / 255.0)
        assert np.abs(ds.images[i] - s.image).max() <= 1 / 255 + 1e-12
        assert ds.seeds[i] == s.seed


def test_empty_dataset_errors(tmp_path):
    with pytest.raises(ConfigError):
        write_dataset([], tmp_path / "e", 6)
    (tmp_path / "e").mkdir()
    (tmp_path / "e" / "manifest.tsv").write_text("")
    (tmp_path / "e" / "meta.txt").write_text("classes = 6\n")
    with pytest.raises(ConfigError, match="empty"):
        read_dataset(tmp_path / "e")


@pytest.fixture(scope="module")
def small_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("split")
    cfg = SplitConfig(out=str(root), seed=7, height=32, width=32, train_count=6, eval_count=3)
    return root, cfg, make_split(cfg)


def test_split_directories(small_split):
    root, cfg, dirs = small_split
    assert list(dirs) == ["src_train", "unseen_a", "unseen_b", "unseen_c"]
    assert read_split(root) == ("src_train", ["unseen_a", "unseen_b", "unseen_c"])
    assert len(read_dataset(dirs["src_train"])) == 6
    for d in ("unseen_a", "unseen_b", "unseen_c"):
        assert len(read_dataset(dirs[d])) == 3


def test_split_is_byte_deterministic(small_split, tmp_path):
    root, cfg, _ = small_split
    again = SplitConfig(out=str(tmp_path / "again"), seed=7, height=32, width=32, train_count=6, eval_count=3)
    make_split(again)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        assert f.read_bytes() == (tmp_path / "again" / f.relative_to(root)).read_bytes()


def test_unseen_styles_differ_from_source():
    cfg = SplitConfig(out="unused", height=32, width=32)
    src = mean_pixel([generate_scene(SOURCE_STYLE, sample_seed(0, "src_train", i), 6, 32, 32) for i in range(20)])
    for style in UNSEEN_STYLES:
        assert len(style.differing_parameters(SOURCE_STYLE)) >= 2
        m = mean_pixel([generate_scene(style, sample_seed(0, style.id, i), 6, 32, 32) for i in range(20)])
        assert np.abs(m - src).max() >= cfg.min_style_margin


def test_split_needs_two_unseen(tmp_path):
    with pytest.raises(ConfigError, match="2 unseen"):
        make_split(SplitConfig(out=str(tmp_path), unseen=UNSEEN_STYLES[:1]))


def test_split_rejects_near_copy_of_source(tmp_path):
    clone = DomainStyle("clone", brightness=0.01, seed=1)
    with pytest.raises(ConfigError):
        make_split(SplitConfig(out=str(tmp_path), unseen=(clone, UNSEEN_STYLES[0])))
