from dataclasses import replace

import numpy as np
import pytest

from krada_lab.errors import ConfigError, FormatError
from krada_lab.rng import stream
from krada_lab.synthworld import (
    SceneSpec,
    class_image_counts,
    generate_source,
    generate_target,
    hue_rotation,
    palette,
    read_dataset,
    render,
    stack,
    write_dataset,
)

SPEC = SceneSpec()


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def histogram_distance(a, b, bins=32):
    ha = np.histogram(a, bins=bins, range=(0, 1))[0] / a.size
    hb = np.histogram(b, bins=bins, range=(0, 1))[0] / b.size
    return float(np.abs(ha - hb).mean())


class TestColors:
    def test_equal_mean_intensity(self):
        np.testing.assert_allclose(palette(SPEC).mean(axis=1), SPEC.gray, atol=1e-15)

    def test_equal_chroma(self):
        dist = np.linalg.norm(palette(SPEC)[1:SPEC.K + 1] - SPEC.gray, axis=1)
        np.testing.assert_allclose(dist, SPEC.chroma, atol=1e-15)

    def test_unknown_is_gray(self):
        np.testing.assert_array_equal(palette(SPEC)[SPEC.K + 1], SPEC.gray)

    @pytest.mark.parametrize("deg", [0.0, 30.0, 120.0, -45.0])
    def test_rotation_preserves_gray_axis_and_sum(self, deg):
        R = hue_rotation(deg)
        np.testing.assert_allclose(R @ np.ones(3), np.ones(3), atol=1e-15)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)
        v = np.array([0.2, 0.7, 0.1])
        assert (R @ v).sum() == pytest.approx(v.sum(), abs=1e-15)


class TestSource:
    def test_deterministic(self):
        a, b = generate_source(SPEC, 20), generate_source(SPEC, 20)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()

    def test_seed_changes_output(self):
        a = generate_source(SPEC, 5)
        b = generate_source(replace(SPEC, seed=1), 5)
        assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))

    def test_source_purity(self):
        images = generate_source(SPEC, 200)
        assert not any((im.labels == SPEC.K + 1).any() for im in images)
        assert not any(im.has_unknown for im in images)

    def test_class_coverage(self):
        counts = class_image_counts(generate_source(SPEC, 100), SPEC.K)
        assert all(counts[c] >= 5 for c in range(1, SPEC.K + 1))

    def test_quantized_values(self):
        img = generate_source(SPEC, 3)[0].image
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)

    def test_split_streams_differ(self):
        a = generate_source(SPEC, 3, split="train")
        b = generate_source(SPEC, 3, split="test")
        assert a[0].image.tobytes() != b[0].image.tobytes()

    @pytest.mark.parametrize("kwargs", [
        {"K": 1}, {"K": 9}, {"unknown_prob": 1.5}, {"size_max": 20}, {"noise": -0.1},
        {"shapes_min": 3, "shapes_max": 1},
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ConfigError):
            generate_source(replace(SPEC, **kwargs), 4)

    def test_coverage_impossible(self):
        with pytest.raises(ConfigError):
            generate_source(replace(SPEC, shapes_min=0, shapes_max=0), 20)


class TestTarget:
    def test_zero_shift_matches_source_path(self):
        spec = replace(SPEC, hue_shift=0.0, brightness=0.0, noise=0.0, unknown_prob=0.0)
        a = render(spec, stream(0, "probe"), shifted=False, unknown=False)
        b = render(spec, stream(0, "probe"), shifted=True, unknown=False)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_unknown_prob_one(self):
        assert all(im.has_unknown for im in generate_target(replace(SPEC, unknown_prob=1.0), 30))

    def test_unknown_prob_zero(self):
        assert not any(im.has_unknown for im in generate_target(replace(SPEC, unknown_prob=0.0), 30))

    def test_brightness_offset(self):
        src, _ = stack(generate_source(SPEC, 200))
        tgt, _ = stack(generate_target(SPEC, 200))
        assert tgt.mean() - src.mean() == pytest.approx(SPEC.brightness, abs=0.01)

    def test_shift_monotone_in_noise(self):
        # noise as the only shift; a brightness offset already separates the
        # histograms, and spreading them then shrinks the distance again
        spec = replace(SPEC, hue_shift=0.0, brightness=0.0)
        src, _ = stack(generate_source(spec, 50))
        dists = []
        for sigma in (0.0, 0.03, 0.06, 0.12, 0.24):
            tgt, _ = stack(generate_target(replace(spec, noise=sigma), 50))
            dists.append(histogram_distance(src, tgt))
        assert all(a < b for a, b in zip(dists, dists[1:]))


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        images = generate_target(SPEC, 6)
        write_dataset(tmp_path / "d", images, SPEC.K)
        back = read_dataset(tmp_path / "d")
        for a, b in zip(images, back):
            assert a.image.tobytes() == b.image.tobytes()
            np.testing.assert_array_equal(a.labels, b.labels)
            assert (a.domain, a.has_unknown, a.index, a.seed) == (b.domain, b.has_unknown, b.index, b.seed)

    def test_byte_identical_rewrite(self, tmp_path):
        for name in ("a", "b"):
            write_dataset(tmp_path / name, generate_source(SPEC, 4), SPEC.K)
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_corrupt_magic(self, tmp_path):
        write_dataset(tmp_path, generate_source(SPEC, 2), SPEC.K)
        p = tmp_path / "images" / "00000.ppm"
        p.write_bytes(b"XX" + p.read_bytes()[2:])
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_label_out_of_range(self, tmp_path):
        images = generate_source(SPEC, 2)
        images[0].labels[0, 0] = 200
        write_dataset(tmp_path, images, SPEC.K)
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_has_unknown_mismatch(self, tmp_path):
        images = generate_source(SPEC, 2)
        images[1].has_unknown = True
        write_dataset(tmp_path, images, SPEC.K)
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            read_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        write_dataset(tmp_path, generate_source(SPEC, 2), SPEC.K)
        (tmp_path / "labels" / "00001.pgm").unlink()
        with pytest.raises(FormatError):
            read_dataset(tmp_path)
