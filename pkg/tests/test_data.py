import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divtok import data as D
from divtok.rng import SplitMix64

TESTDATA = Path(__file__).resolve().parent.parent / "testdata"
GOLDEN_SHA256 = {
    "image_seed42.dtds": "ad57db070f99153a05e64d30a9567c712b530892687150f84ecdec9387133de6",
    "video_seed7.dtds": "2d4e263762adf08cf673b4ede24131bbd66f41c933d56a3191ac3480463a8d6f",
}
BG = np.zeros(3, dtype=np.uint8)


def colors_present(frame):
    px = frame.reshape(-1, 3)
    return {name for name, rgb in D.RGB.items() if (px == rgb).all(axis=1).any()}


def centroid(frame, rgb):
    ys, xs = np.nonzero((frame == rgb).all(axis=-1))
    return xs.mean(), ys.mean()


class TestRng:
    def test_reference_stream(self):
        # splitmix64 reference values for seed 0 and 1234567
        r = SplitMix64(0)
        assert [r.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
        r = SplitMix64(1234567)
        assert [r.next_u64() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]

    def test_uniform_definition(self):
        a, b = SplitMix64(9), SplitMix64(9)
        for _ in range(50):
            assert a.uniform() == (b.next_u64() >> 11) * 2.0**-53

    def test_uniform_array_matches_scalar(self):
        a, b = SplitMix64(3), SplitMix64(3)
        np.testing.assert_array_equal(a.uniform_array(100), [b.uniform() for _ in range(100)])
        assert a.state == b.state

    def test_below_range(self):
        r = SplitMix64(5)
        assert all(0 <= r.below(7) < 7 for _ in range(200))

    def test_shuffle_is_permutation(self):
        assert sorted(SplitMix64(1).shuffle(list(range(20)))) == list(range(20))


class TestText:
    def test_tokenize(self):
        v = D.DEFAULT_VOCAB
        assert D.text_tokenize("What color?") == [v.id("what"), v.id("color")]
        assert D.text_tokenize("") == []
        assert D.text_tokenize("what zebra") == [v.id("what"), D.UNK]

    def test_round_trip(self):
        s = "which direction does the circle move"
        assert D.detokenize(D.text_tokenize(s)) == s

    def test_detokenize_stops_at_end(self):
        ids = [D.START] + D.text_tokenize("red") + [D.END] + D.text_tokenize("blue")
        assert D.detokenize(ids) == "red"

    def test_vocab(self):
        v = D.DEFAULT_VOCAB
        assert len(v) < 256 and v.words[:4] == D.SPECIALS
        assert len(set(v.words)) == len(v)


class TestImageGenerator:
    def test_deterministic(self):
        assert D.gen_image_example(42) == D.gen_image_example(42)

    @pytest.mark.parametrize("seed", range(60))
    def test_answer_grounded_in_pixels(self, seed):
        ex = D.gen_image_example(seed, grid=3, image_size=48)
        assert ex.visual.shape == (48, 48, 3) and ex.visual.dtype == np.uint8
        assert len(ex.answer.split()) == 1
        present = colors_present(ex.visual)
        words = ex.question.split()
        if ex.kind == "color":
            assert ex.answer in present
        elif ex.kind == "shape":
            assert words[-1] in present and ex.answer in D.SHAPES
        else:
            cells = ex.visual.reshape(3, 16, 3, 16, 3).any(axis=(1, 3, 4))
            assert D.NUMBERS[int(cells.sum()) - 1] == ex.answer

    @pytest.mark.parametrize("grid", [2, 3, 4])
    def test_grid_sizes(self, grid):
        ex = D.gen_image_example(1, grid=grid, image_size=48)
        assert ex.visual.shape == (48, 48, 3)

    def test_all_kinds_occur(self):
        kinds = {D.gen_image_example(s).kind for s in range(60)}
        assert kinds == {"color", "shape", "count"}


class TestVideoGenerator:
    @pytest.mark.parametrize("seed", range(40))
    def test_direction_matches_centroid_and_distractors_static(self, seed):
        ex = D.gen_video_example(seed, frames=8)
        v = ex.visual
        assert v.shape == (8, 32, 32, 3)
        moving = ~(v == v[0]).all(axis=(0, -1))
        # every pixel that ever changes belongs to the single moving shape's sweep
        changed_colors = {tuple(c) for c in v[:, moving].reshape(-1, 3)} - {tuple(BG)}
        assert len(changed_colors) == 1
        rgb = np.array(changed_colors.pop(), dtype=np.uint8)
        (x0, y0), (x1, y1) = centroid(v[0], rgb), centroid(v[-1], rgb)
        dx, dy = x1 - x0, y1 - y0
        if ex.kind == "direction":
            want = ("right" if dx > 0 else "left") if abs(dx) > abs(dy) else ("down" if dy > 0 else "up")
            assert ex.answer == want
        else:
            assert D.RGB[ex.answer] == tuple(rgb)

    @pytest.mark.parametrize("frames", [4, 8, 16])
    def test_frame_counts(self, frames):
        assert D.gen_video_example(3, frames=frames).visual.shape[0] == frames


class TestSplits:
    def test_disjoint_seed_ranges(self):
        tr = D.make_split("image", "train", 50)
        va = D.make_split("image", "val", 50)
        assert {e.seed for e in tr}.isdisjoint({e.seed for e in va})

    def test_split_determinism(self):
        assert D.make_split("video", "test", 3) == D.make_split("video", "test", 3)


class TestDtds:
    def test_round_trip_100(self, tmp_path):
        exs = D.make_split("image", "train", 60) + D.make_split("image", "val", 40)
        path = tmp_path / "a.dtds"
        D.write_dataset(path, exs)
        assert D.read_dataset(path) == exs

    def test_video_round_trip(self):
        exs = D.make_split("video", "train", 5)
        mode, back = D.decode_dataset(D.encode_dataset(exs))
        assert mode == "video" and back == exs

    def test_empty_file_valid(self):
        assert D.decode_dataset(D.encode_dataset([], "image")) == ("image", [])

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_any_byte_corruption_detected(self, data):
        buf = bytearray(D.encode_dataset(D.make_split("image", "train", 2)))
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] ^= data.draw(st.integers(1, 255))
        with pytest.raises(D.DatasetFormatError):
            D.decode_dataset(bytes(buf))

    def test_truncation(self):
        buf = D.encode_dataset(D.make_split("image", "train", 2))
        with pytest.raises(D.DatasetFormatError):
            D.decode_dataset(buf[:-10])
        with pytest.raises(D.DatasetFormatError):
            D.decode_dataset(buf[:5])


class TestGoldens:
    @pytest.mark.parametrize("name", sorted(GOLDEN_SHA256))
    def test_file_hash(self, name):
        assert hashlib.sha256((TESTDATA / name).read_bytes()).hexdigest() == GOLDEN_SHA256[name]

    def test_image_seed42(self):
        (ex,) = D.read_dataset(TESTDATA / "image_seed42.dtds")
        assert D.gen_image_example(42) == ex
        assert D.encode_dataset([D.gen_image_example(42)], "image") == (TESTDATA / "image_seed42.dtds").read_bytes()

    def test_video_seed7(self):
        (ex,) = D.read_dataset(TESTDATA / "video_seed7.dtds")
        assert D.gen_video_example(7) == ex
        assert D.encode_dataset([D.gen_video_example(7)], "video") == (TESTDATA / "video_seed7.dtds").read_bytes()
