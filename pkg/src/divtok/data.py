"""Synthetic image-QA / video-QA generators, vocabulary, and the DTDS file format.

Rasterization is integer-only so pixels are identical on every platform.
Inside a square box of ``b`` pixels, pixel ``(x, y)`` has doubled offsets
``dx = 2x + 1 - b`` and ``dy = 2y + 1 - b`` from the box centre, and with
``R = (3 * b) // 4``:

* square:   ``|dx| <= R and |dy| <= R``
* circle:   ``dx*dx + dy*dy <= R*R``
* triangle: ``-R <= dy <= R and 2*|dx| <= dy + R`` (apex up)

Backgrounds are black and shapes are painted with saturated RGB colours.

DTDS layout (little-endian)::

    b"DTDS" | u32 version=1 | u8 mode (0 image, 1 video) | u32 count
    per example: u16 T | u16 H | u16 W | T*H*W*3 u8 pixels
                 | u16 len | question utf-8 | u16 len | answer utf-8
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from divtok.rng import SplitMix64, mix64

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<s>", "</s>", "<unk>"]

SHAPES = ["circle", "square", "triangle"]
COLORS = ["red", "green", "blue", "yellow"]
RGB = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255), "yellow": (255, 255, 0)}
NUMBERS = [
    "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
]
DIRECTIONS = ["left", "right", "up", "down"]
_DELTA = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}
QUESTION_WORDS = [
    "what", "color", "is", "the", "shape", "how", "many", "shapes",
    "which", "direction", "does", "move", "moving",
]

MAX_TRIES = 100
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


class Vocab:
    """Word <-> id map over the fixed template grammar; ids 0-3 are special."""

    def __init__(self, words: list[str] | None = None):
        if words is None:
            words = SPECIALS + QUESTION_WORDS + SHAPES + COLORS + NUMBERS + DIRECTIONS
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.ids.get(word, UNK)

    def word(self, i: int) -> str:
        return self.words[i]


DEFAULT_VOCAB = Vocab()


def _clean(s: str) -> list[str]:
    s = s.lower()
    for ch in "?,.":
        s = s.replace(ch, "")
    return [w for w in s.split(" ") if w]


def text_tokenize(s: str, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    return [vocab.id(w) for w in _clean(s)]


def detokenize(ids, vocab: Vocab = DEFAULT_VOCAB) -> str:
    """Ids -> space-joined words, stopping at the end token and skipping pad/start."""
    words = []
    for i in ids:
        i = int(i)
        if i == END:
            break
        if i in (PAD, START):
            continue
        words.append(vocab.word(i) if 0 <= i < len(vocab) else SPECIALS[UNK])
    return " ".join(words)


@dataclass
class Example:
    """One sample: uint8 image (H, W, 3) or frames (T, H, W, 3), question, answer."""

    visual: np.ndarray
    question: str
    answer: str
    seed: int = -1
    _vocab: Vocab = field(default=DEFAULT_VOCAB, repr=False, compare=False)

    @property
    def question_ids(self) -> list[int]:
        return text_tokenize(self.question, self._vocab)

    @property
    def answer_ids(self) -> list[int]:
        return text_tokenize(self.answer, self._vocab)

    @property
    def is_video(self) -> bool:
        return self.visual.ndim == 4

    @property
    def kind(self) -> str:
        """Question template family: color, shape, count, direction or moving-color."""
        q = self.question
        if q.startswith("which direction"):
            return "direction"
        if q.startswith("what color is the moving"):
            return "moving-color"
        if q.startswith("what color"):
            return "color"
        if q.startswith("what shape"):
            return "shape"
        return "count"

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (
            self.question == other.question
            and self.answer == other.answer
            and self.visual.shape == other.visual.shape
            and np.array_equal(self.visual, other.visual)
        )


# -- rasterization ----------------------------------------------------------------


def shape_mask(kind: str, box: int) -> np.ndarray:
    c = 2 * np.arange(box) + 1 - box
    dy, dx = np.meshgrid(c, c, indexing="ij")
    r = (3 * box) // 4
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    raise ValueError(f"unknown shape {kind!r}")


def paint(canvas: np.ndarray, kind: str, color: str, x0: int, y0: int, box: int) -> None:
    m = shape_mask(kind, box)
    canvas[y0 : y0 + box, x0 : x0 + box][m] = RGB[color]


# -- image QA ------------------------------------------------------------------------


def _image_question(rng: SplitMix64, qtype: int, objs: list[tuple[int, str, str]]):
    if qtype == 2:
        return "how many shapes", NUMBERS[len(objs) - 1]
    if qtype == 0:
        shapes = [s for _, s, _ in objs]
        unique = [s for s in SHAPES if shapes.count(s) == 1]
        if not unique:
            return None
        target = rng.choice(unique)
        return f"what color is the {target}", next(c for _, s, c in objs if s == target)
    colors = [c for _, _, c in objs]
    unique = [c for c in COLORS if colors.count(c) == 1]
    if not unique:
        return None
    target = rng.choice(unique)
    return f"what shape is {target}", next(s for _, s, c in objs if c == target)


def gen_image_example(seed: int, grid: int = 2, image_size: int = 32) -> Example:
    """A grid x grid board of optional coloured shapes plus one answerable question."""
    if grid not in (2, 3, 4):
        raise ValueError("grid must be 2, 3 or 4")
    if image_size % grid:
        raise ValueError(f"image size {image_size} not divisible by grid {grid}")
    cell = image_size // grid
    rng = SplitMix64(seed)
    qtype = rng.below(3)
    tries = 0
    while True:
        if tries == MAX_TRIES:
            rng = SplitMix64(mix64(rng.state ^ 0xD1B54A32D192ED03))
            tries = 0
        tries += 1
        k = 1 + rng.below(grid * grid)
        cells = sorted(rng.shuffle(list(range(grid * grid)))[:k])
        objs = [(c, SHAPES[rng.below(3)], COLORS[rng.below(4)]) for c in cells]
        qa = _image_question(rng, qtype, objs)
        if qa is not None:
            break
    img = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    for c, s, col in objs:
        paint(img, s, col, (c % grid) * cell, (c // grid) * cell, cell)
    return Example(img, qa[0], qa[1], seed)


# -- video QA ------------------------------------------------------------------------


def _overlaps(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def gen_video_example(seed: int, frames: int = 16, image_size: int = 32) -> Example:
    """One shape translating in a fixed direction among static distractors."""
    if frames not in (4, 8, 16):
        raise ValueError("frames must be 4, 8 or 16")
    box = (3 * image_size) // 8
    step = 16 // frames
    travel = step * (frames - 1)
    if image_size - box - travel < 0:
        raise ValueError(f"image size {image_size} too small for the motion")
    rng = SplitMix64(seed)
    qtype = rng.below(2)
    kind, color = SHAPES[rng.below(3)], COLORS[rng.below(4)]
    direction = DIRECTIONS[rng.below(4)]
    dx, dy = _DELTA[direction]
    span_x = image_size - box - (travel if dx else 0)
    span_y = image_size - box - (travel if dy else 0)
    x0 = rng.below(span_x + 1) + (travel if dx < 0 else 0)
    y0 = rng.below(span_y + 1) + (travel if dy < 0 else 0)
    xe, ye = x0 + dx * travel, y0 + dy * travel
    swept = (min(x0, xe), min(y0, ye), max(x0, xe) + box, max(y0, ye) + box)

    others_kind = [s for s in SHAPES if s != kind]
    others_color = [c for c in COLORS if c != color]
    placed = [swept]
    distractors = []
    for _ in range(rng.below(3)):
        for _ in range(MAX_TRIES):
            px, py = rng.below(image_size - box + 1), rng.below(image_size - box + 1)
            rect = (px, py, px + box, py + box)
            if not any(_overlaps(rect, r) for r in placed):
                placed.append(rect)
                distractors.append((rng.choice(others_kind), rng.choice(others_color), px, py))
                break

    video = np.zeros((frames, image_size, image_size, 3), dtype=np.uint8)
    for t in range(frames):
        for s, c, px, py in distractors:
            paint(video[t], s, c, px, py, box)
        paint(video[t], kind, color, x0 + dx * step * t, y0 + dy * step * t, box)
    if qtype == 0:
        return Example(video, f"which direction does the {kind} move", direction, seed)
    return Example(video, "what color is the moving shape", color, seed)


def make_split(mode: str, split: str, count: int, base_seed: int = 0, **kw) -> list[Example]:
    """Examples for seeds base + offset(split) + [0, count); splits never share seeds."""
    if count >= 1_000_000:
        raise ValueError("split size must stay below the seed stride")
    gen = gen_image_example if mode == "image" else gen_video_example
    start = base_seed + SPLIT_OFFSETS[split]
    return [gen(start + i, **kw) for i in range(count)]


# -- DTDS files ------------------------------------------------------------------------

MAGIC = b"DTDS"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


def encode_dataset(examples: list[Example], mode: str | None = None) -> bytes:
    if mode is None:
        mode = "video" if examples and examples[0].is_video else "image"
    out = bytearray(MAGIC)
    out += struct.pack("<IBI", VERSION, 0 if mode == "image" else 1, len(examples))
    for ex in examples:
        v = np.asarray(ex.visual, dtype=np.uint8)
        t, h, w = (1, *v.shape[:2]) if v.ndim == 3 else v.shape[:3]
        out += struct.pack("<HHH", t, h, w)
        out += v.tobytes()
        for s in (ex.question, ex.answer):
            b = s.encode("utf-8")
            out += struct.pack("<H", len(b)) + b
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_dataset(buf: bytes) -> tuple[str, list[Example]]:
    if len(buf) < 4 + 9 + 4:
        raise DatasetFormatError("truncated DTDS file")
    if buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic, not a DTDS file")
    version, mode_b, count = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported DTDS version {version}")
    if mode_b not in (0, 1):
        raise DatasetFormatError(f"bad mode byte {mode_b}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise DatasetFormatError("CRC mismatch")
    mode = "image" if mode_b == 0 else "video"
    pos, end = 13, len(buf) - 4
    examples = []

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise DatasetFormatError("truncated DTDS record")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        t, h, w = struct.unpack("<HHH", take(6))
        pix = np.frombuffer(take(t * h * w * 3), dtype=np.uint8)
        shape = (h, w, 3) if mode == "image" else (t, h, w, 3)
        q = take(struct.unpack("<H", take(2))[0]).decode("utf-8")
        a = take(struct.unpack("<H", take(2))[0]).decode("utf-8")
        examples.append(Example(pix.reshape(shape).copy(), q, a))
    if pos != end:
        raise DatasetFormatError("trailing bytes after last record")
    return mode, examples


def write_dataset(path, examples: list[Example], mode: str | None = None) -> None:
    Path(path).write_bytes(encode_dataset(examples, mode))


def read_dataset(path) -> list[Example]:
    return decode_dataset(Path(path).read_bytes())[1]
