"""Deterministic synthetic sprite domain and the simulated user.

Images are 16x16x3 float arrays in [0,1]. An attribute tuple (shape kind,
color, size, background, object count) renders to exactly one bitmap, and
the 864-tuple space is small enough that the inverse map (``perceive``)
is a nearest-neighbour lookup over all renders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

IMAGE_SIZE = 16

SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "medium", "large")
COUNTS = (1, 2, 3)
N_COLORS = 8
N_BACKGROUNDS = 4

# uint8-exact palettes so render -> PNG -> load round-trips bit-for-bit
OBJECT_COLORS = (
    np.array(
        [
            [230, 25, 25],     # red
            [25, 205, 40],     # green
            [40, 65, 230],     # blue
            [242, 218, 25],    # yellow
            [218, 38, 205],    # magenta
            [25, 205, 218],    # cyan
            [242, 140, 25],    # orange
            [242, 242, 242],   # white
        ],
        dtype=np.float64,
    )
    / 255.0
)

BACKGROUND_COLORS = (
    np.array(
        [
            [13, 13, 20],      # near-black
            [45, 45, 56],      # dark slate
            [28, 48, 33],      # deep green
            [50, 30, 46],      # deep plum
        ],
        dtype=np.float64,
    )
    / 255.0
)

# Fixed order used by feedback: first mismatching field is reported.
FIELD_ORDER = ("shape", "color", "size", "background", "count")

_SIZE_EXTENT = {"small": 1, "medium": 2, "large": 3}
_POSITIONS = {
    1: ((8, 8),),
    2: ((8, 4), (8, 12)),
    3: ((4, 4), (4, 12), (12, 8)),
}


@dataclass(frozen=True)
class AttributeTuple:
    """One point of the 3*8*3*4*3 = 864 attribute space."""

    shape: str
    color: int
    size: str
    background: int
    count: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0 <= self.color < N_COLORS:
            raise ValueError(f"color index {self.color} out of range")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        if not 0 <= self.background < N_BACKGROUNDS:
            raise ValueError(f"background index {self.background} out of range")
        if self.count not in COUNTS:
            raise ValueError(f"count {self.count} out of range")

    def field(self, name: str):
        return getattr(self, name)

    def replace(self, name: str, value) -> "AttributeTuple":
        kw = self.to_dict()
        kw[name] = value
        return AttributeTuple(**kw)

    def mismatches(self, other: "AttributeTuple") -> list[str]:
        return [f for f in FIELD_ORDER if self.field(f) != other.field(f)]

    def index(self) -> int:
        i = SHAPES.index(self.shape)
        i = i * N_COLORS + self.color
        i = i * len(SIZES) + SIZES.index(self.size)
        i = i * N_BACKGROUNDS + self.background
        i = i * len(COUNTS) + (self.count - 1)
        return i

    @staticmethod
    def from_index(i: int) -> "AttributeTuple":
        if not 0 <= i < SPACE_SIZE:
            raise ValueError(f"tuple index {i} out of range")
        i, count = divmod(i, len(COUNTS))
        i, bg = divmod(i, N_BACKGROUNDS)
        i, size = divmod(i, len(SIZES))
        shape, color = divmod(i, N_COLORS)
        return AttributeTuple(SHAPES[shape], color, SIZES[size], bg, count + 1)

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "color": self.color,
            "size": self.size,
            "background": self.background,
            "count": self.count,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttributeTuple":
        allowed = set(FIELD_ORDER)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown attribute fields: {sorted(unknown)}")
        missing = allowed - set(d)
        if missing:
            raise ValueError(f"missing attribute fields: {sorted(missing)}")
        return AttributeTuple(
            shape=d["shape"],
            color=int(d["color"]),
            size=d["size"],
            background=int(d["background"]),
            count=int(d["count"]),
        )

    @staticmethod
    def random(rng: np.random.Generator) -> "AttributeTuple":
        return AttributeTuple.from_index(int(rng.integers(SPACE_SIZE)))


SPACE_SIZE = len(SHAPES) * N_COLORS * len(SIZES) * N_BACKGROUNDS * len(COUNTS)


@dataclass(frozen=True)
class Feedback:
    """One round of user feedback.

    kind: "attribute-correction" | "free-text" | "accept" | "reject"
    """

    kind: str
    field: Optional[str] = None
    value: object = None
    text: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("attribute-correction", "free-text", "accept", "reject"):
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        if self.kind == "attribute-correction":
            if self.field not in FIELD_ORDER:
                raise ValueError(f"correction names unknown field {self.field!r}")
            # validate the value by constructing a tuple with it
            base = AttributeTuple("circle", 0, "small", 0, 1)
            base.replace(self.field, self.value)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.field is not None:
            d["field"] = self.field
        if self.value is not None:
            d["value"] = self.value
        if self.text is not None:
            d["text"] = self.text
        return d

    @staticmethod
    def from_dict(d: dict) -> "Feedback":
        return Feedback(
            kind=d["kind"],
            field=d.get("field"),
            value=d.get("value"),
            text=d.get("text"),
        )


def _shape_mask(shape: str, extent: int) -> np.ndarray:
    """Boolean stamp for one object, centered, side 2*extent+1."""
    n = 2 * extent + 1
    rr, cc = np.mgrid[-extent : extent + 1, -extent : extent + 1]
    if shape == "square":
        return np.ones((n, n), dtype=bool)
    if shape == "circle":
        return rr * rr + cc * cc <= (extent + 0.3) ** 2
    if shape == "triangle":
        return np.abs(cc) * 2 <= (rr + extent)
    raise ValueError(shape)


def render(attrs: AttributeTuple) -> np.ndarray:
    """Deterministic 16x16x3 bitmap of an attribute tuple."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:, :] = BACKGROUND_COLORS[attrs.background]
    extent = _SIZE_EXTENT[attrs.size]
    mask = _shape_mask(attrs.shape, extent)
    color = OBJECT_COLORS[attrs.color]
    for (r, c) in _POSITIONS[attrs.count]:
        r0, c0 = r - extent, c - extent
        region = img[r0 : r0 + mask.shape[0], c0 : c0 + mask.shape[1]]
        region[mask] = color
    return img


_ALL_RENDERS: Optional[np.ndarray] = None


def all_renders() -> np.ndarray:
    """(864, 16, 16, 3) stack of every tuple's render, in index order."""
    global _ALL_RENDERS
    if _ALL_RENDERS is None:
        _ALL_RENDERS = np.stack(
            [render(AttributeTuple.from_index(i)) for i in range(SPACE_SIZE)]
        )
        _ALL_RENDERS.setflags(write=False)
    return _ALL_RENDERS


def perceive(img: np.ndarray) -> AttributeTuple:
    """Nearest attribute tuple by pixel distance; exact on clean renders."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected (16,16,3) image, got {img.shape}")
    refs = all_renders()
    d = np.sum((refs - img[None]) ** 2, axis=(1, 2, 3))
    return AttributeTuple.from_index(int(np.argmin(d)))


@dataclass
class SimulatedUser:
    """Issues deterministic feedback toward a hidden target tuple."""

    target: AttributeTuple
    patience: int = 12

    def feedback(self, img: np.ndarray) -> Feedback:
        perceived = perceive(img)
        wrong = perceived.mismatches(self.target)
        if not wrong:
            return Feedback(kind="accept")
        field = wrong[0]
        return Feedback(
            kind="attribute-correction", field=field, value=self.target.field(field)
        )

    def preference(self, img_a: np.ndarray, img_b: np.ndarray) -> str:
        """Pick the image whose perceived tuple is closer to target; tie -> A."""
        ma = len(perceive(img_a).mismatches(self.target))
        mb = len(perceive(img_b).mismatches(self.target))
        return "A" if ma <= mb else "B"


def user_feedback(user: SimulatedUser, img: np.ndarray) -> Feedback:
    return user.feedback(img)


def preference_label(user: SimulatedUser, img_a: np.ndarray, img_b: np.ndarray) -> str:
    return user.preference(img_a, img_b)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the uint8 grid used for PNG persistence."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return dequantize(np.asarray(im.convert("RGB")))
