"""Compositional toy scenes, their captions, and the compliance metric."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import stream

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle")
REGIONS = ("left", "right", "top", "bottom")
VOCAB = ("<pad>", "and") + COLORS + SHAPES + REGIONS
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD = WORD_ID["<pad>"]
N_TOKENS = 8

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
# object centres as fractions of (row, col)
CENTERS = {"left": (0.5, 0.22), "right": (0.5, 0.78), "top": (0.22, 0.5), "bottom": (0.78, 0.5)}
HALF_EXTENT = 0.14
COLOR_MARGIN = 0.15
MIN_BLOB = 4
SUPERSAMPLE = 4


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    region: str


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background: float = 0.5

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 2:
            raise ValueError("a scene holds one or two objects")
        for o in self.objects:
            if o.color not in COLORS or o.shape not in SHAPES or o.region not in REGIONS:
                raise ValueError(f"invalid object {o}")
        if len({o.color for o in self.objects}) != len(self.objects):
            raise ValueError("object colors must be distinct")
        if len({o.region for o in self.objects}) != len(self.objects):
            raise ValueError("object regions must be distinct")


@dataclass
class ComplianceReport:
    presence: float
    binding: float
    placement: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = (self.presence + self.binding + self.placement) / 3.0


def all_scenes(n_objects: int | None = None) -> list[tuple[SceneObject, ...]]:
    """Every valid ordered object tuple (background excluded)."""
    objs = [SceneObject(c, s, r) for c in COLORS for s in SHAPES for r in REGIONS]
    out = []
    if n_objects in (None, 1):
        out.extend((o,) for o in objs)
    if n_objects in (None, 2):
        out.extend((a, b) for a, b in itertools.permutations(objs, 2)
                   if a.color != b.color and a.region != b.region)
    return out


_ALL = all_scenes()


def sample_scene(seed, background_range: tuple[float, float] = (0.4, 0.6)) -> SceneSpec:
    """Uniform draw over valid object tuples with a uniform gray background.

    ``seed`` is an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "scene")
    objects = _ALL[int(rng.integers(len(_ALL)))]
    bg = float(rng.uniform(*background_range))
    return SceneSpec(objects, bg)


def _coverage(shape: str, region: str, size: int) -> np.ndarray:
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = CENTERS[region]
    if shape == "square":
        inside = (np.abs(yy - cy) <= HALF_EXTENT) & (np.abs(xx - cx) <= HALF_EXTENT)
    else:
        r = HALF_EXTENT * 1.1
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render_objects(objects, size: int = 16, background: float = 0.5) -> np.ndarray:
    """Anti-aliased rendering of any object list (duplicates allowed), shape (3, H, W)."""
    img = np.full((3, size, size), float(background))
    for o in objects:
        cov = _coverage(o.shape, o.region, size)
        rgb = np.asarray(RGB[o.color])[:, None, None]
        img = img * (1.0 - cov) + rgb * cov
    return img


def render_scene(s: SceneSpec, size: int = 16) -> np.ndarray:
    if size < 8:
        raise ValueError(f"render size must be at least 8, got {size}")
    return render_objects(s.objects, size, s.background)


def caption_of(s: SceneSpec, n_tokens: int = N_TOKENS) -> np.ndarray:
    """'<color> <shape> <region> [and <color> <shape> <region>]' padded to n_tokens."""
    words = []
    for i, o in enumerate(s.objects):
        if i:
            words.append("and")
        words += [o.color, o.shape, o.region]
    if len(words) > n_tokens:
        raise ValueError(f"caption needs {len(words)} tokens, only {n_tokens} available")
    ids = [WORD_ID[w] for w in words] + [PAD] * (n_tokens - len(words))
    return np.asarray(ids, dtype=np.int64)


def parse_prompt(prompt: str, background: float = 0.5) -> SceneSpec:
    """Inverse of the caption template for whitespace-separated words."""
    words = prompt.lower().split()
    unknown = [w for w in words if w not in WORD_ID or w == "<pad>"]
    if unknown:
        raise VocabularyError(f"unknown word(s) {unknown}; valid words: {', '.join(VOCAB[1:])}")
    groups, cur = [], []
    for w in words:
        if w == "and":
            groups.append(cur)
            cur = []
        else:
            cur.append(w)
    groups.append(cur)
    objects = []
    for g in groups:
        if len(g) != 3 or g[0] not in COLORS or g[1] not in SHAPES or g[2] not in REGIONS:
            raise VocabularyError(f"malformed phrase {' '.join(g)!r}; expected '<color> <shape> <region>'")
        objects.append(SceneObject(*g))
    spec = SceneSpec(tuple(objects), background)
    try:
        spec.validate()
    except ValueError as exc:
        raise VocabularyError(str(exc)) from None
    return spec


def decode_caption(ids, background: float = 0.5) -> SceneSpec:
    words = [VOCAB[int(i)] for i in ids if int(i) != PAD]
    return parse_prompt(" ".join(words), background)


def classify_pixels(img: np.ndarray) -> np.ndarray:
    """Per-pixel color index into COLORS, or -1 for background.

    Scores: red = r - max(g, b), green = g - max(r, b), blue = b - max(r, g),
    yellow = min(r, g) - b. The best score must exceed COLOR_MARGIN.
    """
    r, g, b = img[0], img[1], img[2]
    scores = np.stack([
        r - np.maximum(g, b),
        g - np.maximum(r, b),
        b - np.maximum(r, g),
        np.minimum(r, g) - b,
    ])
    best = scores.argmax(axis=0)
    return np.where(scores.max(axis=0) > COLOR_MARGIN, best, -1)


def region_of(cy: float, cx: float, size: int) -> str:
    """Sector of a point: the image is split into four triangles by its diagonals."""
    dy = cy - (size - 1) / 2.0
    dx = cx - (size - 1) / 2.0
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def detect_blobs(img: np.ndarray) -> list[tuple[str, int, str]]:
    """(color, pixel count, region of centroid) for every blob of >= MIN_BLOB pixels."""
    size = img.shape[-1]
    labels = classify_pixels(img)
    blobs = []
    for ci, color in enumerate(COLORS):
        comp, n = ndimage.label(labels == ci)
        for k in range(1, n + 1):
            ys, xs = np.nonzero(comp == k)
            if len(ys) >= MIN_BLOB:
                blobs.append((color, len(ys), region_of(ys.mean(), xs.mean(), size)))
    return blobs


def compliance_score(img: np.ndarray, s: SceneSpec) -> ComplianceReport:
    """Score an image (3, H, W) in [0, 1] against the prompted scene.

    For each prompted object (color c, region r):
      presence  - some blob's centroid lies in r;
      binding   - the largest blob with centroid in r has color c;
      placement - the largest blob of color c has its centroid in r.
    Each component is averaged over the prompted objects.
    """
    blobs = detect_blobs(np.asarray(img, dtype=np.float64))
    pres = bind = place = 0.0
    for o in s.objects:
        here = [bl for bl in blobs if bl[2] == o.region]
        if here:
            pres += 1.0
            if max(here, key=lambda bl: bl[1])[0] == o.color:
                bind += 1.0
        same = [bl for bl in blobs if bl[0] == o.color]
        if same and max(same, key=lambda bl: bl[1])[2] == o.region:
            place += 1.0
    n = len(s.objects)
    return ComplianceReport(pres / n, bind / n, place / n)


def scene_record(seed: int, s: SceneSpec) -> str:
    """Line-delimited corpus record ``seed,color,shape,region[,color,shape,region]``."""
    fields = [str(seed)]
    for o in s.objects:
        fields += [o.color, o.shape, o.region]
    return ",".join(fields)


def parse_scene_record(line: str) -> tuple[int, SceneSpec]:
    parts = line.strip().split(",")
    if len(parts) not in (4, 7):
        raise ValueError(f"malformed scene record {line!r}")
    objs = tuple(SceneObject(*parts[i:i + 3]) for i in range(1, len(parts), 3))
    spec = SceneSpec(objs)
    spec.validate()
    return int(parts[0]), spec
