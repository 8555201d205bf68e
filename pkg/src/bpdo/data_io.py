"""Annotation parsing, synthetic scenes, tensor containers, PNG export.

Annotation parsers follow the three public dataset releases' line formats
and only those; unrecognized encodings are rejected with a ParseError that
names the offending line. The synthetic generator is the desk-scale stand-in
for a real backbone plus imagery: it emits curved ribbon instances and a
feature stack rich enough for the pipeline to learn from.
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import geometry, priors
from .errors import FormatError, GenerationError, InvalidInputError, ParseError
from .fields import TensorField
from .geometry import BinaryMask, Polygon

log = logging.getLogger("bpdo")

MAGIC = b"BPDT"


@dataclass
class TextInstance:
    """One annotated instance: its polygon and the do-not-care flag."""

    polygon: Polygon
    ignore: bool = False


@dataclass
class SceneRecord:
    """One scene: ground-truth polygons plus optional features."""

    id: str
    rows: int
    cols: int
    polygons: list = field(default_factory=list)
    ignore_flags: list = field(default_factory=list)
    features: TensorField | None = None
    image_path: str | None = None

    def __post_init__(self):
        if not self.ignore_flags:
            self.ignore_flags = [False] * len(self.polygons)
        if len(self.ignore_flags) != len(self.polygons):
            raise InvalidInputError("ignore_flags length must match polygons")


# -- annotation parsers ------------------------------------------------------


def _int_tokens(text, line_no):
    toks = [t for t in text.replace(",", " ").split() if t]
    out = []
    for t in toks:
        try:
            out.append(int(float(t)))
        except ValueError:
            raise ParseError(f"non-numeric token {t!r}", line=line_no) from None
    return out


def parse_ctw1500(text: str):
    """Comma-separated integer records; the final 28 ints are 14 (x, y) pairs.

    Returns a list of TextInstance (this format has no do-not-care flag).
    """
    instances = []
    for line_no, raw in enumerate(_lines(text), start=1):
        line = raw.strip()
        if not line:
            continue
        values = _int_tokens(line, line_no)
        if len(values) < 28:
            raise ParseError(
                f"expected at least 28 integers, got {len(values)}", line=line_no
            )
        coords = np.array(values[-28:], dtype=np.float64).reshape(14, 2)
        try:
            poly = Polygon(coords)
        except InvalidInputError as e:
            raise ParseError(f"bad polygon: {e}", line=line_no) from None
        instances.append(TextInstance(poly, ignore=False))
    return instances


_TT_X = re.compile(r"x:\s*\[\[([^\]]*)\]\]")
_TT_Y = re.compile(r"y:\s*\[\[([^\]]*)\]\]")
_TT_TRANS = re.compile(r"transcriptions:\s*\[(.*?)\]\s*$")


def _number_list(body, line_no):
    toks = [t for t in body.replace(",", " ").split() if t]
    try:
        return [float(t) for t in toks]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {body!r}", line=line_no) from None


def parse_totaltext(text: str):
    """Line-oriented records with bracketed x/y coordinate arrays.

    A transcription of '#' marks the instance do-not-care. Other released
    encodings (mat files etc.) are not supported here.
    """
    instances = []
    for line_no, raw in enumerate(_lines(text), start=1):
        line = raw.strip()
        if not line:
            continue
        mx = _TT_X.search(line)
        my = _TT_Y.search(line)
        if mx is None or my is None:
            raise ParseError(
                "expected bracketed x: [[...]] and y: [[...]] arrays", line=line_no
            )
        xs = _number_list(mx.group(1), line_no)
        ys = _number_list(my.group(1), line_no)
        if len(xs) != len(ys):
            raise ParseError(
                f"x has {len(xs)} values but y has {len(ys)}", line=line_no
            )
        if len(xs) < 3:
            raise ParseError(f"need at least 3 vertices, got {len(xs)}", line=line_no)
        ignore = False
        mt = _TT_TRANS.search(line)
        if mt is not None:
            content = mt.group(1)
            ignore = re.sub(r"[u'\"\s]", "", content) == "#"
        try:
            poly = Polygon(np.stack([xs, ys], axis=1))
        except InvalidInputError as e:
            raise ParseError(f"bad polygon: {e}", line=line_no) from None
        instances.append(TextInstance(poly, ignore=ignore))
    return instances


def parse_msratd500(text: str):
    """7-field lines: index, difficulty, x, y, w, h, rotation (radians).

    The rotated rectangle is expanded to its 4 corners by rotating the
    axis-aligned box about its center. difficulty == 1 marks do-not-care.
    """
    instances = []
    for line_no, raw in enumerate(_lines(text), start=1):
        line = raw.strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != 7:
            raise ParseError(f"expected 7 fields, got {len(toks)}", line=line_no)
        try:
            _idx = float(toks[0])
            difficulty = int(float(toks[1]))
            x, y, w, h, angle = (float(t) for t in toks[2:])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=line_no) from None
        if w <= 0 or h <= 0:
            raise ParseError(f"non-positive box size {w}x{h}", line=line_no)
        cx, cy = x + w / 2.0, y + h / 2.0
        corners = np.array(
            [[x, y], [x + w, y], [x + w, y + h], [x, y + h]], dtype=np.float64
        )
        rot = np.array(
            [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
        )
        rotated = (corners - [cx, cy]) @ rot.T + [cx, cy]
        try:
            poly = Polygon(rotated)
        except InvalidInputError as e:
            raise ParseError(f"bad polygon: {e}", line=line_no) from None
        instances.append(TextInstance(poly, ignore=difficulty == 1))
    return instances


def _lines(text):
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"annotation text is not valid UTF-8: {e}") from None
    return text.replace("\r\n", "\n").replace("\r", "\n").split("\n")


PARSERS = {
    "ctw1500": parse_ctw1500,
    "totaltext": parse_totaltext,
    "msratd500": parse_msratd500,
}


def scale_instances(instances, src_cols, src_rows, dst_cols, dst_rows):
    """Stretch annotation coordinates onto the working grid and clamp.

    Vertices scale by (dst_cols/src_cols, dst_rows/src_rows); anything
    landing outside [0, dst) is clamped and the clamping logged.
    """
    if src_cols <= 0 or src_rows <= 0:
        raise InvalidInputError("source dimensions must be positive")
    sx = dst_cols / src_cols
    sy = dst_rows / src_rows
    out = []
    clamped = 0
    for inst in instances:
        v = inst.polygon.vertices * np.array([sx, sy])
        hi = np.array([dst_cols - 1e-6, dst_rows - 1e-6])
        clipped = np.clip(v, 0.0, hi)
        clamped += int(np.any(clipped != v))
        try:
            poly = Polygon(clipped)
        except InvalidInputError:
            log.warning("instance collapsed to degenerate polygon after clamping; dropped")
            continue
        out.append(TextInstance(poly, inst.ignore))
    if clamped:
        log.info("clamped %d instance(s) to the %dx%d grid", clamped, dst_cols, dst_rows)
    return out


# -- synthetic scenes --------------------------------------------------------


def _smooth_noise(rng, n, sigma):
    return ndimage.gaussian_filter1d(rng.normal(0.0, 1.0, n), sigma, mode="nearest")


def _random_ribbon(rng, rows, cols, margin):
    """A curved ribbon polygon: smooth centerline with varying half-width.

    The half-width stays within [0.62, 1.0] of its maximum so the shrunken
    core (threshold 0.3) of the rasterized instance cannot pinch apart, and
    curvature is capped against the width to avoid self-folding offsets.
    """
    n_seg = 28
    length = rng.uniform(0.30, 0.55) * min(rows, cols)
    ds = length / (n_seg - 1)
    w_base = rng.uniform(6.5, 10.5)

    turn = _smooth_noise(rng, n_seg, 4.0)
    peak = np.abs(turn).max()
    max_turn = 0.6 * ds / w_base  # curvature cap: radius > ~1.7 * width
    if peak > 1e-9:
        turn = turn * (max_turn / peak) * rng.uniform(0.3, 1.0)
    heading = rng.uniform(0.0, 2.0 * np.pi) + np.cumsum(turn)
    steps = np.stack([np.cos(heading), np.sin(heading)], axis=1) * ds
    center = np.cumsum(np.vstack([[0.0, 0.0], steps[:-1]]), axis=0)

    profile = _smooth_noise(rng, n_seg, 6.0)
    span = profile.max() - profile.min()
    if span > 1e-9:
        profile = (profile - profile.min()) / span  # [0, 1]
    else:
        profile = np.zeros(n_seg)
    width = w_base * (0.62 + 0.38 * profile)

    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=1)
    left = center + normal * width[:, None]
    right = center - normal * width[:, None]
    ring = np.vstack([left, right[::-1]])

    lo = ring.min(axis=0)
    hi = ring.max(axis=0)
    extent = hi - lo
    free_x = cols - 2 * margin - extent[0]
    free_y = rows - 2 * margin - extent[1]
    if free_x <= 0 or free_y <= 0:
        return None
    shift = np.array(
        [margin + rng.uniform(0, free_x), margin + rng.uniform(0, free_y)]
    ) - lo
    return Polygon(ring + shift)


def synth_scene(seed, rows, cols, n_instances, c_channels):
    """Deterministic synthetic scene: ribbons plus a learnable feature stack.

    Instances are pairwise separated by at least a 4-cell gap, each one's
    shrunken core (distance > 0.3) is a single component of at least 16
    cells, and the feature stack is channel 0 = rendered ribbon intensity
    (the normalized interior-distance profile plus mild noise), channels
    1-2 = normalized x/y coordinate ramps, remaining channels = smoothed
    noise.

    Raises GenerationError when the requested instances cannot be placed.
    """
    if rows < 64 or cols < 64:
        raise InvalidInputError("synthetic scenes need rows, cols >= 64")
    if n_instances < 0:
        raise InvalidInputError("n_instances must be nonnegative")
    if c_channels < 1:
        raise InvalidInputError("c_channels must be positive")
    rng = np.random.default_rng(seed)
    margin = 4
    occupied = np.zeros((rows, cols), dtype=bool)
    blocked = np.zeros((rows, cols), dtype=bool)
    polygons = []
    for _ in range(n_instances):
        placed = False
        for _attempt in range(400):
            poly = _random_ribbon(rng, rows, cols, margin)
            if poly is None:
                continue
            mask = geometry.rasterize(poly, rows, cols).bits
            if mask.sum() < 80:
                continue
            if (mask & blocked).any():
                continue
            d, _ux, _uy = geometry.nearest_exterior(BinaryMask(mask))
            core = d / max(float(d.max()), 1.0) > 0.3
            lab, n_core = geometry.connected_components(BinaryMask(core))
            if n_core != 1 or core.sum() < 16:
                continue
            polygons.append(poly)
            occupied |= mask
            # a 4-iteration 8-neighborhood dilation enforces the 4-cell gap
            blocked = ndimage.binary_dilation(
                occupied, structure=np.ones((3, 3), bool), iterations=4
            )
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place instance {len(polygons) + 1} of {n_instances}; "
                "try fewer instances or a larger grid"
            )

    maps = priors.make_prior_maps(polygons, rows, cols)
    features = np.zeros((c_channels, rows, cols), dtype=np.float32)
    render = maps.dist.data[0] + 0.02 * rng.standard_normal((rows, cols))
    # standardize the rendered intensity like backbone features would be
    features[0] = (render - render.mean()) / max(render.std(), 1e-6)
    if c_channels > 1:
        features[1] = np.tile(np.arange(cols) / cols, (rows, 1))
    if c_channels > 2:
        features[2] = np.tile((np.arange(rows) / rows)[:, None], (1, cols))
    for ch in range(3, c_channels):
        noise = ndimage.gaussian_filter(rng.standard_normal((rows, cols)), sigma=4.0)
        std = noise.std()
        if std > 1e-9:
            noise = noise / std
        features[ch] = 0.3 * noise

    return SceneRecord(
        id=f"scene-{seed:08d}",
        rows=rows,
        cols=cols,
        polygons=polygons,
        ignore_flags=[False] * len(polygons),
        features=TensorField(features),
    )


# -- tensor container format -------------------------------------------------


def container_bytes(array, name: str) -> bytes:
    """Encode a (c, h, w) float32 array into the container wire format."""
    if isinstance(array, TensorField):
        array = array.data
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if arr.ndim != 3:
        raise InvalidInputError(f"container payload must be rank 3, got {arr.ndim}")
    header = json.dumps(
        {"dtype": "f32", "name": name, "shape": list(arr.shape)},
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")
    payload = arr.astype("<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def write_container(path, array, name: str):
    with open(path, "wb") as fh:
        fh.write(container_bytes(array, name))


def parse_container(blob: bytes):
    """Decode container bytes into (array float32 (c,h,w), name)."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("bad magic: not a tensor container")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s > 0 for s in shape)
    ):
        raise FormatError(f"bad shape {shape!r}")
    name = header.get("name")
    if not isinstance(name, str):
        raise FormatError("missing tensor name")
    expected = 4 * shape[0] * shape[1] * shape[2]
    payload = blob[8 + header_len :]
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return arr.copy(), name


def read_container(path):
    with open(path, "rb") as fh:
        return parse_container(fh.read())


def export_png(fieldlike, path):
    """Write channel 0 as 8-bit grayscale with min-max scaling.

    A constant field maps to mid-gray 128.
    """
    if isinstance(fieldlike, TensorField):
        plane = fieldlike.data[0]
    else:
        arr = np.asarray(fieldlike)
        plane = arr[0] if arr.ndim == 3 else arr
    if plane.ndim != 2:
        raise InvalidInputError("export_png needs a 2-d plane or a (c, h, w) field")
    lo = float(plane.min())
    hi = float(plane.max())
    if hi - lo < 1e-12:
        img = np.full(plane.shape, 128, dtype=np.uint8)
    else:
        img = np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")


# -- scene ground-truth JSON ---------------------------------------------------


def scenes_to_json(scenes) -> str:
    """Serialize scene ground truth (not features) as deterministic JSON."""
    payload = {
        "scenes": [
            {
                "id": s.id,
                "rows": s.rows,
                "cols": s.cols,
                "polygons": [p.vertices.tolist() for p in s.polygons],
                "ignore": list(s.ignore_flags),
            }
            for s in scenes
        ]
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def scenes_from_json(text: str):
    """Parse the scene ground-truth JSON into SceneRecords (no features)."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad scene JSON: {e}") from None
    if not isinstance(payload, dict) or "scenes" not in payload:
        raise FormatError("scene JSON must contain a 'scenes' list")
    out = []
    for entry in payload["scenes"]:
        try:
            polys = [Polygon(np.asarray(p)) for p in entry["polygons"]]
            rec = SceneRecord(
                id=str(entry["id"]),
                rows=int(entry["rows"]),
                cols=int(entry["cols"]),
                polygons=polys,
                ignore_flags=[bool(b) for b in entry.get("ignore", [])] or None,
            )
        except (KeyError, TypeError, InvalidInputError) as e:
            raise FormatError(f"bad scene entry: {e}") from None
        out.append(rec)
    return out
