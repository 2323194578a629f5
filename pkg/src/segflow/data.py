"""Flow files, flow visualisation, dataset layouts and the synthetic moving-shapes generator."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from matplotlib.colors import hsv_to_rgb
from matplotlib.path import Path as PolyPath
from PIL import Image

from segflow.types import FramePair

FLO_MAGIC = 202021.25
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW = 1e10


# --------------------------------------------------------------------------- .flo files

class FloError(ValueError):
    pass


class FloMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


class FloDimensionError(FloError):
    pass


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise FloDimensionError("u and v must be 2-D arrays of equal shape")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def valid(self) -> np.ndarray:
        known = (np.abs(self.u) <= UNKNOWN_FLOW_THRESHOLD) & (np.abs(self.v) <= UNKNOWN_FLOW_THRESHOLD)
        return (known & np.isfinite(self.u) & np.isfinite(self.v)).astype(np.uint8)

    def to_array(self) -> np.ndarray:
        """(2, H, W) array with unknown entries zeroed."""
        valid = self.valid.astype(bool)
        return np.stack([np.where(valid, self.u, 0), np.where(valid, self.v, 0)]).astype(np.float32)

    @classmethod
    def from_array(cls, flow: np.ndarray, valid: np.ndarray | None = None) -> "FlowField":
        u = np.array(flow[0], dtype=np.float32)
        v = np.array(flow[1], dtype=np.float32)
        if valid is not None:
            bad = ~np.asarray(valid).astype(bool)
            u[bad] = UNKNOWN_FLOW
            v[bad] = UNKNOWN_FLOW
        return cls(u, v)


def write_flo(field_: FlowField, path: str | Path) -> None:
    h, w = field_.height, field_.width
    if h <= 0 or w <= 0:
        raise FloDimensionError(f"non-positive dimensions {w}x{h}")
    body = np.stack([field_.u, field_.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(body.tobytes())


def read_flo(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FloTruncatedError(f"{path}: header truncated")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FloMagicError(f"{path}: bad magic {magic}")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FloDimensionError(f"{path}: non-positive dimensions {w}x{h}")
    n = 2 * w * h
    if len(data) - 12 < 4 * n:
        raise FloTruncatedError(f"{path}: expected {4 * n} payload bytes, found {len(data) - 12}")
    body = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w, 2)
    return FlowField(body[..., 0].copy(), body[..., 1].copy())


# --------------------------------------------------------------------------- visualisation

def flow_hue(flow: np.ndarray) -> np.ndarray:
    """Hue in [0, 1) from the flow direction atan2(v, u)."""
    return np.mod(np.arctan2(flow[1], flow[0]) / (2 * np.pi), 1.0)


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Colour-wheel rendering as (H, W, 3) uint8; zero motion is white.

    ``flow`` is a (2, H, W) array or a FlowField. Saturation grows with
    magnitude / max_magnitude (clipped to 1); hue encodes direction.
    """
    if isinstance(flow, FlowField):
        flow = flow.to_array()
    flow = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(flow[0], flow[1])
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    sat = np.clip(mag / max_magnitude, 0.0, 1.0) if max_magnitude > 0 else np.zeros_like(mag)
    hsv = np.stack([flow_hue(flow), sat, np.ones_like(mag)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


# --------------------------------------------------------------------------- image io

def save_frame(frame: np.ndarray, path: str | Path) -> None:
    img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path)


def load_frame(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


# --------------------------------------------------------------------------- synthetic scenes

class SceneSpecError(ValueError):
    pass


class ValueNoise:
    """Smooth periodic random field: smoothstep interpolation of a seeded lattice."""

    def __init__(self, seed: int, cell: float = 8.0, period: int = 32, octaves: int = 2):
        rng = np.random.default_rng(seed)
        self.lattices = [rng.uniform(0.0, 1.0, size=(period, period)) for _ in range(octaves)]
        self.cell = cell
        self.period = period

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        total = np.zeros(np.broadcast(x, y).shape)
        norm = 0.0
        for k, lat in enumerate(self.lattices):
            cell = self.cell / (2 ** k)
            amp = 0.5 ** k
            gx, gy = x / cell, y / cell
            x0, y0 = np.floor(gx), np.floor(gy)
            tx, ty = gx - x0, gy - y0
            tx = tx * tx * (3 - 2 * tx)
            ty = ty * ty * (3 - 2 * ty)
            i0 = np.mod(x0.astype(np.int64), self.period)
            j0 = np.mod(y0.astype(np.int64), self.period)
            i1 = np.mod(i0 + 1, self.period)
            j1 = np.mod(j0 + 1, self.period)
            top = lat[j0, i0] * (1 - tx) + lat[j0, i1] * tx
            bot = lat[j1, i0] * (1 - tx) + lat[j1, i1] * tx
            total += amp * (top * (1 - ty) + bot * ty)
            norm += amp
        return total / norm


@dataclass
class ShapeObject:
    """One rigid shape; positions are image pixels at frame 0, motion is per frame."""

    kind: str
    center: tuple[float, float]
    radii: tuple[float, float]
    angle: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    angular_velocity: float = 0.0
    color: tuple[float, float, float] = (0.8, 0.3, 0.2)
    foreground: bool = True
    vertices: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ellipse", "rectangle", "polygon"):
            raise SceneSpecError(f"unknown shape kind {self.kind!r}")
        if self.kind == "polygon" and not self.vertices:
            raise SceneSpecError("polygon needs vertices (unit-radius object coordinates)")
        if min(self.radii) <= 0:
            raise SceneSpecError("radii must be positive")

    def area(self) -> float:
        rx, ry = self.radii
        if self.kind == "ellipse":
            return math.pi * rx * ry
        if self.kind == "rectangle":
            return 4 * rx * ry
        v = np.asarray(self.vertices, dtype=np.float64) * np.array([rx, ry])
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, ox: np.ndarray, oy: np.ndarray) -> np.ndarray:
        """Inside test in object coordinates (origin at centre, unrotated)."""
        rx, ry = self.radii
        if self.kind == "ellipse":
            return (ox / rx) ** 2 + (oy / ry) ** 2 <= 1.0
        if self.kind == "rectangle":
            return (np.abs(ox) <= rx) & (np.abs(oy) <= ry)
        poly = PolyPath(np.asarray(self.vertices, dtype=np.float64) * np.array([rx, ry]))
        pts = np.stack([ox.ravel(), oy.ravel()], axis=1)
        return poly.contains_points(pts).reshape(ox.shape)


@dataclass
class ShapeSceneSpec:
    canvas: tuple[int, int] = (64, 64)
    background_seed: int = 0
    objects: list[ShapeObject] = field(default_factory=list)
    frames: int = 8
    camera_shake: tuple[float, float] | None = None
    target: int | None = None
    min_inside: float = 0.6

    def __post_init__(self):
        if self.frames < 2:
            raise SceneSpecError("a scene needs at least 2 frames")
        if not self.objects:
            raise SceneSpecError("a scene needs at least one object")
        if self.target is not None and not 0 <= self.target < len(self.objects):
            raise SceneSpecError("target index out of range")

    def camera_offset(self, t: int) -> np.ndarray:
        if self.camera_shake is None:
            return np.zeros(2)
        return t * np.asarray(self.camera_shake, dtype=np.float64)

    def pose(self, obj: ShapeObject, t: int) -> tuple[np.ndarray, float]:
        centre = np.asarray(obj.center) + t * np.asarray(obj.velocity) + self.camera_offset(t)
        return centre, obj.angle + t * obj.angular_velocity

    def is_target(self, index: int) -> bool:
        if self.target is not None:
            return index == self.target
        return self.objects[index].foreground


@dataclass
class RenderedScene:
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    flows: list[np.ndarray]
    valids: list[np.ndarray]
    owners: list[np.ndarray]

    def pairs(self, name: str = "") -> list[FramePair]:
        return [FramePair(self.frames[t], self.frames[t + 1], self.masks[t], self.flows[t], self.valids[t],
                          name=f"{name}/{t:05d}" if name else f"{t:05d}")
                for t in range(len(self.frames) - 1)]


_SUPERSAMPLE = 4


def _object_coords(x, y, centre, angle):
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = x - centre[0], y - centre[1]
    return c * dx + s * dy, -s * dx + c * dy


def render_scene(spec: ShapeSceneSpec, rng: np.random.Generator | None = None) -> RenderedScene:
    """Render frames, target masks, analytic flows and validity for every frame.

    Objects are drawn in list order (later on top). Pixel colours average
    4x4 sub-samples; the owner of a pixel is the topmost object covering at
    least half of it, which also defines the mask. Flow at a pixel follows
    its owner's rigid motion (or the camera motion on background); pixels
    whose target falls off the canvas or onto a different owner are invalid.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.background_seed)
    h, w = spec.canvas
    bg_noise = [ValueNoise(spec.background_seed * 3 + c, cell=8.0) for c in range(3)]
    tex_noise = [ValueNoise(int(rng.integers(2 ** 31)), cell=6.0) for _ in spec.objects]

    n = _SUPERSAMPLE
    offs = (np.arange(n) + 0.5) / n - 0.5
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs[..., None, None] + offs[None, None, None, :]
    sy = ys[..., None, None] + offs[None, None, :, None]
    sx = np.broadcast_to(sx, (h, w, n, n))
    sy = np.broadcast_to(sy, (h, w, n, n))

    frames, owners = [], []
    for t in range(spec.frames):
        cam = spec.camera_offset(t)
        colour = np.stack([0.15 + 0.7 * bg_noise[c](sx - cam[0], sy - cam[1]) for c in range(3)], axis=-1)
        owner = np.full((h, w), -1, dtype=np.int64)
        for k, obj in enumerate(spec.objects):
            centre, angle = spec.pose(obj, t)
            ox, oy = _object_coords(sx, sy, centre, angle)
            inside = obj.contains(ox, oy)
            cov = inside.mean(axis=(2, 3))
            if cov.sum() < spec.min_inside * obj.area():
                raise SceneSpecError(f"object {k} is less than {spec.min_inside:.0%} inside the canvas at frame {t}")
            shade = 0.55 + 0.45 * tex_noise[k](ox, oy)
            obj_col = np.asarray(obj.color)[None, None, None, None, :] * shade[..., None]
            colour = np.where(inside[..., None], obj_col, colour)
            owner[cov >= 0.5] = k
        frame = colour.mean(axis=(2, 3)).transpose(2, 0, 1)
        frames.append((np.round(np.clip(frame, 0, 1) * 255) / 255).astype(np.float32))
        owners.append(owner)

    masks = []
    for owner in owners:
        m = np.zeros((h, w), dtype=np.uint8)
        for k in range(len(spec.objects)):
            if spec.is_target(k):
                m[owner == k] = 1
        masks.append(m)

    flows, valids = [], []
    for t in range(spec.frames - 1):
        shake = spec.camera_offset(t + 1) - spec.camera_offset(t)
        u = np.full((h, w), shake[0])
        v = np.full((h, w), shake[1])
        owner = owners[t]
        for k, obj in enumerate(spec.objects):
            sel = owner == k
            if not sel.any():
                continue
            c0, a0 = spec.pose(obj, t)
            c1, a1 = spec.pose(obj, t + 1)
            ox, oy = _object_coords(xs[sel], ys[sel], c0, a0)
            cs, sn = math.cos(a1), math.sin(a1)
            tx = c1[0] + cs * ox - sn * oy
            ty = c1[1] + sn * ox + cs * oy
            u[sel] = tx - xs[sel]
            v[sel] = ty - ys[sel]
        tx = np.rint(xs + u).astype(np.int64)
        ty = np.rint(ys + v).astype(np.int64)
        inb = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        valid = np.zeros((h, w), dtype=np.uint8)
        nxt = owners[t + 1]
        valid[inb] = (nxt[ty[inb], tx[inb]] == owner[inb]).astype(np.uint8)
        flows.append(np.stack([u, v]).astype(np.float32))
        valids.append(valid)
    return RenderedScene(frames, masks, flows, valids, owners)


def generate_scene(spec: ShapeSceneSpec, rng: np.random.Generator | None = None) -> list[FramePair]:
    """Render a scene and return its consecutive frame pairs with masks and ground-truth flow."""
    return render_scene(spec, rng).pairs()


_PALETTE = np.array([
    (0.85, 0.25, 0.2), (0.2, 0.55, 0.9), (0.95, 0.8, 0.2), (0.3, 0.8, 0.35),
    (0.75, 0.35, 0.85), (0.95, 0.55, 0.15), (0.2, 0.85, 0.8), (0.9, 0.9, 0.9),
])


def _random_polygon(rng: np.random.Generator, n: int) -> tuple[tuple[float, float], ...]:
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.7, 1.0, size=n)
    return tuple((float(r * math.cos(a)), float(r * math.sin(a))) for r, a in zip(radii, angles))


def random_object(rng: np.random.Generator, canvas: tuple[int, int], frames: int, moving: bool,
                  max_speed: float = 2.5, size_range: tuple[float, float] = (0.1, 0.2)) -> ShapeObject:
    h, w = canvas
    kind = str(rng.choice(["ellipse", "rectangle", "polygon"]))
    r = rng.uniform(*size_range, size=2) * min(h, w)
    angle = float(rng.uniform(0, np.pi))
    if moving:
        speed = rng.uniform(1.0, max_speed)
        heading = rng.uniform(0, 2 * np.pi)
        vel = (float(speed * math.cos(heading)), float(speed * math.sin(heading)))
        omega = float(rng.uniform(-0.05, 0.05))
    else:
        vel, omega = (0.0, 0.0), 0.0
    # start so that the whole trajectory keeps the centre inside a margin
    span = np.asarray(vel) * (frames - 1)
    margin = 0.6 * float(r.max())
    lo_x, hi_x = margin - min(0.0, span[0]), w - 1 - margin - max(0.0, span[0])
    lo_y, hi_y = margin - min(0.0, span[1]), h - 1 - margin - max(0.0, span[1])
    if lo_x > hi_x or lo_y > hi_y:
        vel = (0.5 * vel[0], 0.5 * vel[1])
        span = np.asarray(vel) * (frames - 1)
        lo_x, hi_x = margin - min(0.0, span[0]), w - 1 - margin - max(0.0, span[0])
        lo_y, hi_y = margin - min(0.0, span[1]), h - 1 - margin - max(0.0, span[1])
    cx = float(rng.uniform(lo_x, max(lo_x, hi_x)))
    cy = float(rng.uniform(lo_y, max(lo_y, hi_y)))
    colour = _PALETTE[rng.integers(len(_PALETTE))] * rng.uniform(0.85, 1.0)
    return ShapeObject(
        kind=kind, center=(cx, cy), radii=(float(r[0]), float(r[1])), angle=angle,
        velocity=vel, angular_velocity=omega, color=tuple(float(c) for c in colour),
        foreground=moving, vertices=_random_polygon(rng, int(rng.integers(5, 8))) if kind == "polygon" else None,
    )


def random_scene_spec(rng: np.random.Generator, canvas: tuple[int, int] = (64, 64), frames: int = 8,
                      n_moving: tuple[int, int] = (1, 2), n_static: tuple[int, int] = (0, 0),
                      camera_shake: tuple[float, float] | None = None, max_tries: int = 50) -> ShapeSceneSpec:
    """Sample a scene of moving foreground shapes.

    ``n_static`` adds look-alike shapes that never move and count as background,
    which makes motion the only cue that separates them from the foreground.
    """
    for _ in range(max_tries):
        n_mov = int(rng.integers(n_moving[0], n_moving[1] + 1))
        n_sta = int(rng.integers(n_static[0], n_static[1] + 1))
        objs = [random_object(rng, canvas, frames, moving=False) for _ in range(n_sta)]
        objs += [random_object(rng, canvas, frames, moving=True) for _ in range(n_mov)]
        order = rng.permutation(len(objs))
        spec = ShapeSceneSpec(canvas=canvas, background_seed=int(rng.integers(2 ** 31)),
                              objects=[objs[i] for i in order], frames=frames, camera_shake=camera_shake)
        try:
            check_scene(spec)
        except SceneSpecError:
            continue
        return spec
    raise SceneSpecError("could not sample a valid scene")


def check_scene(spec: ShapeSceneSpec) -> None:
    """Raise SceneSpecError unless every object stays mostly inside the canvas in every frame."""
    h, w = spec.canvas
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for k, obj in enumerate(spec.objects):
        for t in range(spec.frames):
            centre, angle = spec.pose(obj, t)
            ox, oy = _object_coords(xs, ys, centre, angle)
            if obj.contains(ox, oy).sum() < spec.min_inside * obj.area():
                raise SceneSpecError(f"object {k} leaves the canvas at frame {t}")


def two_object_spec(rng: np.random.Generator, canvas: tuple[int, int] = (64, 64), frames: int = 8,
                    target: int = 0) -> ShapeSceneSpec:
    """Two moving, differently shaped and coloured objects; the mask follows ``target`` only."""
    for _ in range(100):
        a = random_object(rng, canvas, frames, moving=True)
        b = random_object(rng, canvas, frames, moving=True)
        if a.kind == b.kind or np.abs(np.subtract(a.color, b.color)).max() < 0.3:
            continue
        spec = ShapeSceneSpec(canvas=canvas, background_seed=int(rng.integers(2 ** 31)), objects=[a, b],
                              frames=frames, target=target)
        try:
            check_scene(spec)
        except SceneSpecError:
            continue
        scene = render_scene(spec, np.random.default_rng(0))
        # both objects should be clearly visible in the first frame
        if all((scene.owners[0] == k).sum() > 0.5 * spec.objects[k].area() for k in (0, 1)):
            return spec
    raise SceneSpecError("could not sample a two-object scene")


# --------------------------------------------------------------------------- dataset layouts

class MissingAnnotationError(FileNotFoundError):
    pass


def export_sequence(root: str | Path, name: str, scene: RenderedScene) -> None:
    """Write frames, masks and flows of one sequence into the Images/Annotations/Flow layout."""
    root = Path(root)
    for sub in ("Images", "Annotations", "Flow"):
        (root / sub / name).mkdir(parents=True, exist_ok=True)
    for t, (frame, mask) in enumerate(zip(scene.frames, scene.masks)):
        save_frame(frame, root / "Images" / name / f"{t:05d}.png")
        save_mask(mask, root / "Annotations" / name / f"{t:05d}.png")
    for t, (flow, valid) in enumerate(zip(scene.flows, scene.valids)):
        write_flo(FlowField.from_array(flow, valid), root / "Flow" / name / f"{t:05d}.flo")


class SequenceDataset:
    """Lazy reader for ``<root>/Images/<seq>/<frame>.png`` with optional masks and flows.

    Iteration is lexicographic by sequence then frame; consecutive frames
    form pairs, so a sequence of n frames yields n - 1 pairs.
    """

    def __init__(self, root: str | Path, with_masks: bool = True, with_flow: bool = True,
                 skip_missing: bool = False):
        self.root = Path(root)
        if not (self.root / "Images").is_dir():
            raise FileNotFoundError(f"{self.root / 'Images'} does not exist")
        self.with_masks = with_masks
        self.with_flow = with_flow
        self.skip_missing = skip_missing

    def sequences(self) -> list[str]:
        return sorted(p.name for p in (self.root / "Images").iterdir() if p.is_dir())

    def frame_names(self, seq: str) -> list[str]:
        return sorted(p.stem for p in (self.root / "Images" / seq).glob("*.png"))

    def _load_pair(self, seq: str, a: str, b: str) -> FramePair:
        mask = flow = valid = None
        if self.with_masks:
            mp = self.root / "Annotations" / seq / f"{a}.png"
            if not mp.exists():
                raise MissingAnnotationError(f"missing annotation {mp}")
            mask = load_mask(mp)
        if self.with_flow:
            fp = self.root / "Flow" / seq / f"{a}.flo"
            if not fp.exists():
                raise MissingAnnotationError(f"missing flow {fp}")
            ff = read_flo(fp)
            flow, valid = ff.to_array(), ff.valid
        return FramePair(load_frame(self.root / "Images" / seq / f"{a}.png"),
                         load_frame(self.root / "Images" / seq / f"{b}.png"),
                         mask, flow, valid, name=f"{seq}/{a}")

    def pairs(self, seq: str) -> Iterator[FramePair]:
        names = self.frame_names(seq)
        for a, b in zip(names[:-1], names[1:]):
            try:
                yield self._load_pair(seq, a, b)
            except MissingAnnotationError:
                if not self.skip_missing:
                    raise

    def __iter__(self) -> Iterator[FramePair]:
        for seq in self.sequences():
            yield from self.pairs(seq)

    def load_all(self) -> dict[str, list[FramePair]]:
        return {seq: list(self.pairs(seq)) for seq in self.sequences()}

    def first_frame_image(self, seq: str) -> np.ndarray:
        return load_frame(self.root / "Images" / seq / f"{self.frame_names(seq)[0]}.png")

    def first_frame(self, seq: str) -> tuple[np.ndarray, np.ndarray]:
        name = self.frame_names(seq)[0]
        mp = self.root / "Annotations" / seq / f"{name}.png"
        if not mp.exists():
            raise MissingAnnotationError(f"missing annotation {mp}")
        return load_frame(self.root / "Images" / seq / f"{name}.png"), load_mask(mp)


def load_davis_layout(root: str | Path, skip_missing: bool = False) -> SequenceDataset:
    """Segmentation dataset: pairs carry masks only."""
    return SequenceDataset(root, with_masks=True, with_flow=False, skip_missing=skip_missing)


def load_flow_dataset(root: str | Path, skip_missing: bool = False) -> SequenceDataset:
    """Flow dataset: pairs carry flow and validity only."""
    return SequenceDataset(root, with_masks=False, with_flow=True, skip_missing=skip_missing)


def generate_corpus(root: str | Path, n_train: int, n_val: int, seed: int, canvas=(64, 64), frames: int = 8,
                    camera_shake: tuple[float, float] | None = None,
                    n_static: tuple[int, int] = (0, 0)) -> dict[str, list[str]]:
    """Render train/val moving-shapes splits under ``root/train`` and ``root/val``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    names = {"train": [f"seq{i:04d}" for i in range(n_train)],
             "val": [f"seq{i:04d}" for i in range(n_train, n_train + n_val)]}
    for split, seqs in names.items():
        for name in seqs:
            spec = random_scene_spec(rng, canvas=canvas, frames=frames, camera_shake=camera_shake, n_static=n_static)
            scene = render_scene(spec, np.random.default_rng(rng.integers(2 ** 31)))
            export_sequence(root / split, name, scene)
    return names


def synthetic_corpus(n_sequences: int, seed: int, canvas=(64, 64), frames: int = 8,
                     n_static: tuple[int, int] = (0, 0)) -> dict[str, list[FramePair]]:
    """In-memory variant of ``generate_corpus`` for a single split."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_sequences):
        spec = random_scene_spec(rng, canvas=canvas, frames=frames, n_static=n_static)
        scene = render_scene(spec, np.random.default_rng(rng.integers(2 ** 31)))
        out[f"seq{i:04d}"] = scene.pairs(f"seq{i:04d}")
    return out


__all__ = [
    "FlowField", "FloError", "FloMagicError", "FloTruncatedError", "FloDimensionError",
    "read_flo", "write_flo", "flow_to_color", "flow_hue",
    "ShapeObject", "ShapeSceneSpec", "SceneSpecError", "RenderedScene", "render_scene", "generate_scene",
    "random_scene_spec", "two_object_spec", "check_scene",
    "SequenceDataset", "load_davis_layout", "load_flow_dataset", "export_sequence", "generate_corpus",
    "synthetic_corpus", "MissingAnnotationError",
]
