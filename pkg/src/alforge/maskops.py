"""Mask and intensity perturbation engine.

Three procedures generate synthetic variation of a (image, mask) pair:

1. boundary displacement — runs of consecutive contour points are pushed
   along their local outward normals, a closed cubic b-spline is refit
   through the modified point set and rasterized; newly exposed image
   pixels are filled by row-wise interpolation or by sampling the original
   mask's empirical intensity distribution;
2. intensity remapping — mask pixels are redrawn from
   Uniform[alpha*mu - beta*sigma, alpha*mu + beta*sigma] with (alpha, beta)
   on 0.2-step grids over [1, 5] x [2, 10];
3. conventional flips / rotations / translations applied identically to
   image and mask.

Compositions are drawn at random, applied in a recorded order, and are
replayable: re-running :func:`apply_perturbation` with the same spec and
the same named random stream reproduces the output bit for bit.

All functions are pure; parallel workers must derive their own streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path as MplPath
from scipy import ndimage
from scipy.interpolate import splev, splprep
from skimage.draw import polygon as draw_polygon

from .errors import DataError
from .rng import RngStream
from .validation import check_image, check_mask, check_nonempty_mask, check_same_shape

STEP_NAMES = ("boundary", "remap", "geometric")
FILL_MODES = ("interpolate", "sample_distribution")
FLIPS = ("none", "horizontal", "vertical")

DISPLACE_MIN, DISPLACE_MAX = 1.0, 15.0
ALPHA_RANGE, BETA_RANGE = (1.0, 5.0), (2.0, 10.0)
GRID_STEP = 0.2
SPLINE_RETRIES = 10

_EIGHT = np.ones((3, 3), dtype=bool)


def alpha_grid() -> np.ndarray:
    return np.round(np.arange(ALPHA_RANGE[0], ALPHA_RANGE[1] + 1e-9, GRID_STEP), 10)


def beta_grid() -> np.ndarray:
    return np.round(np.arange(BETA_RANGE[0], BETA_RANGE[1] + 1e-9, GRID_STEP), 10)


def _on_grid(value: float, lo: float, hi: float) -> bool:
    if not lo <= value <= hi + 1e-9:
        return False
    steps = (value - lo) / GRID_STEP
    return abs(steps - round(steps)) < 1e-6


# ---------------------------------------------------------------------------
# contour extraction


@dataclass(frozen=True)
class BoundaryContour:
    """Closed pixel contour of a mask component, counter-clockwise.

    Points are (row, col) integer coordinates; consecutive points are
    8-neighbors and the contour is free of repeats, so masks with
    one-pixel-wide spurs are rejected at construction.
    """

    points: np.ndarray
    closed: bool
    shape: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise DataError("contour points must be a nonempty (N, 2) array")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise DataError("contour contains repeated points")
        if len(pts) > 1:
            gaps = np.abs(np.diff(pts, axis=0)).max(axis=1)
            if gaps.max() > 1 or gaps.min() == 0:
                raise DataError("consecutive contour points must be distinct 8-neighbors")
            if self.closed and np.abs(pts[0] - pts[-1]).max() > 1:
                raise DataError("closed contour endpoints are not adjacent")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


_MOORE = np.array(
    [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 1:
        return mask.astype(bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _signed_area(points: np.ndarray, height: int) -> float:
    # shoelace in display coordinates (x = col, y up), so positive = CCW
    x = points[:, 1].astype(np.float64)
    y = (height - 1 - points[:, 0]).astype(np.float64)
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


_MOORE_INDEX = {(int(dr), int(dc)): i for i, (dr, dc) in enumerate(_MOORE)}


def extract_boundary(mask) -> BoundaryContour:
    """Trace the closed outer contour of the mask's largest component.

    Moore-neighbor tracing with Jacob's stopping criterion; the result is
    oriented counter-clockwise in display coordinates (x = col, y up).
    """
    mask = check_nonempty_mask(mask)
    comp = _largest_component(mask)
    h, w = comp.shape

    rows, cols = np.nonzero(comp)  # raster order: topmost row, then leftmost
    start = (int(rows[0]), int(cols[0]))

    def inside(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and comp[p]

    # the west neighbor of start is background by choice of start, so the
    # tracing state is (current pixel, background backtrack pixel)
    initial = (start, (start[0], start[1] - 1))
    current, backtrack = initial
    contour = []
    guard = 8 * int(comp.sum()) + 16
    while True:
        contour.append(current)
        d0 = _MOORE_INDEX[(backtrack[0] - current[0], backtrack[1] - current[1])]
        nxt = None
        for step in range(1, 9):
            k = (d0 + step) % 8
            cand = (current[0] + _MOORE[k][0], current[1] + _MOORE[k][1])
            if inside(cand):
                before = (
                    current[0] + _MOORE[(d0 + step - 1) % 8][0],
                    current[1] + _MOORE[(d0 + step - 1) % 8][1],
                )
                nxt = (cand, before if step > 1 else backtrack)
                break
        if nxt is None:  # single-pixel component
            break
        if nxt == initial:
            break
        current, backtrack = nxt
        guard -= 1
        if guard < 0:
            raise DataError("contour tracing did not terminate")

    pts = np.array(contour, dtype=np.int64)
    if len(pts) > 2 and _signed_area(pts, h) < 0:
        pts = pts[::-1].copy()
    return BoundaryContour(pts, closed=True, shape=(h, w))


# ---------------------------------------------------------------------------
# perturbation record


@dataclass(frozen=True)
class PerturbationSpec:
    """Full parameterization of one composed perturbation.

    ``steps`` records the composition order; ``stream_id`` names the random
    stream consumed at application time, making the record replayable.
    """

    steps: tuple[str, ...]
    n_segments: int = 1
    points_per_segment: int = 25
    displacement_px: tuple[float, ...] = ()
    fill_mode: str = "interpolate"
    alpha: float = 1.0
    beta: float = 2.0
    flip: str = "none"
    rotation_deg: float = 0.0
    translation_px: tuple[int, int] = (0, 0)
    stream_id: str = ""

    def __post_init__(self):
        unknown = set(self.steps) - set(STEP_NAMES)
        if unknown:
            raise DataError(f"unknown perturbation steps {sorted(unknown)}")
        if "boundary" in self.steps:
            if self.points_per_segment < 4:
                raise DataError("points_per_segment must be >= 4 for a cubic fit")
            if self.n_segments < 1:
                raise DataError("n_segments must be >= 1")
            expected = self.n_segments * self.points_per_segment
            if len(self.displacement_px) != expected:
                raise DataError(
                    f"expected {expected} displacements, got {len(self.displacement_px)}"
                )
            mags = np.abs(np.asarray(self.displacement_px, dtype=np.float64))
            if mags.size and (mags.min() < DISPLACE_MIN - 1e-9 or mags.max() > DISPLACE_MAX + 1e-9):
                raise DataError(
                    f"displacement magnitudes must lie in [{DISPLACE_MIN}, "
                    f"{DISPLACE_MAX}], got range [{mags.min():.3g}, {mags.max():.3g}]"
                )
        if "remap" in self.steps:
            if not _on_grid(self.alpha, *ALPHA_RANGE):
                raise DataError(f"alpha={self.alpha} not on the 0.2 grid over {ALPHA_RANGE}")
            if not _on_grid(self.beta, *BETA_RANGE):
                raise DataError(f"beta={self.beta} not on the 0.2 grid over {BETA_RANGE}")
        if self.fill_mode not in FILL_MODES:
            raise DataError(f"unknown fill mode {self.fill_mode!r}")
        if self.flip not in FLIPS:
            raise DataError(f"unknown flip {self.flip!r}")
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(
            self, "displacement_px", tuple(float(d) for d in self.displacement_px)
        )
        object.__setattr__(
            self, "translation_px", tuple(int(t) for t in self.translation_px)
        )

    def to_kv_block(self) -> str:
        dy, dx = self.translation_px
        lines = [
            f"steps = {','.join(self.steps)}",
            f"n_segments = {self.n_segments}",
            f"points_per_segment = {self.points_per_segment}",
            "displacement_px = " + ",".join(f"{d!r}" for d in self.displacement_px),
            f"fill_mode = {self.fill_mode}",
            f"alpha = {self.alpha!r}",
            f"beta = {self.beta!r}",
            f"flip = {self.flip}",
            f"rotation_deg = {self.rotation_deg!r}",
            f"translation_px = {dy},{dx}",
            f"stream_id = {self.stream_id}",
        ]
        return "\n".join(lines)

    @classmethod
    def from_kv_block(cls, text: str) -> "PerturbationSpec":
        kv = {}
        for line in text.strip().splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            displ = tuple(
                float(v) for v in kv.get("displacement_px", "").split(",") if v
            )
            dy, dx = (int(v) for v in kv["translation_px"].split(","))
            return cls(
                steps=tuple(s for s in kv["steps"].split(",") if s),
                n_segments=int(kv["n_segments"]),
                points_per_segment=int(kv["points_per_segment"]),
                displacement_px=displ,
                fill_mode=kv["fill_mode"],
                alpha=float(kv["alpha"]),
                beta=float(kv["beta"]),
                flip=kv["flip"],
                rotation_deg=float(kv["rotation_deg"]),
                translation_px=(dy, dx),
                stream_id=kv.get("stream_id", ""),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed perturbation block: {exc}")


# ---------------------------------------------------------------------------
# boundary displacement


def _disjoint_runs(n_points, n_segments, pps, gen) -> list[int]:
    """Random disjoint runs of pps consecutive indices on a circular contour."""
    arc = n_points // n_segments
    offset = int(gen.integers(n_points))
    starts = []
    for k in range(n_segments):
        slack = arc - pps
        starts.append((offset + k * arc + int(gen.integers(slack + 1))) % n_points)
    return starts


def _outward_normals(points: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Unit normals at the given contour indices, pointing out of the polygon."""
    n = len(points)
    pts = points.astype(np.float64)
    tang = pts[(indices + 2) % n] - pts[(indices - 2) % n]
    norms = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    lengths = np.linalg.norm(norms, axis=1)
    lengths[lengths == 0] = 1.0
    norms /= lengths[:, None]

    # orient by probing: a point 1.5 px along the outward normal leaves the
    # polygon; matplotlib paths work in (x, y) = (col, row)
    path = MplPath(pts[:, ::-1], closed=True)
    probes = pts[indices] + 1.5 * norms
    inside = path.contains_points(probes[:, ::-1])
    norms[inside] *= -1.0
    return norms


def _rasterize_closed_spline(points: np.ndarray, shape) -> np.ndarray | None:
    """Fit a periodic cubic b-spline through points and fill its interior.

    Filling follows the nonzero-winding convention: sub-pixel ringing loops
    near sharp displacement transitions rasterize as interior. Returns None
    when the curve cannot be fit or the result is not a single nonempty
    component (a genuinely self-intersecting, folded curve).
    """
    pts = points.astype(np.float64)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9
    pts = pts[keep]
    if len(pts) < 4:
        return None
    try:
        tck, _ = splprep([pts[:, 0], pts[:, 1]], s=0.0, per=True, k=3)
    except (ValueError, TypeError):
        return None
    t = np.linspace(0.0, 1.0, 4 * len(pts), endpoint=False)
    rr, cc = splev(t, tck)

    mask = np.zeros(shape, dtype=np.uint8)
    fr, fc = draw_polygon(rr, cc, shape=shape)
    if len(fr) == 0:
        return None
    mask[fr, fc] = 1
    # include the curve trace itself: interior fill alone shaves staircase
    # corners whose pixel centers fall a hair outside the smooth curve
    tr = np.clip(np.round(rr).astype(np.int64), 0, shape[0] - 1)
    tc = np.clip(np.round(cc).astype(np.int64), 0, shape[1] - 1)
    inb = (rr > -0.5) & (rr < shape[0] - 0.5) & (cc > -0.5) & (cc < shape[1] - 0.5)
    mask[tr[inb], tc[inb]] = 1
    mask = ndimage.binary_fill_holes(mask).astype(np.uint8)
    _, count = ndimage.label(mask, structure=_EIGHT)
    if count != 1:
        return None
    return mask


def _draw_displacements(gen, n_segments: int, pps: int, cap: float = DISPLACE_MAX) -> np.ndarray:
    """Signed displacement draws: magnitudes per point, one sign per run.

    Independent per-point signs make adjacent targets unreachable by any
    simple curve; a coherent sign per run keeps the refit well posed while
    every magnitude still lies in [DISPLACE_MIN, cap].
    """
    high = max(DISPLACE_MIN, min(cap, DISPLACE_MAX))
    out = np.empty(n_segments * pps)
    for k in range(n_segments):
        sign = float(gen.choice((-1.0, 1.0)))
        out[k * pps : (k + 1) * pps] = sign * gen.uniform(DISPLACE_MIN, high, size=pps)
    return out


def displace_boundary(
    contour: BoundaryContour,
    spec: PerturbationSpec,
    rng: np.random.Generator,
    displacement_override: np.ndarray | None = None,
    return_info: bool = False,
):
    """Deform the contour by pushing control-point runs along outward normals.

    The first attempt uses ``spec.displacement_px``; if the refit spline
    self-intersects, fresh displacements are drawn from the same law for up
    to SPLINE_RETRIES attempts before giving up. Positive displacement moves
    a point outward.
    """
    if not contour.closed:
        raise DataError("displace_boundary requires a closed contour")
    pps = spec.points_per_segment
    needed = spec.n_segments * pps
    if len(contour) < needed:
        raise DataError(
            f"contour has {len(contour)} points, need >= {needed} for "
            f"{spec.n_segments} segment(s) of {pps}"
        )

    points = contour.points
    last_error = "no attempt made"
    for attempt in range(SPLINE_RETRIES):
        starts = _disjoint_runs(len(points), spec.n_segments, pps, rng)
        if displacement_override is not None:
            displacements = np.asarray(displacement_override, dtype=np.float64)
            if displacements.shape != (needed,):
                raise DataError(f"displacement override must have shape ({needed},)")
        elif attempt == 0:
            displacements = np.asarray(spec.displacement_px, dtype=np.float64)
        else:
            # fresh draws stay within the magnitude envelope of the spec
            cap = float(np.abs(spec.displacement_px).max()) if spec.displacement_px else DISPLACE_MAX
            displacements = _draw_displacements(rng, spec.n_segments, pps, cap=cap)

        indices = np.concatenate(
            [(np.arange(pps) + s) % len(points) for s in starts]
        )
        normals = _outward_normals(points, indices)
        moved = points.astype(np.float64).copy()
        moved[indices] += displacements[:, None] * normals

        mask = _rasterize_closed_spline(moved, contour.shape)
        if mask is not None:
            if return_info:
                return mask, {
                    "attempts": attempt + 1,
                    "displacements": displacements.copy(),
                    "starts": starts,
                    "indices": indices,
                    "moved": moved,
                }
            return mask
        last_error = f"self-intersecting spline (attempt {attempt + 1})"
        if displacement_override is not None:
            break

    raise DataError(f"boundary displacement failed after retries: {last_error}")


# ---------------------------------------------------------------------------
# intensity operations


def fill_exposed_region(image, old_mask, new_mask, mode: str, rng: np.random.Generator):
    """Assign intensities to pixels newly exposed by a mask change.

    ``interpolate`` fills each exposed run row-wise, linearly between the
    nearest known pixels; ``sample_distribution`` draws from the empirical
    intensity distribution of the original mask region. All other pixels
    pass through bit-exactly.
    """
    image = check_image(image, "image")
    old_mask = check_mask(old_mask, "old_mask")
    new_mask = check_mask(new_mask, "new_mask")
    check_same_shape(image, old_mask, ("image", "old_mask"))
    check_same_shape(image, new_mask, ("image", "new_mask"))
    if mode not in FILL_MODES:
        raise DataError(f"unknown fill mode {mode!r}")

    region = (new_mask == 1) & (old_mask == 0)
    out = image.copy()
    if not region.any():
        return out

    if mode == "sample_distribution":
        values = image[old_mask == 1]
        if values.size == 0:
            raise DataError("sample_distribution fill requires a nonempty old mask")
        out[region] = rng.choice(values, size=int(region.sum()), replace=True)
        return out

    old_values = image[old_mask == 1]
    fallback = float(old_values.mean()) if old_values.size else float(image.mean())
    for r in np.nonzero(region.any(axis=1))[0]:
        row_region = region[r]
        known = np.nonzero(~row_region)[0]
        targets = np.nonzero(row_region)[0]
        if known.size == 0:
            out[r, targets] = fallback
        else:
            out[r, targets] = np.interp(targets, known, image[r, known])
    return out


def remap_intensity(image, mask, alpha: float, beta: float, rng: np.random.Generator):
    """Redraw mask-region intensities from Uniform[a*mu - b*sigma, a*mu + b*sigma].

    mu and sigma are the mean and (population) standard deviation of the
    input's mask region; draws are clipped to [0, 1]; pixels outside the
    mask are untouched bit-exactly.
    """
    image = check_image(image, "image")
    mask = check_nonempty_mask(mask)
    check_same_shape(image, mask, ("image", "mask"))
    if not _on_grid(alpha, *ALPHA_RANGE):
        raise DataError(f"alpha={alpha} must lie on the 0.2 grid over {ALPHA_RANGE}")
    if not _on_grid(beta, *BETA_RANGE):
        raise DataError(f"beta={beta} must lie on the 0.2 grid over {BETA_RANGE}")

    inside = mask == 1
    mu = float(image[inside].mean())
    sigma = float(image[inside].std())
    low, high = alpha * mu - beta * sigma, alpha * mu + beta * sigma
    out = image.copy()
    draws = rng.uniform(low, high, size=int(inside.sum())) if high > low else np.full(int(inside.sum()), low)
    out[inside] = np.clip(draws, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# conventional augmentation


def _translate(arr, dy, dx, pad_mode):
    if dy == 0 and dx == 0:
        return arr.copy()
    pad = max(abs(dy), abs(dx))
    kwargs = {"mode": "edge"} if pad_mode == "edge" else {"mode": "constant", "constant_values": 0}
    padded = np.pad(arr, pad, **kwargs)
    h, w = arr.shape
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w].copy()


def standard_augment(image, mask, flip: str, rotation_deg: float, translation_px):
    """Apply one identical flip/rotation/translation to an (image, mask) pair.

    Rotations at exact multiples of 90 degrees are lattice-exact; other
    angles use linear interpolation and the mask is re-binarized at 0.5.
    Raises when the transform leaves no mask foreground in frame.
    """
    image = check_image(image, "image")
    mask = check_mask(mask, "mask")
    check_same_shape(image, mask, ("image", "mask"))
    if flip not in FLIPS:
        raise DataError(f"unknown flip {flip!r}")

    img, msk = image.copy(), mask.astype(np.float64)
    if flip == "horizontal":
        img, msk = img[:, ::-1].copy(), msk[:, ::-1].copy()
    elif flip == "vertical":
        img, msk = img[::-1, :].copy(), msk[::-1, :].copy()

    if rotation_deg % 360 != 0:
        if rotation_deg % 90 == 0:
            k = int(rotation_deg // 90) % 4
            img, msk = np.rot90(img, k).copy(), np.rot90(msk, k).copy()
        else:
            img = ndimage.rotate(img, rotation_deg, reshape=False, order=1, mode="nearest")
            msk = ndimage.rotate(msk, rotation_deg, reshape=False, order=1, mode="constant")
            img = np.clip(img, 0.0, 1.0)

    dy, dx = (int(t) for t in translation_px)
    img = _translate(img, dy, dx, pad_mode="edge")
    msk = _translate(msk, dy, dx, pad_mode="zero")

    out_mask = (msk >= 0.5).astype(np.uint8)
    if out_mask.sum() == 0:
        raise DataError("augmentation pushed the mask out of frame")
    return img, out_mask


# ---------------------------------------------------------------------------
# composition


def apply_perturbation(image, mask, spec: PerturbationSpec, stream: RngStream):
    """Execute a recorded perturbation; replayable given the same stream."""
    gen = stream.generator()
    img = check_image(image, "image")
    msk = check_mask(mask, "mask")
    for step in spec.steps:
        if step == "boundary":
            contour = extract_boundary(msk)
            new_mask = displace_boundary(contour, spec, gen)
            img = fill_exposed_region(img, msk, new_mask, spec.fill_mode, gen)
            msk = new_mask
        elif step == "remap":
            img = remap_intensity(img, msk, spec.alpha, spec.beta, gen)
        elif step == "geometric":
            img, msk = standard_augment(
                img, msk, spec.flip, spec.rotation_deg, spec.translation_px
            )
    return img, msk


def _draw_spec(sample, config, gen, contour_len: int, area: float, stream_id: str):
    probs = {
        "boundary": config.p_boundary,
        "remap": config.p_remap,
        "geometric": config.p_geometric,
    }
    pps = config.points_per_segment
    if contour_len < pps:
        probs["boundary"] = 0.0

    steps = [name for name in STEP_NAMES if gen.random() < probs[name]]
    if not steps:
        viable = [name for name in STEP_NAMES if probs[name] > 0]
        steps = [viable[int(gen.integers(len(viable)))]] if viable else ["geometric"]
    order = gen.permutation(len(steps))
    steps = tuple(steps[i] for i in order)

    n_segments = 1
    displacements: tuple[float, ...] = ()
    if "boundary" in steps:
        feasible = max(1, min(config.max_segments, contour_len // pps))
        n_segments = int(gen.integers(1, feasible + 1))
        r_eq = float(np.sqrt(max(area, 1.0) / np.pi))
        cap = min(DISPLACE_MAX, max(DISPLACE_MIN, 0.45 * r_eq))
        displacements = tuple(_draw_displacements(gen, n_segments, pps, cap=cap))

    alpha, beta = 1.0, 2.0
    if "remap" in steps:
        alpha = float(gen.choice(alpha_grid()))
        beta = float(gen.choice(beta_grid()))

    flip, rotation, translation = "none", 0.0, (0, 0)
    if "geometric" in steps:
        flip = str(gen.choice(np.array(FLIPS)))
        rotation = float(gen.uniform(-15.0, 15.0))
        translation = (int(gen.integers(-4, 5)), int(gen.integers(-4, 5)))

    return PerturbationSpec(
        steps=steps,
        n_segments=n_segments,
        points_per_segment=pps,
        displacement_px=displacements,
        fill_mode=str(gen.choice(np.array(FILL_MODES))),
        alpha=alpha,
        beta=beta,
        flip=flip,
        rotation_deg=rotation,
        translation_px=translation,
        stream_id=stream_id,
    )


def generate_perturbations(sample, count: int, config, rng: RngStream):
    """Produce ``count`` distinct perturbed masks with replayable specs.

    Each candidate composes one or more of the three procedures in a random
    recorded order. Candidates whose boundary refit keeps failing are
    redrawn under a fresh child stream a bounded number of times before the
    failure propagates.
    """
    if count < 0:
        raise DataError("count must be >= 0")
    if count > config.synth_per_image:
        raise DataError(
            f"count {count} exceeds synth_per_image {config.synth_per_image}"
        )
    contour_len = 0
    try:
        contour_len = len(extract_boundary(sample.mask))
    except DataError:
        pass
    area = float(np.asarray(sample.mask).sum())

    results = []
    seen: set[bytes] = set()
    for i in range(count):
        produced = None
        failure: DataError | None = None
        for retry in range(4):
            tag = f"{i}" if retry == 0 else f"{i}r{retry}"
            draw_stream = rng.child(f"{tag}/draw")
            apply_stream = rng.child(f"{tag}/apply")
            spec = _draw_spec(
                sample,
                config,
                draw_stream.generator(),
                contour_len,
                area,
                apply_stream.stream_id,
            )
            try:
                img, msk = apply_perturbation(sample.pixels, sample.mask, spec, apply_stream)
            except DataError as exc:
                failure = exc
                continue
            key = msk.tobytes()
            if key in seen:
                continue
            seen.add(key)
            produced = (msk, spec)
            break
        if produced is None:
            raise DataError(
                f"could not generate distinct perturbation {i} for sample "
                f"{sample.id}: {failure}"
            )
        results.append(produced)
    return results
